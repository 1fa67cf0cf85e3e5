use maskmotion_core::autodiff::Tensor;
use maskmotion_model::inference::confidence_of;
use maskmotion_model::tokenizer::{nearest_entry, quantize, PoseLatents};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::from_vec(rows, cols, d))
}

proptest! {
    #[test]
    fn quantize_picks_the_lowest_index_minimum(z in matrix(6, 3), cb in matrix(10, 3), dup in 0usize..10) {
        let mut cb = cb;
        let row = cb.row(dup).to_vec();
        cb.row_mut(9).copy_from_slice(&row);
        let (ids, q) = quantize(&PoseLatents { z: z.clone() }, &cb).unwrap();
        for r in 0..z.rows {
            let d: Vec<f64> = (0..cb.rows).map(|e| z.row(r).iter().zip(cb.row(e)).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(ids[r], d.iter().position(|&x| x == min).unwrap());
            prop_assert_eq!(q.row(r), cb.row(ids[r]));
            prop_assert_eq!(nearest_entry(z.row(r), &cb), ids[r]);
        }
    }

    #[test]
    fn confidence_is_a_probability(logits in matrix(4, 7), chosen in prop::collection::vec(0usize..7, 4), temp in 0.2f64..3.0) {
        for c in confidence_of(&logits, &chosen, temp) {
            prop_assert!(c > 0.0 && c <= 1.0);
        }
        let best: Vec<usize> = logits.argmax_rows();
        let top = confidence_of(&logits, &best, temp);
        let other = confidence_of(&logits, &chosen, temp);
        for (t, o) in top.iter().zip(&other) {
            prop_assert!(t >= o);
        }
    }
}
