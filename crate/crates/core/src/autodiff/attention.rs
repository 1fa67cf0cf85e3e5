use crate::scalar::{lit, Scalar};

use super::tape::{softmax_in_place, Var};
use super::tensor::Tensor;

/// Layout and masking of a fused multi-head attention call.
///
/// Rows of Q, K and V are split into `groups` independent sequences of
/// `seq_len` rows; element `i` of group `g` lives at row
/// `g * group_stride + i * seq_stride`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub groups: usize,
    pub seq_len: usize,
    pub group_stride: usize,
    pub seq_stride: usize,
    pub heads: usize,
    /// Rotary position per sequence index.
    pub rotary: Option<Vec<i64>>,
    /// Keys farther than `window / 2` positions from the query are ignored.
    pub window: Option<usize>,
    /// Per-row flag; rows marked `false` are never attended to.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    pub fn new(groups: usize, seq_len: usize, group_stride: usize, seq_stride: usize, heads: usize) -> Self {
        AttentionSpec { groups, seq_len, group_stride, seq_stride, heads, rotary: None, window: None, key_mask: None }
    }

    pub fn with_rotary(mut self, positions: Vec<i64>) -> Self {
        assert_eq!(positions.len(), self.seq_len, "one rotary position per sequence element");
        self.rotary = Some(positions);
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    #[inline]
    fn row(&self, g: usize, i: usize) -> usize {
        g * self.group_stride + i * self.seq_stride
    }

    fn position(&self, i: usize) -> i64 {
        self.rotary.as_ref().map_or(i as i64, |p| p[i])
    }

    fn allowed(&self, g: usize, i: usize, j: usize) -> bool {
        if let Some(w) = self.window {
            if (self.position(i) - self.position(j)).unsigned_abs() as usize > w / 2 {
                return false;
            }
        }
        self.key_mask.as_ref().is_none_or(|m| m[self.row(g, j)])
    }
}

pub(crate) struct AttentionCache<T> {
    pub(crate) q: Var,
    pub(crate) k: Var,
    pub(crate) v: Var,
    spec: AttentionSpec,
    /// Rotated queries and keys (identical to the inputs without rotary).
    q_rot: Tensor<T>,
    k_rot: Tensor<T>,
    /// `groups × heads × seq × seq` attention weights.
    probs: Vec<T>,
    /// Per-sequence-index (cos, sin) tables of length `dh / 2`.
    rot_tables: Option<Vec<Vec<(T, T)>>>,
}

fn rot_tables<T: Scalar>(positions: &[i64], dh: usize) -> Vec<Vec<(T, T)>> {
    let half = dh / 2;
    positions
        .iter()
        .map(|&p| {
            (0..half)
                .map(|c| {
                    let theta = 10000f64.powf(-2.0 * c as f64 / dh as f64);
                    let a = p as f64 * theta;
                    (lit(a.cos()), lit(a.sin()))
                })
                .collect()
        })
        .collect()
}

fn rotate<T: Scalar>(x: &mut [T], table: &[(T, T)], inverse: bool) {
    let half = table.len();
    for (c, &(cos, sin)) in table.iter().enumerate() {
        let sin = if inverse { -sin } else { sin };
        let (a, b) = (x[c], x[c + half]);
        x[c] = a * cos - b * sin;
        x[c + half] = a * sin + b * cos;
    }
}

fn apply_rotary<T: Scalar>(x: &Tensor<T>, spec: &AttentionSpec, tables: &[Vec<(T, T)>], inverse: bool) -> Tensor<T> {
    let mut out = x.clone();
    let dh = x.cols / spec.heads;
    for g in 0..spec.groups {
        for (i, table) in tables.iter().enumerate() {
            let row = out.row_mut(spec.row(g, i));
            for h in 0..spec.heads {
                rotate(&mut row[h * dh..(h + 1) * dh], table, inverse);
            }
        }
    }
    out
}

pub(crate) fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    qv: Var,
    kv: Var,
    vv: Var,
    spec: AttentionSpec,
) -> (Tensor<T>, AttentionCache<T>) {
    assert_eq!(q.shape(), k.shape(), "attention: q/k shapes");
    assert_eq!(q.shape(), v.shape(), "attention: q/v shapes");
    let d = q.cols;
    assert_eq!(d % spec.heads, 0, "attention: width not divisible by heads");
    let dh = d / spec.heads;
    let last = spec.row(spec.groups.saturating_sub(1), spec.seq_len.saturating_sub(1));
    assert!(spec.groups == 0 || last < q.rows, "attention: layout exceeds {} rows", q.rows);
    if let Some(m) = &spec.key_mask {
        assert_eq!(m.len(), q.rows, "attention: key mask length");
    }
    let tables = spec.rotary.as_ref().map(|p| {
        assert!(dh % 2 == 0, "rotary needs an even head width");
        rot_tables::<T>(p, dh)
    });
    let (q_rot, k_rot) = match &tables {
        Some(t) => (apply_rotary(q, &spec, t, false), apply_rotary(k, &spec, t, false)),
        None => (q.clone(), k.clone()),
    };
    let s = spec.seq_len;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); spec.groups * spec.heads * s * s];
    let mut out = Tensor::zeros(q.rows, d);
    let mut scores = vec![T::zero(); s];
    let mut allowed = vec![false; s];
    for g in 0..spec.groups {
        for i in 0..s {
            let qi = spec.row(g, i);
            let mut any = false;
            for (j, a) in allowed.iter_mut().enumerate() {
                *a = spec.allowed(g, i, j);
                any |= *a;
            }
            if !any {
                continue;
            }
            for h in 0..spec.heads {
                let qrow = &q_rot.row(qi)[h * dh..(h + 1) * dh];
                for j in 0..s {
                    scores[j] = if allowed[j] {
                        let krow = &k_rot.row(spec.row(g, j))[h * dh..(h + 1) * dh];
                        qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(&mut scores);
                let base = ((g * spec.heads + h) * s + i) * s;
                probs[base..base + s].copy_from_slice(&scores);
                let orow = &mut out.data[qi * d + h * dh..qi * d + (h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let vrow = &v.row(spec.row(g, j))[h * dh..(h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    let cache = AttentionCache { q: qv, k: kv, v: vv, spec, q_rot, k_rot, probs, rot_tables: tables };
    (out, cache)
}

type Grad<T> = Option<Tensor<T>>;

pub(crate) fn backward<T: Scalar>(
    cache: &AttentionCache<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
    want: [bool; 3],
) -> (Grad<T>, Grad<T>, Grad<T>) {
    let spec = &cache.spec;
    let (n, d) = v.shape();
    let dh = d / spec.heads;
    let s = spec.seq_len;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(n, d);
    let mut dk = Tensor::zeros(n, d);
    let mut dv = Tensor::zeros(n, d);
    let mut dp = vec![T::zero(); s];
    for g in 0..spec.groups {
        for h in 0..spec.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..s {
                let qi = spec.row(g, i);
                let base = ((g * spec.heads + h) * s + i) * s;
                let p = &cache.probs[base..base + s];
                let go = &dout.row(qi)[cols.clone()];
                let mut dot = T::zero();
                for j in 0..s {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let kj = spec.row(g, j);
                    let vrow = &v.row(kj)[cols.clone()];
                    dp[j] = go.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                    dot += dp[j] * p[j];
                    if want[2] {
                        for (o, &x) in dv.data[kj * d + h * dh..kj * d + (h + 1) * dh].iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                }
                if !(want[0] || want[1]) {
                    continue;
                }
                for j in 0..s {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = spec.row(g, j);
                    if want[0] {
                        let krow = &cache.k_rot.row(kj)[cols.clone()];
                        for (o, &x) in dq.data[qi * d + h * dh..qi * d + (h + 1) * dh].iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                    }
                    if want[1] {
                        let qrow = &cache.q_rot.row(qi)[cols.clone()];
                        for (o, &x) in dk.data[kj * d + h * dh..kj * d + (h + 1) * dh].iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
    }
    if let Some(t) = &cache.rot_tables {
        dq = apply_rotary(&dq, spec, t, true);
        dk = apply_rotary(&dk, spec, t, true);
    }
    (want[0].then_some(dq), want[1].then_some(dk), want[2].then_some(dv))
}
