//! Reconstruction throughput against the number of inference steps.

use std::time::Instant;

use maskmotion_core::body::SkeletonConfig;
use maskmotion_core::scalar::Scalar;
use maskmotion_model::inference::{reconstruct, InferenceConfig};
use maskmotion_model::network::{ModelWeights, ObservationSeq};
use maskmotion_model::tokenizer::TokenizerWeights;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Minimum R² of the affine fit `time = a + b·T` for "near-linear".
pub const LINEAR_R2: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub steps: usize,
    /// Fastest wall time of one reconstruction, ms.
    pub ms: f64,
    pub frames_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub rows: Vec<BenchRow>,
    /// Fitted per-step cost, ms.
    pub ms_per_step: f64,
    /// Fitted fixed cost, ms.
    pub fixed_ms: f64,
    pub r2: f64,
}

impl BenchReport {
    pub fn near_linear(&self) -> bool {
        self.r2 >= LINEAR_R2 && self.ms_per_step > 0.0
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>6}{:>12}{:>14}\n", "T", "ms", "frames/s");
        for r in &self.rows {
            out.push_str(&format!("{:>6}{:>12.2}{:>14.1}\n", r.steps, r.ms, r.frames_per_second));
        }
        out.push_str(&format!(
            "F = {}: {:.2} ms + {:.2} ms/step, R² = {:.4} ({})\n",
            self.frames,
            self.fixed_ms,
            self.ms_per_step,
            self.r2,
            if self.near_linear() { "near-linear" } else { "not linear" }
        ));
        out
    }
}

/// Least-squares line through `(x, y)`: `(intercept, slope, r²)`.
pub fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (my - slope * mx, slope, r2)
}

/// Best of `repeats` warm reconstructions of `obs` per step count, with
/// the step counts interleaved.
pub fn bench<T: Scalar>(
    obs: &ObservationSeq<T>,
    model: &ModelWeights<T>,
    tokenizer: &TokenizerWeights<T>,
    skel: &SkeletonConfig<T>,
    base: &InferenceConfig,
    steps: &[usize],
    repeats: usize,
) -> Result<BenchReport> {
    if steps.len() < 2 || repeats == 0 {
        return Err(HarnessError::Config("bench needs at least two step counts and one repeat".into()));
    }
    let frames = obs.frames();
    let configs: Vec<InferenceConfig> = steps.iter().map(|&t| InferenceConfig { steps: t, ..*base }).collect();
    for cfg in &configs {
        reconstruct(obs, model, tokenizer, skel, cfg)?;
    }
    // step counts take turns so slow spells hit all of them
    let mut best = vec![f64::INFINITY; steps.len()];
    for _ in 0..repeats {
        for (b, cfg) in best.iter_mut().zip(&configs) {
            let start = Instant::now();
            reconstruct(obs, model, tokenizer, skel, cfg)?;
            *b = b.min(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let rows: Vec<BenchRow> = steps
        .iter()
        .zip(best)
        .map(|(&t, ms)| BenchRow { steps: t, ms, frames_per_second: frames as f64 / (ms / 1e3) })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.steps as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.ms).collect();
    let (fixed_ms, ms_per_step, r2) = affine_fit(&x, &y);
    Ok(BenchReport { frames, rows, ms_per_step, fixed_ms, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_recovers_lines() {
        let x = [1.0, 5.0, 10.0, 20.0];
        let y: Vec<f64> = x.iter().map(|t| 3.0 + 2.5 * t).collect();
        let (a, b, r2) = affine_fit(&x, &y);
        assert!((a - 3.0).abs() < 1e-12 && (b - 2.5).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = affine_fit(&x, &[1.0, 9.0, 2.0, 8.0]);
        assert!(r2 < 0.5);
    }
}
