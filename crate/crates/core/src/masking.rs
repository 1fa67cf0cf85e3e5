//! Mask grids over `frames × tokens` pose-token positions (true = masked),
//! the training masking regimes, and the inference keep schedule.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskGrid {
    pub frames: usize,
    pub tokens: usize,
    pub grid: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(frames: usize, tokens: usize) -> Self {
        MaskGrid { frames, tokens, grid: vec![false; frames * tokens] }
    }

    pub fn full(frames: usize, tokens: usize) -> Self {
        MaskGrid { frames, tokens, grid: vec![true; frames * tokens] }
    }

    #[inline]
    pub fn get(&self, frame: usize, token: usize) -> bool {
        self.grid[frame * self.tokens + token]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, token: usize, masked: bool) {
        self.grid[frame * self.tokens + token] = masked;
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn frame_fully_masked(&self, frame: usize) -> bool {
        (0..self.tokens).all(|p| self.get(frame, p))
    }

    /// Logical complement.
    pub fn inverted(&self) -> Self {
        MaskGrid { frames: self.frames, tokens: self.tokens, grid: self.grid.iter().map(|m| !m).collect() }
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn count_for(ratio: f64, total: usize) -> usize {
    assert!((0.0..=1.0).contains(&ratio), "mask ratio {ratio} outside [0, 1]");
    ((ratio * total as f64).round() as usize).min(total)
}

/// Exactly `round(ratio·F·P)` positions, uniformly without replacement.
pub fn random_mask(frames: usize, tokens: usize, ratio: f64, seed: u64) -> MaskGrid {
    random_mask_with(frames, tokens, ratio, &mut rng_for(seed))
}

pub fn random_mask_with<R: Rng + ?Sized>(frames: usize, tokens: usize, ratio: f64, rng: &mut R) -> MaskGrid {
    let total = frames * tokens;
    let mut mask = MaskGrid::empty(frames, tokens);
    for i in index::sample(rng, total, count_for(ratio, total)) {
        mask.grid[i] = true;
    }
    mask
}

/// One contiguous block of `round(frame_ratio·F)` fully masked frames.
pub fn temporal_block_mask(frames: usize, tokens: usize, frame_ratio: f64, seed: u64) -> MaskGrid {
    temporal_block_mask_with(frames, tokens, frame_ratio, &mut rng_for(seed))
}

pub fn temporal_block_mask_with<R: Rng + ?Sized>(frames: usize, tokens: usize, frame_ratio: f64, rng: &mut R) -> MaskGrid {
    let n = count_for(frame_ratio, frames);
    let start = rng.gen_range(0..=frames - n);
    let mut mask = MaskGrid::empty(frames, tokens);
    for f in start..start + n {
        for p in 0..tokens {
            mask.set(f, p, true);
        }
    }
    mask
}

/// `round(token_ratio·P)` token columns masked in every frame.
pub fn spatial_mask(frames: usize, tokens: usize, token_ratio: f64, seed: u64) -> MaskGrid {
    spatial_mask_with(frames, tokens, token_ratio, &mut rng_for(seed))
}

pub fn spatial_mask_with<R: Rng + ?Sized>(frames: usize, tokens: usize, token_ratio: f64, rng: &mut R) -> MaskGrid {
    let mut mask = MaskGrid::empty(frames, tokens);
    for p in index::sample(rng, tokens, count_for(token_ratio, tokens)) {
        for f in 0..frames {
            mask.set(f, p, true);
        }
    }
    mask
}

/// Unmasks all `frozen` positions plus the `keep_total` most confident
/// non-frozen ones; ties go to the lexicographically smaller (frame, token).
pub fn confidence_remask<T: Scalar>(confidences: &[T], keep_total: usize, frozen: &MaskGrid) -> MaskGrid {
    assert_eq!(confidences.len(), frozen.len(), "confidence grid does not match mask grid");
    let mut candidates: Vec<usize> = (0..frozen.len()).filter(|&i| !frozen.grid[i]).collect();
    // stable sort keeps index order among equal confidences
    candidates.sort_by(|&a, &b| confidences[b].partial_cmp(&confidences[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut mask = MaskGrid::full(frozen.frames, frozen.tokens);
    for (i, &f) in frozen.grid.iter().enumerate() {
        if f {
            mask.grid[i] = false;
        }
    }
    for &i in candidates.iter().take(keep_total) {
        mask.grid[i] = false;
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeepSchedule {
    #[default]
    Cosine,
    Linear,
}

impl KeepSchedule {
    /// Cumulative number of kept positions after step `step` of `steps`.
    pub fn keep(self, step: usize, steps: usize, total: usize) -> usize {
        match self {
            KeepSchedule::Cosine => cosine_keep_schedule(step, steps, total),
            KeepSchedule::Linear => linear_keep_schedule(step, steps, total),
        }
    }
}

/// `ceil(N·(1 − cos(π·t/(2T))))`, with `t = 0` giving 0 and `t = T` giving `N`.
pub fn cosine_keep_schedule(step: usize, steps: usize, total: usize) -> usize {
    assert!(steps >= 1 && step <= steps, "step {step} outside [0, {steps}]");
    if step == steps {
        return total;
    }
    let frac = 1.0 - (PI * step as f64 / (2.0 * steps as f64)).cos();
    ((total as f64 * frac - 1e-9).ceil().max(0.0) as usize).min(total)
}

pub fn linear_keep_schedule(step: usize, steps: usize, total: usize) -> usize {
    assert!(steps >= 1 && step <= steps, "step {step} outside [0, {steps}]");
    (total * step).div_ceil(steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRegime {
    Random,
    TemporalBlock,
    Spatial,
    ConfidenceGuided,
}

/// Per-item regime mixture for training batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskMixture {
    /// Probabilities for random, temporal block, spatial, confidence guided.
    pub probs: [f64; 4],
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Default for MaskMixture {
    fn default() -> Self {
        MaskMixture { probs: [0.4, 0.3, 0.1, 0.2], min_ratio: 0.1, max_ratio: 1.0 }
    }
}

impl MaskMixture {
    /// The same mixture with confidence-guided masking removed and the rest renormalized.
    pub fn without_confidence_guided(&self) -> Self {
        let mut probs = self.probs;
        probs[3] = 0.0;
        let s: f64 = probs.iter().sum();
        MaskMixture { probs: probs.map(|p| p / s), ..*self }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (MaskRegime, f64) {
        let total: f64 = self.probs.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let regimes = [MaskRegime::Random, MaskRegime::TemporalBlock, MaskRegime::Spatial, MaskRegime::ConfidenceGuided];
        let mut regime = MaskRegime::Random;
        for (r, &p) in regimes.iter().zip(&self.probs) {
            if p > 0.0 {
                regime = *r;
                if u < p {
                    break;
                }
                u -= p;
            }
        }
        let ratio = rng.gen_range(self.min_ratio..=self.max_ratio);
        (regime, ratio)
    }

    /// Builds a mask for the non-model-dependent regimes. Confidence-guided
    /// masks need a forward pass and are produced by the trainer instead.
    pub fn make_mask<R: Rng + ?Sized>(regime: MaskRegime, ratio: f64, frames: usize, tokens: usize, rng: &mut R) -> MaskGrid {
        match regime {
            MaskRegime::Random | MaskRegime::ConfidenceGuided => random_mask_with(frames, tokens, ratio, rng),
            MaskRegime::TemporalBlock => temporal_block_mask_with(frames, tokens, ratio, rng),
            MaskRegime::Spatial => spatial_mask_with(frames, tokens, ratio, rng),
        }
    }
}
