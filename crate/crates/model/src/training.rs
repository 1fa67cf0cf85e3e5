//! Staged training: motion pretraining, per-frame conditioning pretraining and
//! end-to-end video fine-tuning.

use maskmotion_core::autodiff::{clip_grad_norm, AdamW, AdamWConfig, Tape, Tensor};
use maskmotion_core::body::{BodyFrame, SkeletonConfig};
use maskmotion_core::geometry::{canonicalize_trajectory, Trajectory};
use maskmotion_core::masking::{confidence_remask, KeepSchedule, MaskGrid, MaskMixture, MaskRegime};
use maskmotion_core::scalar::{lit, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::inference::{condition, confidence_of, decode_step};
use crate::losses::{
    compute_losses, corrupt_trajectory_with, vertex_to_joint_matrix, CorruptionConfig, LossBreakdown, LossContext, LossWeights,
    Predictions, Targets,
};
use crate::network::{canonical_tensor, ModelWeights, ObservationSeq};
use crate::tokenizer::{flatten, PoseTokenSeq, TokenizerWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Motion,
    Image,
    Video,
}

impl Stage {
    fn index(self) -> u64 {
        match self {
            Stage::Motion => 0,
            Stage::Image => 1,
            Stage::Video => 2,
        }
    }

    /// Parameter name prefixes updated in this stage.
    pub fn trained_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Motion => &["motion."],
            Stage::Image => &["cond.", "dec."],
            Stage::Video => &["cond.", "motion.", "dec."],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "motion" => Ok(Stage::Motion),
            "image" => Ok(Stage::Image),
            "video" => Ok(Stage::Video),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub mask: MaskMixture,
    pub loss: LossWeights,
    pub corruption: CorruptionConfig,
    /// Re-mask from a no-gradient first inference step (video stage only).
    pub confidence_guided: bool,
    /// Route the decoder through the motion encoder (video stage only).
    pub use_motion_encoder: bool,
    pub train_smoother: bool,
    /// Weight of the motion-encoder token loss relative to the decoder's.
    pub encoder_ce_weight: f64,
    /// Steps assumed by the confidence-guided keep quota.
    pub cgm_steps: usize,
    pub fps: f64,
    pub vel_thresh: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: Stage::Motion,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            optimizer: AdamWConfig { lr: 1e-3, warmup_steps: 20, ..AdamWConfig::default() },
            clip_norm: 1.0,
            mask: MaskMixture::default(),
            loss: LossWeights::default(),
            corruption: CorruptionConfig::default(),
            confidence_guided: true,
            use_motion_encoder: true,
            train_smoother: false,
            encoder_ce_weight: 0.5,
            cgm_steps: 5,
            fps: 30.0,
            vel_thresh: 0.15,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        StageConfig { stage, train_smoother: stage == Stage::Video, ..StageConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.cgm_steps == 0 || !(self.fps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(ModelError::ShapeMismatch(format!("invalid stage config for {:?}", self.stage)));
        }
        if self.loss.w_ce <= 0.0 {
            return Err(ModelError::ShapeMismatch("token-predicting stages need w_ce > 0".into()));
        }
        Ok(())
    }
}

/// One ground-truth sequence with everything the losses need.
#[derive(Clone, Debug)]
pub struct TrainingSample<T> {
    pub tokens: PoseTokenSeq,
    /// `F × 3V`.
    pub local_vertices: Tensor<T>,
    /// `(F·J) × 3`.
    pub local_joints: Tensor<T>,
    pub traj: Trajectory<T>,
    /// `(F·J) × 3`.
    pub world_joints: Tensor<T>,
    /// `F × feet` stance flags.
    pub contacts: Vec<Vec<bool>>,
    pub obs: Option<ObservationSeq<T>>,
}

impl<T: Scalar> TrainingSample<T> {
    /// Tokenizes the local bodies and composes world joints.
    pub fn new(
        local: &[BodyFrame<T>],
        traj: Trajectory<T>,
        contacts: Vec<Vec<bool>>,
        obs: Option<ObservationSeq<T>>,
        tokenizer: &TokenizerWeights<T>,
    ) -> Result<Self> {
        let f = local.len();
        if f < 2 {
            return Err(ModelError::TooShort { needed: 2, got: f });
        }
        if traj.len() != f || contacts.len() != f || obs.as_ref().is_some_and(|o| o.frames() != f) {
            return Err(ModelError::ShapeMismatch("sample parts disagree on frame count".into()));
        }
        let verts: Vec<Vec<_>> = local.iter().map(|b| b.vertices.clone()).collect();
        let tokens = tokenizer.tokenize_sequence(&verts)?;
        let refs: Vec<&[_]> = verts.iter().map(|v| v.as_slice()).collect();
        let local_vertices = flatten(&refs);
        let j = local[0].joints.len();
        let local_joints = Tensor::from_fn(f * j, 3, |r, c| local[r / j].joints[r % j][c]);
        let mut world_joints = Tensor::zeros(f * j, 3);
        for (t, fr) in traj.frames.iter().enumerate() {
            let rot = fr.orient.to_matrix()?;
            for (k, p) in local[t].joints.iter().enumerate() {
                let w = rot.mul_vec(*p);
                for c in 0..3 {
                    world_joints.data[(t * j + k) * 3 + c] = w[c] + fr.trans[c];
                }
            }
        }
        Ok(TrainingSample { tokens, local_vertices, local_joints, traj, world_joints, contacts, obs })
    }

    pub fn frames(&self) -> usize {
        self.traj.len()
    }
}

/// Loss and gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleLoss<T> {
    pub breakdown: LossBreakdown,
    pub regime: Option<MaskRegime>,
    pub grads: Vec<Tensor<T>>,
    pub smoother_grads: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

/// Splitmix-style hash of the parts.
pub fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Model, tokenizer (whose smoother may be trained) and optimizer state for one stage.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ModelWeights<T>,
    pub tokenizer: TokenizerWeights<T>,
    pub skel: SkeletonConfig<T>,
    pub config: StageConfig,
    pub opt: AdamW<T>,
    pub smoother_opt: AdamW<T>,
    /// Optimizer steps taken in this stage.
    pub step: u64,
    pub dataset_len: usize,
    vert_to_joint: Tensor<T>,
    active: Vec<bool>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: ModelWeights<T>,
        tokenizer: TokenizerWeights<T>,
        skel: SkeletonConfig<T>,
        config: StageConfig,
        dataset_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(ModelError::MissingDataset("training set is empty"));
        }
        if tokenizer.config.tokens != model.config.tokens || tokenizer.config.codebook_size != model.config.codebook_size {
            return Err(ModelError::ShapeMismatch("tokenizer and network disagree on P or K".into()));
        }
        let mut oc = config.optimizer;
        oc.total_steps = Self::planned_steps(&config, dataset_len);
        let opt = AdamW::new(oc, &model.params);
        let smoother_opt = AdamW::new(oc, &tokenizer.smoother);
        let vert_to_joint = vertex_to_joint_matrix(&skel)?;
        let active = model.component_mask(config.stage.trained_prefixes());
        Ok(Trainer { model, tokenizer, skel, config, opt, smoother_opt, step: 0, dataset_len, vert_to_joint, active })
    }

    pub fn steps_per_epoch(config: &StageConfig, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(config.batch_size) as u64
    }

    pub fn planned_steps(config: &StageConfig, dataset_len: usize) -> u64 {
        let full = Self::steps_per_epoch(config, dataset_len) * config.epochs as u64;
        config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn total_steps(&self) -> u64 {
        Self::planned_steps(&self.config, self.dataset_len)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Parameters this stage updates.
    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    /// Dataset indices of the batch for optimizer step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = Self::steps_per_epoch(&self.config, self.dataset_len);
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, self.config.stage.index(), 0xE90C, epoch]));
        order.shuffle(&mut rng);
        let bs = self.config.batch_size;
        order[b * bs..((b + 1) * bs).min(self.dataset_len)].to_vec()
    }

    fn sample_rng(&self, step: u64, item: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, self.config.stage.index(), step, item as u64]))
    }

    fn check_sample(&self, s: &TrainingSample<T>) -> Result<()> {
        if self.config.stage != Stage::Motion && s.obs.is_none() {
            return Err(ModelError::MissingDataset("image and video stages need paired observations"));
        }
        if s.tokens.tokens != self.model.config.tokens {
            return Err(ModelError::ShapeMismatch("sample tokens disagree with the network".into()));
        }
        Ok(())
    }

    /// Token mask, motion-encoder input tokens and input trajectory for one sample.
    fn prepare_inputs(
        &self,
        s: &TrainingSample<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Option<MaskRegime>, MaskGrid, PoseTokenSeq, Trajectory<T>)> {
        let (f, p) = (s.frames(), self.model.config.tokens);
        let stage = self.config.stage;
        let uses_tokens = stage == Stage::Motion || (stage == Stage::Video && self.config.use_motion_encoder);
        if !uses_tokens {
            return Ok((None, MaskGrid::full(f, p), s.tokens.clone(), s.traj.clone()));
        }
        let (regime, ratio) = self.config.mask.sample(rng);
        let corrupted = corrupt_trajectory_with(&s.traj, self.config.corruption, rng)?;
        if regime == MaskRegime::ConfidenceGuided && stage == Stage::Video && self.config.confidence_guided {
            let obs = s.obs.as_ref().expect("checked");
            let cond = condition(obs, &self.model, self.config.fps)?;
            let start = PoseTokenSeq::new(f, p, vec![0; f * p]);
            let (logits, refined) = decode_step(&self.model, &cond, &start, &MaskGrid::full(f, p), Some(&cond.coarse), self.config.fps)?;
            let ids = logits.argmax_rows();
            let conf = confidence_of(&logits, &ids, 1.0);
            let quota = KeepSchedule::Cosine.keep(1, self.config.cgm_steps, f * p);
            let mask = confidence_remask(&conf, quota, &MaskGrid::empty(f, p));
            return Ok((Some(regime), mask, PoseTokenSeq::new(f, p, ids), refined));
        }
        let mask = MaskMixture::make_mask(regime, ratio, f, p, rng);
        Ok((Some(regime), mask, s.tokens.clone(), corrupted))
    }

    /// Loss and gradients of one sample with the given RNG.
    pub fn sample_loss(&self, s: &TrainingSample<T>, rng: &mut ChaCha8Rng) -> Result<SampleLoss<T>> {
        self.check_sample(s)?;
        let (regime, mask, input_tokens, input_traj) = self.prepare_inputs(s, rng)?;
        let stage = self.config.stage;
        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape, true);
        let tok_vars = self.tokenizer.params.bind(&mut tape, false);
        let svars = self.tokenizer.smoother.bind(&mut tape, self.config.train_smoother);
        let vert_to_joint = tape.constant(self.vert_to_joint.clone());
        let codebook = tok_vars[self.tokenizer.codebook_id().0];
        let ctx = LossContext {
            tokenizer: &self.tokenizer,
            tok_vars: &tok_vars,
            smoother_vars: self.config.train_smoother.then_some(svars.as_slice()),
            vert_to_joint,
            codebook,
            skel: &self.skel,
            fps: self.config.fps,
            vel_thresh: self.config.vel_thresh,
        };
        let mut preds = Predictions::default();
        let canon_gt = canonical_tensor(&canonicalize_trajectory(&s.traj)?);
        let motion = match stage {
            Stage::Motion => true,
            Stage::Image => false,
            Stage::Video => self.config.use_motion_encoder,
        };
        let mv = if motion {
            let canon_in = canonical_tensor(&canonicalize_trajectory(&input_traj)?);
            let m = self.model.motion_vars(&mut tape, &vars, &input_tokens, &mask, &canon_in, 0)?;
            preds.canon = Some(m.canon);
            let base = self.model.integrated_traj(&mut tape, &m.canon, &input_traj.frames[0])?;
            Some((m, base))
        } else {
            None
        };
        match stage {
            Stage::Motion => preds.logits = mv.map(|(m, _)| m.logits),
            Stage::Image | Stage::Video => {
                let obs = s.obs.as_ref().expect("checked");
                let cond = self.model.conditioning_vars(&mut tape, &vars, obs)?;
                let temporal = stage == Stage::Video;
                let d = self.model.decoder_vars(&mut tape, &vars, mv.map(|(m, _)| (m.pose_feats, m.traj_feats)), mv.as_ref().map(|(_, b)| b), &cond, temporal, 0)?;
                preds.logits = Some(d.logits);
                preds.coarse = Some(cond.coarse);
                preds.refined = Some(d.refined);
                if let Some((m, _)) = mv {
                    preds.aux_logits = Some((m.logits, self.config.encoder_ce_weight));
                }
            }
        }
        let visibility = if stage == Stage::Motion { None } else { s.obs.as_ref().map(|o| o.visibility.as_slice()) };
        let targets = Targets {
            tokens: &s.tokens,
            local_vertices: &s.local_vertices,
            local_joints: &s.local_joints,
            traj: &s.traj,
            canon: &canon_gt,
            world_joints: &s.world_joints,
            visibility,
            contacts: Some(&s.contacts),
        };
        let (loss, breakdown) = compute_losses(&mut tape, &ctx, &preds, &targets, &mask, &self.config.loss)?;
        if !breakdown.total.is_finite() {
            return Err(ModelError::Diverged { step: self.step, loss: breakdown.total });
        }
        let mut g = tape.backward(loss);
        let grads = self.model.params.collect_grads(&mut g, &vars);
        let smoother_grads = self.tokenizer.smoother.collect_grads(&mut g, &svars);
        Ok(SampleLoss { breakdown, regime, grads, smoother_grads })
    }

    /// Runs optimizer step `self.step` on its batch.
    pub fn train_step(&mut self, data: &[TrainingSample<T>]) -> Result<StepLog> {
        if data.len() != self.dataset_len {
            return Err(ModelError::ShapeMismatch(format!("dataset has {} samples, trainer expects {}", data.len(), self.dataset_len)));
        }
        let batch = self.batch_indices(self.step);
        let inv = lit::<T>(1.0 / batch.len() as f64);
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut sgrads: Option<Vec<Tensor<T>>> = None;
        let mut acc = LossBreakdown::default();
        for (item, &i) in batch.iter().enumerate() {
            let mut rng = self.sample_rng(self.step, item);
            let sl = self.sample_loss(&data[i], &mut rng)?;
            add_breakdown(&mut acc, &sl.breakdown, 1.0 / batch.len() as f64);
            accumulate(&mut grads, sl.grads, inv);
            accumulate(&mut sgrads, sl.smoother_grads, inv);
        }
        let mut grads = grads.expect("non-empty batch");
        let lr = self.opt.current_lr();
        let grad_norm = clip_grad_norm(&mut grads, lit(self.config.clip_norm)).as_f64();
        if !grad_norm.is_finite() {
            return Err(ModelError::Diverged { step: self.step, loss: f64::NAN });
        }
        self.opt.update_subset(&mut self.model.params, &grads, Some(&self.active));
        if self.config.train_smoother {
            let mut sg = sgrads.expect("non-empty batch");
            clip_grad_norm(&mut sg, lit(self.config.clip_norm));
            self.smoother_opt.update(&mut self.tokenizer.smoother, &sg);
        }
        let spe = Self::steps_per_epoch(&self.config, self.dataset_len);
        let log = StepLog { stage: self.config.stage, step: self.step, epoch: self.step / spe, lr, grad_norm, loss: acc };
        self.step += 1;
        Ok(log)
    }

    /// Trains until the planned step count, calling `on_step` after each step.
    pub fn run(&mut self, data: &[TrainingSample<T>], mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.train_step(data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn into_weights(self) -> (ModelWeights<T>, TokenizerWeights<T>) {
        (self.model, self.tokenizer)
    }
}

fn accumulate<T: Scalar>(acc: &mut Option<Vec<Tensor<T>>>, mut g: Vec<Tensor<T>>, scale: T) {
    for t in g.iter_mut() {
        t.scale_assign(scale);
    }
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&g) {
                x.add_assign(y);
            }
        }
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.total += w * b.total;
    acc.ce += w * b.ce;
    acc.v3d += w * b.v3d;
    acc.traj += w * b.traj;
    acc.j3d += w * b.j3d;
    acc.vel += w * b.vel;
    acc.j2d += w * b.j2d;
    acc.fs += w * b.fs;
}

/// Trains one stage from `model`/`tokenizer` and returns the updated weights with the step log.
pub fn run_stage<T: Scalar>(
    config: &StageConfig,
    data: &[TrainingSample<T>],
    model: ModelWeights<T>,
    tokenizer: TokenizerWeights<T>,
    skel: &SkeletonConfig<T>,
) -> Result<(ModelWeights<T>, TokenizerWeights<T>, Vec<StepLog>)> {
    let mut trainer = Trainer::new(model, tokenizer, skel.clone(), config.clone(), data.len())?;
    let logs = trainer.run(data, |_| {})?;
    let (m, t) = trainer.into_weights();
    Ok((m, t, logs))
}

/// Top-1 accuracy of the motion encoder on randomly masked positions.
pub fn masked_token_accuracy<T: Scalar>(model: &ModelWeights<T>, data: &[TrainingSample<T>], ratio: f64, seed: u64) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, s) in data.iter().enumerate() {
        let f = s.frames();
        let mask = maskmotion_core::masking::random_mask(f, model.config.tokens, ratio, mix_seed(&[seed, i as u64]));
        let canon = canonicalize_trajectory(&s.traj)?;
        let out = crate::network::motion_encode(&s.tokens, &mask, &canon, model)?;
        let pred = out.token_logits.argmax_rows();
        for (k, &m) in mask.grid.iter().enumerate() {
            if m {
                total += 1;
                hit += usize::from(pred[k] == s.tokens.ids[k]);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
