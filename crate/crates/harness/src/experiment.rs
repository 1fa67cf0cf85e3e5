//! Dataset preparation, the staged training pipeline and evaluation, shared by
//! the CLI and the end-to-end ablation study.

use std::time::Instant;

use maskmotion_core::body::{BodyFrame, SkeletonConfig};
use maskmotion_core::geometry::CameraIntrinsics;
use maskmotion_core::linalg::{cast3, PointSeq, Vec3};
use maskmotion_core::metrics::{evaluate_sequence, EvalReport, MotionSample};
use maskmotion_core::scalar::Scalar;
use maskmotion_model::inference::{reconstruct, InferenceConfig};
use maskmotion_model::network::{ModelWeights, NetworkConfig, ObservationSeq};
use maskmotion_model::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig, TokenizerWeights};
use maskmotion_model::training::{run_stage, Stage, StageConfig, StepLog, TrainingSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::observe::{default_camera, simulate_observations, OcclusionKind, OcclusionPattern};
use crate::synthetic::{generate_dataset, MotionSequence, SyntheticMotionConfig};

/// Training-time occlusion: kind drawn uniformly, ratio in `[0, max_ratio]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOcclusion {
    pub max_ratio: f64,
    /// Share of sequences left fully visible.
    pub clean_fraction: f64,
    pub pixel_noise: f64,
}

impl Default for TrainOcclusion {
    fn default() -> Self {
        TrainOcclusion { max_ratio: 0.5, clean_fraction: 0.2, pixel_noise: 1.0 }
    }
}

fn mix(seed: u64, i: u64) -> u64 {
    maskmotion_model::training::mix_seed(&[seed, 0x0B5E, i])
}

/// Observations for training sequence `i`.
pub fn training_observations(
    seq: &MotionSequence,
    skel: &SkeletonConfig<f64>,
    cam: &CameraIntrinsics<f64>,
    occ: &TrainOcclusion,
    seed: u64,
    i: u64,
) -> Result<ObservationSeq<f64>> {
    let s = mix(seed, i);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let kind = [OcclusionKind::TemporalBlock, OcclusionKind::LowerBody, OcclusionKind::SideEntry][rng.gen_range(0..3)];
    let ratio = if rng.gen::<f64>() < occ.clean_fraction { 0.0 } else { rng.gen_range(0.0..=occ.max_ratio) };
    simulate_observations(seq, skel, cam, &OcclusionPattern::new(kind, ratio, s)?, occ.pixel_noise)
}

/// Observations with a temporal occlusion block of `ratio`.
pub fn eval_observations(
    seq: &MotionSequence,
    skel: &SkeletonConfig<f64>,
    cam: &CameraIntrinsics<f64>,
    ratio: f64,
    pixel_noise: f64,
    seed: u64,
    i: u64,
) -> Result<ObservationSeq<f64>> {
    let pattern = OcclusionPattern::new(OcclusionKind::TemporalBlock, ratio, mix(seed ^ 0xE7A1, i))?;
    simulate_observations(seq, skel, cam, &pattern, pixel_noise)
}

pub fn cast_body<A: Scalar, B: Scalar>(b: &BodyFrame<A>) -> BodyFrame<B> {
    BodyFrame { joints: b.joints.iter().map(|&p| cast3(p)).collect(), vertices: b.vertices.iter().map(|&p| cast3(p)).collect() }
}

/// Local vertex frames of every `stride`-th frame, for tokenizer fitting.
pub fn pose_frames<T: Scalar>(seqs: &[MotionSequence], skel: &SkeletonConfig<f64>, stride: usize) -> Result<Vec<Vec<Vec3<T>>>> {
    let mut out = Vec::new();
    for s in seqs {
        for (t, b) in s.local_bodies(skel)?.iter().enumerate() {
            if t % stride.max(1) == 0 {
                out.push(b.vertices.iter().map(|&p| cast3(p)).collect());
            }
        }
    }
    Ok(out)
}

/// Tokenized training samples. `obs[i]` pairs with `seqs[i]` when given.
pub fn build_samples<T: Scalar>(
    seqs: &[MotionSequence],
    obs: Option<&[ObservationSeq<f64>]>,
    skel: &SkeletonConfig<f64>,
    tokenizer: &TokenizerWeights<T>,
) -> Result<Vec<TrainingSample<T>>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let local: Vec<BodyFrame<T>> = s.local_bodies(skel)?.iter().map(cast_body).collect();
            let o = obs.map(|o| o[i].cast::<T>());
            Ok(TrainingSample::new(&local, s.traj.cast(), s.contacts.clone(), o, tokenizer)?)
        })
        .collect()
}

/// Reconstructs every sequence and scores it against ground truth.
pub fn evaluate<T: Scalar>(
    model: &ModelWeights<T>,
    tokenizer: &TokenizerWeights<T>,
    skel: &SkeletonConfig<f64>,
    seqs: &[MotionSequence],
    obs: &[ObservationSeq<f64>],
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let skel_t = skel.cast::<T>();
    let mut rows = Vec::with_capacity(seqs.len());
    for (s, o) in seqs.iter().zip(obs) {
        let rec = reconstruct(&o.cast::<T>(), model, tokenizer, &skel_t, cfg)?;
        let world = s.world_bodies(skel)?;
        let gt_j = PointSeq::from_frames(world.iter().map(|b| b.joints.clone()).collect());
        let gt_v = PointSeq::from_frames(world.into_iter().map(|b| b.vertices).collect());
        let (pj, pv) = (rec.world_joints.cast::<f64>(), rec.world_vertices.cast::<f64>());
        rows.push(evaluate_sequence(
            &s.name,
            &MotionSample { joints: &pj, vertices: &pv },
            &MotionSample { joints: &gt_j, vertices: &gt_v },
            skel,
            s.fps,
            Some(&o.visibility),
        )?);
    }
    Ok(EvalReport::from_sequences(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: SyntheticMotionConfig,
    pub eval: SyntheticMotionConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    /// Every n-th frame feeds the tokenizer.
    pub tokenizer_stride: usize,
    pub network: NetworkConfig,
    pub motion: StageConfig,
    pub image: StageConfig,
    pub video: StageConfig,
    pub occlusion: TrainOcclusion,
    pub eval_occlusion: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let tokenizer = TokenizerConfig { codebook_size: 128, hidden: 64, ..TokenizerConfig::default() };
        let network = NetworkConfig {
            width: 32,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            window: 16,
            tokens: tokenizer.tokens,
            codebook_size: tokenizer.codebook_size,
            ..NetworkConfig::default()
        };
        AblationConfig {
            train: SyntheticMotionConfig { num_sequences: 2000, frames: 60, seed: 1, ..SyntheticMotionConfig::default() },
            eval: SyntheticMotionConfig { num_sequences: 40, frames: 60, seed: 2, ..SyntheticMotionConfig::default() },
            tokenizer,
            tokenizer_train: TokenizerTrainConfig { epochs: 8, batch_size: 64, ..TokenizerTrainConfig::default() },
            tokenizer_stride: 6,
            network,
            motion: StageConfig::for_stage(Stage::Motion),
            image: StageConfig::for_stage(Stage::Image),
            video: StageConfig::for_stage(Stage::Video),
            occlusion: TrainOcclusion::default(),
            eval_occlusion: 0.3,
            steps: 5,
            seed: 0,
        }
    }
}

/// Headline numbers of one evaluated variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub mpjpe_occ: f64,
    pub mpjpe_all: f64,
    pub jitter: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: VariantResult,
    pub no_motion_encoder: VariantResult,
    pub no_confidence_guided: VariantResult,
    pub no_smoother: VariantResult,
    pub single_step: VariantResult,
    pub seconds: f64,
    pub logs: Vec<StepLog>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24}{:>12}{:>12}{:>12}\n", "variant", "MPJPE-occ", "MPJPE", "Jitter");
        for v in [&self.full, &self.no_motion_encoder, &self.no_confidence_guided, &self.no_smoother, &self.single_step] {
            out.push_str(&format!("{:<24}{:>12.2}{:>12.2}{:>12.2}\n", v.name, v.mpjpe_occ, v.mpjpe_all, v.jitter));
        }
        out.push_str(&format!("total {:.1} s\n", self.seconds));
        out
    }
}

fn variant(name: &str, report: EvalReport) -> VariantResult {
    VariantResult {
        name: name.to_string(),
        mpjpe_occ: report.mpjpe_occ.unwrap_or(0.0),
        mpjpe_all: report.mpjpe_all,
        jitter: report.jitter,
        report,
    }
}

/// Trains the shared stages once, then three video-stage variants, and
/// evaluates all five configurations under temporal-block occlusion.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let start = Instant::now();
    let skel = SkeletonConfig::<f64>::desk_default();
    let skel32 = skel.cast::<f32>();
    let cam = default_camera();
    if cfg.network.tokens != cfg.tokenizer.tokens || cfg.network.codebook_size != cfg.tokenizer.codebook_size {
        return Err(HarnessError::Config("network and tokenizer disagree on tokens or codebook size".into()));
    }

    let train = generate_dataset(&cfg.train, &skel)?;
    let eval = generate_dataset(&cfg.eval, &skel)?;
    let train_obs: Vec<_> = train
        .iter()
        .enumerate()
        .map(|(i, s)| training_observations(s, &skel, &cam, &cfg.occlusion, cfg.seed, i as u64))
        .collect::<Result<_>>()?;
    let eval_obs: Vec<_> = eval
        .iter()
        .enumerate()
        .map(|(i, s)| eval_observations(s, &skel, &cam, cfg.eval_occlusion, cfg.occlusion.pixel_noise, cfg.seed, i as u64))
        .collect::<Result<_>>()?;
    progress(&format!("data ready ({:.1} s)", start.elapsed().as_secs_f64()));

    let poses = pose_frames::<f32>(&train, &skel, cfg.tokenizer_stride)?;
    let (tokenizer, _) = train_tokenizer(&poses, cfg.tokenizer, cfg.tokenizer_train)?;
    progress(&format!("tokenizer trained on {} poses ({:.1} s)", poses.len(), start.elapsed().as_secs_f64()));

    let samples = build_samples::<f32>(&train, Some(&train_obs), &skel, &tokenizer)?;
    let model = ModelWeights::<f32>::new(cfg.network, cfg.seed)?;
    let mut logs = Vec::new();
    let (model, tokenizer, l) = run_stage(&cfg.motion, &samples, model, tokenizer, &skel32)?;
    logs.extend(l);
    progress(&format!("motion stage done ({:.1} s)", start.elapsed().as_secs_f64()));
    let (model, tokenizer, l) = run_stage(&cfg.image, &samples, model, tokenizer, &skel32)?;
    logs.extend(l);
    progress(&format!("image stage done ({:.1} s)", start.elapsed().as_secs_f64()));

    let mut video = |name: &str, c: &StageConfig| -> Result<(ModelWeights<f32>, TokenizerWeights<f32>)> {
        let (m, t, l) = run_stage(c, &samples, model.clone(), tokenizer.clone(), &skel32)?;
        logs.extend(l);
        progress(&format!("video stage '{name}' done ({:.1} s)", start.elapsed().as_secs_f64()));
        Ok((m, t))
    };
    let (full_m, full_t) = video("full", &cfg.video)?;
    let no_cgm_cfg = StageConfig { confidence_guided: false, mask: cfg.video.mask.without_confidence_guided(), ..cfg.video.clone() };
    let (cgm_m, cgm_t) = video("no confidence-guided masking", &no_cgm_cfg)?;
    let no_me_cfg = StageConfig { use_motion_encoder: false, ..cfg.video.clone() };
    let (me_m, me_t) = video("no motion encoder", &no_me_cfg)?;

    let inf = InferenceConfig { steps: cfg.steps, fps: cfg.eval.fps, ..InferenceConfig::default() };
    let eval_with = |m: &ModelWeights<f32>, t: &TokenizerWeights<f32>, c: &InferenceConfig| evaluate(m, t, &skel, &eval, &eval_obs, c);
    let full = variant("full", eval_with(&full_m, &full_t, &inf)?);
    let no_smoother = variant("no smoother", eval_with(&full_m, &full_t, &InferenceConfig { use_smoother: false, ..inf })?);
    let single_step = variant("single step", eval_with(&full_m, &full_t, &InferenceConfig { steps: 1, ..inf })?);
    let no_confidence_guided = variant("no confidence-guided", eval_with(&cgm_m, &cgm_t, &inf)?);
    let no_motion_encoder =
        variant("no motion encoder", eval_with(&me_m, &me_t, &InferenceConfig { use_motion_encoder: false, ..inf })?);
    progress(&format!("evaluation done ({:.1} s)", start.elapsed().as_secs_f64()));

    Ok(AblationReport {
        full,
        no_motion_encoder,
        no_confidence_guided,
        no_smoother,
        single_step,
        seconds: start.elapsed().as_secs_f64(),
        logs,
    })
}
