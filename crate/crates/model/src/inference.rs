//! Iterative masked reconstruction from observations.

use maskmotion_core::autodiff::{Tape, Tensor};
use maskmotion_core::body::{compose_global, BodyFrame, SkeletonConfig};
use maskmotion_core::geometry::{canonicalize_trajectory, Trajectory};
use maskmotion_core::linalg::{PointSeq, Vec3};
use maskmotion_core::masking::{confidence_remask, KeepSchedule, MaskGrid};
use maskmotion_core::scalar::{lit, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::{canonical_tensor, trajectory_from_vars, trajectory_rows, CondVars, ModelWeights, ObservationSeq, TrajVars};
use crate::tokenizer::{embed, PoseTokenSeq, TokenizerWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub steps: usize,
    pub schedule: KeepSchedule,
    pub temperature: f64,
    pub use_smoother: bool,
    /// Feed kept tokens and the canonicalized trajectory through the motion
    /// encoder; when off the decoder sees the absent embeddings.
    pub use_motion_encoder: bool,
    pub fps: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { steps: 5, schedule: KeepSchedule::Cosine, temperature: 1.0, use_smoother: true, use_motion_encoder: true, fps: 30.0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.temperature > 0.0) || !(self.fps > 0.0) {
            return Err(ModelError::ShapeMismatch(format!("invalid inference config {self:?}")));
        }
        Ok(())
    }
}

/// One iteration of the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<T> {
    pub step: usize,
    /// Kept positions after this step.
    pub kept: usize,
    pub mean_confidence: f64,
    /// Current id at every position (kept or provisional).
    pub tokens: Vec<usize>,
    /// True where the position is kept after this step.
    pub kept_mask: Vec<bool>,
    pub confidence: Vec<T>,
    pub trajectory: Trajectory<T>,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult<T> {
    pub trajectory: Trajectory<T>,
    pub tokens: PoseTokenSeq,
    pub world_joints: PointSeq<T>,
    pub world_vertices: PointSeq<T>,
    pub local_joints: PointSeq<T>,
    pub trace: Vec<StepTrace<T>>,
}

/// Softmax probability of `chosen[i]` in row `i` of `logits / temperature`.
pub fn confidence_of<T: Scalar>(logits: &Tensor<T>, chosen: &[usize], temperature: f64) -> Vec<T> {
    assert_eq!(logits.rows, chosen.len(), "one chosen id per logits row");
    let inv = lit::<T>(1.0 / temperature);
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let denom: T = row.iter().map(|&x| ((x - max) * inv).exp()).sum();
            ((row[chosen[r]] - max) * inv).exp() / denom
        })
        .collect()
}

/// Conditioning outputs computed once per sequence.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub latent: Tensor<T>,
    pub coarse: Trajectory<T>,
}

pub fn condition<T: Scalar>(obs: &ObservationSeq<T>, w: &ModelWeights<T>, fps: f64) -> Result<Conditioning<T>> {
    let mut tape = Tape::new();
    let vars = w.params.bind(&mut tape, false);
    let c = w.conditioning_vars(&mut tape, &vars, obs)?;
    Ok(Conditioning { latent: tape.value(c.latent).clone(), coarse: trajectory_from_vars(&tape, &c.coarse, lit(fps))? })
}

/// One decoder pass given the current tokens/mask and the trajectory fed to the
/// motion encoder. Returns the decoder logits and refined trajectory.
pub fn decode_step<T: Scalar>(
    w: &ModelWeights<T>,
    cond: &Conditioning<T>,
    tokens: &PoseTokenSeq,
    mask: &MaskGrid,
    motion_traj: Option<&Trajectory<T>>,
    fps: f64,
) -> Result<(Tensor<T>, Trajectory<T>)> {
    let mut tape = Tape::new();
    let vars = w.params.bind(&mut tape, false);
    let (r6, t) = trajectory_rows(&cond.coarse);
    let rot6d = tape.constant(r6);
    let rot = tape.rot6d_to_mat(rot6d);
    let trans = tape.constant(t);
    let cv = CondVars { latent: tape.constant(cond.latent.clone()), coarse: TrajVars { rot6d, rot, trans } };
    let (motion, base) = match motion_traj {
        Some(traj) => {
            let canon = canonical_tensor(&canonicalize_trajectory(traj)?);
            let m = w.motion_vars(&mut tape, &vars, tokens, mask, &canon, 0)?;
            let base = w.integrated_traj(&mut tape, &m.canon, &traj.frames[0])?;
            (Some((m.pose_feats, m.traj_feats)), Some(base))
        }
        None => (None, None),
    };
    let d = w.decoder_vars(&mut tape, &vars, motion, base.as_ref(), &cv, true, 0)?;
    Ok((tape.value(d.logits).clone(), trajectory_from_vars(&tape, &d.refined, lit(fps))?))
}

/// Local bodies decoded from tokens; joints come from the vertex regressor.
pub fn decode_bodies<T: Scalar>(
    tokens: &PoseTokenSeq,
    tokenizer: &TokenizerWeights<T>,
    skel: &SkeletonConfig<T>,
    use_smoother: bool,
) -> Result<Vec<BodyFrame<T>>> {
    let q = embed(&tokens.ids, tokenizer.codebook());
    let frames = tokenizer.decode_sequence(&q, tokens.frames, use_smoother)?;
    let reg = skel.joint_regressor()?;
    let v = skel.vertex_count;
    Ok(frames
        .into_iter()
        .map(|vertices| {
            let joints = (0..skel.joint_count)
                .map(|j| {
                    let row = &reg[j * v..(j + 1) * v];
                    let mut p: Vec3<T> = [T::zero(); 3];
                    for (w, x) in row.iter().zip(&vertices) {
                        for c in 0..3 {
                            p[c] += *w * x[c];
                        }
                    }
                    p
                })
                .collect();
            BodyFrame { joints, vertices }
        })
        .collect())
}

pub fn reconstruct<T: Scalar>(
    obs: &ObservationSeq<T>,
    w: &ModelWeights<T>,
    tokenizer: &TokenizerWeights<T>,
    skel: &SkeletonConfig<T>,
    cfg: &InferenceConfig,
) -> Result<ReconstructionResult<T>> {
    cfg.validate()?;
    let f = obs.frames();
    if f < 2 {
        return Err(ModelError::TooShort { needed: 2, got: f });
    }
    if tokenizer.config.tokens != w.config.tokens || tokenizer.config.codebook_size != w.config.codebook_size {
        return Err(ModelError::ShapeMismatch("tokenizer and network disagree on P or K".into()));
    }
    if tokenizer.config.vertices != skel.vertex_count {
        return Err(ModelError::ShapeMismatch("tokenizer and skeleton disagree on V".into()));
    }
    let p = w.config.tokens;
    let total = f * p;
    let cond = condition(obs, w, cfg.fps)?;
    let mut tokens = PoseTokenSeq::new(f, p, vec![0; total]);
    let mut mask = MaskGrid::full(f, p);
    let mut traj = cond.coarse.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let motion_traj = cfg.use_motion_encoder.then_some(&traj);
        let (logits, refined) = decode_step(w, &cond, &tokens, &mask, motion_traj, cfg.fps)?;
        let argmax = logits.argmax_rows();
        for i in 0..total {
            if mask.grid[i] {
                tokens.ids[i] = argmax[i];
            }
        }
        let conf = confidence_of(&logits, &tokens.ids, cfg.temperature);
        let frozen = mask.inverted();
        let quota = cfg.schedule.keep(step, cfg.steps, total);
        let already = frozen.count();
        mask = confidence_remask(&conf, quota.saturating_sub(already), &frozen);
        traj = refined;
        let mean = conf.iter().map(|c| c.as_f64()).sum::<f64>() / total as f64;
        trace.push(StepTrace {
            step,
            kept: total - mask.count(),
            mean_confidence: mean,
            tokens: tokens.ids.clone(),
            kept_mask: mask.grid.iter().map(|m| !m).collect(),
            confidence: conf,
            trajectory: traj.clone(),
        });
    }
    debug_assert_eq!(mask.count(), 0);
    let bodies = decode_bodies(&tokens, tokenizer, skel, cfg.use_smoother)?;
    let world = bodies.iter().zip(&traj.frames).map(|(b, fr)| compose_global(b, fr)).collect::<std::result::Result<Vec<_>, _>>()?;
    let local_joints = PointSeq::from_frames(bodies.iter().map(|b| b.joints.clone()).collect());
    let world_joints = PointSeq::from_frames(world.iter().map(|b| b.joints.clone()).collect());
    let world_vertices = PointSeq::from_frames(world.into_iter().map(|b| b.vertices).collect());
    Ok(ReconstructionResult { trajectory: traj, tokens, world_joints, world_vertices, local_joints, trace })
}
