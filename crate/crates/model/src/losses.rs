//! Trajectory corruption and the weighted multi-term training loss.

use maskmotion_core::autodiff::{Tape, Tensor, Var};
use maskmotion_core::body::SkeletonConfig;
use maskmotion_core::geometry::{Trajectory, TrajectoryFrame};
use maskmotion_core::linalg::{Mat3, PointSeq};
use maskmotion_core::masking::MaskGrid;
use maskmotion_core::scalar::{lit, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::{TrajVars, CANON_TRANS_SCALE};
use crate::tokenizer::{PoseTokenSeq, TokenizerWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_v3d: f64,
    pub w_traj: f64,
    pub w_j3d: f64,
    pub w_vel: f64,
    pub w_j2d: f64,
    pub w_fs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_ce: 1.0, w_v3d: 1.0, w_traj: 1.0, w_j3d: 0.5, w_vel: 0.5, w_j2d: 0.1, w_fs: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_ce, self.w_v3d, self.w_traj, self.w_j3d, self.w_vel, self.w_j2d, self.w_fs];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch(format!("invalid loss weights {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub sigma_trans: f64,
    pub sigma_rot: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { sigma_trans: 0.05, sigma_rot: 0.1 }
    }
}

/// Adds iid Gaussian noise to every translation and rotates every orientation
/// about a uniformly random axis by `|N(0, σ_rot²)|`.
pub fn corrupt_trajectory<T: Scalar>(r: &Trajectory<T>, cfg: CorruptionConfig, seed: u64) -> Result<Trajectory<T>> {
    corrupt_trajectory_with(r, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn corrupt_trajectory_with<T: Scalar, R: Rng + ?Sized>(r: &Trajectory<T>, cfg: CorruptionConfig, rng: &mut R) -> Result<Trajectory<T>> {
    if !(cfg.sigma_trans >= 0.0 && cfg.sigma_rot >= 0.0) {
        return Err(ModelError::ShapeMismatch(format!("invalid corruption {cfg:?}")));
    }
    if cfg.sigma_trans == 0.0 && cfg.sigma_rot == 0.0 {
        return Ok(r.clone());
    }
    let nt = Normal::new(0.0, cfg.sigma_trans.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let nr = Normal::new(0.0, cfg.sigma_rot.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let frames = r
        .frames
        .iter()
        .map(|f| {
            let mut trans = f.trans;
            if cfg.sigma_trans > 0.0 {
                for t in trans.iter_mut() {
                    *t += lit(nt.sample(rng));
                }
            }
            let mut rot = f.orient.to_matrix()?;
            if cfg.sigma_rot > 0.0 {
                let axis: [f64; 3] = UnitSphere.sample(rng);
                let angle = nr.sample(rng).abs();
                rot = Mat3::from_axis_angle(axis.map(lit), lit(angle)) * rot;
            }
            Ok(TrajectoryFrame::from_matrix(&rot, trans)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::new(frames, r.fps))
}

/// Per-frame velocity rows for `F × J` points: central differences inside,
/// one-sided at the ends, times `fps`.
fn velocity_index(frames: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut a = Vec::with_capacity(frames);
    let mut b = Vec::with_capacity(frames);
    let mut s = Vec::with_capacity(frames);
    for t in 0..frames {
        let (lo, hi, span) = if frames < 2 {
            (t, t, 1.0)
        } else if t == 0 {
            (0, 1, 1.0)
        } else if t == frames - 1 {
            (frames - 2, frames - 1, 1.0)
        } else {
            (t - 1, t + 1, 2.0)
        };
        a.push(lo);
        b.push(hi);
        s.push(1.0 / span);
    }
    (a, b, s)
}

/// Mean over contact (frame, foot) pairs of `max(0, ‖horizontal velocity‖ − vel_thresh)`.
pub fn foot_skate_loss<T: Scalar>(
    world_joints: &PointSeq<T>,
    contacts: &[Vec<bool>],
    foot_ids: &[usize],
    vel_thresh: f64,
    fps: f64,
) -> Result<T> {
    let mut tape = Tape::new();
    let flat = Tensor::from_vec(world_joints.frames * world_joints.points, 3, world_joints.data.iter().flatten().copied().collect());
    let x = tape.constant(flat);
    let l = foot_skate_var(&mut tape, x, world_joints.frames, world_joints.points, foot_ids, contacts, vel_thresh, fps)?;
    Ok(tape.value(l).item())
}

/// Tape version of [`foot_skate_loss`] over `(F·J) × 3` joints.
#[allow(clippy::too_many_arguments)]
pub fn foot_skate_var<T: Scalar>(
    tape: &mut Tape<T>,
    joints: Var,
    frames: usize,
    joint_count: usize,
    foot_ids: &[usize],
    contacts: &[Vec<bool>],
    vel_thresh: f64,
    fps: f64,
) -> Result<Var> {
    if contacts.len() != frames || contacts.iter().any(|c| c.len() != foot_ids.len()) {
        return Err(ModelError::ShapeMismatch("contacts must be frames × feet".into()));
    }
    let count = contacts.iter().flatten().filter(|&&c| c).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let (a, b, s) = velocity_index(frames);
    let n = frames * foot_ids.len();
    let rows_a: Vec<usize> = (0..n).map(|i| a[i / foot_ids.len()] * joint_count + foot_ids[i % foot_ids.len()]).collect();
    let rows_b: Vec<usize> = (0..n).map(|i| b[i / foot_ids.len()] * joint_count + foot_ids[i % foot_ids.len()]).collect();
    let pa = tape.gather_rows(joints, &rows_a);
    let pb = tape.gather_rows(joints, &rows_b);
    let d = tape.sub(pb, pa);
    let horizontal: Vec<T> = (0..n)
        .flat_map(|i| {
            let k = lit::<T>(s[i / foot_ids.len()] * fps);
            [k, T::zero(), k]
        })
        .collect();
    let v = tape.mul_const(d, horizontal);
    let speed = tape.row_norm(v);
    let excess = tape.add_scalar(speed, lit(-vel_thresh));
    let hinge = tape.relu(excess);
    let gate: Vec<T> = contacts.iter().flatten().map(|&c| if c { lit(1.0 / count as f64) } else { T::zero() }).collect();
    let gated = tape.mul_const(hinge, gate);
    Ok(tape.sum_all(gated))
}

/// Constant `3V × 3J` matrix mapping flattened vertices to flattened joints.
pub fn vertex_to_joint_matrix<T: Scalar>(skel: &SkeletonConfig<T>) -> Result<Tensor<T>> {
    let reg = skel.joint_regressor()?;
    let (v, j) = (skel.vertex_count, skel.joint_count);
    let mut m = Tensor::zeros(3 * v, 3 * j);
    for jj in 0..j {
        for vv in 0..v {
            for c in 0..3 {
                m.data[(vv * 3 + c) * 3 * j + jj * 3 + c] = reg[jj * v + vv];
            }
        }
    }
    Ok(m)
}

/// Ground truth for one sequence.
#[derive(Clone, Debug)]
pub struct Targets<'a, T> {
    pub tokens: &'a PoseTokenSeq,
    /// `F × 3V` local vertices.
    pub local_vertices: &'a Tensor<T>,
    /// `(F·J) × 3` local joints.
    pub local_joints: &'a Tensor<T>,
    pub traj: &'a Trajectory<T>,
    /// `(F−1) × 9` canonical deltas.
    pub canon: &'a Tensor<T>,
    /// `(F·J) × 3` world joints.
    pub world_joints: &'a Tensor<T>,
    /// Visibility `F × J` gating the 2D term.
    pub visibility: Option<&'a [bool]>,
    /// `F × feet` stance flags.
    pub contacts: Option<&'a [Vec<bool>]>,
}

/// Predictions on the tape; absent heads contribute nothing.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    /// Main token logits and the positions (true = masked) they are scored on.
    pub logits: Option<Var>,
    /// Secondary token logits with their relative weight.
    pub aux_logits: Option<(Var, f64)>,
    pub coarse: Option<TrajVars>,
    pub canon: Option<TrajVars>,
    pub refined: Option<TrajVars>,
}

/// Frozen pieces needed to turn logits into bodies.
pub struct LossContext<'a, T> {
    pub tokenizer: &'a TokenizerWeights<T>,
    /// Tokenizer parameters bound as constants.
    pub tok_vars: &'a [Var],
    /// Smoother parameters, when the smoother is in the loop.
    pub smoother_vars: Option<&'a [Var]>,
    /// `3V × 3J` regressor (constant on the tape).
    pub vert_to_joint: Var,
    pub codebook: Var,
    pub skel: &'a SkeletonConfig<T>,
    pub fps: f64,
    pub vel_thresh: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub v3d: f64,
    pub traj: f64,
    pub j3d: f64,
    pub vel: f64,
    pub j2d: f64,
    pub fs: f64,
}

fn mean_abs<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean_all(d)
}

fn mean_sq<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.square(d);
    tape.mean_all(d)
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, vs: &[Var]) -> Option<Var> {
    let mut it = vs.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, v| tape.add(acc, v)))
}

/// CE averaged over masked positions; unmasked positions carry weight exactly 0.
pub fn masked_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &PoseTokenSeq, mask: &MaskGrid) -> Var {
    let count = mask.count();
    let w = if count == 0 { T::zero() } else { lit::<T>(1.0 / count as f64) };
    let weights: Vec<T> = mask.grid.iter().map(|&m| if m { w } else { T::zero() }).collect();
    tape.cross_entropy(logits, &targets.ids, &weights)
}

/// Softmax-weighted codebook embeddings decoded to `F × 3V` local vertices.
pub fn soft_vertices<T: Scalar>(tape: &mut Tape<T>, ctx: &LossContext<'_, T>, logits: Var, frames: usize) -> Var {
    let probs = tape.softmax_rows(logits);
    let mut q = tape.matmul(probs, ctx.codebook);
    if let Some(sv) = ctx.smoother_vars {
        q = ctx.tokenizer.smooth_var(tape, sv, q, frames);
    }
    ctx.tokenizer.decode_var(tape, ctx.tok_vars, q)
}

fn rot6d_target<T: Scalar>(traj: &Trajectory<T>) -> Tensor<T> {
    Tensor::from_fn(traj.len(), 6, |r, c| traj.frames[r].orient.r[c])
}

fn trans_target<T: Scalar>(traj: &Trajectory<T>) -> Tensor<T> {
    Tensor::from_fn(traj.len(), 3, |r, c| traj.frames[r].trans[c])
}

/// World joints `(F·J) × 3` for one trajectory head.
fn world_joints<T: Scalar>(tape: &mut Tape<T>, local: Var, rot: Var, trans: Var, joints: usize) -> Var {
    tape.rigid_apply(local, rot, trans, joints)
}

/// Weighted sum of all applicable terms for one sequence.
pub fn compute_losses<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &LossContext<'_, T>,
    preds: &Predictions,
    targets: &Targets<'_, T>,
    ce_mask: &MaskGrid,
    lw: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    lw.validate()?;
    let f = targets.traj.len();
    let j = ctx.skel.joint_count;
    if targets.tokens.frames != f || targets.local_vertices.rows != f || targets.world_joints.rows != f * j {
        return Err(ModelError::ShapeMismatch("targets disagree on frame count".into()));
    }
    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();
    let mut push = |tape: &mut Tape<T>, parts: &[Var], w: f64, slot: &mut f64| {
        if let Some(v) = sum_vars(tape, parts) {
            *slot = tape.value(v).item().as_f64();
            if w > 0.0 {
                let s = tape.scale(v, lit(w));
                terms.push(s);
            }
        }
    };

    let mut ce = Vec::new();
    if let Some(l) = preds.logits {
        ce.push(masked_cross_entropy(tape, l, targets.tokens, ce_mask));
    }
    if let Some((l, w)) = preds.aux_logits {
        let c = masked_cross_entropy(tape, l, targets.tokens, ce_mask);
        ce.push(tape.scale(c, lit(w)));
    }
    push(tape, &ce, lw.w_ce, &mut breakdown.ce);

    let body_logits = preds.logits.or(preds.aux_logits.map(|a| a.0));
    let mut vel_parts = Vec::new();
    let gt_vertices = tape.constant(targets.local_vertices.clone());
    let local_joints = match body_logits {
        Some(l) => {
            let verts = soft_vertices(tape, ctx, l, f);
            let v3d = mean_abs(tape, verts, gt_vertices);
            let mut parts = vec![v3d];
            if let Some(sv) = ctx.smoother_vars {
                // the smoother also learns to map hard ground-truth codes to the clean pose
                let hard = tape.gather_rows(ctx.codebook, &targets.tokens.ids);
                let sm = ctx.tokenizer.smooth_var(tape, sv, hard, f);
                let dv = ctx.tokenizer.decode_var(tape, ctx.tok_vars, sm);
                parts.push(mean_abs(tape, dv, gt_vertices));
                if f >= 2 {
                    // and to keep consecutive frames consistent
                    let err = tape.sub(dv, gt_vertices);
                    let next = tape.gather_rows(err, &(1..f).collect::<Vec<_>>());
                    let prev = tape.gather_rows(err, &(0..f - 1).collect::<Vec<_>>());
                    let d = tape.sub(next, prev);
                    let d = tape.scale(d, lit(ctx.fps));
                    let d = tape.abs(d);
                    vel_parts.push(tape.mean_all(d));
                }
            }
            push(tape, &parts, lw.w_v3d, &mut breakdown.v3d);
            let flat = tape.matmul(verts, ctx.vert_to_joint);
            tape.reshape(flat, f * j, 3)
        }
        None => tape.constant(targets.local_joints.clone()),
    };

    let gt6 = tape.constant(rot6d_target(targets.traj));
    let gtt = tape.constant(trans_target(targets.traj));
    let mut traj_parts = Vec::new();
    for tv in [preds.coarse, preds.refined].into_iter().flatten() {
        traj_parts.push(mean_sq(tape, tv.rot6d, gt6));
        traj_parts.push(mean_abs(tape, tv.trans, gtt));
    }
    if let Some(tv) = preds.canon {
        let c6 = tape.constant(Tensor::from_fn(f - 1, 6, |r, c| targets.canon.at(r, c)));
        let ct = tape.constant(Tensor::from_fn(f - 1, 3, |r, c| targets.canon.at(r, 6 + c) * lit(CANON_TRANS_SCALE)));
        traj_parts.push(mean_sq(tape, tv.rot6d, c6));
        let scaled = tape.scale(tv.trans, lit(CANON_TRANS_SCALE));
        traj_parts.push(mean_abs(tape, scaled, ct));
    }
    push(tape, &traj_parts, lw.w_traj, &mut breakdown.traj);

    // world joints from every available trajectory head
    let mut worlds = Vec::new();
    for tv in [preds.coarse, preds.refined].into_iter().flatten() {
        worlds.push(world_joints(tape, local_joints, tv.rot, tv.trans, j));
    }
    if let Some(tv) = preds.canon {
        let a = &targets.traj.frames[0];
        let anchor = a.orient.to_matrix()?;
        let integ = tape.integrate_canonical(tv.rot, tv.trans, anchor, a.trans);
        let rot = tape.slice_cols(integ, 0, 9);
        let trans = tape.slice_cols(integ, 9, 12);
        worlds.push(world_joints(tape, local_joints, rot, trans, j));
    }
    if !worlds.is_empty() {
        let gtw = tape.constant(targets.world_joints.clone());
        let parts: Vec<Var> = worlds.iter().map(|&w| mean_abs(tape, w, gtw)).collect();
        push(tape, &parts, lw.w_j3d, &mut breakdown.j3d);
        if f >= 2 && lw.w_vel > 0.0 {
            let a: Vec<usize> = (0..(f - 1) * j).collect();
            let b: Vec<usize> = (j..f * j).collect();
            let gv = Tensor::from_fn((f - 1) * j, 3, |r, c| (targets.world_joints.at(r + j, c) - targets.world_joints.at(r, c)) * lit(ctx.fps));
            let gv = tape.constant(gv);
            for &w in &worlds {
                let pa = tape.gather_rows(w, &a);
                let pb = tape.gather_rows(w, &b);
                let d = tape.sub(pb, pa);
                let v = tape.scale(d, lit(ctx.fps));
                vel_parts.push(mean_abs(tape, v, gv));
            }
        }
        if let Some(vis) = targets.visibility {
            let visible = vis.iter().filter(|&&v| v).count();
            if visible > 0 {
                let gt2d = Tensor::from_fn(f * j, 2, |r, c| {
                    let p = targets.world_joints.row(r);
                    p[c] / p[2].max(lit(1e-3))
                });
                let gt2d = tape.constant(gt2d);
                let gate: Vec<T> = vis.iter().flat_map(|&v| {
                    let g = if v { lit::<T>(1.0 / (2 * visible) as f64) } else { T::zero() };
                    [g, g]
                }).collect();
                let parts: Vec<Var> = worlds
                    .iter()
                    .map(|&w| {
                        // normalized image coordinates: projection with unit focal
                        let uv = tape.project(w, T::one(), [T::zero(), T::zero()]);
                        let d = tape.sub(uv, gt2d);
                        let d = tape.abs(d);
                        let d = tape.mul_const(d, gate.clone());
                        tape.sum_all(d)
                    })
                    .collect();
                push(tape, &parts, lw.w_j2d, &mut breakdown.j2d);
            }
        }
        if let (Some(contacts), Some(tv)) = (targets.contacts, preds.refined.or(preds.coarse)) {
            let w = world_joints(tape, local_joints, tv.rot, tv.trans, j);
            let fs = foot_skate_var(tape, w, f, j, &ctx.skel.foot_joint_ids, contacts, ctx.vel_thresh, ctx.fps)?;
            push(tape, &[fs], lw.w_fs, &mut breakdown.fs);
        }
    }

    push(tape, &vel_parts, lw.w_vel, &mut breakdown.vel);

    let total = match sum_vars(tape, &terms) {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskmotion_core::geometry::Rotation6D;

    fn static_seq(frames: usize, joints: usize, foot: [f64; 3]) -> PointSeq<f64> {
        PointSeq { frames, points: joints, data: (0..frames * joints).map(|_| foot).collect() }
    }

    #[test]
    fn skate_hinge_values() {
        let still = static_seq(10, 2, [0.1, 0.0, 0.3]);
        let contacts = vec![vec![true, true]; 10];
        assert_eq!(foot_skate_loss(&still, &contacts, &[0, 1], 0.15, 30.0).unwrap(), 0.0);
        // foot 0 slides along x at 1 m/s
        let sliding = still.map(|t, j, p| if j == 0 { [p[0] + t as f64 / 30.0, p[1], p[2]] } else { p });
        let only0 = vec![vec![true, false]; 10];
        let l = foot_skate_loss(&sliding, &only0, &[0, 1], 0.15, 30.0).unwrap();
        assert!((l - 0.85).abs() < 1e-9, "{l}");
        // fast airborne foot is ignored
        let none = vec![vec![false, false]; 10];
        assert_eq!(foot_skate_loss(&sliding, &none, &[0, 1], 0.15, 30.0).unwrap(), 0.0);
        // vertical motion does not count as sliding
        let lifting = still.map(|t, _, p| [p[0], p[1] + t as f64, p[2]]);
        assert_eq!(foot_skate_loss(&lifting, &contacts, &[0, 1], 0.15, 30.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_corruption_is_identity() {
        let frames = (0..5)
            .map(|i| TrajectoryFrame::from_matrix(&Mat3::rot_y(0.1 * i as f64), [i as f64, 0.9, 3.0]).unwrap())
            .collect();
        let t = Trajectory::new(frames, 30.0);
        let c = corrupt_trajectory(&t, CorruptionConfig { sigma_trans: 0.0, sigma_rot: 0.0 }, 3).unwrap();
        assert_eq!(c, t);
        let c = corrupt_trajectory(&t, CorruptionConfig::default(), 3).unwrap();
        assert_eq!(c, corrupt_trajectory(&t, CorruptionConfig::default(), 3).unwrap());
        for f in &c.frames {
            assert!((f.orient.to_matrix().unwrap().det() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_noise_has_requested_std() {
        let frames = vec![TrajectoryFrame { orient: Rotation6D::identity(), trans: [0.0; 3] }; 100_000];
        let t = Trajectory::new(frames, 30.0);
        let c = corrupt_trajectory(&t, CorruptionConfig { sigma_trans: 0.05, sigma_rot: 0.0 }, 11).unwrap();
        for axis in 0..3 {
            let xs: Vec<f64> = c.frames.iter().map(|f| f.trans[axis]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
            assert!((std - 0.05).abs() / 0.05 < 0.02, "axis {axis}: {std}");
        }
    }

    #[test]
    fn unmasked_positions_carry_no_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_fn(6, 4, |r, c| ((r * 3 + c) % 5) as f64 * 0.3));
        let targets = PoseTokenSeq::new(2, 3, vec![0, 1, 2, 3, 0, 1]);
        let mut mask = MaskGrid::empty(2, 3);
        mask.set(0, 1, true);
        mask.set(1, 2, true);
        let ce = masked_cross_entropy(&mut tape, logits, &targets, &mask);
        let g = tape.backward(ce);
        let gl = g.get(logits).unwrap();
        for r in 0..6 {
            let masked = mask.grid[r];
            assert_eq!(gl.row(r).iter().all(|&x| x == 0.0), !masked, "row {r}");
        }
        let empty = masked_cross_entropy(&mut tape, logits, &targets, &MaskGrid::empty(2, 3));
        assert_eq!(tape.value(empty).item(), 0.0);
    }
}
