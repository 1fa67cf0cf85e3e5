//! Conditioning encoder, trajectory-aware motion encoder and cross-modal
//! decoder, all built from dual-stream (spatial then temporal) attention blocks.

use maskmotion_core::autodiff::{AttentionSpec, ParamId, ParamStore, Tape, Tensor, Var};
use maskmotion_core::geometry::{
    CameraIntrinsics, CanonicalTrajectory, Trajectory, TrajectoryFrame,
};
use maskmotion_core::linalg::Mat3;
use maskmotion_core::masking::MaskGrid;
use maskmotion_core::scalar::{lit, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::tokenizer::PoseTokenSeq;

/// Canonical translations are multiplied by this before entering the network.
pub const CANON_TRANS_SCALE: f64 = 10.0;
/// Absolute translations are multiplied by this before entering the decoder.
pub const ABS_TRANS_SCALE: f64 = 0.2;
const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Temporal attention window in frames.
    pub window: usize,
    /// Pose tokens per frame (P).
    pub tokens: usize,
    /// Codebook size (K).
    pub codebook_size: usize,
    /// Width of one observation feature token.
    pub obs_dim: usize,
    /// Observation feature tokens per frame.
    pub obs_tokens: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            width: 128,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            window: 60,
            tokens: 8,
            codebook_size: 512,
            obs_dim: 3 * maskmotion_core::body::DEFAULT_JOINTS,
            obs_tokens: 1,
        }
    }
}

impl NetworkConfig {
    /// Conditioning rows per frame: feature tokens plus the bounding-box token.
    pub fn cond_rows(&self) -> usize {
        self.obs_tokens + 1
    }

    pub fn motion_rows(&self) -> usize {
        self.tokens + 1
    }

    pub fn decoder_rows(&self) -> usize {
        self.tokens + 1 + self.cond_rows() + 1
    }

    pub fn mask_token(&self) -> usize {
        self.codebook_size
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.heads > 0
            && self.width % self.heads == 0
            && (self.width / self.heads) % 2 == 0
            && self.window >= 1
            && self.tokens > 0
            && self.codebook_size >= 2
            && self.obs_dim > 0
            && self.obs_tokens > 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch(format!("invalid network config {self:?}")))
        }
    }
}

/// Per-frame observations: feature tokens, pixel bounding boxes, intrinsics and
/// joint visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeq<T> {
    /// `(F·N_obs) × D_obs` feature rows, frame-major.
    pub features: Tensor<T>,
    /// `(cx, cy, size)` in pixels.
    pub bbox: Vec<[T; 3]>,
    pub cam: CameraIntrinsics<T>,
    /// `F × J`, true = visible.
    pub visibility: Vec<bool>,
    pub joints: usize,
}

impl<T: Scalar> ObservationSeq<T> {
    pub fn frames(&self) -> usize {
        self.bbox.len()
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        let f = self.frames();
        if self.features.rows != f * cfg.obs_tokens || self.features.cols != cfg.obs_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "features {}×{} for {f} frames of {}×{}",
                self.features.rows, self.features.cols, cfg.obs_tokens, cfg.obs_dim
            )));
        }
        if self.visibility.len() != f * self.joints {
            return Err(ModelError::ShapeMismatch(format!("visibility has {} entries", self.visibility.len())));
        }
        if self.bbox.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ModelError::ShapeMismatch("non-finite bounding box".into()));
        }
        self.cam.validate()?;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ObservationSeq<U> {
        ObservationSeq {
            features: self.features.cast(),
            bbox: self.bbox.iter().map(|b| b.map(|x| lit::<U>(x.as_f64()))).collect(),
            cam: self.cam.cast(),
            visibility: self.visibility.clone(),
            joints: self.joints,
        }
    }

    /// Keeps frames `range` (all fields).
    pub fn slice(&self, range: std::ops::Range<usize>, obs_tokens: usize) -> Self {
        let rows = range.start * obs_tokens..range.end * obs_tokens;
        ObservationSeq {
            features: Tensor::from_vec(
                rows.len(),
                self.features.cols,
                self.features.data[rows.start * self.features.cols..rows.end * self.features.cols].to_vec(),
            ),
            bbox: self.bbox[range.clone()].to_vec(),
            cam: self.cam,
            visibility: self.visibility[range.start * self.joints..range.end * self.joints].to_vec(),
            joints: self.joints,
        }
    }
}

/// `((cx − ppx)/f, (cy − ppy)/f, size/f)`.
pub fn bbox_feature<T: Scalar>(bbox: [T; 3], cam: &CameraIntrinsics<T>) -> [T; 3] {
    let f = cam.focal;
    [(bbox[0] - cam.principal_point[0]) / f, (bbox[1] - cam.principal_point[1]) / f, bbox[2] / f]
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln_s: LayerNorm,
    qkv_s: Linear,
    out_s: Linear,
    ln_t: LayerNorm,
    qkv_t: Linear,
    out_t: Linear,
    ln_f: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
struct Stack {
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

impl Stack {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        let out_gain = 1.0 / (2.0 * cfg.depth.max(1) as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = format!("{name}.b{i}");
                Block {
                    ln_s: LayerNorm::new(store, &format!("{n}.ln_s"), d),
                    qkv_s: Linear::new(store, &format!("{n}.qkv_s"), d, 3 * d, 1.0, rng),
                    out_s: Linear::new(store, &format!("{n}.out_s"), d, d, out_gain, rng),
                    ln_t: LayerNorm::new(store, &format!("{n}.ln_t"), d),
                    qkv_t: Linear::new(store, &format!("{n}.qkv_t"), d, 3 * d, 1.0, rng),
                    out_t: Linear::new(store, &format!("{n}.out_t"), d, d, out_gain, rng),
                    ln_f: LayerNorm::new(store, &format!("{n}.ln_f"), d),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), (d, cfg.ffn_mult * d, d), out_gain, rng),
                }
            })
            .collect();
        Stack { blocks, ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d) }
    }
}

/// Row layout of one stack invocation: `frames × rows` rows, frame-major.
#[derive(Clone, Debug)]
pub struct Layout {
    pub frames: usize,
    pub rows: usize,
    pub positions: Vec<i64>,
    pub temporal: bool,
}

impl Layout {
    pub fn new(frames: usize, rows: usize, start: i64, temporal: bool) -> Self {
        Layout { frames, rows, positions: (0..frames as i64).map(|t| t + start).collect(), temporal }
    }
}

fn attend<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], qkv: Linear, out: Linear, h: Var, spec: AttentionSpec, d: usize) -> Var {
    let qkv = qkv.forward(tape, vars, h);
    let q = tape.slice_cols(qkv, 0, d);
    let k = tape.slice_cols(qkv, d, 2 * d);
    let v = tape.slice_cols(qkv, 2 * d, 3 * d);
    let a = tape.attention(q, k, v, spec);
    out.forward(tape, vars, a)
}

fn stack_forward<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], stack: &Stack, cfg: &NetworkConfig, mut x: Var, layout: &Layout) -> Var {
    let d = cfg.width;
    let (f, r) = (layout.frames, layout.rows);
    for b in &stack.blocks {
        let h = b.ln_s.forward(tape, vars, x);
        let a = attend(tape, vars, b.qkv_s, b.out_s, h, AttentionSpec::new(f, r, r, 1, cfg.heads), d);
        x = tape.add(x, a);
        if layout.temporal {
            let h = b.ln_t.forward(tape, vars, x);
            let spec = AttentionSpec::new(r, f, 1, r, cfg.heads).with_rotary(layout.positions.clone()).with_window(cfg.window);
            let a = attend(tape, vars, b.qkv_t, b.out_t, h, spec, d);
            x = tape.add(x, a);
        }
        let h = b.ln_f.forward(tape, vars, x);
        let m = b.ffn.forward(tape, vars, h);
        x = tape.add(x, m);
    }
    stack.ln_out.forward(tape, vars, x)
}

/// Standalone rotary, windowed multi-head attention over `F × D` rows.
pub fn rotary_temporal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    positions: &[i64],
    window: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    if q.shape() != k.shape() || q.shape() != v.shape() || positions.len() != q.rows || window == 0 {
        return Err(ModelError::ShapeMismatch("rotary attention inputs disagree".into()));
    }
    if heads == 0 || q.cols % heads != 0 || (q.cols / heads) % 2 != 0 {
        return Err(ModelError::ShapeMismatch(format!("width {} with {heads} heads", q.cols)));
    }
    let mut tape = Tape::new();
    let (a, b, c) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let spec = AttentionSpec::new(1, q.rows, q.rows, 1, heads).with_rotary(positions.to_vec()).with_window(window);
    let out = tape.attention(a, b, c, spec);
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug)]
struct CondIds {
    obs_in: Linear,
    bbox_in: Linear,
    row_type: ParamId,
    stack: Stack,
    head: Linear,
}

#[derive(Clone, Debug)]
struct MotionIds {
    token_emb: ParamId,
    traj_in: Linear,
    row_type: ParamId,
    stack: Stack,
    logits_ln: LayerNorm,
    logits: Linear,
    traj_head: Linear,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    absent: ParamId,
    yr_in: Linear,
    row_type: ParamId,
    stack: Stack,
    logits_ln: LayerNorm,
    logits: Linear,
    traj_head: Linear,
}

/// All network parameters in one store, with per-component name prefixes
/// `cond.`, `motion.` and `dec.`.
#[derive(Clone, Debug)]
pub struct ModelWeights<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    cond: CondIds,
    motion: MotionIds,
    dec: DecoderIds,
}

/// Trajectory on the tape: raw 6D rows, orthonormalized rotations, translations.
#[derive(Clone, Copy, Debug)]
pub struct TrajVars {
    pub rot6d: Var,
    pub rot: Var,
    pub trans: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// `(F·N_c) × D`.
    pub latent: Var,
    pub coarse: TrajVars,
}

#[derive(Clone, Copy, Debug)]
pub struct MotionVars {
    /// `(F·P) × K`.
    pub logits: Var,
    /// Denoised canonical deltas for the first `F − 1` frames.
    pub canon: TrajVars,
    /// `(F·P) × D`.
    pub pose_feats: Var,
    /// `F × D`.
    pub traj_feats: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub logits: Var,
    pub refined: TrajVars,
}

fn identity_rows<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(n, 6, |_, c| lit(IDENTITY_6D[c]))
}

/// `[6D − identity, scale·translation]` rows for a trajectory given as 6D + translation.
fn traj_input<T: Scalar>(rot6d: &[[T; 6]], trans: &[[T; 3]], scale: f64, rows: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(rows, 9);
    for (r, (o, p)) in rot6d.iter().zip(trans).enumerate() {
        let row = t.row_mut(r);
        for c in 0..6 {
            row[c] = o[c] - lit(IDENTITY_6D[c]);
        }
        for c in 0..3 {
            row[6 + c] = p[c] * lit(scale);
        }
    }
    t
}

fn frame_rot6d<T: Scalar>(f: &TrajectoryFrame<T>) -> [T; 6] {
    f.orient.r
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.width;
        let emb_std = 1.0 / (d as f64).sqrt();
        let cond = CondIds {
            obs_in: Linear::new(&mut p, "cond.obs_in", config.obs_dim, d, 1.0, &mut rng),
            bbox_in: Linear::new(&mut p, "cond.bbox_in", 3, d, 1.0, &mut rng),
            row_type: p.add_normal("cond.row_type", config.cond_rows(), d, emb_std, &mut rng),
            stack: Stack::new(&mut p, "cond", &config, &mut rng),
            head: Linear::new(&mut p, "cond.head", d, 9, 0.0, &mut rng),
        };
        {
            let b = p.get_mut(cond.head.b);
            for c in 0..6 {
                b.data[c] = lit(IDENTITY_6D[c]);
            }
        }
        let motion = MotionIds {
            token_emb: p.add_normal("motion.token_emb", config.codebook_size + 1, d, 1.0, &mut rng),
            traj_in: Linear::new(&mut p, "motion.traj_in", 9, d, 1.0, &mut rng),
            row_type: p.add_normal("motion.row_type", config.motion_rows(), d, emb_std, &mut rng),
            stack: Stack::new(&mut p, "motion", &config, &mut rng),
            logits_ln: LayerNorm::new(&mut p, "motion.logits_ln", d),
            logits: Linear::new(&mut p, "motion.logits", d, config.codebook_size, 1.0, &mut rng),
            traj_head: Linear::new(&mut p, "motion.traj_head", d, 9, 0.0, &mut rng),
        };
        let dec = DecoderIds {
            absent: p.add_normal("dec.absent", 2, d, 1.0, &mut rng),
            yr_in: Linear::new(&mut p, "dec.yr_in", 9, d, 1.0, &mut rng),
            row_type: p.add_normal("dec.row_type", config.decoder_rows(), d, emb_std, &mut rng),
            stack: Stack::new(&mut p, "dec", &config, &mut rng),
            logits_ln: LayerNorm::new(&mut p, "dec.logits_ln", d),
            logits: Linear::new(&mut p, "dec.logits", d, config.codebook_size, 1.0, &mut rng),
            traj_head: Linear::new(&mut p, "dec.traj_head", d, 9, 0.0, &mut rng),
        };
        Ok(ModelWeights { config, params: p, cond, motion, dec })
    }

    /// True for parameters whose name starts with `prefix`.
    pub fn component_mask(&self, prefixes: &[&str]) -> Vec<bool> {
        self.params.names().iter().map(|n| prefixes.iter().any(|p| n.starts_with(p))).collect()
    }

    fn type_rows(&self, tape: &mut Tape<T>, table: Var, frames: usize, rows: usize) -> Var {
        let idx: Vec<usize> = (0..frames * rows).map(|i| i % rows).collect();
        tape.gather_rows(table, &idx)
    }

    fn traj_from_raw(&self, tape: &mut Tape<T>, rot6d: Var, trans: Var) -> TrajVars {
        let rot = tape.rot6d_to_mat(rot6d);
        TrajVars { rot6d, rot, trans }
    }

    /// Per-frame encoder over observation tokens; no information crosses frames.
    pub fn conditioning_vars(&self, tape: &mut Tape<T>, vars: &[Var], obs: &ObservationSeq<T>) -> Result<CondVars> {
        obs.validate(&self.config)?;
        let f = obs.frames();
        let nobs = self.config.obs_tokens;
        let nc = self.config.cond_rows();
        let feats = tape.constant(obs.features.clone());
        let feats = self.cond.obs_in.forward(tape, vars, feats);
        let bf = Tensor::from_fn(f, 3, |r, c| bbox_feature(obs.bbox[r], &obs.cam)[c]);
        let bf = tape.constant(bf);
        let bf = self.cond.bbox_in.forward(tape, vars, bf);
        let index = (0..f * nc)
            .map(|i| {
                let (fr, r) = (i / nc, i % nc);
                if r < nobs {
                    (0, (fr * nobs + r) as u32)
                } else {
                    (1, fr as u32)
                }
            })
            .collect();
        let x = tape.gather(&[feats, bf], index);
        let types = self.type_rows(tape, vars[self.cond.row_type.0], f, nc);
        let x = tape.add(x, types);
        let layout = Layout::new(f, nc, 0, false);
        let latent = stack_forward(tape, vars, &self.cond.stack, &self.config, x, &layout);
        let bbox_rows: Vec<usize> = (0..f).map(|fr| fr * nc + nobs).collect();
        let h = tape.gather_rows(latent, &bbox_rows);
        let out = self.cond.head.forward(tape, vars, h);
        let rot6d = tape.slice_cols(out, 0, 6);
        let weak = tape.slice_cols(out, 6, 9);
        let trans = tape.weak_to_full(weak, obs.bbox.clone(), obs.cam.focal, obs.cam.principal_point);
        let coarse = self.traj_from_raw(tape, rot6d, trans);
        Ok(CondVars { latent, coarse })
    }

    /// Motion encoder over masked tokens plus the canonical trajectory
    /// (`(F−1) × 9` rows of 6D and translation).
    pub fn motion_vars(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &PoseTokenSeq,
        mask: &MaskGrid,
        canon: &Tensor<T>,
        start: i64,
    ) -> Result<MotionVars> {
        let (f, p, k) = (tokens.frames, self.config.tokens, self.config.codebook_size);
        if tokens.tokens != p || mask.frames != f || mask.tokens != p {
            return Err(ModelError::ShapeMismatch(format!(
                "tokens {}×{}, mask {}×{}, expected P = {p}",
                tokens.frames, tokens.tokens, mask.frames, mask.tokens
            )));
        }
        tokens.validate(k)?;
        if f < 2 || canon.rows != f - 1 || canon.cols != 9 {
            return Err(ModelError::ShapeMismatch(format!("canonical trajectory {}×{} for {f} frames", canon.rows, canon.cols)));
        }
        let ids: Vec<usize> = tokens.ids.iter().zip(&mask.grid).map(|(&id, &m)| if m { k } else { id }).collect();
        let pose = tape.gather_rows(vars[self.motion.token_emb.0], &ids);
        let rot6d: Vec<[T; 6]> = (0..f - 1).map(|r| std::array::from_fn(|c| canon.at(r, c))).collect();
        let trans: Vec<[T; 3]> = (0..f - 1).map(|r| std::array::from_fn(|c| canon.at(r, 6 + c))).collect();
        let tin = tape.constant(traj_input(&rot6d, &trans, CANON_TRANS_SCALE, f));
        let traj = self.motion.traj_in.forward(tape, vars, tin);
        let r = self.config.motion_rows();
        let index = (0..f * r)
            .map(|i| {
                let (fr, row) = (i / r, i % r);
                if row < p {
                    (0, (fr * p + row) as u32)
                } else {
                    (1, fr as u32)
                }
            })
            .collect();
        let x = tape.gather(&[pose, traj], index);
        let types = self.type_rows(tape, vars[self.motion.row_type.0], f, r);
        let x = tape.add(x, types);
        let layout = Layout::new(f, r, start, true);
        let h = stack_forward(tape, vars, &self.motion.stack, &self.config, x, &layout);
        let pose_rows: Vec<usize> = (0..f * p).map(|i| (i / p) * r + i % p).collect();
        let pose_feats = tape.gather_rows(h, &pose_rows);
        let traj_feats = tape.gather_rows(h, &(0..f).map(|fr| fr * r + p).collect::<Vec<_>>());
        let ln = self.motion.logits_ln.forward(tape, vars, pose_feats);
        let logits = self.motion.logits.forward(tape, vars, ln);
        let head_rows = tape.gather_rows(traj_feats, &(0..f - 1).collect::<Vec<_>>());
        let delta = self.motion.traj_head.forward(tape, vars, head_rows);
        let canon_in = tape.constant(canon.clone());
        let d6 = tape.slice_cols(delta, 0, 6);
        let dt = tape.slice_cols(delta, 6, 9);
        let dt = tape.scale(dt, lit(1.0 / CANON_TRANS_SCALE));
        let c6 = tape.slice_cols(canon_in, 0, 6);
        let ct = tape.slice_cols(canon_in, 6, 9);
        let rot6d = tape.add(c6, d6);
        let trans = tape.add(ct, dt);
        let canon = self.traj_from_raw(tape, rot6d, trans);
        Ok(MotionVars { logits, canon, pose_feats, traj_feats })
    }

    /// Integrates a canonical trajectory head from `anchor` into world frames.
    pub fn integrated_traj(&self, tape: &mut Tape<T>, canon: &TrajVars, anchor: &TrajectoryFrame<T>) -> Result<TrajVars> {
        let a = anchor.orient.to_matrix()?;
        let integ = tape.integrate_canonical(canon.rot, canon.trans, a, anchor.trans);
        let rot = tape.slice_cols(integ, 0, 9);
        let trans = tape.slice_cols(integ, 9, 12);
        // first two matrix columns
        let pick = Tensor::from_fn(9, 6, |r, c| if r == [0, 3, 6, 1, 4, 7][c] { T::one() } else { T::zero() });
        let pick = tape.constant(pick);
        let rot6d = tape.matmul(rot, pick);
        Ok(TrajVars { rot6d, rot, trans })
    }

    /// Cross-modal decoder. `motion = None` replaces the motion rows with the
    /// learned absent embeddings; `temporal = false` makes it strictly per-frame.
    /// The refined trajectory is a residual over `base`, or over the coarse
    /// trajectory when `base` is None.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_vars(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        motion: Option<(Var, Var)>,
        base: Option<&TrajVars>,
        cond: &CondVars,
        temporal: bool,
        start: i64,
    ) -> Result<DecoderVars> {
        let p = self.config.tokens;
        let nc = self.config.cond_rows();
        let f = tape.shape(cond.coarse.trans).0;
        if tape.shape(cond.latent).0 != f * nc {
            return Err(ModelError::ShapeMismatch("conditioning latent rows".into()));
        }
        let (pose, traj) = match motion {
            Some((pose, traj)) => {
                if tape.shape(pose).0 != f * p || tape.shape(traj).0 != f {
                    return Err(ModelError::ShapeMismatch("motion features disagree with conditioning frames".into()));
                }
                (pose, traj)
            }
            None => {
                let absent = vars[self.dec.absent.0];
                (tape.gather_rows(absent, &vec![0; f * p]), tape.gather_rows(absent, &vec![1; f]))
            }
        };
        let ct = tape.scale(cond.coarse.trans, lit(ABS_TRANS_SCALE));
        let id6 = tape.constant(identity_rows(f));
        let c6 = tape.sub(cond.coarse.rot6d, id6);
        let yr = tape.concat_cols(&[c6, ct]);
        let yr = self.dec.yr_in.forward(tape, vars, yr);
        let r = self.config.decoder_rows();
        let index = (0..f * r)
            .map(|i| {
                let (fr, row) = (i / r, i % r);
                if row < p {
                    (0, (fr * p + row) as u32)
                } else if row == p {
                    (1, fr as u32)
                } else if row < p + 1 + nc {
                    (2, (fr * nc + row - p - 1) as u32)
                } else {
                    (3, fr as u32)
                }
            })
            .collect();
        let x = tape.gather(&[pose, traj, cond.latent, yr], index);
        let types = self.type_rows(tape, vars[self.dec.row_type.0], f, r);
        let x = tape.add(x, types);
        let layout = Layout::new(f, r, start, temporal);
        let h = stack_forward(tape, vars, &self.dec.stack, &self.config, x, &layout);
        let pose_rows: Vec<usize> = (0..f * p).map(|i| (i / p) * r + i % p).collect();
        let ph = tape.gather_rows(h, &pose_rows);
        let ln = self.dec.logits_ln.forward(tape, vars, ph);
        let logits = self.dec.logits.forward(tape, vars, ln);
        let yh = tape.gather_rows(h, &(0..f).map(|fr| fr * r + r - 1).collect::<Vec<_>>());
        let delta = self.dec.traj_head.forward(tape, vars, yh);
        let d6 = tape.slice_cols(delta, 0, 6);
        let dt = tape.slice_cols(delta, 6, 9);
        let base = base.unwrap_or(&cond.coarse);
        if tape.shape(base.trans).0 != f {
            return Err(ModelError::ShapeMismatch("base trajectory frames".into()));
        }
        let rot6d = tape.add(base.rot6d, d6);
        let trans = tape.add(base.trans, dt);
        let refined = self.traj_from_raw(tape, rot6d, trans);
        Ok(DecoderVars { logits, refined })
    }
}

/// Canonical trajectory as `(F−1) × 9` rows of 6D and translation.
pub fn canonical_tensor<T: Scalar>(canon: &CanonicalTrajectory<T>) -> Tensor<T> {
    let mut t = Tensor::zeros(canon.deltas.len(), 9);
    for (r, d) in canon.deltas.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&d.to_array());
    }
    t
}

/// Reads a trajectory back from tape values (rotations re-derived from the
/// orthonormalized matrices).
pub fn trajectory_from_vars<T: Scalar>(tape: &Tape<T>, tv: &TrajVars, fps: T) -> Result<Trajectory<T>> {
    let (rot, trans) = (tape.value(tv.rot), tape.value(tv.trans));
    let frames = (0..rot.rows)
        .map(|r| {
            let m = rot.row(r);
            let m = Mat3([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]]);
            TrajectoryFrame::from_matrix(&m, [trans.at(r, 0), trans.at(r, 1), trans.at(r, 2)]).map_err(ModelError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::new(frames, fps))
}

/// Ground-truth style input for the decoder's coarse-trajectory row.
pub fn trajectory_rows<T: Scalar>(traj: &Trajectory<T>) -> (Tensor<T>, Tensor<T>) {
    let f = traj.len();
    let r6 = Tensor::from_fn(f, 6, |r, c| frame_rot6d(&traj.frames[r])[c]);
    let t = Tensor::from_fn(f, 3, |r, c| traj.frames[r].trans[c]);
    (r6, t)
}

#[derive(Clone, Debug)]
pub struct ConditioningOutput<T> {
    /// `(F·N_c) × D`.
    pub latent: Tensor<T>,
    pub coarse_traj: Trajectory<T>,
}

#[derive(Clone, Debug)]
pub struct MotionEncoderOutput<T> {
    /// `(F·P) × K`.
    pub token_logits: Tensor<T>,
    /// `(F−1) × 9`: 6D then translation.
    pub denoised_canonical_traj: Tensor<T>,
    pub pose_features: Tensor<T>,
    pub traj_features: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput<T> {
    pub token_logits: Tensor<T>,
    pub refined_traj: Trajectory<T>,
}

fn raw_traj_tensor<T: Scalar>(tape: &Tape<T>, tv: &TrajVars) -> Tensor<T> {
    let (r6, t) = (tape.value(tv.rot6d), tape.value(tv.trans));
    let rot = tape.value(tv.rot);
    Tensor::from_fn(r6.rows, 9, |r, c| {
        if c < 6 {
            // orthonormalized columns 0 and 1
            let (col, row) = (c / 3, c % 3);
            rot.at(r, row * 3 + col)
        } else {
            t.at(r, c - 6)
        }
    })
}

pub fn conditioning_encode<T: Scalar>(obs: &ObservationSeq<T>, w: &ModelWeights<T>, fps: T) -> Result<ConditioningOutput<T>> {
    let mut tape = Tape::new();
    let vars = w.params.bind(&mut tape, false);
    let c = w.conditioning_vars(&mut tape, &vars, obs)?;
    Ok(ConditioningOutput { latent: tape.value(c.latent).clone(), coarse_traj: trajectory_from_vars(&tape, &c.coarse, fps)? })
}

pub fn motion_encode<T: Scalar>(
    tokens: &PoseTokenSeq,
    mask: &MaskGrid,
    canon: &CanonicalTrajectory<T>,
    w: &ModelWeights<T>,
) -> Result<MotionEncoderOutput<T>> {
    let mut tape = Tape::new();
    let vars = w.params.bind(&mut tape, false);
    let m = w.motion_vars(&mut tape, &vars, tokens, mask, &canonical_tensor(canon), 0)?;
    Ok(MotionEncoderOutput {
        token_logits: tape.value(m.logits).clone(),
        denoised_canonical_traj: raw_traj_tensor(&tape, &m.canon),
        pose_features: tape.value(m.pose_feats).clone(),
        traj_features: tape.value(m.traj_feats).clone(),
    })
}

fn traj_constant<T: Scalar>(tape: &mut Tape<T>, traj: &Trajectory<T>) -> TrajVars {
    let (r6, t) = trajectory_rows(traj);
    let rot6d = tape.constant(r6);
    let trans = tape.constant(t);
    TrajVars { rot6d, rot: tape.rot6d_to_mat(rot6d), trans }
}

/// Decoder from precomputed features. `motion = None` runs the per-frame
/// image mode. `base` is the trajectory the refinement is added to
/// (the coarse one when None).
pub fn cross_modal_decode<T: Scalar>(
    motion: Option<(&Tensor<T>, &Tensor<T>)>,
    base: Option<&Trajectory<T>>,
    cond: &ConditioningOutput<T>,
    w: &ModelWeights<T>,
) -> Result<DecoderOutput<T>> {
    let mut tape = Tape::new();
    let vars = w.params.bind(&mut tape, false);
    let coarse = traj_constant(&mut tape, &cond.coarse_traj);
    let cv = CondVars { latent: tape.constant(cond.latent.clone()), coarse };
    let mv = motion.map(|(p, t)| (tape.constant(p.clone()), tape.constant(t.clone())));
    let base = base.map(|b| traj_constant(&mut tape, b));
    let temporal = mv.is_some();
    let d = w.decoder_vars(&mut tape, &vars, mv, base.as_ref(), &cv, temporal, 0)?;
    Ok(DecoderOutput { token_logits: tape.value(d.logits).clone(), refined_traj: trajectory_from_vars(&tape, &d.refined, cond.coarse_traj.fps)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskmotion_core::masking::random_mask;
    use rand::Rng;

    pub(crate) fn tiny() -> NetworkConfig {
        NetworkConfig { width: 16, depth: 2, heads: 2, ffn_mult: 2, window: 4, tokens: 3, codebook_size: 6, obs_dim: 5, obs_tokens: 2 }
    }

    pub(crate) fn observations(f: usize, cfg: &NetworkConfig, seed: u64) -> ObservationSeq<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObservationSeq {
            features: Tensor::from_fn(f * cfg.obs_tokens, cfg.obs_dim, |_, _| rng.gen_range(-1.0..1.0)),
            bbox: (0..f).map(|_| [rng.gen_range(200.0..400.0), rng.gen_range(150.0..300.0), rng.gen_range(100.0..300.0)]).collect(),
            cam: CameraIntrinsics::new(600.0, [320.0, 240.0], [640.0, 480.0]).unwrap(),
            visibility: vec![true; f * 4],
            joints: 4,
        }
    }

    #[test]
    fn bbox_feature_examples() {
        let cam = CameraIntrinsics::new(500.0, [320.0, 240.0], [640.0, 480.0]).unwrap();
        assert_eq!(bbox_feature([320.0, 240.0, 100.0], &cam), [0.0, 0.0, 0.2]);
        assert!((bbox_feature([420.0, 240.0, 100.0], &cam)[0] - 0.2f64).abs() < 1e-15);
        let cam2 = CameraIntrinsics::new(1000.0, [320.0, 240.0], [640.0, 480.0]).unwrap();
        let (a, b) = (bbox_feature([400.0, 100.0, 50.0], &cam), bbox_feature([400.0, 100.0, 50.0], &cam2));
        for i in 0..3 {
            assert!((a[i] - 2.0 * b[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn conditioning_is_per_frame() {
        let cfg = tiny();
        let w = ModelWeights::<f64>::new(cfg, 1).unwrap();
        let obs = observations(5, &cfg, 2);
        let out = conditioning_encode(&obs, &w, 30.0).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut pobs = obs.clone();
        for (i, &src) in perm.iter().enumerate() {
            pobs.bbox[i] = obs.bbox[src];
            for r in 0..cfg.obs_tokens {
                let row = obs.features.row(src * cfg.obs_tokens + r).to_vec();
                pobs.features.row_mut(i * cfg.obs_tokens + r).copy_from_slice(&row);
            }
        }
        let pout = conditioning_encode(&pobs, &w, 30.0).unwrap();
        let nc = cfg.cond_rows();
        for (i, &src) in perm.iter().enumerate() {
            for r in 0..nc {
                assert_eq!(pout.latent.row(i * nc + r), out.latent.row(src * nc + r));
            }
            assert_eq!(pout.coarse_traj.frames[i], out.coarse_traj.frames[src]);
        }
    }

    #[test]
    fn untrained_coarse_translation_matches_weak_perspective() {
        let cfg = tiny();
        let w = ModelWeights::<f64>::new(cfg, 1).unwrap();
        let obs = observations(3, &cfg, 5);
        let out = conditioning_encode(&obs, &w, 30.0).unwrap();
        for (fr, b) in out.coarse_traj.frames.iter().zip(&obs.bbox) {
            let expect = maskmotion_core::geometry::crop_cam_to_full_translation([1.0, 0.0, 0.0], *b, &obs.cam).unwrap();
            for c in 0..3 {
                assert!((fr.trans[c] - expect[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_mask_and_static_trajectory_are_finite() {
        let cfg = tiny();
        let w = ModelWeights::<f64>::new(cfg, 3).unwrap();
        let f = 6;
        let tokens = PoseTokenSeq::new(f, cfg.tokens, vec![0; f * cfg.tokens]);
        let canon = CanonicalTrajectory { deltas: vec![TrajectoryFrame::identity(); f - 1], fps: 30.0 };
        let out = motion_encode(&tokens, &MaskGrid::full(f, cfg.tokens), &canon, &w).unwrap();
        assert!(out.token_logits.is_finite() && out.denoised_canonical_traj.is_finite());
        assert_eq!(out.token_logits.shape(), (f * cfg.tokens, cfg.codebook_size));
        let mut obs = observations(f, &cfg, 4);
        obs.features = Tensor::zeros(obs.features.rows, obs.features.cols);
        let cond = conditioning_encode(&obs, &w, 30.0).unwrap();
        let zeroed = ConditioningOutput { latent: Tensor::zeros(cond.latent.rows, cond.latent.cols), ..cond };
        let dec = cross_modal_decode(None, None, &zeroed, &w).unwrap();
        assert!(dec.token_logits.is_finite());
    }

    #[test]
    fn image_mode_decoder_is_frame_permutation_equivariant() {
        let cfg = tiny();
        let w = ModelWeights::<f64>::new(cfg, 8).unwrap();
        let obs = observations(4, &cfg, 9);
        let cond = conditioning_encode(&obs, &w, 30.0).unwrap();
        let out = cross_modal_decode(None, None, &cond, &w).unwrap();
        let nc = cfg.cond_rows();
        let perm = [2usize, 3, 1, 0];
        let mut pc = cond.clone();
        for (i, &s) in perm.iter().enumerate() {
            pc.coarse_traj.frames[i] = cond.coarse_traj.frames[s];
            for r in 0..nc {
                let row = cond.latent.row(s * nc + r).to_vec();
                pc.latent.row_mut(i * nc + r).copy_from_slice(&row);
            }
        }
        let pout = cross_modal_decode(None, None, &pc, &w).unwrap();
        let p = cfg.tokens;
        for (i, &s) in perm.iter().enumerate() {
            for r in 0..p {
                let (a, b) = (pout.token_logits.row(i * p + r), out.token_logits.row(s * p + r));
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn stacks_are_invariant_to_temporal_shift() {
        let cfg = tiny();
        let w = ModelWeights::<f64>::new(cfg, 11).unwrap();
        let f = 7;
        let tokens = PoseTokenSeq::new(f, cfg.tokens, (0..f * cfg.tokens).map(|i| i % cfg.codebook_size).collect());
        let mask = random_mask(f, cfg.tokens, 0.5, 3);
        let canon = Tensor::from_fn(f - 1, 9, |r, c| if c == 0 || c == 4 { 1.0 } else { 0.01 * (r + c) as f64 });
        let obs = observations(f, &cfg, 12);
        let run = |start: i64| {
            let mut tape = Tape::new();
            let vars = w.params.bind(&mut tape, false);
            let m = w.motion_vars(&mut tape, &vars, &tokens, &mask, &canon, start).unwrap();
            let c = w.conditioning_vars(&mut tape, &vars, &obs).unwrap();
            let d = w.decoder_vars(&mut tape, &vars, Some((m.pose_feats, m.traj_feats)), None, &c, true, start).unwrap();
            (tape.value(m.logits).clone(), tape.value(d.logits).clone(), tape.value(d.refined.trans).clone())
        };
        let (a, b) = (run(0), run(1000));
        for (x, y) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
            assert!(x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-9));
        }
    }

    #[test]
    fn rotary_attention_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng, n| Tensor::<f64>::from_fn(n, 8, |_, _| rng.gen_range(-1.0..1.0));
        let (q, k, v) = (mk(&mut rng, 10), mk(&mut rng, 10), mk(&mut rng, 10));
        let pos: Vec<i64> = (0..10).collect();
        let shifted: Vec<i64> = pos.iter().map(|p| p + 1000).collect();
        let a = rotary_temporal_attention(&q, &k, &v, &pos, 4, 2).unwrap();
        let b = rotary_temporal_attention(&q, &k, &v, &shifted, 4, 2).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-9));
        let (q1, k1, v1) = (mk(&mut rng, 1), mk(&mut rng, 1), mk(&mut rng, 1));
        let single = rotary_temporal_attention(&q1, &k1, &v1, &[0], 60, 2).unwrap();
        assert!(single.data.iter().zip(&v1.data).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(rotary_temporal_attention(&q, &k, &v, &pos, 0, 2).is_err());
    }

    #[test]
    fn banded_window_blocks_distant_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(10, 8, |_, _| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let spec = AttentionSpec::new(1, 10, 10, 1, 2).with_rotary((0..10).collect()).with_window(2);
        let y = tape.attention(xv, xv, xv, spec);
        let row0 = tape.gather_rows(y, &[0]);
        let s = tape.sum_all(row0);
        let g = tape.backward(s);
        let gx = g.get(xv).unwrap();
        assert!(gx.row(5).iter().all(|&v| v == 0.0));
        assert!(gx.row(0).iter().any(|&v| v != 0.0));
    }
}
