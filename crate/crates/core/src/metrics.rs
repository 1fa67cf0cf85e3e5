//! Pose, trajectory and motion-quality metrics. Distances are reported in
//! millimeters, RTE in percent, accelerations in m/s² and jitter in m/s³.

use serde::{Deserialize, Serialize};

use crate::body::{detect_foot_contact, SkeletonConfig, CONTACT_HEIGHT_THRESH, CONTACT_VEL_THRESH, PELVIS};
use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, rigid_align};
use crate::linalg::{dist, norm, sub, PointSeq, Vec3};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// No alignment: global MPJPE.
    None,
    /// Subtract the pelvis per frame.
    Pelvis,
    /// Per-frame similarity (Procrustes) alignment.
    Procrustes,
}

fn check_shapes<T: Scalar>(pred: &PointSeq<T>, gt: &PointSeq<T>) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.frames, pred.points, gt.frames, gt.points
        )));
    }
    Ok(())
}

fn pelvis_relative<T: Scalar>(seq: &PointSeq<T>) -> PointSeq<T> {
    seq.map(|t, _, p| sub(p, seq.at(t, PELVIS)))
}

/// Mean joint error in mm after `align`, over positions where `split_mask`
/// (frames × joints) is true. Returns 0 when nothing is selected.
pub fn mpjpe<T: Scalar>(pred: &PointSeq<T>, gt: &PointSeq<T>, align: Alignment, split_mask: Option<&[bool]>) -> Result<T> {
    check_shapes(pred, gt)?;
    if let Some(m) = split_mask {
        if m.len() != pred.frames * pred.points {
            return Err(Error::ShapeMismatch(format!("split mask has {} entries", m.len())));
        }
    }
    let (mut sum, mut count) = (T::zero(), 0usize);
    for t in 0..pred.frames {
        let aligned: Vec<Vec3<T>> = match align {
            Alignment::None => pred.frame(t).to_vec(),
            Alignment::Pelvis => {
                let off = sub(gt.at(t, PELVIS), pred.at(t, PELVIS));
                pred.frame(t).iter().map(|&p| crate::linalg::add(p, off)).collect()
            }
            Alignment::Procrustes => procrustes_align(pred.frame(t), gt.frame(t))?.apply_all(pred.frame(t)),
        };
        for (j, (&p, &g)) in aligned.iter().zip(gt.frame(t)).enumerate() {
            if split_mask.is_none_or(|m| m[t * pred.points + j]) {
                sum = sum + dist(p, g);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { T::zero() } else { sum / lit(count as f64) * lit(1000.0) })
}

/// Mean vertex error in mm after removing each frame's pelvis position.
pub fn pve<T: Scalar>(
    pred_vertices: &PointSeq<T>,
    gt_vertices: &PointSeq<T>,
    pred_pelvis: &[Vec3<T>],
    gt_pelvis: &[Vec3<T>],
) -> Result<T> {
    check_shapes(pred_vertices, gt_vertices)?;
    if pred_pelvis.len() != pred_vertices.frames || gt_pelvis.len() != gt_vertices.frames {
        return Err(Error::ShapeMismatch("pelvis track length differs from vertex frames".into()));
    }
    let mut sum = T::zero();
    for t in 0..pred_vertices.frames {
        for v in 0..pred_vertices.points {
            let p = sub(pred_vertices.at(t, v), pred_pelvis[t]);
            let g = sub(gt_vertices.at(t, v), gt_pelvis[t]);
            sum = sum + dist(p, g);
        }
    }
    let n = (pred_vertices.frames * pred_vertices.points).max(1);
    Ok(sum / lit(n as f64) * lit(1000.0))
}

pub fn path_length<T: Scalar>(path: &[Vec3<T>]) -> T {
    path.windows(2).map(|w| dist(w[1], w[0])).sum()
}

/// Rigidly aligns the whole predicted root path to ground truth, then divides
/// the mean root error by the ground-truth path length (percent).
pub fn rte<T: Scalar>(pred_root: &[Vec3<T>], gt_root: &[Vec3<T>]) -> Result<T> {
    if pred_root.len() != gt_root.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} root positions", pred_root.len(), gt_root.len())));
    }
    if gt_root.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: gt_root.len() });
    }
    let length = path_length(gt_root);
    if !(length > lit(1e-6)) {
        return Err(Error::DegeneratePath);
    }
    let aligned = match rigid_align(pred_root, gt_root) {
        Ok(tf) => tf.apply_all(pred_root),
        // straight-line or near-static paths: fall back to translation-only alignment
        Err(Error::Degenerate(_)) => {
            let n = lit::<T>(pred_root.len() as f64);
            let mut off = [T::zero(); 3];
            for (p, g) in pred_root.iter().zip(gt_root) {
                for k in 0..3 {
                    off[k] = off[k] + (g[k] - p[k]) / n;
                }
            }
            pred_root.iter().map(|&p| crate::linalg::add(p, off)).collect()
        }
        Err(e) => return Err(e),
    };
    let mean_err = aligned.iter().zip(gt_root).map(|(&p, &g)| dist(p, g)).sum::<T>() / lit(gt_root.len() as f64);
    Ok(mean_err / length * lit(100.0))
}

fn second_difference<T: Scalar>(seq: &PointSeq<T>, t: usize, j: usize) -> Vec3<T> {
    let (a, b, c) = (seq.at(t - 1, j), seq.at(t, j), seq.at(t + 1, j));
    let two = lit::<T>(2.0);
    [a[0] - two * b[0] + c[0], a[1] - two * b[1] + c[1], a[2] - two * b[2] + c[2]]
}

/// Mean acceleration error (m/s²) from second central differences; local
/// (pelvis-aligned) joints unless `global`.
pub fn accel_error<T: Scalar>(pred: &PointSeq<T>, gt: &PointSeq<T>, fps: T, global: bool) -> Result<T> {
    check_shapes(pred, gt)?;
    if pred.frames < 3 {
        return Err(Error::TooShort { needed: 3, got: pred.frames });
    }
    let (p, g) = if global { (pred.clone(), gt.clone()) } else { (pelvis_relative(pred), pelvis_relative(gt)) };
    let mut sum = T::zero();
    for t in 1..pred.frames - 1 {
        for j in 0..pred.points {
            sum = sum + norm(sub(second_difference(&p, t, j), second_difference(&g, t, j)));
        }
    }
    let n = (pred.frames - 2) * pred.points;
    Ok(sum / lit(n.max(1) as f64) * fps * fps)
}

/// Mean norm of the third finite difference times fps³ (m/s³).
pub fn jitter<T: Scalar>(pred: &PointSeq<T>, fps: T) -> Result<T> {
    if pred.frames < 4 {
        return Err(Error::TooShort { needed: 4, got: pred.frames });
    }
    let three = lit::<T>(3.0);
    let mut sum = T::zero();
    for t in 0..pred.frames - 3 {
        for j in 0..pred.points {
            let (a, b, c, d) = (pred.at(t, j), pred.at(t + 1, j), pred.at(t + 2, j), pred.at(t + 3, j));
            let jerk = [
                d[0] - three * c[0] + three * b[0] - a[0],
                d[1] - three * c[1] + three * b[1] - a[1],
                d[2] - three * c[2] + three * b[2] - a[2],
            ];
            sum = sum + norm(jerk);
        }
    }
    let n = (pred.frames - 3) * pred.points;
    Ok(sum / lit(n.max(1) as f64) * fps * fps * fps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    pub height: f64,
    pub velocity: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds { height: CONTACT_HEIGHT_THRESH, velocity: CONTACT_VEL_THRESH }
    }
}

/// Mean horizontal per-frame foot displacement (mm) over detected contacts.
pub fn foot_sliding<T: Scalar>(pred: &PointSeq<T>, skel: &SkeletonConfig<T>, fps: T, thresholds: ContactThresholds) -> Result<T> {
    if pred.frames < 2 {
        return Err(Error::TooShort { needed: 2, got: pred.frames });
    }
    let contact = detect_foot_contact(pred, skel, lit(thresholds.height), lit(thresholds.velocity), fps);
    let (mut sum, mut count) = (T::zero(), 0usize);
    for t in 0..pred.frames - 1 {
        for (k, &f) in skel.foot_joint_ids.iter().enumerate() {
            if contact[t][k] {
                let d = sub(pred.at(t + 1, f), pred.at(t, f));
                sum = sum + (d[0] * d[0] + d[2] * d[2]).sqrt();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { T::zero() } else { sum / lit(count as f64) * lit(1000.0) })
}

/// World-frame joints and vertices of one sequence.
#[derive(Clone, Debug)]
pub struct MotionSample<'a, T> {
    pub joints: &'a PointSeq<T>,
    pub vertices: &'a PointSeq<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub pa_mpjpe: f64,
    pub mpjpe_all: f64,
    pub mpjpe_vis: Option<f64>,
    pub mpjpe_occ: Option<f64>,
    pub pve: f64,
    pub gmpjpe: f64,
    pub rte: f64,
    pub accel: f64,
    pub g_accel: f64,
    pub jitter: f64,
    pub sliding: f64,
}

/// Aggregated metrics (frame-weighted means over sequences) plus the breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pa_mpjpe: f64,
    pub mpjpe_all: f64,
    pub mpjpe_vis: Option<f64>,
    pub mpjpe_occ: Option<f64>,
    pub pve: f64,
    pub gmpjpe: f64,
    pub rte: f64,
    pub accel: f64,
    pub g_accel: f64,
    pub jitter: f64,
    pub sliding: f64,
    pub sequences: Vec<SequenceMetrics>,
}

/// All metrics for one sequence. `visibility` (frames × joints, true = visible)
/// enables the visible/occluded split.
pub fn evaluate_sequence<T: Scalar>(
    name: &str,
    pred: &MotionSample<'_, T>,
    gt: &MotionSample<'_, T>,
    skel: &SkeletonConfig<T>,
    fps: T,
    visibility: Option<&[bool]>,
) -> Result<SequenceMetrics> {
    let f64_of = |x: T| x.as_f64();
    let pelvis = |s: &PointSeq<T>| (0..s.frames).map(|t| s.at(t, PELVIS)).collect::<Vec<_>>();
    let (pred_root, gt_root) = (pelvis(pred.joints), pelvis(gt.joints));
    let (vis, occ) = match visibility {
        Some(v) => {
            let occluded: Vec<bool> = v.iter().map(|x| !x).collect();
            (
                Some(f64_of(mpjpe(pred.joints, gt.joints, Alignment::Pelvis, Some(v))?)),
                Some(f64_of(mpjpe(pred.joints, gt.joints, Alignment::Pelvis, Some(&occluded))?)),
            )
        }
        None => (None, None),
    };
    let rte = match rte(&pred_root, &gt_root) {
        Ok(x) => f64_of(x),
        Err(Error::DegeneratePath) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(SequenceMetrics {
        name: name.to_string(),
        frames: pred.joints.frames,
        pa_mpjpe: f64_of(mpjpe(pred.joints, gt.joints, Alignment::Procrustes, None)?),
        mpjpe_all: f64_of(mpjpe(pred.joints, gt.joints, Alignment::Pelvis, None)?),
        mpjpe_vis: vis,
        mpjpe_occ: occ,
        pve: f64_of(pve(pred.vertices, gt.vertices, &pred_root, &gt_root)?),
        gmpjpe: f64_of(mpjpe(pred.joints, gt.joints, Alignment::None, None)?),
        rte,
        accel: f64_of(accel_error(pred.joints, gt.joints, fps, false)?),
        g_accel: f64_of(accel_error(pred.joints, gt.joints, fps, true)?),
        jitter: f64_of(jitter(pred.joints, fps)?),
        sliding: f64_of(foot_sliding(pred.joints, skel, fps, ContactThresholds::default())?),
    })
}

impl EvalReport {
    pub fn from_sequences(sequences: Vec<SequenceMetrics>) -> Self {
        let total: usize = sequences.iter().map(|s| s.frames).sum::<usize>().max(1);
        let mean = |f: &dyn Fn(&SequenceMetrics) -> f64| {
            sequences.iter().map(|s| f(s) * s.frames as f64).sum::<f64>() / total as f64
        };
        let opt_mean = |f: &dyn Fn(&SequenceMetrics) -> Option<f64>| {
            let picked: Vec<(f64, usize)> = sequences.iter().filter_map(|s| f(s).map(|v| (v, s.frames))).collect();
            if picked.is_empty() {
                return None;
            }
            let w: usize = picked.iter().map(|p| p.1).sum();
            Some(picked.iter().map(|(v, n)| v * *n as f64).sum::<f64>() / w.max(1) as f64)
        };
        EvalReport {
            pa_mpjpe: mean(&|s| s.pa_mpjpe),
            mpjpe_all: mean(&|s| s.mpjpe_all),
            mpjpe_vis: opt_mean(&|s| s.mpjpe_vis),
            mpjpe_occ: opt_mean(&|s| s.mpjpe_occ),
            pve: mean(&|s| s.pve),
            gmpjpe: mean(&|s| s.gmpjpe),
            rte: mean(&|s| s.rte),
            accel: mean(&|s| s.accel),
            g_accel: mean(&|s| s.g_accel),
            jitter: mean(&|s| s.jitter),
            sliding: mean(&|s| s.sliding),
            sequences,
        }
    }

    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>8}{:>9}{:>9}{:>10}{:>9}\n",
            "sequence", "PA-MPJPE", "MPJPE", "-vis", "-occ", "PVE", "GMPJPE", "RTE%", "Accel", "G-Accel", "Jitter", "Sliding"
        ));
        let mut row = |name: &str, s: (f64, f64, Option<f64>, Option<f64>, f64, f64, f64, f64, f64, f64, f64)| {
            out.push_str(&format!(
                "{:<14}{:>10.2}{:>10.2}{:>10}{:>10}{:>10.2}{:>10.2}{:>8.2}{:>9.2}{:>9.2}{:>10.2}{:>9.2}\n",
                name, s.0, s.1, opt(s.2), opt(s.3), s.4, s.5, s.6, s.7, s.8, s.9, s.10
            ));
        };
        for s in &self.sequences {
            row(&s.name, (s.pa_mpjpe, s.mpjpe_all, s.mpjpe_vis, s.mpjpe_occ, s.pve, s.gmpjpe, s.rte, s.accel, s.g_accel, s.jitter, s.sliding));
        }
        row(
            "mean",
            (self.pa_mpjpe, self.mpjpe_all, self.mpjpe_vis, self.mpjpe_occ, self.pve, self.gmpjpe, self.rte, self.accel, self.g_accel, self.jitter, self.sliding),
        );
        out
    }
}
