//! Simulated detections: projected joints with pixel noise, visibility from an
//! occlusion pattern, and keypoint-derived bounding boxes.

use maskmotion_core::autodiff::Tensor;
use maskmotion_core::body::SkeletonConfig;
use maskmotion_core::geometry::{project_point, CameraIntrinsics};
use maskmotion_model::network::ObservationSeq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synthetic::MotionSequence;

pub const BBOX_PADDING: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionKind {
    /// A block of consecutive frames with nothing visible.
    TemporalBlock,
    /// Joints below the pelvis hidden over a block of frames.
    LowerBody,
    /// The subject emerges from behind an occluder on the image's left edge.
    SideEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPattern {
    pub kind: OcclusionKind,
    pub ratio: f64,
    pub seed: u64,
}

impl OcclusionPattern {
    pub fn new(kind: OcclusionKind, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(HarnessError::Config(format!("occlusion ratio {ratio} outside [0, 1]")));
        }
        Ok(OcclusionPattern { kind, ratio, seed })
    }

    /// Number of affected frames out of `frames`.
    pub fn block_len(&self, frames: usize) -> usize {
        (self.ratio * frames as f64).round() as usize
    }
}

/// `(u, v)` of every joint in every frame.
pub fn project_sequence(joints: &[Vec<[f64; 3]>], cam: &CameraIntrinsics<f64>) -> Result<Vec<Vec<[f64; 2]>>> {
    joints
        .iter()
        .enumerate()
        .map(|(frame, js)| js.iter().map(|&p| project_point(p, cam).ok_or(HarnessError::SubjectBehindCamera { frame })).collect())
        .collect()
}

/// Visibility (`frames × joints`) for a pattern given the clean projections.
pub fn occlusion_mask(pattern: &OcclusionPattern, uv: &[Vec<[f64; 2]>], skel: &SkeletonConfig<f64>) -> Result<Vec<bool>> {
    let f = uv.len();
    let j = skel.joint_count;
    let mut vis = vec![true; f * j];
    let n = pattern.block_len(f);
    if n == 0 {
        return Ok(vis);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pattern.seed);
    let start = rng.gen_range(0..=f - n);
    match pattern.kind {
        OcclusionKind::TemporalBlock => {
            for v in &mut vis[start * j..(start + n) * j] {
                *v = false;
            }
        }
        OcclusionKind::LowerBody => {
            let lower = skel.lower_body_joints()?;
            for t in start..start + n {
                for &k in &lower {
                    vis[t * j + k] = false;
                }
            }
        }
        OcclusionKind::SideEntry => {
            // occluder edge recedes from beyond the body's right side to its left side
            let (lo, hi) = uv.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
            for t in 0..n {
                let s = t as f64 / n as f64;
                let edge = hi + 1.0 - s * (hi - lo + 2.0);
                for k in 0..j {
                    if uv[t][k][0] < edge {
                        vis[t * j + k] = false;
                    }
                }
            }
        }
    }
    Ok(vis)
}

/// `(cx, cy, size)` of the padded square box around the visible points, or
/// `None` when fewer than two are visible.
pub fn keypoint_bbox(uv: &[[f64; 2]], visible: &[bool]) -> Option<[f64; 3]> {
    let pts: Vec<&[f64; 2]> = uv.iter().zip(visible).filter(|(_, &v)| v).map(|(p, _)| p).collect();
    if pts.len() < 2 {
        return None;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let size = ((hi[0] - lo[0]).max(hi[1] - lo[1]) * BBOX_PADDING).max(1.0);
    Some([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, size])
}

/// Per-frame features `[(u − cx)/size, (v − cy)/size, visible]` per joint,
/// zeros for hidden joints.
pub fn simulate_observations(
    seq: &MotionSequence,
    skel: &SkeletonConfig<f64>,
    cam: &CameraIntrinsics<f64>,
    pattern: &OcclusionPattern,
    noise_std: f64,
) -> Result<ObservationSeq<f64>> {
    cam.validate()?;
    let world = seq.world_bodies(skel)?;
    let joints: Vec<Vec<[f64; 3]>> = world.into_iter().map(|b| b.joints).collect();
    let clean = project_sequence(&joints, cam)?;
    let visibility = occlusion_mask(pattern, &clean, skel)?;
    let (f, j) = (seq.frames(), skel.joint_count);
    let mut rng = ChaCha8Rng::seed_from_u64(pattern.seed ^ 0x5EED_0B5E);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| HarnessError::Config(e.to_string()))?;
    let uv: Vec<Vec<[f64; 2]>> = clean
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|p| if noise_std > 0.0 { [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)] } else { *p })
                .collect()
        })
        .collect();
    let boxes: Vec<Option<[f64; 3]>> = (0..f).map(|t| keypoint_bbox(&uv[t], &visibility[t * j..(t + 1) * j])).collect();
    // frames without a usable box borrow the nearest one (earlier first)
    let fallback = keypoint_bbox(&uv.iter().flatten().copied().collect::<Vec<_>>(), &vec![true; f * j]).expect("joints");
    let bbox: Vec<[f64; 3]> = (0..f)
        .map(|t| {
            (0..f)
                .flat_map(|d| [t.checked_sub(d), Some(t + d)])
                .flatten()
                .filter(|&s| s < f)
                .find_map(|s| boxes[s])
                .unwrap_or(fallback)
        })
        .collect();
    let mut features = Tensor::zeros(f, 3 * j);
    for t in 0..f {
        let [cx, cy, size] = bbox[t];
        let row = features.row_mut(t);
        for k in 0..j {
            if visibility[t * j + k] {
                row[3 * k] = (uv[t][k][0] - cx) / size;
                row[3 * k + 1] = (uv[t][k][1] - cy) / size;
                row[3 * k + 2] = 1.0;
            }
        }
    }
    Ok(ObservationSeq { features, bbox, cam: *cam, visibility, joints: j })
}

pub fn default_camera() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(600.0, [320.0, 240.0], [640.0, 480.0]).expect("valid intrinsics")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_sequence, MotionFamily, SyntheticMotionConfig};

    fn seq(family: MotionFamily) -> MotionSequence {
        generate_sequence(family, &SyntheticMotionConfig::default(), &SkeletonConfig::desk_default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn zero_ratio_sees_everything() {
        let skel = SkeletonConfig::desk_default();
        let s = seq(MotionFamily::TurningWalk);
        let cam = default_camera();
        for kind in [OcclusionKind::TemporalBlock, OcclusionKind::LowerBody, OcclusionKind::SideEntry] {
            let obs = simulate_observations(&s, &skel, &cam, &OcclusionPattern::new(kind, 0.0, 1).unwrap(), 0.0).unwrap();
            assert!(obs.visibility.iter().all(|&v| v));
            let uv = project_sequence(&s.world_bodies(&skel).unwrap().into_iter().map(|b| b.joints).collect::<Vec<_>>(), &cam).unwrap();
            for (t, b) in obs.bbox.iter().enumerate() {
                for p in &uv[t] {
                    assert!((p[0] - b[0]).abs() <= b[2] / 2.0 && (p[1] - b[1]).abs() <= b[2] / 2.0);
                }
            }
        }
    }

    #[test]
    fn temporal_block_hides_exact_run() {
        let skel = SkeletonConfig::desk_default();
        let s = seq(MotionFamily::StraightWalk);
        for seed in 0..5 {
            let obs = simulate_observations(&s, &skel, &default_camera(), &OcclusionPattern::new(OcclusionKind::TemporalBlock, 0.3, seed).unwrap(), 1.0)
                .unwrap();
            let hidden: Vec<usize> = (0..60).filter(|&t| obs.visibility[t * 22..(t + 1) * 22].iter().all(|v| !v)).collect();
            assert_eq!(hidden.len(), 18);
            assert_eq!(hidden.last().unwrap() - hidden[0], 17);
            let partial = (0..60).filter(|&t| obs.visibility[t * 22..(t + 1) * 22].iter().any(|v| !v)).count();
            assert_eq!(partial, 18);
            assert!(obs.bbox.iter().all(|b| b.iter().all(|x| x.is_finite()) && b[2] > 1.0));
        }
    }

    #[test]
    fn lower_body_hides_exactly_the_legs() {
        let skel = SkeletonConfig::desk_default();
        let s = seq(MotionFamily::SitStand);
        let obs = simulate_observations(&s, &skel, &default_camera(), &OcclusionPattern::new(OcclusionKind::LowerBody, 1.0, 0).unwrap(), 0.0).unwrap();
        // oracle: joints whose rest height is below the pelvis
        let rest = skel.rest_joints().unwrap();
        for t in 0..s.frames() {
            for (k, r) in rest.iter().enumerate() {
                assert_eq!(obs.visibility[t * 22 + k], r[1] >= 0.0, "joint {k}");
            }
        }
    }

    #[test]
    fn side_entry_reveals_progressively() {
        let skel = SkeletonConfig::desk_default();
        let s = seq(MotionFamily::IdleSway);
        let obs = simulate_observations(&s, &skel, &default_camera(), &OcclusionPattern::new(OcclusionKind::SideEntry, 0.5, 0).unwrap(), 0.0).unwrap();
        let counts: Vec<usize> = (0..60).map(|t| obs.visibility[t * 22..(t + 1) * 22].iter().filter(|&&v| v).count()).collect();
        assert_eq!(counts[0], 0);
        assert!(counts[..30].windows(2).all(|w| w[1] + 2 >= w[0]));
        assert!(counts[30..].iter().all(|&c| c == 22));
    }

    #[test]
    fn features_are_box_normalized() {
        let skel = SkeletonConfig::desk_default();
        let s = seq(MotionFamily::StraightWalk);
        let obs = simulate_observations(&s, &skel, &default_camera(), &OcclusionPattern::new(OcclusionKind::LowerBody, 0.5, 2).unwrap(), 0.0).unwrap();
        for t in 0..60 {
            for k in 0..22 {
                let row = obs.features.row(t);
                if obs.visibility[t * 22 + k] {
                    assert!(row[3 * k].abs() <= 0.5 && row[3 * k + 1].abs() <= 0.5 && row[3 * k + 2] == 1.0);
                } else {
                    assert_eq!(&row[3 * k..3 * k + 3], &[0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let skel = SkeletonConfig::desk_default();
        let mut s = seq(MotionFamily::IdleSway);
        for f in &mut s.traj.frames {
            f.trans[2] = -3.0;
        }
        let r = simulate_observations(&s, &skel, &default_camera(), &OcclusionPattern::new(OcclusionKind::TemporalBlock, 0.0, 0).unwrap(), 0.0);
        assert!(matches!(r, Err(HarnessError::SubjectBehindCamera { frame: 0 })));
    }
}
