//! A 22-joint kinematic body proxy: forward kinematics, a fixed row-stochastic
//! vertex regressor, rigid composition with the root trajectory, and foot
//! contact detection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rotation6D, TrajectoryFrame};
use crate::linalg::{self, add, Mat3, PointSeq, Vec3};
use crate::scalar::{lit, Scalar};

pub const DEFAULT_JOINTS: usize = 22;
pub const DEFAULT_VERTICES: usize = 64;
pub const PELVIS: usize = 0;

/// Default contact thresholds (meters, meters per second).
pub const CONTACT_HEIGHT_THRESH: f64 = 0.05;
pub const CONTACT_VEL_THRESH: f64 = 0.15;

const JOINT_NAMES: [&str; DEFAULT_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
];

const DEFAULT_PARENTS: [i32; DEFAULT_JOINTS] =
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19];

// y up, z forward, +x on the body's left.
const DEFAULT_OFFSETS: [[f64; 3]; DEFAULT_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.01],
    [0.0, -0.40, 0.0],
    [0.0, -0.40, 0.0],
    [0.0, 0.13, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, 0.06, 0.02],
    [0.0, -0.06, 0.12],
    [0.0, -0.06, 0.12],
    [0.0, 0.21, -0.02],
    [0.07, 0.12, -0.01],
    [-0.07, 0.12, -0.01],
    [0.0, 0.09, 0.04],
    [0.11, 0.03, -0.01],
    [-0.11, 0.03, -0.01],
    [0.2, -0.18, 0.0],
    [-0.2, -0.18, 0.0],
    [0.18, -0.17, 0.0],
    [-0.18, -0.17, 0.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig<T> {
    pub joint_count: usize,
    pub parent: Vec<i32>,
    pub bone_offset: Vec<Vec3<T>>,
    pub foot_joint_ids: Vec<usize>,
    pub vertex_count: usize,
    /// Row-major `vertex_count × joint_count`, each row sums to one.
    pub vertex_weights: Vec<T>,
}

impl<T: Scalar> SkeletonConfig<T> {
    /// The 22-joint proxy with 64 surrogate vertices spread along the bones.
    pub fn desk_default() -> Self {
        let j = DEFAULT_JOINTS;
        let mut weights = vec![T::zero(); DEFAULT_VERTICES * j];
        weights[PELVIS] = T::one();
        let mut row = 1;
        for child in 1..j {
            let parent = DEFAULT_PARENTS[child] as usize;
            for a in [0.25, 0.5, 0.75] {
                weights[row * j + parent] = lit(1.0 - a);
                weights[row * j + child] = lit(a);
                row += 1;
            }
        }
        debug_assert_eq!(row, DEFAULT_VERTICES);
        SkeletonConfig {
            joint_count: j,
            parent: DEFAULT_PARENTS.to_vec(),
            bone_offset: DEFAULT_OFFSETS.iter().map(|o| o.map(lit)).collect(),
            foot_joint_ids: vec![10, 11],
            vertex_count: DEFAULT_VERTICES,
            vertex_weights: weights,
        }
    }

    pub fn joint_name(index: usize) -> Option<&'static str> {
        JOINT_NAMES.get(index).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count;
        if self.parent.len() != j || self.bone_offset.len() != j {
            return Err(Error::BadSkeleton(format!("expected {j} parents and offsets")));
        }
        if j == 0 || self.parent[0] != -1 {
            return Err(Error::BadSkeleton("joint 0 must be the root".into()));
        }
        self.topological_order()?;
        if self.foot_joint_ids.is_empty() || self.foot_joint_ids.iter().any(|&f| f >= j) {
            return Err(Error::BadSkeleton("foot joints must be non-empty and in range".into()));
        }
        if self.vertex_weights.len() != self.vertex_count * j {
            return Err(Error::BadSkeleton("vertex weight matrix has the wrong size".into()));
        }
        for (v, row) in self.vertex_weights.chunks(j).enumerate() {
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > lit(1e-6) {
                return Err(Error::BadSkeleton(format!("vertex {v} weights sum to {s}")));
            }
        }
        Ok(())
    }

    /// Parents-before-children order; fails on cycles or dangling parents.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let j = self.joint_count;
        let mut depth = vec![0usize; j];
        for (start, d) in depth.iter_mut().enumerate() {
            let mut cur = start;
            while self.parent[cur] >= 0 {
                let p = self.parent[cur] as usize;
                if p >= j {
                    return Err(Error::BadSkeleton(format!("joint {cur} has parent {p} out of range")));
                }
                *d += 1;
                if *d > j {
                    return Err(Error::BadSkeleton(format!("cycle through joint {start}")));
                }
                cur = p;
            }
            if cur != 0 {
                return Err(Error::BadSkeleton(format!("joint {start} is not connected to the root")));
            }
        }
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by_key(|&k| depth[k]);
        Ok(order)
    }

    /// Rest-pose joint positions (all local rotations identity).
    pub fn rest_joints(&self) -> Result<Vec<Vec3<T>>> {
        let pose = LocalPose::identity(self.joint_count);
        Ok(forward_kinematics(&pose, self)?.joints)
    }

    /// Joints strictly below the pelvis in the rest pose.
    pub fn lower_body_joints(&self) -> Result<Vec<usize>> {
        let rest = self.rest_joints()?;
        let pelvis_y = rest[PELVIS][1];
        Ok((0..self.joint_count).filter(|&j| rest[j][1] < pelvis_y).collect())
    }

    pub fn vertices_from_joints(&self, joints: &[Vec3<T>]) -> Vec<Vec3<T>> {
        let j = self.joint_count;
        self.vertex_weights
            .chunks(j)
            .map(|row| {
                let mut v = linalg::zero3();
                for (w, p) in row.iter().zip(joints) {
                    if *w != T::zero() {
                        v = add(v, linalg::scale(*p, *w));
                    }
                }
                v
            })
            .collect()
    }

    /// Least-squares inverse of the vertex weights (`J × V`, row-major), so that
    /// `regressor · (weights · joints) = joints`.
    pub fn joint_regressor(&self) -> Result<Vec<T>> {
        let (v, j) = (self.vertex_count, self.joint_count);
        let w = DMatrix::from_fn(v, j, |r, c| self.vertex_weights[r * j + c].as_f64());
        let gram = w.transpose() * &w;
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::BadSkeleton("vertex weights do not have full column rank".into()))?;
        let reg = inv * w.transpose();
        Ok((0..j).flat_map(|r| (0..v).map(move |c| (r, c))).map(|(r, c)| lit(reg[(r, c)])).collect())
    }

    pub fn cast<U: Scalar>(&self) -> SkeletonConfig<U> {
        SkeletonConfig {
            joint_count: self.joint_count,
            parent: self.parent.clone(),
            bone_offset: self.bone_offset.iter().map(|o| linalg::cast3(*o)).collect(),
            foot_joint_ids: self.foot_joint_ids.clone(),
            vertex_count: self.vertex_count,
            vertex_weights: self.vertex_weights.iter().map(|w| lit(w.as_f64())).collect(),
        }
    }
}

/// Per-joint local rotations. Entry 0 (the pelvis) is ignored: global
/// orientation belongs to the trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPose<T> {
    pub joint_rotations: Vec<Rotation6D<T>>,
}

impl<T: Scalar> LocalPose<T> {
    pub fn identity(joints: usize) -> Self {
        LocalPose { joint_rotations: vec![Rotation6D::identity(); joints] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyFrame<T> {
    pub joints: Vec<Vec3<T>>,
    pub vertices: Vec<Vec3<T>>,
}

/// Local-frame FK: pelvis at the origin with identity orientation.
pub fn forward_kinematics<T: Scalar>(pose: &LocalPose<T>, skel: &SkeletonConfig<T>) -> Result<BodyFrame<T>> {
    let j = skel.joint_count;
    if pose.joint_rotations.len() != j {
        return Err(Error::ShapeMismatch(format!("pose has {} rotations, skeleton {j} joints", pose.joint_rotations.len())));
    }
    let order = skel.topological_order()?;
    let mut global_rot = vec![Mat3::<T>::identity(); j];
    let mut joints = vec![linalg::zero3::<T>(); j];
    for &k in &order {
        let p = skel.parent[k];
        if p < 0 {
            continue;
        }
        let p = p as usize;
        joints[k] = add(joints[p], global_rot[p].mul_vec(skel.bone_offset[k]));
        global_rot[k] = global_rot[p] * pose.joint_rotations[k].to_matrix()?;
    }
    let vertices = skel.vertices_from_joints(&joints);
    Ok(BodyFrame { joints, vertices })
}

/// Applies `p ↦ R·p + t` to every joint and vertex.
pub fn compose_global<T: Scalar>(body: &BodyFrame<T>, frame: &TrajectoryFrame<T>) -> Result<BodyFrame<T>> {
    let rot = frame.orient.to_matrix()?;
    let tf = |p: &Vec3<T>| add(rot.mul_vec(*p), frame.trans);
    Ok(BodyFrame { joints: body.joints.iter().map(tf).collect(), vertices: body.vertices.iter().map(tf).collect() })
}

/// Per-frame speed of point `p`: central difference inside, one-sided at the ends.
pub fn point_speed<T: Scalar>(seq: &PointSeq<T>, t: usize, p: usize, fps: T) -> T {
    let n = seq.frames;
    if n < 2 {
        return T::zero();
    }
    let (a, b, span) = if t == 0 {
        (0, 1, 1.0)
    } else if t == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (t - 1, t + 1, 2.0)
    };
    linalg::dist(seq.at(b, p), seq.at(a, p)) * fps / lit(span)
}

/// `contact[t][k]` is true when foot `k` is below `height_thresh` (y up) and
/// moving slower than `vel_thresh`.
pub fn detect_foot_contact<T: Scalar>(
    world_joints: &PointSeq<T>,
    skel: &SkeletonConfig<T>,
    height_thresh: T,
    vel_thresh: T,
    fps: T,
) -> Vec<Vec<bool>> {
    (0..world_joints.frames)
        .map(|t| {
            skel.foot_joint_ids
                .iter()
                .map(|&f| {
                    world_joints.at(t, f)[1] < height_thresh && point_speed(world_joints, t, f, fps) < vel_thresh
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::matrix_to_rot6d;

    fn chain() -> SkeletonConfig<f64> {
        SkeletonConfig {
            joint_count: 3,
            parent: vec![-1, 0, 1],
            bone_offset: vec![[0.0; 3], [0.0, 1.0, 0.0], [1.0, 0.5, 0.2]],
            foot_joint_ids: vec![2],
            vertex_count: 3,
            vertex_weights: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 0.5],
        }
    }

    #[test]
    fn default_skeleton_is_valid() {
        let s = SkeletonConfig::<f64>::desk_default();
        s.validate().unwrap();
        let rest = s.rest_joints().unwrap();
        assert_eq!(rest[PELVIS], [0.0; 3]);
        // both feet 0.96 m under the pelvis
        assert!((rest[10][1] + 0.96).abs() < 1e-12 && (rest[11][1] + 0.96).abs() < 1e-12);
        let reg = s.joint_regressor().unwrap();
        let verts = s.vertices_from_joints(&rest);
        for j in 0..s.joint_count {
            let mut acc = [0.0; 3];
            for v in 0..s.vertex_count {
                acc = add(acc, linalg::scale(verts[v], reg[j * s.vertex_count + v]));
            }
            assert!(linalg::dist(acc, rest[j]) < 1e-10);
        }
        assert_eq!(s.lower_body_joints().unwrap(), vec![1, 2, 4, 5, 7, 8, 10, 11]);
    }

    #[test]
    fn rest_pose_accumulates_offsets() {
        let s = chain();
        let body = forward_kinematics(&LocalPose::identity(3), &s).unwrap();
        assert_eq!(body.joints, vec![[0.0; 3], [0.0, 1.0, 0.0], [1.0, 1.5, 0.2]]);
        assert_eq!(body.vertices, s.vertices_from_joints(&body.joints));
    }

    #[test]
    fn half_turn_negates_subtree_xy() {
        let s = chain();
        let mut pose = LocalPose::identity(3);
        pose.joint_rotations[1] = matrix_to_rot6d(&Mat3::rot_z(std::f64::consts::PI)).unwrap();
        let body = forward_kinematics(&pose, &s).unwrap();
        let rel = linalg::sub(body.joints[2], body.joints[1]);
        assert!(linalg::dist(rel, [-1.0, -0.5, 0.2]) < 1e-12);
        assert_eq!(body.joints[1], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn cyclic_parents_rejected() {
        let mut s = chain();
        s.parent = vec![-1, 2, 1];
        assert!(matches!(forward_kinematics(&LocalPose::identity(3), &s), Err(Error::BadSkeleton(_))));
    }

    #[test]
    fn compose_identity_and_translation() {
        let s = SkeletonConfig::<f64>::desk_default();
        let body = forward_kinematics(&LocalPose::identity(s.joint_count), &s).unwrap();
        let same = compose_global(&body, &TrajectoryFrame::identity()).unwrap();
        assert_eq!(same, body);
        let shifted = compose_global(
            &body,
            &TrajectoryFrame { orient: Rotation6D::identity(), trans: [1.0, -2.0, 0.5] },
        )
        .unwrap();
        for (a, b) in shifted.joints.iter().zip(&body.joints) {
            assert!(linalg::dist(*a, add(*b, [1.0, -2.0, 0.5])) < 1e-12);
        }
    }

    #[test]
    fn contact_on_static_and_raised_feet() {
        let s = SkeletonConfig::<f64>::desk_default();
        let rest = s.rest_joints().unwrap();
        let standing: Vec<_> = rest.iter().map(|p| add(*p, [0.0, 0.96, 3.0])).collect();
        let seq = PointSeq::from_frames(vec![standing.clone(); 10]);
        let c = detect_foot_contact(&seq, &s, 0.05, 0.15, 30.0);
        assert!(c.iter().flatten().all(|&x| x));
        let raised: Vec<_> = standing.iter().map(|p| add(*p, [0.0, 1.0, 0.0])).collect();
        let seq = PointSeq::from_frames(vec![raised; 10]);
        let c = detect_foot_contact(&seq, &s, 0.05, 0.15, 30.0);
        assert!(c.iter().flatten().all(|&x| !x));
    }
}
