//! Rotation algebra, root-trajectory canonicalization, pinhole projection and
//! similarity alignment.
//!
//! Rotations are carried as matrices internally; the 6D form (first two matrix
//! columns) only appears at interfaces.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cross, dot, norm, scale, sub, Mat3, Vec3};
use crate::scalar::{lit, Scalar};

const DEGENERATE_EPS: f64 = 1e-8;
const ROTATION_TOL: f64 = 1e-4;
const MIN_DEPTH: f64 = 1e-6;

/// Continuous 6D rotation: first column then second column of a rotation
/// matrix, not necessarily normalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D<T> {
    pub r: [T; 6],
}

impl<T: Scalar> Rotation6D<T> {
    pub fn new(r: [T; 6]) -> Self {
        Rotation6D { r }
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Rotation6D { r: [o, z, z, z, o, z] }
    }

    pub fn col0(&self) -> Vec3<T> {
        [self.r[0], self.r[1], self.r[2]]
    }

    pub fn col1(&self) -> Vec3<T> {
        [self.r[3], self.r[4], self.r[5]]
    }

    pub fn to_matrix(&self) -> Result<Mat3<T>> {
        rot6d_to_matrix(self)
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Rotation6D<U> {
        Rotation6D { r: self.r.map(|x| lit(x.as_f64())) }
    }
}

/// Gram-Schmidt on the two stored columns, third column by cross product.
pub fn rot6d_to_matrix<T: Scalar>(rot: &Rotation6D<T>) -> Result<Mat3<T>> {
    let a1 = rot.col0();
    let a2 = rot.col1();
    let n1 = norm(a1);
    let n2 = norm(a2);
    let eps = lit::<T>(DEGENERATE_EPS);
    if !(n1 > eps) || !(n2 > eps) {
        return Err(Error::DegenerateInput("6D rotation column has near-zero norm"));
    }
    if !(norm(cross(a1, a2)) / (n1 * n2) > eps) {
        return Err(Error::DegenerateInput("6D rotation columns are parallel"));
    }
    let b1 = scale(a1, T::one() / n1);
    let proj = sub(a2, scale(b1, dot(b1, a2)));
    let b2 = scale(proj, T::one() / norm(proj));
    let b3 = cross(b1, b2);
    Ok(Mat3::from_cols(b1, b2, b3))
}

pub fn matrix_to_rot6d<T: Scalar>(m: &Mat3<T>) -> Result<Rotation6D<T>> {
    let err = m.orthonormality_error();
    if !(err <= lit(ROTATION_TOL)) || !(m.det() > T::zero()) {
        return Err(Error::NotARotation(err.as_f64()));
    }
    let c0 = m.col(0);
    let c1 = m.col(1);
    Ok(Rotation6D { r: [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]] })
}

/// Root state for one frame: orientation and translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame<T> {
    pub orient: Rotation6D<T>,
    pub trans: Vec3<T>,
}

impl<T: Scalar> TrajectoryFrame<T> {
    pub fn identity() -> Self {
        TrajectoryFrame { orient: Rotation6D::identity(), trans: linalg::zero3() }
    }

    pub fn from_matrix(m: &Mat3<T>, trans: Vec3<T>) -> Result<Self> {
        Ok(TrajectoryFrame { orient: matrix_to_rot6d(m)?, trans })
    }

    pub fn is_finite(&self) -> bool {
        self.orient.is_finite() && self.trans.iter().all(|x| x.is_finite())
    }

    /// Flattened `[orient(6), trans(3)]`.
    pub fn to_array(&self) -> [T; 9] {
        let r = self.orient.r;
        [r[0], r[1], r[2], r[3], r[4], r[5], self.trans[0], self.trans[1], self.trans[2]]
    }

    pub fn from_array(a: &[T]) -> Self {
        TrajectoryFrame {
            orient: Rotation6D::new([a[0], a[1], a[2], a[3], a[4], a[5]]),
            trans: [a[6], a[7], a[8]],
        }
    }

    pub fn cast<U: Scalar>(&self) -> TrajectoryFrame<U> {
        TrajectoryFrame { orient: self.orient.cast(), trans: linalg::cast3(self.trans) }
    }
}

/// World-frame root trajectory sampled at `fps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub frames: Vec<TrajectoryFrame<T>>,
    pub fps: T,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(frames: Vec<TrajectoryFrame<T>>, fps: T) -> Self {
        Trajectory { frames, fps }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn translations(&self) -> Vec<Vec3<T>> {
        self.frames.iter().map(|f| f.trans).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Trajectory<U> {
        Trajectory { frames: self.frames.iter().map(|f| f.cast()).collect(), fps: lit(self.fps.as_f64()) }
    }
}

/// Per-frame motion toward the next frame, expressed in the current root frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTrajectory<T> {
    pub deltas: Vec<TrajectoryFrame<T>>,
    pub fps: T,
}

impl<T: Scalar> CanonicalTrajectory<T> {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// Frame `t` of the result holds `Φₜ⁻¹Φₜ₊₁` and `Φₜ⁻¹(γₜ₊₁ − γₜ)`.
pub fn canonicalize_trajectory<T: Scalar>(traj: &Trajectory<T>) -> Result<CanonicalTrajectory<T>> {
    if traj.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: traj.len() });
    }
    let rots = traj.frames.iter().map(|f| f.orient.to_matrix()).collect::<Result<Vec<_>>>()?;
    let deltas = traj
        .frames
        .windows(2)
        .zip(rots.windows(2))
        .map(|(f, r)| {
            let inv = r[0].transpose();
            TrajectoryFrame::from_matrix(&(inv * r[1]), inv.mul_vec(sub(f[1].trans, f[0].trans)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CanonicalTrajectory { deltas, fps: traj.fps })
}

/// Integrates canonical deltas starting from `anchor`; the first output frame
/// is `anchor` itself.
pub fn decanonicalize_trajectory<T: Scalar>(
    canon: &CanonicalTrajectory<T>,
    anchor: &TrajectoryFrame<T>,
) -> Result<Trajectory<T>> {
    if !anchor.is_finite() || canon.deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::DegenerateInput("non-finite trajectory component"));
    }
    let mut rot = anchor.orient.to_matrix()?;
    let mut trans = anchor.trans;
    let mut frames = Vec::with_capacity(canon.len() + 1);
    frames.push(*anchor);
    for d in &canon.deltas {
        let dr = d.orient.to_matrix()?;
        trans = linalg::add(trans, rot.mul_vec(d.trans));
        rot = rot * dr;
        frames.push(TrajectoryFrame { orient: matrix_to_rot6d(&rot)?, trans });
    }
    Ok(Trajectory { frames, fps: canon.fps })
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub focal: T,
    pub principal_point: [T; 2],
    pub image_size: [T; 2],
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(focal: T, principal_point: [T; 2], image_size: [T; 2]) -> Result<Self> {
        let cam = CameraIntrinsics { focal, principal_point, image_size };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > T::zero()) {
            return Err(Error::InvalidIntrinsics("focal length must be positive"));
        }
        if !(self.image_size[0] > T::zero() && self.image_size[1] > T::zero()) {
            return Err(Error::InvalidIntrinsics("image size must be positive"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            focal: lit(self.focal.as_f64()),
            principal_point: self.principal_point.map(|x| lit(x.as_f64())),
            image_size: self.image_size.map(|x| lit(x.as_f64())),
        }
    }
}

pub fn project_point<T: Scalar>(p: Vec3<T>, cam: &CameraIntrinsics<T>) -> Option<[T; 2]> {
    if !(p[2] > lit(MIN_DEPTH)) {
        return None;
    }
    Some([
        cam.focal * p[0] / p[2] + cam.principal_point[0],
        cam.focal * p[1] / p[2] + cam.principal_point[1],
    ])
}

/// `(u, v) = focal·(x/z, y/z) + principal_point`.
pub fn project_points<T: Scalar>(points: &[Vec3<T>], cam: &CameraIntrinsics<T>) -> Result<Vec<[T; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(index, &p)| project_point(p, cam).ok_or(Error::BehindCamera { index, z: p[2].as_f64() }))
        .collect()
}

/// Converts a crop-space weak-perspective camera `(s, tx, ty)` of a box
/// `(cx, cy, size)` into a full-image root translation.
///
/// Depth is `2f/(s·size)`; the lateral terms add the box-center offset from the
/// principal point so that the projected root lands on
/// `box center + (tx, ty)·s·size/2`.
pub fn crop_cam_to_full_translation<T: Scalar>(
    weak: [T; 3],
    bbox: [T; 3],
    cam: &CameraIntrinsics<T>,
) -> Result<Vec3<T>> {
    let [s, tx, ty] = weak;
    let [cx, cy, size] = bbox;
    let denom = s * size;
    if !(denom > lit(MIN_DEPTH)) {
        return Err(Error::DegenerateScale(denom.as_f64()));
    }
    let two = lit::<T>(2.0);
    Ok([
        tx + two * (cx - cam.principal_point[0]) / denom,
        ty + two * (cy - cam.principal_point[1]) / denom,
        two * cam.focal / denom,
    ])
}

/// `p ↦ scale·R·p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity<T> {
    pub scale: T,
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> Similarity<T> {
    pub fn identity() -> Self {
        Similarity { scale: T::one(), rotation: Mat3::identity(), translation: linalg::zero3() }
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        linalg::add(scale(self.rotation.mul_vec(p), self.scale), self.translation)
    }

    pub fn apply_all(&self, points: &[Vec3<T>]) -> Vec<Vec3<T>> {
        points.iter().map(|&p| self.apply(p)).collect()
    }
}

/// Mean squared distance between corresponding points.
pub fn mean_squared_error<T: Scalar>(a: &[Vec3<T>], b: &[Vec3<T>]) -> T {
    let n = lit::<T>(a.len().max(1) as f64);
    a.iter().zip(b).map(|(&p, &q)| dot(sub(p, q), sub(p, q))).sum::<T>() / n
}

fn to_na<T: Scalar>(p: Vec3<T>) -> Vector3<f64> {
    Vector3::new(p[0].as_f64(), p[1].as_f64(), p[2].as_f64())
}

fn fit_similarity<T: Scalar>(pred: &[Vec3<T>], gt: &[Vec3<T>], with_scale: bool) -> Result<Similarity<T>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::Degenerate("need at least three points"));
    }
    let n = pred.len() as f64;
    let mu_p = pred.iter().map(|&p| to_na(p)).sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().map(|&p| to_na(p)).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_p = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let pc = to_na(p) - mu_p;
        let gc = to_na(g) - mu_g;
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut sv = svd.singular_values;
    // nalgebra does not sort singular values
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted = [sv[order[0]], sv[order[1]], sv[order[2]]];
    if !(sorted[0] > 0.0) || !(sorted[1] > 1e-12 * sorted[0]) || !(var_p > 0.0) {
        return Err(Error::Degenerate("cross-covariance is rank-deficient"));
    }
    let d = if (u.determinant() * v_t.determinant()) < 0.0 { -1.0 } else { 1.0 };
    // flip the direction belonging to the smallest singular value
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    signs[order[2]] = d;
    let rot = u * Matrix3::from_diagonal(&signs) * v_t;
    for i in 0..3 {
        sv[i] *= signs[i];
    }
    let s = if with_scale { sv.sum() / var_p } else { 1.0 };
    let t = mu_g - s * rot * mu_p;
    let mut rotation = Mat3::<T>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rotation.0[i][j] = lit(rot[(i, j)]);
        }
    }
    Ok(Similarity { scale: lit(s), rotation, translation: [lit(t[0]), lit(t[1]), lit(t[2])] })
}

/// Least-squares similarity transform mapping `pred` onto `gt` (Umeyama).
pub fn procrustes_align<T: Scalar>(pred: &[Vec3<T>], gt: &[Vec3<T>]) -> Result<Similarity<T>> {
    fit_similarity(pred, gt, true)
}

/// Least-squares rigid transform (no scale) mapping `pred` onto `gt`.
pub fn rigid_align<T: Scalar>(pred: &[Vec3<T>], gt: &[Vec3<T>]) -> Result<Similarity<T>> {
    fit_similarity(pred, gt, false)
}
