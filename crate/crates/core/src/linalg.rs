//! Fixed-size 3-vector and 3×3 matrix helpers.

use std::ops::{Index, IndexMut, Mul};

use crate::scalar::{lit, Scalar};

pub type Vec3<T> = [T; 3];

#[inline]
pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    norm(sub(a, b))
}

pub fn zero3<T: Scalar>() -> Vec3<T> {
    [T::zero(); 3]
}

pub fn cast3<A: Scalar, B: Scalar>(v: Vec3<A>) -> Vec3<B> {
    [lit(v[0].as_f64()), lit(v[1].as_f64()), lit(v[2].as_f64())]
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Scalar> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn zeros() -> Self {
        Mat3([[T::zero(); 3]; 3])
    }

    pub fn from_cols(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Mat3([
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ])
    }

    pub fn col(&self, j: usize) -> Vec3<T> {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for x in row.iter_mut() {
                *x = *x * s;
            }
        }
        out
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        worst
    }

    /// Max deviation of `MᵀM` from the identity.
    pub fn orthonormality_error(&self) -> T {
        (self.transpose() * *self).max_abs_diff(&Mat3::identity())
    }

    pub fn rot_x(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, c, -s], [z, s, c]])
    }

    pub fn rot_y(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Mat3([[c, z, s], [z, o, z], [-s, z, c]])
    }

    pub fn rot_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Mat3([[c, -s, z], [s, c, z], [z, z, o]])
    }

    /// Rodrigues formula; `axis` need not be normalized. A zero axis yields the identity.
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Self {
        let n = norm(axis);
        if n <= T::epsilon() {
            return Mat3::identity();
        }
        let [x, y, z] = scale(axis, T::one() / n);
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        Mat3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    /// Unit quaternion (w, x, y, z) to rotation matrix.
    pub fn from_quaternion(q: [T; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let two = lit::<T>(2.0);
        let o = T::one();
        Mat3([
            [o - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
            [two * (x * y + w * z), o - two * (x * x + z * z), two * (y * z - w * x)],
            [two * (x * z - w * y), two * (y * z + w * x), o - two * (x * x + y * y)],
        ])
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> T {
        let tr = self.0[0][0] + self.0[1][1] + self.0[2][2];
        let c = ((tr - T::one()) / lit(2.0)).max(-T::one()).min(T::one());
        c.acos()
    }

    pub fn cast<U: Scalar>(&self) -> Mat3<U> {
        let mut out = Mat3::<U>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = lit(self.0[i][j].as_f64());
            }
        }
        out
    }
}

impl<T: Scalar> Mul for Mat3<T> {
    type Output = Mat3<T>;

    fn mul(self, rhs: Self) -> Self {
        let mut out = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc = acc + self.0[i][k] * rhs.0[k][j];
                }
                out.0[i][j] = acc;
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for Mat3<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.0[i][j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat3<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.0[i][j]
    }
}

/// A flat sequence of `frames × points` 3-vectors (joints or vertices over time).
#[derive(Clone, Debug, PartialEq)]
pub struct PointSeq<T> {
    pub frames: usize,
    pub points: usize,
    pub data: Vec<Vec3<T>>,
}

impl<T: Scalar> PointSeq<T> {
    pub fn new(frames: usize, points: usize) -> Self {
        PointSeq { frames, points, data: vec![zero3(); frames * points] }
    }

    pub fn from_frames(frames: Vec<Vec<Vec3<T>>>) -> Self {
        let points = frames.first().map_or(0, Vec::len);
        assert!(frames.iter().all(|f| f.len() == points), "ragged point sequence");
        PointSeq { frames: frames.len(), points, data: frames.into_iter().flatten().collect() }
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[Vec3<T>] {
        &self.data[t * self.points..(t + 1) * self.points]
    }

    #[inline]
    pub fn frame_mut(&mut self, t: usize) -> &mut [Vec3<T>] {
        &mut self.data[t * self.points..(t + 1) * self.points]
    }

    #[inline]
    pub fn at(&self, t: usize, p: usize) -> Vec3<T> {
        self.data[t * self.points + p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.points == other.points
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, Vec3<T>) -> Vec3<T>) -> Self {
        let mut out = self.clone();
        for t in 0..self.frames {
            for p in 0..self.points {
                out.data[t * self.points + p] = f(t, p, self.at(t, p));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> PointSeq<U> {
        PointSeq { frames: self.frames, points: self.points, data: self.data.iter().map(|v| cast3(*v)).collect() }
    }
}
