use crate::linalg::{cross, dot, Mat3};
use crate::scalar::{lit, Scalar};

use super::tensor::Tensor;

const NORM_EPS: f64 = 1e-8;
const MIN_DEPTH: f64 = 1e-3;

fn v3<T: Scalar>(s: &[T]) -> [T; 3] {
    [s[0], s[1], s[2]]
}

fn norm_eps<T: Scalar>(a: [T; 3]) -> T {
    (dot(a, a) + lit(NORM_EPS * NORM_EPS)).sqrt()
}

struct GramSchmidt<T> {
    b1: [T; 3],
    b2: [T; 3],
    b3: [T; 3],
    n1: T,
    nu: T,
    proj: T,
}

fn gram_schmidt<T: Scalar>(row: &[T]) -> GramSchmidt<T> {
    let (a1, a2) = (v3(&row[0..3]), v3(&row[3..6]));
    let n1 = norm_eps(a1);
    let b1 = a1.map(|x| x / n1);
    let proj = dot(b1, a2);
    let u = [a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]];
    let nu = norm_eps(u);
    let b2 = u.map(|x| x / nu);
    let b3 = cross(b1, b2);
    GramSchmidt { b1, b2, b3, n1, nu, proj }
}

pub(crate) fn rot6d_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.cols, 6, "rot6d_to_mat expects 6 columns");
    let mut out = Tensor::zeros(x.rows, 9);
    for r in 0..x.rows {
        let gs = gram_schmidt(x.row(r));
        let o = out.row_mut(r);
        for i in 0..3 {
            o[i * 3] = gs.b1[i];
            o[i * 3 + 1] = gs.b2[i];
            o[i * 3 + 2] = gs.b3[i];
        }
    }
    out
}

pub(crate) fn rot6d_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, d: &mut [T]) {
    for r in 0..x.rows {
        let row = x.row(r);
        let a2 = v3(&row[3..6]);
        let gs = gram_schmidt(row);
        let gr = g.row(r);
        let col = |c: usize| [gr[c], gr[3 + c], gr[6 + c]];
        let (mut gb1, mut gb2, gb3) = (col(0), col(1), col(2));
        let t1 = cross(gs.b2, gb3);
        let t2 = cross(gb3, gs.b1);
        for i in 0..3 {
            gb1[i] += t1[i];
            gb2[i] += t2[i];
        }
        let k = dot(gs.b2, gb2);
        let gu: [T; 3] = std::array::from_fn(|i| (gb2[i] - gs.b2[i] * k) / gs.nu);
        let bgu = dot(gs.b1, gu);
        let ga2: [T; 3] = std::array::from_fn(|i| gu[i] - gs.b1[i] * bgu);
        for i in 0..3 {
            gb1[i] -= gs.proj * gu[i] + a2[i] * bgu;
        }
        let k1 = dot(gs.b1, gb1);
        let o = &mut d[r * 6..r * 6 + 6];
        for i in 0..3 {
            o[i] += (gb1[i] - gs.b1[i] * k1) / gs.n1;
            o[3 + i] += ga2[i];
        }
    }
}

pub(crate) fn rigid_forward<T: Scalar>(p: &Tensor<T>, rot: &Tensor<T>, trans: &Tensor<T>, group: usize) -> Tensor<T> {
    assert_eq!(p.cols, 3);
    assert_eq!(rot.cols, 9);
    assert_eq!(trans.cols, 3);
    assert_eq!(rot.rows, trans.rows);
    assert_eq!(p.rows, rot.rows * group, "rigid_apply: {} points for {} transforms of group {group}", p.rows, rot.rows);
    let mut out = Tensor::zeros(p.rows, 3);
    for r in 0..p.rows {
        let (m, t, x) = (rot.row(r / group), trans.row(r / group), p.row(r));
        let o = out.row_mut(r);
        for i in 0..3 {
            o[i] = m[i * 3] * x[0] + m[i * 3 + 1] * x[1] + m[i * 3 + 2] * x[2] + t[i];
        }
    }
    out
}

pub(crate) fn rigid_backward_points<T: Scalar>(rot: &Tensor<T>, g: &Tensor<T>, group: usize, d: &mut [T]) {
    for r in 0..g.rows {
        let (m, gr) = (rot.row(r / group), g.row(r));
        for j in 0..3 {
            d[r * 3 + j] += m[j] * gr[0] + m[3 + j] * gr[1] + m[6 + j] * gr[2];
        }
    }
}

pub(crate) fn rigid_backward_rot<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, group: usize, d: &mut [T]) {
    for r in 0..g.rows {
        let (x, gr) = (p.row(r), g.row(r));
        let o = &mut d[(r / group) * 9..(r / group) * 9 + 9];
        for i in 0..3 {
            for j in 0..3 {
                o[i * 3 + j] += gr[i] * x[j];
            }
        }
    }
}

fn mat<T: Scalar>(s: &[T]) -> Mat3<T> {
    Mat3([[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]])
}

pub(crate) fn integrate_forward<T: Scalar>(rot: &Tensor<T>, trans: &Tensor<T>, r0: Mat3<T>, t0: [T; 3]) -> Tensor<T> {
    assert_eq!(rot.cols, 9);
    assert_eq!(trans.cols, 3);
    assert_eq!(rot.rows, trans.rows);
    let n = rot.rows;
    let mut out = Tensor::zeros(n + 1, 12);
    let (mut r, mut t) = (r0, t0);
    let write = |o: &mut [T], r: &Mat3<T>, t: [T; 3]| {
        for i in 0..3 {
            o[i * 3..i * 3 + 3].copy_from_slice(&r.0[i]);
            o[9 + i] = t[i];
        }
    };
    write(out.row_mut(0), &r, t);
    for k in 0..n {
        let dt = r.mul_vec(v3(trans.row(k)));
        t = [t[0] + dt[0], t[1] + dt[1], t[2] + dt[2]];
        r = r * mat(rot.row(k));
        write(out.row_mut(k + 1), &r, t);
    }
    out
}

/// Returns gradients for the relative rotations and translations.
pub(crate) fn integrate_backward<T: Scalar>(
    out: &Tensor<T>,
    rot: &Tensor<T>,
    trans: &Tensor<T>,
    g: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let n = rot.rows;
    let mut drot = vec![T::zero(); n * 9];
    let mut dtrans = vec![T::zero(); n * 3];
    let gr = g.row(n);
    let mut b_r = mat(&gr[0..9]);
    let mut b_t = v3(&gr[9..12]);
    for k in (0..n).rev() {
        let rk = mat(&out.row(k)[0..9]);
        let rkt = rk.transpose();
        let gd = rkt * b_r;
        for i in 0..3 {
            drot[k * 9 + i * 3..k * 9 + i * 3 + 3].copy_from_slice(&gd.0[i]);
        }
        dtrans[k * 3..k * 3 + 3].copy_from_slice(&rkt.mul_vec(b_t));
        let dk = mat(rot.row(k));
        let tk = v3(trans.row(k));
        let mut next = b_r * dk.transpose();
        for i in 0..3 {
            for j in 0..3 {
                next.0[i][j] += b_t[i] * tk[j];
            }
        }
        let gk = g.row(k);
        for i in 0..3 {
            for j in 0..3 {
                next.0[i][j] += gk[i * 3 + j];
            }
            b_t[i] += gk[9 + i];
        }
        b_r = next;
    }
    (drot, dtrans)
}

pub(crate) fn weak_to_full_forward<T: Scalar>(weak: &Tensor<T>, bbox: &[[T; 3]], f: T, pp: [T; 2]) -> Tensor<T> {
    assert_eq!(weak.cols, 3);
    assert_eq!(weak.rows, bbox.len());
    let two = lit::<T>(2.0);
    Tensor::from_fn(weak.rows, 3, |r, c| {
        let w = weak.row(r);
        let [cx, cy, size] = bbox[r];
        let ss = w[0].exp() * size;
        match c {
            0 => w[1] + two * (cx - pp[0]) / ss,
            1 => w[2] + two * (cy - pp[1]) / ss,
            _ => two * f / ss,
        }
    })
}

pub(crate) fn weak_to_full_backward<T: Scalar>(
    weak: &Tensor<T>,
    bbox: &[[T; 3]],
    f: T,
    pp: [T; 2],
    g: &Tensor<T>,
    d: &mut [T],
) {
    let two = lit::<T>(2.0);
    for r in 0..weak.rows {
        let [cx, cy, size] = bbox[r];
        let ss = weak.at(r, 0).exp() * size;
        let gr = g.row(r);
        let terms = [two * (cx - pp[0]) / ss, two * (cy - pp[1]) / ss, two * f / ss];
        d[r * 3] -= gr[0] * terms[0] + gr[1] * terms[1] + gr[2] * terms[2];
        d[r * 3 + 1] += gr[0];
        d[r * 3 + 2] += gr[1];
    }
}

pub(crate) fn project_forward<T: Scalar>(p: &Tensor<T>, f: T, pp: [T; 2]) -> Tensor<T> {
    assert_eq!(p.cols, 3);
    let min = lit::<T>(MIN_DEPTH);
    Tensor::from_fn(p.rows, 2, |r, c| {
        let x = p.row(r);
        f * x[c] / x[2].max(min) + pp[c]
    })
}

pub(crate) fn project_backward<T: Scalar>(p: &Tensor<T>, f: T, g: &Tensor<T>, d: &mut [T]) {
    let min = lit::<T>(MIN_DEPTH);
    for r in 0..p.rows {
        let x = p.row(r);
        let z = x[2].max(min);
        let gr = g.row(r);
        d[r * 3] += gr[0] * f / z;
        d[r * 3 + 1] += gr[1] * f / z;
        if x[2] > min {
            d[r * 3 + 2] -= (gr[0] * x[0] + gr[1] * x[1]) * f / (z * z);
        }
    }
}
