use crate::linalg::Mat3;
use crate::scalar::{lit, Scalar};

use super::attention::{self, AttentionCache, AttentionSpec};
use super::geom_ops;
use super::tensor::{matmul_acc, matmul_grad_a, matmul_grad_b, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention(Box<AttentionCache<T>>),
    Gather { srcs: Vec<Var>, index: Vec<(u32, u32)> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    SumAll(Var),
    RowNorm(Var),
    Rot6dToMat(Var),
    RigidApply { points: Var, rot: Var, trans: Var, group: usize },
    IntegrateCanonical { rot: Var, trans: Var },
    WeakToFull { weak: Var, bbox: Vec<[T; 3]>, focal: T, pp: [T; 2] },
    Project { points: Var, focal: T },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut [T] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(rows, cols));
    }
    &mut slot.as_mut().expect("just filled").data
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `w` shaped `in × out` and `b` shaped `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: input width {} vs weight rows {}", xv.cols, wv.rows);
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols));
            for r in 0..out.rows {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
        }
        matmul_acc(&xv.data, &wv.data, &mut out.data, xv.rows, xv.cols, wv.cols);
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise op on mismatched shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols), "add_row: row shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += x;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect());
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), c.len(), "mul_const: shape");
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().zip(&c).map(|(&x, &y)| x * y).collect());
        let ng = self.ng(&[a]);
        self.push(out, Op::MulConst(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (lit::<T>(GELU_C), lit::<T>(GELU_A));
        let half = lit::<T>(0.5);
        self.map(a, move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = lit::<T>(1e-5);
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = xv.shape();
        assert_eq!(g.shape(), (1, d));
        assert_eq!(b.shape(), (1, d));
        let inv_d = lit::<T>(1.0 / d as f64);
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * g.data[c] + b.data[c];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product attention over row groups; see [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (out, cache) = attention::forward(self.value(q), self.value(k), self.value(v), q, k, v, spec);
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention(Box::new(cache)), ng)
    }

    /// Row `i` of the output is row `index[i].1` of `srcs[index[i].0]`.
    pub fn gather(&mut self, srcs: &[Var], index: Vec<(u32, u32)>) -> Var {
        let cols = self.value(srcs[0]).cols;
        assert!(srcs.iter().all(|&s| self.value(s).cols == cols), "gather: sources differ in width");
        let mut out = Tensor::zeros(index.len(), cols);
        for (i, &(s, r)) in index.iter().enumerate() {
            let src = self.value(srcs[s as usize]);
            out.row_mut(i).copy_from_slice(src.row(r as usize));
        }
        let ng = self.ng(srcs);
        self.push(out, Op::Gather { srcs: srcs.to_vec(), index }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.gather(&[x], rows.iter().map(|&r| (0, r as u32)).collect())
    }

    /// Stacks inputs vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let index = xs
            .iter()
            .enumerate()
            .flat_map(|(s, &x)| (0..self.value(x).rows).map(move |r| (s as u32, r as u32)))
            .collect();
        self.gather(xs, index)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows;
        assert!(xs.iter().all(|&x| self.value(x).rows == rows), "concat_cols: row counts differ");
        let total: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &x in xs {
                let xv = self.value(x);
                out.data[r * total + off..r * total + off + xv.cols].copy_from_slice(xv.row(r));
                off += xv.cols;
            }
        }
        let ng = self.ng(xs);
        self.push(out, Op::ConcatCols(xs.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols, "slice_cols {start}..{end} of {}", xv.cols);
        let out = Tensor::from_fn(xv.rows, end - start, |r, c| xv.at(r, start + c));
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape {}×{} to {rows}×{cols}", xv.rows, xv.cols);
        let out = Tensor::from_vec(rows, cols, xv.data.clone());
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// `Σᵢ weights[i]·(−log softmax(logits[i])[targets[i]])` as a `1×1` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows);
        assert_eq!(weights.len(), lv.rows);
        let mut probs = lv.data.clone();
        let mut loss = T::zero();
        for r in 0..lv.rows {
            let row = &mut probs[r * lv.cols..(r + 1) * lv.cols];
            softmax_in_place(row);
            if weights[r] != T::zero() {
                loss += -weights[r] * row[targets[r]].max(lit(1e-30)).ln();
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            ng,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Euclidean norm of each row, `rows × 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.rows, 1, |r, _| xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt());
        let ng = self.ng(&[x]);
        self.push(out, Op::RowNorm(x), ng)
    }

    /// `n × 6` rotations in 6D form to row-major `n × 9` matrices.
    pub fn rot6d_to_mat(&mut self, x: Var) -> Var {
        let out = geom_ops::rot6d_forward(self.value(x));
        let ng = self.ng(&[x]);
        self.push(out, Op::Rot6dToMat(x), ng)
    }

    /// `points` is `(n·group) × 3`; row `r` is transformed by rotation/translation
    /// row `r / group` (`rot`: `n × 9`, `trans`: `n × 3`).
    pub fn rigid_apply(&mut self, points: Var, rot: Var, trans: Var, group: usize) -> Var {
        let out = geom_ops::rigid_forward(self.value(points), self.value(rot), self.value(trans), group);
        let ng = self.ng(&[points, rot, trans]);
        self.push(out, Op::RigidApply { points, rot, trans, group }, ng)
    }

    /// Integrates per-frame relative motions (`rot`: `n × 9`, `trans`: `n × 3`)
    /// from a fixed anchor. Output is `(n+1) × 12`: rotation matrix then translation.
    pub fn integrate_canonical(&mut self, rot: Var, trans: Var, anchor_rot: Mat3<T>, anchor_trans: [T; 3]) -> Var {
        let out = geom_ops::integrate_forward(self.value(rot), self.value(trans), anchor_rot, anchor_trans);
        let ng = self.ng(&[rot, trans]);
        self.push(out, Op::IntegrateCanonical { rot, trans }, ng)
    }

    /// Weak-perspective `(log s, tx, ty)` rows to full-image translations for
    /// boxes `(cx, cy, size)`.
    pub fn weak_to_full(&mut self, weak: Var, bbox: Vec<[T; 3]>, focal: T, pp: [T; 2]) -> Var {
        let out = geom_ops::weak_to_full_forward(self.value(weak), &bbox, focal, pp);
        let ng = self.ng(&[weak]);
        self.push(out, Op::WeakToFull { weak, bbox, focal, pp }, ng)
    }

    /// Pinhole projection of `n × 3` points to `n × 2` pixels. Depth is clamped
    /// below at 1e-3.
    pub fn project(&mut self, points: Var, focal: T, pp: [T; 2]) -> Var {
        let out = geom_ops::project_forward(self.value(points), focal, pp);
        let ng = self.ng(&[points]);
        self.push(out, Op::Project { points, focal }, ng)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, f: &dyn Fn(&mut [T])| {
            if ng(v) {
                let (r, c) = val(v).shape();
                f(grad_buf(grads, v, r, c));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Linear { x: a, w: b, .. } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows, av.cols, bv.cols);
                acc(grads, *a, &|d| matmul_grad_a(&g.data, &bv.data, d, n, k, m));
                acc(grads, *b, &|d| matmul_grad_b(&av.data, &g.data, d, n, k, m));
                if let Op::Linear { b: Some(bias), .. } = &node.op {
                    acc(grads, *bias, &|d| {
                        for r in 0..n {
                            for (o, &x) in d.iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|d| add_into(d, &g.data));
                acc(grads, *b, &|d| add_into(d, &g.data));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|d| add_into(d, &g.data));
                acc(grads, *b, &|d| d.iter_mut().zip(&g.data).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &|d| {
                    for ((o, &x), &y) in d.iter_mut().zip(&g.data).zip(&bv.data) {
                        *o += x * y;
                    }
                });
                acc(grads, *b, &|d| {
                    for ((o, &x), &y) in d.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, &|d| add_into(d, &g.data));
                acc(grads, *row, &|d| {
                    for r in 0..g.rows {
                        add_into(d, g.row(r));
                    }
                });
            }
            Op::Scale(a, s) => acc(grads, *a, &|d| d.iter_mut().zip(&g.data).for_each(|(o, &x)| *o += x * *s)),
            Op::AddScalar(a) => acc(grads, *a, &|d| add_into(d, &g.data)),
            Op::MulConst(a, c) => acc(grads, *a, &|d| {
                for ((o, &x), &y) in d.iter_mut().zip(&g.data).zip(c) {
                    *o += x * y;
                }
            }),
            Op::Gelu(a) => {
                let av = val(*a);
                let (c, k, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
                let three = lit::<T>(3.0);
                acc(grads, *a, &|d| {
                    for ((o, &x), &gx) in d.iter_mut().zip(&av.data).zip(&g.data) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *o += gx * (half * (T::one() + t) + half * x * dt);
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(grads, *a, &|d| {
                    for ((o, &x), &gx) in d.iter_mut().zip(&av.data).zip(&g.data) {
                        if x > T::zero() {
                            *o += gx;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(grads, *a, &|d| {
                    for ((o, &x), &gx) in d.iter_mut().zip(&av.data).zip(&g.data) {
                        *o += gx * x.signum() * if x == T::zero() { T::zero() } else { T::one() };
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                let two = lit::<T>(2.0);
                acc(grads, *a, &|d| {
                    for ((o, &x), &gx) in d.iter_mut().zip(&av.data).zip(&g.data) {
                        *o += gx * two * x;
                    }
                });
            }
            Op::Exp(a) => acc(grads, *a, &|d| {
                for ((o, &y), &gx) in d.iter_mut().zip(&node.value.data).zip(&g.data) {
                    *o += gx * y;
                }
            }),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, dcols) = g.shape();
                let gv = val(*gamma);
                acc(grads, *gamma, &|d| {
                    for r in 0..n {
                        for c in 0..dcols {
                            d[c] += g.data[r * dcols + c] * xhat[r * dcols + c];
                        }
                    }
                });
                acc(grads, *beta, &|d| {
                    for r in 0..n {
                        add_into(d, g.row(r));
                    }
                });
                let inv_d = lit::<T>(1.0 / dcols as f64);
                acc(grads, *x, &|d| {
                    let mut dxhat = vec![T::zero(); dcols];
                    for r in 0..n {
                        let mut mean_dx = T::zero();
                        let mut mean_dxx = T::zero();
                        for c in 0..dcols {
                            let v = g.data[r * dcols + c] * gv.data[c];
                            dxhat[c] = v;
                            mean_dx += v;
                            mean_dxx += v * xhat[r * dcols + c];
                        }
                        mean_dx *= inv_d;
                        mean_dxx *= inv_d;
                        for c in 0..dcols {
                            d[r * dcols + c] += rstd[r] * (dxhat[c] - mean_dx - xhat[r * dcols + c] * mean_dxx);
                        }
                    }
                });
            }
            Op::Attention(cache) => {
                let want = [ng(cache.q), ng(cache.k), ng(cache.v)];
                let (dq, dk, dv) = attention::backward(cache, val(cache.v), g, want);
                for (var, grad) in [(cache.q, dq), (cache.k, dk), (cache.v, dv)] {
                    if let Some(grad) = grad {
                        acc(grads, var, &|d| add_into(d, &grad.data));
                    }
                }
            }
            Op::Gather { srcs, index } => {
                let cols = g.cols;
                for (s, &src) in srcs.iter().enumerate() {
                    acc(grads, src, &|d| {
                        for (i, &(si, r)) in index.iter().enumerate() {
                            if si as usize == s {
                                let r = r as usize;
                                add_into(&mut d[r * cols..(r + 1) * cols], g.row(i));
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = val(x).cols;
                    acc(grads, x, &|d| {
                        for r in 0..g.rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g.row(r)[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xc = val(*x).cols;
                acc(grads, *x, &|d| {
                    for r in 0..g.rows {
                        add_into(&mut d[r * xc + start..r * xc + start + g.cols], g.row(r));
                    }
                });
            }
            Op::Reshape(x) => acc(grads, *x, &|d| add_into(d, &g.data)),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                acc(grads, *x, &|d| {
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..g.cols {
                            d[r * g.cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let up = g.item();
                let k = val(*logits).cols;
                acc(grads, *logits, &|d| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let s = up * w;
                        for c in 0..k {
                            d[r * k + c] += s * probs[r * k + c];
                        }
                        d[r * k + t] -= s;
                    }
                });
            }
            Op::SumAll(x) => {
                let up = g.item();
                acc(grads, *x, &|d| d.iter_mut().for_each(|o| *o += up));
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                acc(grads, *x, &|d| {
                    for r in 0..xv.rows {
                        let n = node.value.data[r];
                        // zero subgradient at the origin
                        let s = if n > T::zero() { g.data[r] / n } else { T::zero() };
                        for (o, &v) in d[r * xv.cols..(r + 1) * xv.cols].iter_mut().zip(xv.row(r)) {
                            *o += s * v;
                        }
                    }
                });
            }
            Op::Rot6dToMat(x) => acc(grads, *x, &|d| geom_ops::rot6d_backward(val(*x), g, d)),
            Op::RigidApply { points, rot, trans, group } => {
                let (pv, rv) = (val(*points), val(*rot));
                acc(grads, *points, &|d| geom_ops::rigid_backward_points(rv, g, *group, d));
                acc(grads, *rot, &|d| geom_ops::rigid_backward_rot(pv, g, *group, d));
                acc(grads, *trans, &|d| {
                    for r in 0..g.rows {
                        add_into(&mut d[(r / group) * 3..(r / group) * 3 + 3], g.row(r));
                    }
                });
            }
            Op::IntegrateCanonical { rot, trans } => {
                let (dr, dt) = geom_ops::integrate_backward(&node.value, val(*rot), val(*trans), g);
                acc(grads, *rot, &|d| add_into(d, &dr));
                acc(grads, *trans, &|d| add_into(d, &dt));
            }
            Op::WeakToFull { weak, bbox, focal, pp } => {
                acc(grads, *weak, &|d| geom_ops::weak_to_full_backward(val(*weak), bbox, *focal, *pp, g, d));
            }
            Op::Project { points, focal } => {
                acc(grads, *points, &|d| geom_ops::project_backward(val(*points), *focal, g, d));
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (o, &x) in d.iter_mut().zip(g) {
        *o += x;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
