use rand::Rng;

use crate::tensor::{
    matmul_into, numel, Element, Result, Tensor, TensorError, COSINE_EPS, LAYER_NORM_EPS,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Normalize { x: Var, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarianceAxis(Var, usize),
    Concat(Vec<Var>, usize),
    SelectRows(Var, Vec<usize>),
    MaskMul(Var, Vec<T>),
    StraightThrough(Var, T),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations recorded in execution order.
///
/// Every operation evaluates eagerly and appends one node; [`Graph::backward`]
/// replays the nodes in reverse. A graph is meant to live for a single
/// forward/backward pass: build a fresh one per training step.
#[derive(Debug, Clone)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.shapes.get(v.0).map_or(&[][..], Vec::as_slice)),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

struct Axes {
    outer: usize,
    len: usize,
    inner: usize,
}

fn split_axis(shape: &[usize], axis: usize) -> Axes {
    Axes {
        outer: numel(&shape[..axis]),
        len: shape[axis],
        inner: numel(&shape[axis + 1..]),
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Element>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    /// A graph in training mode: dropout is active.
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::Offset(x))
    }

    fn trailing_check(&self, a: Var, b: Var, op: &'static str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || numel(sb) == 0 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(numel(sb))
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a` (bias, positional table).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.trailing_check(a, b, "add_trailing")?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o = *o + y;
            }
        }
        self.push("add_trailing", out, Op::AddTrailing(a, b), &[a, b])
    }

    /// `a * b` with the same broadcasting rule as [`Graph::add_trailing`].
    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.trailing_check(a, b, "mul_trailing")?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o = *o * y;
            }
        }
        self.push("mul_trailing", out, Op::MulTrailing(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bsz * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            matmul_into(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let v = Tensor::new(&[bsz, m, n], out)?;
        self.push("bmm", v, Op::BatchMatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let v = Tensor::new(&out_shape, data)?;
        self.push("permute", v, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape(x).to_vec(),
            });
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", |v| v.ln(), Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, Op::Square(x))
    }

    fn last_axis(&self, x: Var, op: &'static str) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            Some(_) => Err(TensorError::EmptyReduction { op }),
            None => Err(TensorError::Rank {
                op,
                expected: 1,
                shape: Vec::new(),
            }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis(x, "softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// `log Σ exp` over the last axis; the axis is dropped.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis(x, "logsumexp")?;
        let xs = self.value(x);
        let mut shape = xs.shape().to_vec();
        shape.pop();
        let data = xs
            .data()
            .chunks(d)
            .map(|row| {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
            })
            .collect();
        let v = Tensor::new(&shape, data)?;
        self.push("logsumexp", v, Op::LogSumExp(x), &[x])
    }

    /// Standardises the last axis (ε = 1e-5, no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis(x, "layer_norm")?;
        let n = T::from_usize(d).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Rows of the last axis scaled to unit length, `x / (‖x‖ + 1e-12)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis(x, "normalize")?;
        let eps = T::lit(COSINE_EPS);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in row.iter_mut() {
                *v = *v / (n + eps);
            }
            norms.push(n);
        }
        self.push("normalize", out, Op::Normalize { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::EmptyReduction { op: "mean" });
        }
        let v = Tensor::scalar(self.value(x).sum() / T::from_usize(n).unwrap());
        self.push("mean", v, Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, op: &'static str) -> Result<(Axes, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op, axis, shape });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyReduction { op });
        }
        let ax = split_axis(&shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((ax, out_shape))
    }

    fn axis_sums(&self, x: Var, ax: &Axes) -> Vec<T> {
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for i in 0..ax.len {
                let base = (o * ax.len + i) * ax.inner;
                for j in 0..ax.inner {
                    out[o * ax.inner + j] = out[o * ax.inner + j] + xd[base + j];
                }
            }
        }
        out
    }

    /// Sum over `axis`, which is dropped from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (ax, shape) = self.reduce_axis(x, axis, "sum_axis")?;
        let v = Tensor::new(&shape, self.axis_sums(x, &ax))?;
        self.push("sum_axis", v, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (ax, shape) = self.reduce_axis(x, axis, "mean_axis")?;
        let n = T::from_usize(ax.len).unwrap();
        let data = self.axis_sums(x, &ax).into_iter().map(|s| s / n).collect();
        let v = Tensor::new(&shape, data)?;
        self.push("mean_axis", v, Op::MeanAxis(x, axis), &[x])
    }

    /// Population variance over `axis` (divides by the axis length).
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (ax, shape) = self.reduce_axis(x, axis, "variance")?;
        let n = T::from_usize(ax.len).unwrap();
        let means: Vec<T> = self.axis_sums(x, &ax).into_iter().map(|s| s / n).collect();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for i in 0..ax.len {
                let base = (o * ax.len + i) * ax.inner;
                for j in 0..ax.inner {
                    let dlt = xd[base + j] - means[o * ax.inner + j];
                    out[o * ax.inner + j] = out[o * ax.inner + j] + dlt * dlt;
                }
            }
        }
        let data = out.into_iter().map(|s| s / n).collect();
        let v = Tensor::new(&shape, data)?;
        self.push("variance", v, Op::VarianceAxis(x, axis), &[x])
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        self.push("concat", v, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Gathers rows of `x` viewed as `[rows, last_dim]`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(idx)?;
        self.push("select_rows", v, Op::SelectRows(x, idx.to_vec()), &[x])
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(mask, "mask")?;
        let v = self.value(x).zip_map(mask, "mask", |a, b| a * b)?;
        self.push("mask", v, Op::MaskMul(x, mask.data().to_vec()), &[x])
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let data = (0..numel(&shape))
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = Tensor::new(&shape, data)?;
        self.mask(x, &m)
    }

    /// Hard step `[x > 0]` forward, `d/dx σ(τx)` backward.
    pub fn straight_through(&mut self, x: Var, tau: T) -> Result<Var> {
        if tau <= T::zero() {
            return Err(TensorError::Invalid {
                op: "straight_through",
                msg: "temperature must be positive".into(),
            });
        }
        self.unary(
            x,
            "straight_through",
            |v| if v > T::zero() { T::one() } else { T::zero() },
            Op::StraightThrough(x, tau),
        )
    }

    // Composites built from the primitives above.

    /// `x · w (+ b)` for `x: [n×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_trailing(y, b),
            None => Ok(y),
        }
    }

    /// Layer norm followed by a learned scale and shift.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.layer_norm(x)?;
        let s = self.mul_trailing(n, gamma)?;
        self.add_trailing(s, beta)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Row-wise cosine over the last axis; the axis is dropped.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let na = self.normalize(a)?;
        let nb = self.normalize(b)?;
        let p = self.mul(na, nb)?;
        let last = self.shape(p).len() - 1;
        self.sum_axis(p, last)
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let n = self.value(a).len();
        let fa = self.reshape(a, &[1, n])?;
        let fb = self.reshape(b, &[1, n])?;
        let c = self.cosine_rows(fa, fb)?;
        self.reshape(c, &[])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        };
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass that adds into `grads` (gradients accumulate across calls).
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        grads.grads.resize(self.nodes.len(), None);
        grads.shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut work: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut work)?;
            match &mut grads.grads[i] {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        work: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut work[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?)?;
                send(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?)?;
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * *c))?,
            Op::Offset(a) => send(*a, g.clone())?,
            Op::AddTrailing(a, b) => {
                send(*a, g.clone())?;
                let n = val(*b).len();
                let mut gb = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (s, &v) in gb.iter_mut().zip(chunk) {
                        *s = *s + v;
                    }
                }
                send(*b, Tensor::new(val(*b).shape(), gb)?)?;
            }
            Op::MulTrailing(a, b) => {
                let bv = val(*b).data();
                let n = bv.len();
                let mut ga = g.clone();
                for chunk in ga.data_mut().chunks_mut(n) {
                    for (o, &w) in chunk.iter_mut().zip(bv) {
                        *o = *o * w;
                    }
                }
                send(*a, ga)?;
                let mut gb = vec![T::zero(); n];
                for (gc, ac) in g.data().chunks(n).zip(val(*a).data().chunks(n)) {
                    for ((s, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
                        *s = *s + gv * av;
                    }
                }
                send(*b, Tensor::new(val(*b).shape(), gb)?)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    send(*a, g.matmul(&bv.transpose()?)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, av.transpose()?.matmul(g)?)?;
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let gd = g.data();
                if self.nodes[a.0].needs_grad {
                    let bt = permute_data(bv.data(), bv.shape(), &[0, 2, 1]).0;
                    let mut ga = vec![T::zero(); bsz * m * k];
                    for i in 0..bsz {
                        matmul_into(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bt[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*a, Tensor::new(av.shape(), ga)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    let at = permute_data(av.data(), av.shape(), &[0, 2, 1]).0;
                    let mut gb = vec![T::zero(); bsz * k * n];
                    for i in 0..bsz {
                        matmul_into(
                            &at[i * k * m..(i + 1) * k * m],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    send(*b, Tensor::new(bv.shape(), gb)?)?;
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (data, _) = permute_data(g.data(), g.shape(), &inv);
                send(*a, Tensor::new(val(*a).shape(), data)?)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?)?,
            Op::Relu(a) => send(
                *a,
                g.zip_map(
                    val(*a),
                    "relu",
                    |gv, x| if x > T::zero() { gv } else { T::zero() },
                )?,
            )?,
            Op::Gelu(a) => send(*a, g.zip_map(val(*a), "gelu", |gv, x| gv * gelu_grad(x))?)?,
            Op::Sigmoid(a) => send(
                *a,
                g.zip_map(y, "sigmoid", |gv, s| gv * s * (T::one() - s))?,
            )?,
            Op::Tanh(a) => send(*a, g.zip_map(y, "tanh", |gv, t| gv * (T::one() - t * t))?)?,
            Op::Exp(a) => send(*a, g.zip_map(y, "exp", |gv, e| gv * e)?)?,
            Op::Log(a) => send(*a, g.zip_map(val(*a), "log", |gv, x| gv / x)?)?,
            Op::Softplus(a) => send(*a, g.zip_map(val(*a), "softplus", |gv, x| gv * sigmoid(x))?)?,
            Op::Square(a) => send(*a, g.zip_map(val(*a), "square", |gv, x| gv * (x + x))?)?,
            Op::Softmax(a) => {
                let d = y.cols();
                let mut ga = g.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let s = gr
                        .iter()
                        .zip(yr)
                        .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - s);
                    }
                }
                send(*a, ga)?;
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let d = x.cols();
                let mut ga = x.clone();
                for ((row, &gv), &lse) in ga.data_mut().chunks_mut(d).zip(g.data()).zip(y.data()) {
                    for v in row.iter_mut() {
                        *v = gv * (*v - lse).exp();
                    }
                }
                send(*a, ga)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let d = y.cols();
                let n = T::from_usize(d).unwrap();
                let mut gx = g.clone();
                for ((gr, yr), &inv) in gx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(inv_std)
                {
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr
                        .iter()
                        .zip(yr)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                        / n;
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = inv * (*gv - mg - yv * mgy);
                    }
                }
                send(*x, gx)?;
            }
            Op::Normalize { x, norms } => {
                let xv = val(*x);
                let d = xv.cols();
                let eps = T::lit(COSINE_EPS);
                let mut gx = g.clone();
                for ((gr, xr), &n) in gx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(norms)
                {
                    let s = n + eps;
                    let xg = gr
                        .iter()
                        .zip(xr)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    let k = if n > T::zero() {
                        xg / (s * s * n)
                    } else {
                        T::zero()
                    };
                    for (gv, &xe) in gr.iter_mut().zip(xr) {
                        *gv = *gv / s - xe * k;
                    }
                }
                send(*x, gx)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(val(*a).shape(), gv))?;
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.data()[0] / T::from_usize(x.len()).unwrap();
                send(*a, Tensor::full(x.shape(), gv))?;
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = val(*a);
                let ax = split_axis(x.shape(), *axis);
                let scale = match node.op {
                    Op::MeanAxis(..) => T::one() / T::from_usize(ax.len).unwrap(),
                    _ => T::one(),
                };
                let gd = g.data();
                let mut out = Vec::with_capacity(x.len());
                for o in 0..ax.outer {
                    for _ in 0..ax.len {
                        out.extend(
                            gd[o * ax.inner..(o + 1) * ax.inner]
                                .iter()
                                .map(|&v| v * scale),
                        );
                    }
                }
                send(*a, Tensor::new(x.shape(), out)?)?;
            }
            Op::VarianceAxis(a, axis) => {
                let x = val(*a);
                let ax = split_axis(x.shape(), *axis);
                let n = T::from_usize(ax.len).unwrap();
                let two_over_n = T::lit(2.0) / n;
                let xd = x.data();
                let gd = g.data();
                let mut out = vec![T::zero(); x.len()];
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let mut mean = T::zero();
                        for i in 0..ax.len {
                            mean = mean + xd[(o * ax.len + i) * ax.inner + j];
                        }
                        mean = mean / n;
                        let gv = gd[o * ax.inner + j] * two_over_n;
                        for i in 0..ax.len {
                            let p = (o * ax.len + i) * ax.inner + j;
                            out[p] = gv * (xd[p] - mean);
                        }
                    }
                }
                send(*a, Tensor::new(x.shape(), out)?)?;
            }
            Op::Concat(xs, axis) => {
                let shape = y.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let xv = val(x);
                    let len = xv.shape()[*axis] * inner;
                    let mut part = Vec::with_capacity(xv.len());
                    for o in 0..outer {
                        let start = o * total + offset;
                        part.extend_from_slice(&g.data()[start..start + len]);
                    }
                    offset += len;
                    send(x, Tensor::new(xv.shape(), part)?)?;
                }
            }
            Op::SelectRows(a, idx) => {
                let x = val(*a);
                let d = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row(r);
                    for (o, &v) in ga.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                send(*a, ga)?;
            }
            Op::MaskMul(a, m) => {
                let data = g.data().iter().zip(m).map(|(&gv, &mv)| gv * mv).collect();
                send(*a, Tensor::new(g.shape(), data)?)?;
            }
            Op::StraightThrough(a, tau) => {
                let t = *tau;
                send(
                    *a,
                    g.zip_map(val(*a), "straight_through", |gv, x| {
                        let s = sigmoid(t * x);
                        gv * t * s * (T::one() - s)
                    })?,
                )?;
            }
        }
        Ok(())
    }
}
