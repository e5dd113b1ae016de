//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every op appends one node whose inputs precede it, so the tape is acyclic by
//! construction and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::{NumericsError, Real, SurrogateSpec, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, bias: Var },
    AddBroadcast { x: Var, y: Var },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, center: Option<Arc<[bool]>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Surrogate { x: Var, lower: T, upper: T },
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    LinearAttention { q: Var, k: Var, v: Var, heads: usize },
    SpatialMask { x: Var, mask: Arc<[bool]> },
    ReplaceRows { x: Var, token: Var, mask: Arc<[bool]> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of tensor values and the operations that produced them.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last `backward`, if the node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = self.value(a).zip_map(self.value(b), f).expect("checked shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        Ok(self.elementwise(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        Ok(self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        Ok(self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `x + bias` with `bias` broadcast along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [cols] {
            return Err(shape_err("add_bias", format!("bias {:?} for rows of {cols}", self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += *bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// `x + y` where `y` matches `x` without its leading (batch) axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var, NumericsError> {
        if self.shape(x).len() < 2 || self.shape(x)[1..] != *self.shape(y) {
            return Err(shape_err("add_broadcast", format!("{:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        let yd = self.value(y).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(yd.len()) {
            row.iter_mut().zip(&yd).for_each(|(v, w)| *v += *w);
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::AddBroadcast { x, y }, rg))
    }

    /// `[m,k] x [k,n]` or batched `[B,m,k] x [B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), batch, m, k, n, false, false);
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, n }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var, NumericsError> {
        self.conv2d_impl(x, w, bias, stride, padding, groups, None)
    }

    /// Convolution evaluated only at active output centers (`[N, out_h, out_w]`);
    /// every inactive center is exactly zero.
    pub fn conv2d_masked(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
        center: Arc<[bool]>,
    ) -> Result<Var, NumericsError> {
        self.conv2d_impl(x, w, bias, stride, padding, groups, Some(center))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_impl(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
        center: Option<Arc<[bool]>>,
    ) -> Result<Var, NumericsError> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        if let Some(c) = &center {
            if c.len() != geom.batch * geom.out_h * geom.out_w {
                return Err(shape_err(
                    "conv2d_masked",
                    format!("center mask of {} for output {:?}", c.len(), geom.out_shape()),
                ));
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            center.as_deref(),
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, bias, geom, center }, rg))
    }

    fn channel_layout(&self, op: &'static str, x: Var, p: Var) -> Result<(usize, usize, usize), NumericsError> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(op, format!("needs [N, C, ...], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if self.shape(p) != [c] {
            return Err(shape_err(op, format!("parameter {:?} for {c} channels", self.shape(p))));
        }
        let spatial = s[2..].iter().product();
        Ok((n, c, spatial))
    }

    /// Training-mode batch normalization over channel axis 1.
    ///
    /// Returns the output together with the batch mean and biased variance.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>), NumericsError> {
        let (n, c, sp) = self.channel_layout("batchnorm", x, gamma)?;
        self.channel_layout("batchnorm", x, beta)?;
        let xd = self.value(x).data();
        let count = T::of((n * sp) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().copied().sum::<T>();
            }
            mean[ch] = s / count;
            let mut q = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                    let d = v - mean[ch];
                    q += d * d;
                }
            }
            var[ch] = q / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, mean, var))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var, NumericsError> {
        let (n, c, sp) = self.channel_layout("channel_affine", x, gamma)?;
        self.channel_layout("channel_affine", x, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("channel_affine", format!("stats of {} / {} for {c}", mean.len(), var.len())));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                    out[i] = gd[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta, mean: mean.to_vec(), inv_std }, rg))
    }

    /// Elementwise `forward` whose backward is the surrogate window: the upstream
    /// gradient passes where `lower <= input <= upper` and is zeroed elsewhere.
    pub fn custom_grad(&mut self, x: Var, forward: impl Fn(T) -> T, surrogate: SurrogateSpec) -> Var {
        let value = self.value(x).map(forward);
        let rg = self.rg(x);
        let (lower, upper) = (T::of(surrogate.lower), T::of(surrogate.upper));
        self.push(value, Op::Surrogate { x, lower, upper }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_fwd(v));
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("perm {perm:?} for shape {shape:?}")));
        }
        let (out_shape, out) = permute_raw(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap_or(&1);
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Layer normalization along the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NumericsError> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(shape_err("layernorm", format!("params for last axis {cols}")));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let nf = T::of(cols as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(xd.len() / cols.max(1));
        for (r, row) in xd.chunks(cols).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let i = r * cols + j;
                xhat[i] = (row[j] - mean) * is;
                out[i] = gd[j] * xhat[i] + bd[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("mean_spatial", format!("{s:?}")));
        }
        let sp = s[2] * s[3];
        let inv = T::one() / T::of(sp as f64);
        let out: Vec<T> = self.value(x).data().chunks(sp).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanSpatial(x), rg))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
            loss -= row[label].max(T::min_positive_value()).ln();
        }
        let value = Tensor::scalar(loss / T::of(labels.len() as f64));
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Per-head `Q (K^T V)` over `[N, C, ...]` feature maps whose trailing axes
    /// are the tokens. `K^T V` is formed first.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq != sk || sq.len() < 3 || sv.len() != sq.len() || sv[0] != sq[0] || sv[2..] != sq[2..] {
            return Err(shape_err("linear_attention", format!("q {sq:?} k {sk:?} v {sv:?}")));
        }
        if heads == 0 || sq[1] % heads != 0 || sv[1] % heads != 0 {
            return Err(NumericsError::InvalidParameter(format!(
                "{heads} heads must divide q channels {} and v channels {}",
                sq[1], sv[1]
            )));
        }
        let dims = AttnDims { n: sq[0], cq: sq[1], cv: sv[1], l: sq[2..].iter().product(), heads };
        let out = attn_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), &dims);
        let mut out_shape = sv.clone();
        out_shape[1] = dims.cv;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, Op::LinearAttention { q, k, v, heads }, rg))
    }

    /// Zero every spatial position of `[N, C, H, W]` whose `[N, H, W]` mask is false.
    pub fn spatial_mask(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || mask.len() != s[0] * s[2] * s[3] {
            return Err(shape_err("spatial_mask", format!("mask of {} for {s:?}", mask.len())));
        }
        let mut value = self.value(x).clone();
        apply_spatial_mask(value.data_mut(), &s, &mask);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SpatialMask { x, mask }, rg))
    }

    /// Rows of `[N, L, W]` flagged in the `[N, L]` mask are replaced by `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: Arc<[bool]>) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] || self.shape(token) != [s[2]] {
            return Err(shape_err("replace_rows", format!("x {s:?} token {:?}", self.shape(token))));
        }
        let tok = self.value(token).data().to_vec();
        let mut value = self.value(x).clone();
        for (row, &m) in value.data_mut().chunks_mut(s[2]).zip(mask.iter()) {
            if m {
                row.copy_from_slice(&tok);
            }
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(value, Op::ReplaceRows { x, token, mask }, rg))
    }

    /// Reverse sweep from a single-element `loss`. Gradients of earlier calls are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                acc(*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::AddBias { x, bias } => {
                let cols = self.nodes[bias.0].value.len();
                let mut db = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                acc(*x, g.to_vec());
                acc(*bias, db);
            }
            Op::AddBroadcast { x, y } => {
                let cols = self.nodes[y.0].value.len();
                let mut dy = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    dy.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                acc(*x, g.to_vec());
                acc(*y, dy);
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.rg(*a) {
                    // dA[m,k] = dC[m,n] * B^T
                    acc(*a, matmul_raw(g, val(*b), batch, m, n, k, false, true));
                }
                if self.rg(*b) {
                    // dB[k,n] = A^T * dC
                    acc(*b, matmul_raw(val(*a), g, batch, k, m, n, true, false));
                }
            }
            Op::Conv2d { x, w, bias, geom, center } => {
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), g, geom, center.as_deref());
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let gd = val(*gamma);
                let count = T::of((n * sp) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch] / count;
                            for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                                dx[i] = k * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ChannelAffine { x, gamma, beta, mean, inv_std } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let (xd, gd) = (val(*x), val(*gamma));
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                            dx[i] = g[i] * gd[ch] * inv_std[ch];
                            dgamma[ch] += g[i] * (xd[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Surrogate { x, lower, upper } => {
                let xd = val(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gi, &u)| if u >= *lower && u <= *upper { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, g.iter().zip(xd).map(|(&gi, &u)| if u > T::zero() { gi } else { T::zero() }).collect());
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, g.iter().zip(xd).map(|(&gi, &u)| gi * gelu_grad(u)).collect());
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_raw(g, node.value.shape(), &inverse);
                acc(*x, back);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let cols = self.nodes[gamma.0].value.len();
                let gd = val(*gamma);
                let nf = T::of(cols as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                for (r, gr) in g.chunks(cols).enumerate() {
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..cols {
                        let dxh = gr[j] * gd[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..cols {
                        let dxh = gr[j] * gd[j];
                        dx[r * cols + j] = inv_std[r] / nf * (nf * dxh - s1 - xh[j] * s2);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MeanSpatial(x) => {
                let s = self.nodes[x.0].value.shape();
                let sp = s[2] * s[3];
                let inv = T::one() / T::of(sp as f64);
                acc(*x, g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, sp)).collect());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, dx);
            }
            Op::LinearAttention { q, k, v, heads } => {
                let (sq, sv) = (self.nodes[q.0].value.shape(), self.nodes[v.0].value.shape());
                let dims = AttnDims { n: sq[0], cq: sq[1], cv: sv[1], l: sq[2..].iter().product(), heads: *heads };
                let (dq, dk, dv) = attn_backward(val(*q), val(*k), val(*v), g, &dims);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SpatialMask { x, mask } => {
                let mut dx = g.to_vec();
                apply_spatial_mask(&mut dx, node.value.shape(), mask);
                acc(*x, dx);
            }
            Op::ReplaceRows { x, token, mask } => {
                let w = self.nodes[token.0].value.len();
                let mut dx = g.to_vec();
                let mut dt = vec![T::zero(); w];
                for (row, &m) in dx.chunks_mut(w).zip(mask.iter()) {
                    if m {
                        dt.iter_mut().zip(row.iter()).for_each(|(d, &r)| *d += r);
                        row.iter_mut().for_each(|r| *r = T::zero());
                    }
                }
                acc(*x, dx);
                acc(*token, dt);
            }
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn apply_spatial_mask<T: Real>(data: &mut [T], shape: &[usize], mask: &[bool]) {
    let (n, c, sp) = (shape[0], shape[1], shape[2] * shape[3]);
    for b in 0..n {
        let m = &mask[b * sp..(b + 1) * sp];
        for ch in 0..c {
            let plane = &mut data[(b * c + ch) * sp..(b * c + ch + 1) * sp];
            plane.iter_mut().zip(m).for_each(|(v, &on)| {
                if !on {
                    *v = T::zero()
                }
            });
        }
    }
}

/// Batched product with optional transposition of either operand.
/// Logical shapes: op(a) is `[m,k]`, op(b) is `[k,n]` per batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_raw<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if trans_a { ab[p * m + i] } else { ab[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                if trans_b {
                    for j in 0..n {
                        orow[j] += av * bb[j * k + p];
                    }
                } else {
                    let brow = &bb[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
    }
    out
}

fn permute_raw<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

struct AttnDims {
    n: usize,
    cq: usize,
    cv: usize,
    l: usize,
    heads: usize,
}

fn attn_forward<T: Real>(q: &[T], k: &[T], v: &[T], d: &AttnDims) -> Vec<T> {
    let (dq, dv) = (d.cq / d.heads, d.cv / d.heads);
    let mut out = vec![T::zero(); d.n * d.cv * d.l];
    let mut kv = vec![T::zero(); dq * dv];
    for b in 0..d.n {
        for h in 0..d.heads {
            kv.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..dq {
                let kr = &k[(b * d.cq + h * dq + i) * d.l..][..d.l];
                for j in 0..dv {
                    let vr = &v[(b * d.cv + h * dv + j) * d.l..][..d.l];
                    kv[i * dv + j] = kr.iter().zip(vr).map(|(&a, &c)| a * c).sum();
                }
            }
            for j in 0..dv {
                let orow = &mut out[(b * d.cv + h * dv + j) * d.l..][..d.l];
                for i in 0..dq {
                    let w = kv[i * dv + j];
                    if w == T::zero() {
                        continue;
                    }
                    let qr = &q[(b * d.cq + h * dq + i) * d.l..][..d.l];
                    orow.iter_mut().zip(qr).for_each(|(o, &qq)| *o += qq * w);
                }
            }
        }
    }
    out
}

fn attn_backward<T: Real>(q: &[T], k: &[T], v: &[T], g: &[T], d: &AttnDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (dqh, dvh) = (d.cq / d.heads, d.cv / d.heads);
    let (mut gq, mut gk, mut gv) = (vec![T::zero(); q.len()], vec![T::zero(); k.len()], vec![T::zero(); v.len()]);
    let mut kv = vec![T::zero(); dqh * dvh];
    let mut gkv = vec![T::zero(); dqh * dvh];
    let l = d.l;
    for b in 0..d.n {
        for h in 0..d.heads {
            let qrow = |i: usize| (b * d.cq + h * dqh + i) * l;
            let vrow = |j: usize| (b * d.cv + h * dvh + j) * l;
            for i in 0..dqh {
                for j in 0..dvh {
                    let (kr, vr, qr, gr) = (&k[qrow(i)..][..l], &v[vrow(j)..][..l], &q[qrow(i)..][..l], &g[vrow(j)..][..l]);
                    kv[i * dvh + j] = kr.iter().zip(vr).map(|(&a, &c)| a * c).sum();
                    gkv[i * dvh + j] = qr.iter().zip(gr).map(|(&a, &c)| a * c).sum();
                }
            }
            for i in 0..dqh {
                for j in 0..dvh {
                    let (w, gw) = (kv[i * dvh + j], gkv[i * dvh + j]);
                    for t in 0..l {
                        gq[qrow(i) + t] += g[vrow(j) + t] * w;
                        gk[qrow(i) + t] += v[vrow(j) + t] * gw;
                        gv[vrow(j) + t] += k[qrow(i) + t] * gw;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
