//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] evaluates operations eagerly and records each result as a node.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Graph::backward`] walks it once in reverse.
//!
//! Gradients only flow into nodes that depend on a leaf created with
//! [`Graph::leaf`]. Frozen weights enter through [`Graph::constant`], which
//! lets e.g. a convolution skip its weight gradient while still propagating to
//! its input.

use super::kernels::{self, ConvGeom};
use super::{numel, Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_in: usize },
    InstanceNorm { x: Var, inv_std: Vec<T>, group: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    L2Normalize { x: Var, inv_norm: Vec<T> },
    BceWithLogits { x: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss or was not a gradient-carrying node.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but yields zeros shaped like the node when the
    /// leaf was never reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        [c, h, w] => Ok((1, c, h, w)),
        _ => Err(TensorError::shape(op, format!("expected [N,C,H,W] or [C,H,W], got {shape:?}"))),
    }
}

fn with_channels(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 4 {
        vec![shape[0], c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as fixed (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D convolution with zero padding. `x` is `[N,C,H,W]` or `[C,H,W]`,
    /// `w` is `[C_out, C_in, k, k]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = image_dims(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        let [c_out, c_in, k, k2] = ws[..] else {
            return Err(TensorError::shape("conv2d", format!("weight must be [C_out,C_in,k,k], got {ws:?}")));
        };
        if c_in != c {
            return Err(TensorError::shape("conv2d", format!("input has {c} channels, weight expects {c_in}")));
        }
        if k != k2 || k == 0 {
            return Err(TensorError::contract("conv2d", format!("kernel must be square and non-empty, got {ws:?}")));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::contract("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape("conv2d", format!("bias must be [{c_out}], got {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            channels: c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: ConvGeom::conv_out(h, k, stride, pad),
            wo: ConvGeom::conv_out(wd, k, stride, pad),
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
        );
        let shape = with_channels(self.shape(x), c_out, geom.ho, geom.wo);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geom, c_out }, rg))
    }

    /// Fractionally-strided (transposed) convolution. `w` is `[C_in, C_out, k, k]`;
    /// output side is `(H-1)*stride - 2*pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = image_dims(self.shape(x), "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        let [c_in, c_out, k, k2] = ws[..] else {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("weight must be [C_in,C_out,k,k], got {ws:?}"),
            ));
        };
        if c_in != c {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("input has {c} channels, weight expects {c_in}"),
            ));
        }
        if k != k2 || k == 0 || stride == 0 {
            return Err(TensorError::contract("conv_transpose2d", format!("bad kernel {ws:?} / stride {stride}")));
        }
        if output_padding >= stride {
            return Err(TensorError::contract(
                "conv_transpose2d",
                format!("output_padding {output_padding} must be < stride {stride}"),
            ));
        }
        let full_h = (h - 1) * stride + k + output_padding;
        let full_w = (wd - 1) * stride + k + output_padding;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::contract("conv_transpose2d", format!("padding {pad} consumes the output")));
        }
        let (ho, wo) = (full_h - 2 * pad, full_w - 2 * pad);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape(
                    "conv_transpose2d",
                    format!("bias must be [{c_out}], got {:?}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom { channels: c_out, h: ho, w: wo, k, stride, pad, ho: h, wo: wd };
        debug_assert_eq!(ConvGeom::conv_out(ho, k, stride, pad), h);
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            n,
            c_in,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = with_channels(self.shape(x), c_out, ho, wo);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConvTranspose2d { x, w, b, geom, c_in }, rg))
    }

    // ---- normalization -----------------------------------------------------

    /// Per-(sample, channel) normalization over the two trailing spatial axes,
    /// without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::shape("instance_norm", format!("expected [..,C,H,W], got {shape:?}")));
        }
        if eps <= 0.0 {
            return Err(TensorError::contract("instance_norm", "eps must be positive"));
        }
        let group = shape[shape.len() - 2] * shape[shape.len() - 1];
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), group, eps);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::InstanceNorm { x, inv_std, group }, rg))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(TensorError::shape("batch_norm", format!("expected [N,C,...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let p = numel(&shape[2..]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                "batch_norm",
                format!("affine parameters must be [{c}], got {:?} / {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((n, c, p))
    }

    /// Train-mode batch normalization over (N, spatial) per channel with a
    /// learned affine. Returns the output and the batch statistics used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnBatchStats)> {
        let (n, c, p) = self.bn_dims(x, gamma, beta)?;
        let xs = self.value(x).data();
        let (mean, var) = kernels::channel_moments(xs, n, c, p);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                for (o, v) in xhat[r.clone()].iter_mut().zip(&xs[r]) {
                    *o = T::from_f64((v.as_f64() - mean[ch]) * inv[ch]);
                }
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, n, c, p);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let inv_std = inv.iter().map(|&v| T::from_f64(v)).collect();
        let v = self.push(Tensor::new(&shape, out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BnBatchStats { mean, var }))
    }

    /// Eval-mode batch normalization using supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, p) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::shape("batch_norm", "running statistics do not match channel count"));
        }
        let xs = self.value(x).data();
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                for (o, v) in xhat[r.clone()].iter_mut().zip(&xs[r]) {
                    *o = T::from_f64((v.as_f64() - running_mean[ch]) * inv[ch]);
                }
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, n, c, p);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let inv_std = inv.iter().map(|&v| T::from_f64(v)).collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg))
    }

    fn bn_affine(&self, xhat: &[T], gamma: Var, beta: Var, n: usize, c: usize, p: usize) -> Vec<T> {
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xhat.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                for (o, &xh) in out[r.clone()].iter_mut().zip(&xhat[r]) {
                    *o = g[ch] * xh + bt[ch];
                }
            }
        }
        out
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v < T::zero() { T::zero() } else { v }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(TensorError::contract("leaky_relu", format!("slope {slope} outside [0,1)")));
        }
        let s = T::from_f64(slope);
        Ok(self.unary(x, move |v| if v < T::zero() { s * v } else { v }, Op::LeakyRelu(x, s)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural logarithm; the input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::contract("ln", "input must be strictly positive"));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Ln(x)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("a tensor always matches its own shape")
    }

    // ---- shape manipulation ------------------------------------------------

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::contract("concat", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::contract("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Entries `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::contract(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(x), rg)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::contract("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let d = shape[axis];
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..d {
                let row = &src[(o * d + a) * inner..(o * d + a + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::SumAxis { x, axis }, rg))
    }

    /// `[N,C,H,W]` -> `[N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = image_dims(self.shape(x), "global_avg_pool")?;
        let p = h * w;
        let src = self.value(x).data();
        let data = (0..n * c)
            .map(|i| T::from_f64(src[i * p..(i + 1) * p].iter().map(|v| v.as_f64()).sum::<f64>() / p as f64))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// `y = x W^T + b` for `x: [N,F]`, `w: [O,F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, f], &[o, f2]) = (&xs[..], &ws[..]) else {
            return Err(TensorError::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        };
        if f != f2 {
            return Err(TensorError::shape("linear", format!("input has {f} features, weight expects {f2}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::shape("linear", format!("bias must be [{o}]")));
            }
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            f as isize,
            1,
            self.value(w).data(),
            1,
            f as isize,
            T::zero(),
            &mut out,
            o as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v = *v + bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Scales each row of `[N,F]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [_, f] = shape[..] else {
            return Err(TensorError::shape("l2_normalize", format!("expected [N,F], got {shape:?}")));
        };
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        let mut inv_norm = Vec::with_capacity(shape[0]);
        for (row, out) in src.chunks(f).zip(data.chunks_mut(f)) {
            let norm = (row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() + 1e-12).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = T::from_f64(v.as_f64() / norm);
            }
            inv_norm.push(T::from_f64(1.0 / norm));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::L2Normalize { x, inv_norm }, rg))
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and fixed `target`,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(target, "bce_with_logits")?;
        let xs = self.value(x).data();
        let loss = xs
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.as_f64(), t.as_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / xs.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::BceWithLogits { x, target: target.data().to_vec() },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn send_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if self.rg(v) {
            let t = Tensor::new(self.shape(v), data)?;
            accumulate(&mut grads[v.0], t);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, c_out } => {
                let n = self.value(*x).numel() / (geom.channels * geom.h * geom.w);
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    *c_out,
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.send_data(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.send_data(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = kernels::channel_sums(gd, n, *c_out, geom.patch_count());
                        self.send_data(grads, *b, db)?;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, c_in } => {
                let n = self.value(*x).numel() / (c_in * geom.ho * geom.wo);
                let (dx, dw) = kernels::conv_transpose_backward(
                    self.value(*x).data(),
                    n,
                    *c_in,
                    geom,
                    self.value(*w).data(),
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.send_data(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.send_data(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = kernels::channel_sums(gd, n, geom.channels, geom.h * geom.w);
                        self.send_data(grads, *b, db)?;
                    }
                }
            }
            Op::InstanceNorm { x, inv_std, group } => {
                let dx = kernels::instance_norm_backward(out.data(), inv_std, gd, *group);
                self.send_data(grads, *x, dx)?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } | Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let shape = self.shape(*x);
                let (n, c, p) = (shape[0], shape[1], numel(&shape[2..]));
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                            let (sg, sb) = gd[r.clone()]
                                .iter()
                                .zip(&xhat[r])
                                .fold((0.0, 0.0), |(a, s), (&g, &xh)| (a + g.as_f64() * xh.as_f64(), s + g.as_f64()));
                            dg[ch] = dg[ch] + T::from_f64(sg);
                            db[ch] = db[ch] + T::from_f64(sb);
                        }
                    }
                    self.send_data(grads, *gamma, dg)?;
                    self.send_data(grads, *beta, db)?;
                }
                if self.rg(*x) {
                    let mut dxhat = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                            for (d, &gv) in dxhat[r.clone()].iter_mut().zip(&gd[r]) {
                                *d = gv * gam[ch];
                            }
                        }
                    }
                    let dx = if matches!(node.op, Op::BatchNorm { .. }) {
                        kernels::batch_norm_backward(xhat, inv_std, &dxhat, n, c, p)
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                for d in &mut dxhat[(b * c + ch) * p..(b * c + ch + 1) * p] {
                                    *d = *d * inv_std[ch];
                                }
                            }
                        }
                        dxhat
                    };
                    self.send_data(grads, *x, dx)?;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx = gd.iter().zip(xs).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                self.send_data(grads, *x, dx)?;
            }
            Op::LeakyRelu(x, s) => {
                let xs = self.value(*x).data();
                let dx = gd.iter().zip(xs).map(|(&g, &v)| if v >= T::zero() { g } else { g * *s }).collect();
                self.send_data(grads, *x, dx)?;
            }
            Op::Tanh(x) => {
                let dx = gd.iter().zip(out.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                self.send_data(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(out.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.send_data(grads, *x, dx)?;
            }
            Op::Ln(x) => {
                let dx = gd.iter().zip(self.value(*x).data()).map(|(&g, &v)| g / v).collect();
                self.send_data(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let dx = gd.iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                    self.send_data(grads, *a, dx)?;
                }
                if self.rg(*b) {
                    let dx = gd.iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                    self.send_data(grads, *b, dx)?;
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.send(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let data = gd.to_vec();
                self.send_data(grads, *x, data)?;
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        self.send_data(grads, p, d)?;
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); numel(shape)];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.send_data(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let v = gd[0] / T::from_f64(numel(&shape) as f64);
                self.send(grads, *x, Tensor::full(&shape, v));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let dlen = shape[*axis];
                let mut d = Vec::with_capacity(numel(shape));
                for o in 0..outer {
                    for _ in 0..dlen {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.send_data(grads, *x, d)?;
            }
            Op::GlobalAvgPool(x) => {
                let total = self.value(*x).numel();
                let p = total / gd.len();
                let scale = T::from_f64(1.0 / p as f64);
                let mut d = Vec::with_capacity(total);
                for &gv in gd {
                    d.extend(std::iter::repeat(gv * scale).take(p));
                }
                self.send_data(grads, *x, d)?;
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), gd, o as isize, 1, self.value(*w).data(), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                    self.send_data(grads, *x, dx)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, T::one(), gd, 1, o as isize, self.value(*x).data(), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                    self.send_data(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in gd.chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        self.send_data(grads, *b, db)?;
                    }
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                let f = out.shape()[1];
                let mut d = vec![T::zero(); gd.len()];
                for (r, &inv) in inv_norm.iter().enumerate() {
                    let y = &out.data()[r * f..(r + 1) * f];
                    let gr = &gd[r * f..(r + 1) * f];
                    let dot = y.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
                    for ((dv, &yv), &gv) in d[r * f..(r + 1) * f].iter_mut().zip(y).zip(gr) {
                        *dv = T::from_f64((gv.as_f64() - yv.as_f64() * dot) * inv.as_f64());
                    }
                }
                self.send_data(grads, *x, d)?;
            }
            Op::BceWithLogits { x, target } => {
                let xs = self.value(*x).data();
                let scale = gd[0].as_f64() / xs.len() as f64;
                let d = xs
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| T::from_f64((sigmoid(z).as_f64() - t.as_f64()) * scale))
                    .collect();
                self.send_data(grads, *x, d)?;
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
