//! Reverse-mode automatic differentiation on dynamically shaped `f64` tensors.
//!
//! The engine is a flat tape: every operation appends a node whose value is
//! computed eagerly, and [`Graph::backward`] walks the tape in reverse,
//! *building gradient nodes with the same ops*. Because gradients are
//! themselves tape nodes, a second `backward` over a scalar built from them
//! yields second-order derivatives. That is what makes the gradient-penalty
//! term of the critic objective trainable: its parameter gradient requires
//! differentiating through an input-gradient norm.
//!
//! Shapes are NHWC throughout. Broadcasting is explicit: binary elementwise
//! ops require identical shapes, and `broadcast_to`/`sum_to_shape` form an
//! adjoint pair used whenever shapes differ.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

/// Dynamically shaped tensor of `f64`.
pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of an im2col/col2im lowering for a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(input_shape.len(), 4, "conv input must be NHWC");
        let (batch, in_h, in_w, in_c) =
            (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        assert!(stride >= 1 && kernel >= 1);
        assert!(
            in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel,
            "kernel larger than padded input"
        );
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        ConvGeom { batch, in_h, in_w, in_c, kernel, stride, pad, out_h, out_w }
    }

    /// Rows of the lowered patch matrix.
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the lowered patch matrix (kernel * kernel * channels).
    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`, elementwise (the shift vanishes in the vjp).
    Affine { x: Var, scale: f64 },
    /// Elementwise product with a captured constant (used for ReLU masks).
    ScaleBy { x: Var, mask: Arc<Tensor> },
    /// 1/x with the convention 1/0 = 0.
    RecipGuard(Var),
    Sqrt(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu { x: Var, slope: f64 },
    /// Elementwise `max(l,0) - l*t + ln(1+exp(-|l|))`.
    BceWithLogits { logits: Var, targets: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape { x: Var },
    BroadcastTo { x: Var },
    SumToShape { x: Var },
    SumAll(Var),
    /// Sum over one axis, keeping it with length 1.
    SumAxis { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize, len: usize },
    PadZeroAxis { x: Var, axis: usize, before: usize },
    Im2Col { x: Var, geom: ConvGeom },
    Col2Im { x: Var, geom: ConvGeom },
    Upsample2x(Var),
    SumPool2x(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of eagerly evaluated tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d (or single-element) node as a plain `f64`.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar_value on non-scalar node");
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::from_elem(IxDyn(&[]), x))
    }

    pub fn zeros_like(&mut self, v: Var) -> Var {
        let shape = self.value(v).raw_dim();
        self.leaf(Tensor::zeros(shape))
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// a / b with 0 wherever b is exactly 0.
    pub fn div_guard(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip_guard(b);
        self.mul(a, r)
    }

    fn binary_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        out
    }

    // ---- elementwise unary ----

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).mapv(|t| scale * t + shift);
        self.push(v, Op::Affine { x, scale })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    fn scale_by(&mut self, x: Var, mask: Arc<Tensor>) -> Var {
        let v = self.binary_values_const(x, &mask, |a, m| a * m);
        self.push(v, Op::ScaleBy { x, mask })
    }

    fn binary_values_const(&self, a: Var, c: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape());
        let mut out = va.clone();
        out.zip_mut_with(c, |x, &y| *x = f(*x, y));
        out
    }

    pub fn recip_guard(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| if t == 0.0 { 0.0 } else { 1.0 / t });
        self.push(v, Op::RecipGuard(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid_stable);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|t| if t > 0.0 { t } else { slope * t });
        self.push(v, Op::LeakyRelu { x, slope })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Elementwise Bernoulli negative log-likelihood with the prediction
    /// parameterized by logits: `max(l,0) - l*t + ln(1+exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Var {
        let v = self.binary_values(logits, targets, |l, t| {
            l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
        });
        self.push(v, Op::BceWithLogits { logits, targets })
    }

    // ---- linear algebra / shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let vb = self
            .value(b)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        assert_eq!(va.shape()[1], vb.shape()[0], "matmul inner dims differ");
        let out = va.dot(&vb).into_dyn();
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 2, "transpose expects rank 2");
        let out = v.view().reversed_axes().to_owned();
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape length mismatch");
        let out = v
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape failed");
        self.push(out, Op::Reshape { x })
    }

    /// Broadcast `x` up to `shape`. Either `x` is 0-d, or ranks match and
    /// every differing axis of `x` has length 1.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        let out = v
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", v.shape(), shape))
            .to_owned();
        self.push(out, Op::BroadcastTo { x })
    }

    /// Adjoint of `broadcast_to`: sum `x` down to `shape`.
    pub fn sum_to_shape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        let out = sum_to(v, shape);
        self.push(out, Op::SumToShape { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_elem(IxDyn(&[]), s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn sum_axis_keep(&mut self, x: Var, axis: usize) -> Var {
        let v = self.value(x);
        let mut out = v.sum_axis(Axis(axis));
        out.insert_axis_inplace(Axis(axis));
        self.push(out, Op::SumAxis { x })
    }

    pub fn mean_axis_keep(&mut self, x: Var, axis: usize) -> Var {
        let n = self.value(x).shape()[axis] as f64;
        let s = self.sum_axis_keep(x, axis);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(out, Op::SliceAxis { x, axis, start, len })
    }

    pub fn pad_zero_axis(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Var {
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape[axis] += before + after;
        let mut out = Tensor::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(before..before + v.shape()[axis]))
            .assign(v);
        self.push(out, Op::PadZeroAxis { x, axis, before })
    }

    // ---- convolution lowering ----

    /// Lower NHWC input to a `[N*OH*OW, k*k*C]` patch matrix.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let v = self.value(x);
        assert_eq!(
            v.shape(),
            &[geom.batch, geom.in_h, geom.in_w, geom.in_c],
            "im2col input shape mismatch"
        );
        let out = im2col_values(v, &geom);
        self.push(out, Op::Im2Col { x, geom })
    }

    /// Adjoint of [`Graph::im2col`]: scatter-add patches back to NHWC.
    pub fn col2im(&mut self, x: Var, geom: ConvGeom) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape(), &[geom.rows(), geom.cols()], "col2im input shape mismatch");
        let out = col2im_values(v, &geom);
        self.push(out, Op::Col2Im { x, geom })
    }

    /// Nearest-neighbour 2x upsampling of NHWC input.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 4);
        let (n, h, w, c) = dims4(v.shape());
        let mut out = Tensor::zeros(IxDyn(&[n, 2 * h, 2 * w, c]));
        {
            let src = v.as_slice().expect("contiguous");
            let dst = out.as_slice_mut().unwrap();
            for b in 0..n {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        let s = ((b * h + i / 2) * w + j / 2) * c;
                        let d = ((b * 2 * h + i) * 2 * w + j) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        self.push(out, Op::Upsample2x(x))
    }

    /// Adjoint of [`Graph::upsample2x`]: sum over each 2x2 block.
    pub fn sum_pool2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 4);
        let (n, h, w, c) = dims4(v.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2x needs even spatial dims");
        let mut out = Tensor::zeros(IxDyn(&[n, h / 2, w / 2, c]));
        {
            let src = v.as_slice().expect("contiguous");
            let dst = out.as_slice_mut().unwrap();
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let s = ((b * h + i) * w + j) * c;
                        let d = ((b * (h / 2) + i / 2) * (w / 2) + j / 2) * c;
                        for ch in 0..c {
                            dst[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
        self.push(out, Op::SumPool2x(x))
    }

    // ---- backward ----

    /// Reverse-mode gradients of a 0-d `loss` with respect to `wrt`.
    ///
    /// Gradient nodes are appended to the tape, so the returned `Var`s can
    /// feed further differentiable computation (second-order derivatives).
    /// Unreachable entries come back as zero tensors.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(loss).ndim(), 0, "backward expects a 0-d loss");
        let upper = loss.0 + 1;
        let mut needed = vec![false; upper];
        needed[loss.0] = true;
        for id in (0..upper).rev() {
            if needed[id] {
                for p in op_parents(&self.nodes[id].op) {
                    needed[p.0] = true;
                }
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; upper];
        grads[loss.0] = Some(self.scalar(1.0));
        for id in (0..upper).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes[id].op.clone();
            for (parent, contrib) in self.vjp(Var(id), &op, g) {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }
        wrt.iter()
            .map(|w| grads[w.0].unwrap_or_else(|| {
                let shape = self.value(*w).raw_dim();
                self.leaf(Tensor::zeros(shape))
            }))
            .collect()
    }

    /// Vector-Jacobian product of one node: contributions to each parent.
    fn vjp(&mut self, out: Var, op: &Op, g: Var) -> Vec<(Var, Var)> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(*a, g), (*b, nb)]
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, *b);
                let db = self.mul(g, *a);
                vec![(*a, da), (*b, db)]
            }
            Op::Affine { x, scale, .. } => {
                let dx = self.mul_scalar(g, *scale);
                vec![(*x, dx)]
            }
            Op::ScaleBy { x, mask } => {
                let dx = self.scale_by(g, mask.clone());
                vec![(*x, dx)]
            }
            Op::RecipGuard(x) => {
                // d(1/x)/dx = -1/x^2 = -out^2; guarded zero stays zero.
                let sq = self.square(out);
                let m = self.mul(g, sq);
                let dx = self.neg(m);
                vec![(*x, dx)]
            }
            Op::Sqrt(x) => {
                // d sqrt/dx = 1/(2 sqrt(x)); zero input contributes zero.
                let r = self.recip_guard(out);
                let h = self.mul_scalar(r, 0.5);
                let dx = self.mul(g, h);
                vec![(*x, dx)]
            }
            Op::Exp(x) => {
                let dx = self.mul(g, out);
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let one_minus = self.affine(out, -1.0, 1.0);
                let d = self.mul(out, one_minus);
                let dx = self.mul(g, d);
                vec![(*x, dx)]
            }
            Op::Tanh(x) => {
                let sq = self.square(out);
                let d = self.affine(sq, -1.0, 1.0);
                let dx = self.mul(g, d);
                vec![(*x, dx)]
            }
            Op::LeakyRelu { x, slope } => {
                let mask =
                    Arc::new(self.value(*x).mapv(|t| if t > 0.0 { 1.0 } else { *slope }));
                let dx = self.scale_by(g, mask);
                vec![(*x, dx)]
            }
            Op::BceWithLogits { logits, targets } => {
                // d/dl = sigmoid(l) - t; d/dt = -l.
                let s = self.sigmoid(*logits);
                let diff = self.sub(s, *targets);
                let dl = self.mul(g, diff);
                let nl = self.neg(*logits);
                let dt = self.mul(g, nl);
                vec![(*logits, dl), (*targets, dt)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(*b);
                let da = self.matmul(g, bt);
                let at = self.transpose(*a);
                let db = self.matmul(at, g);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => {
                let dx = self.transpose(g);
                vec![(*x, dx)]
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.reshape(g, &shape);
                vec![(*x, dx)]
            }
            Op::BroadcastTo { x } => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.sum_to_shape(g, &shape);
                vec![(*x, dx)]
            }
            Op::SumToShape { x } => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.broadcast_to(g, &shape);
                vec![(*x, dx)]
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.broadcast_to(g, &shape);
                vec![(*x, dx)]
            }
            Op::SumAxis { x } => {
                let shape = self.value(*x).shape().to_vec();
                let dx = self.broadcast_to(g, &shape);
                vec![(*x, dx)]
            }
            Op::Concat { parts, axis } => {
                let mut out_grads = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    let dp = self.slice_axis(g, *axis, start, len);
                    out_grads.push((*p, dp));
                    start += len;
                }
                out_grads
            }
            Op::SliceAxis { x, axis, start, len } => {
                let total = self.value(*x).shape()[*axis];
                let dx = self.pad_zero_axis(g, *axis, *start, total - (start + len));
                vec![(*x, dx)]
            }
            Op::PadZeroAxis { x, axis, before } => {
                let len = self.value(*x).shape()[*axis];
                let dx = self.slice_axis(g, *axis, *before, len);
                vec![(*x, dx)]
            }
            Op::Im2Col { x, geom } => {
                let dx = self.col2im(g, *geom);
                vec![(*x, dx)]
            }
            Op::Col2Im { x, geom } => {
                let dx = self.im2col(g, *geom);
                vec![(*x, dx)]
            }
            Op::Upsample2x(x) => {
                let dx = self.sum_pool2x(g);
                vec![(*x, dx)]
            }
            Op::SumPool2x(x) => {
                let dx = self.upsample2x(g);
                vec![(*x, dx)]
            }
        }
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
        Op::Affine { x, .. }
        | Op::ScaleBy { x, .. }
        | Op::RecipGuard(x)
        | Op::Sqrt(x)
        | Op::Exp(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::LeakyRelu { x, .. }
        | Op::Transpose(x)
        | Op::Reshape { x }
        | Op::BroadcastTo { x }
        | Op::SumToShape { x }
        | Op::SumAll(x)
        | Op::SumAxis { x }
        | Op::SliceAxis { x, .. }
        | Op::PadZeroAxis { x, .. }
        | Op::Im2Col { x, .. }
        | Op::Col2Im { x, .. }
        | Op::Upsample2x(x)
        | Op::SumPool2x(x) => vec![*x],
        Op::Concat { parts, .. } => parts.clone(),
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum `src` down to `target` shape (adjoint of broadcasting).
fn sum_to(src: &Tensor, target: &[usize]) -> Tensor {
    if target.is_empty() {
        return Tensor::from_elem(IxDyn(&[]), src.sum());
    }
    assert_eq!(src.ndim(), target.len(), "sum_to_shape rank mismatch");
    let mut out = src.to_owned();
    for (axis, (&s, &t)) in src.shape().iter().zip(target.iter()).enumerate() {
        if s != t {
            assert_eq!(t, 1, "sum_to_shape target axis must be 1 or equal");
            let mut summed = out.sum_axis(Axis(axis));
            summed.insert_axis_inplace(Axis(axis));
            out = summed;
        }
    }
    out
}

fn im2col_values(x: &Tensor, geom: &ConvGeom) -> Tensor {
    let g = geom;
    let mut out = Tensor::zeros(IxDyn(&[g.rows(), g.cols()]));
    let src = x.as_slice().expect("im2col input must be contiguous");
    let dst = out.as_slice_mut().unwrap();
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * g.cols();
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let s = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let d = row + (ky * g.kernel + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im_values(cols: &Tensor, geom: &ConvGeom) -> Tensor {
    let g = geom;
    let mut out = Tensor::zeros(IxDyn(&[g.batch, g.in_h, g.in_w, g.in_c]));
    let src = cols.as_slice().expect("col2im input must be contiguous");
    let dst = out.as_slice_mut().unwrap();
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * g.cols();
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let d = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let s = row + (ky * g.kernel + kx) * c;
                        for ch in 0..c {
                            dst[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
    }
    out
}
