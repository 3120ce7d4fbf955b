//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Forward calls push nodes and
//! return [`Var`] handles; [`Tape::backward`] walks the arena in reverse and
//! accumulates gradients into every node that requires them. Ops reference
//! only earlier nodes, so reverse index order is a topological order.
//!
//! The element type is generic: training runs in `f32`, gradient checks run
//! the same graph builders in `f64`. Reductions accumulate in `f64` either
//! way so scalar losses are precise enough for central differences.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix3, Ix4, IxDyn};

/// Element type the tape can compute with.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Per-sample constant scale along axis 0.
    RowScale(usize, Vec<f64>),
    MatMul(usize, usize),
    /// Batched matmul `[B,M,K] x [B,K,N]`; `trans_b` multiplies by `b^T` per slice.
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Silu(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
    },
    SoftmaxLast(usize),
    Square(usize),
    Abs(usize),
    MeanAll(usize),
    SumAll(usize),
    MeanAxis(usize, usize),
    Reshape(usize),
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    UpsampleNearest2(usize),
    AvgPool2(usize),
    /// `x: [N,C,H,W]` plus a per-sample channel bias `[N,C]`.
    AddChanBias {
        x: usize,
        b: usize,
    },
    /// `x: [N,F]` plus a shared bias `[F]`.
    AddBias1 {
        x: usize,
        b: usize,
    },
    /// Repeat a tensor along a new axis 0.
    BroadcastRow0(usize),
    /// Per-row choice between two same-shaped tensors: `mask[n]` picks `b`.
    SelectRows {
        a: usize,
        b: usize,
        mask: Vec<bool>,
    },
    /// `[N,C,H,W] -> [N, H*W, C]`.
    NchwToNlc(usize),
    /// `[N,L,C] -> [N,C,H,W]` with `L = h*w`.
    NlcToNchw {
        x: usize,
        h: usize,
        w: usize,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_s<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus_s<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) without overflow.
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().copied().next().unwrap()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, targets, frozen buffers).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = T::cast(c);
        let v = self.nodes[a.0].value.mapv(|x| cs * x);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = T::cast(c);
        let v = self.nodes[a.0].value.mapv(|x| x + cs);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a.0), ng)
    }

    /// Scale sample `n` (axis 0) by `coef[n]`. Coefficients carry no gradient.
    pub fn row_scale(&mut self, a: Var, coef: Vec<f64>) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.shape()[0], coef.len(), "row_scale: batch mismatch");
        let mut v = x.clone();
        for (mut row, &c) in v.axis_iter_mut(Axis(0)).zip(coef.iter()) {
            let cs = T::cast(c);
            row.mapv_inplace(|t| t * cs);
        }
        let ng = self.needs(a);
        self.push(v, Op::RowScale(a.0, coef), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs must be 3-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs must be 3-d");
        let (bn, m, _k) = av.dim();
        let n = if trans_b { bv.dim().1 } else { bv.dim().2 };
        let mut out = ndarray::Array3::<T>::zeros((bn, m, n));
        for i in 0..bn {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let prod = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::Bmm { a: a.0, b: b.0, trans_b }, ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input must be [N,C,H,W]");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight must be [Cout,Cin,k,k]");
        let (n, cin, h, wd) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d: channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad);
        let wmat = wv
            .to_shape((cout, cin * kh * kw))
            .expect("conv2d weight reshape")
            .to_owned();
        // [Cout, N*Ho*Wo] so each (c, n) plane is one contiguous copy.
        let ymat = wmat.dot(&cols.t());

        let mut out = ndarray::Array4::<T>::zeros((n, cout, ho, wo));
        {
            let ys = ymat.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let plane = ho * wo;
            for c in 0..cout {
                let yrow = &ys[c * n * plane..(c + 1) * n * plane];
                for ni in 0..n {
                    let dst = &mut os[(ni * cout + c) * plane..(ni * cout + c + 1) * plane];
                    dst.copy_from_slice(&yrow[ni * plane..(ni + 1) * plane]);
                }
            }
        }
        if let Some(bias) = b {
            let bv = self.nodes[bias.0].value.clone();
            let bs = bv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let plane = ho * wo;
            for ni in 0..n {
                for c in 0..cout {
                    let bb = bs[c];
                    for t in &mut os[(ni * cout + c) * plane..(ni * cout + c + 1) * plane] {
                        *t = *t + bb;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid_s(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_s);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus_s);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a.0), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::cast(slope);
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { s * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a.0, slope), ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("group_norm input must be [N,C,H,W]");
        let (n, c, h, w) = xv.dim();
        assert!(c % groups == 0, "group_norm: channels not divisible by groups");
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let gs = gv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        let cg = c / groups;
        let m = (cg * h * w) as f64;
        let plane = h * w;
        let xs = xv.to_slice().expect("group_norm input must be contiguous");
        let mut out = ndarray::Array4::<T>::zeros((n, c, h, w));
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for g in 0..groups {
                let (mean, inv) = group_stats(xs, ni, g, cg, c, plane, m);
                for cc in g * cg..(g + 1) * cg {
                    let base = (ni * c + cc) * plane;
                    let (gm, gb) = (gs[cc], bs[cc]);
                    let mean_t = T::cast(mean);
                    let inv_t = T::cast(inv);
                    for (o, &xi) in os[base..base + plane].iter_mut().zip(&xs[base..base + plane]) {
                        *o = gm * ((xi - mean_t) * inv_t) + gb;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
            },
            ng,
        )
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let mx = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = 0.0f64;
            for t in lane.iter_mut() {
                *t = (*t - mx).exp();
                sum += t.as_f64();
            }
            let inv = T::cast(1.0 / sum);
            lane.mapv_inplace(|t| t * inv);
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxLast(a.0), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        let ng = self.needs(a);
        self.push(v, Op::Abs(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s: f64 = x.iter().map(|t| t.as_f64()).sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), T::cast(s / x.len() as f64));
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a.0), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s: f64 = x.iter().map(|t| t.as_f64()).sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), T::cast(s));
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .mean_axis(Axis(axis))
            .expect("mean_axis: empty axis");
        let ng = self.needs(a);
        self.push(v, Op::MeanAxis(a.0, axis), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a.0), ng)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let na = av.shape()[axis];
        let mut shape = av.shape().to_vec();
        shape[axis] += bv.shape()[axis];
        // Built by assignment so the result is standard layout.
        let mut v = ArrayD::<T>::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), ndarray::Slice::from(0..na))
            .assign(av);
        v.slice_axis_mut(Axis(axis), ndarray::Slice::from(na..))
            .assign(bv);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Concat { a: a.0, b: b.0, axis }, ng)
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let xv = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample input must be [N,C,H,W]");
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<T>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for cc in 0..c {
                for hh in 0..h {
                    for ww in 0..w {
                        let v = xv[(ni, cc, hh, ww)];
                        out[(ni, cc, 2 * hh, 2 * ww)] = v;
                        out[(ni, cc, 2 * hh, 2 * ww + 1)] = v;
                        out[(ni, cc, 2 * hh + 1, 2 * ww)] = v;
                        out[(ni, cc, 2 * hh + 1, 2 * ww + 1)] = v;
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::UpsampleNearest2(a.0), ng)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let xv = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("avg_pool input must be [N,C,H,W]");
        let (n, c, h, w) = xv.dim();
        let quarter = T::cast(0.25);
        let mut out = ndarray::Array4::<T>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for cc in 0..c {
                for hh in 0..h / 2 {
                    for ww in 0..w / 2 {
                        out[(ni, cc, hh, ww)] = quarter
                            * (xv[(ni, cc, 2 * hh, 2 * ww)]
                                + xv[(ni, cc, 2 * hh, 2 * ww + 1)]
                                + xv[(ni, cc, 2 * hh + 1, 2 * ww)]
                                + xv[(ni, cc, 2 * hh + 1, 2 * ww + 1)]);
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::AvgPool2(a.0), ng)
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("add_chan_bias x must be [N,C,H,W]");
        let bv = as2(&self.nodes[b.0].value);
        let (n, c, h, w) = xv.dim();
        assert_eq!(bv.dim(), (n, c), "add_chan_bias: bias must be [N,C]");
        let mut out = xv.to_owned();
        for ni in 0..n {
            for cc in 0..c {
                let bias = bv[(ni, cc)];
                for hh in 0..h {
                    for ww in 0..w {
                        out[(ni, cc, hh, ww)] = out[(ni, cc, hh, ww)] + bias;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out.into_dyn(), Op::AddChanBias { x: x.0, b: b.0 }, ng)
    }

    pub fn add_bias1(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let bv = &self.nodes[b.0].value;
        let mut out = xv.to_owned();
        let bs = bv.as_slice().unwrap();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (t, &bb) in row.iter_mut().zip(bs.iter()) {
                *t = *t + bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out.into_dyn(), Op::AddBias1 { x: x.0, b: b.0 }, ng)
    }

    pub fn broadcast_row0(&mut self, x: Var, n: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(xv);
        }
        let ng = self.needs(x);
        self.push(out, Op::BroadcastRow0(x.0), ng)
    }

    pub fn select_rows(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "select_rows: shape mismatch");
        assert_eq!(av.shape()[0], mask.len(), "select_rows: mask length");
        let mut out = av.clone();
        for (i, &use_b) in mask.iter().enumerate() {
            if use_b {
                out.index_axis_mut(Axis(0), i)
                    .assign(&bv.index_axis(Axis(0), i));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::SelectRows { a: a.0, b: b.0, mask }, ng)
    }

    pub fn nchw_to_nlc(&mut self, a: Var) -> Var {
        let xv = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("nchw_to_nlc input must be [N,C,H,W]");
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array3::<T>::zeros((n, h * w, c));
        for ni in 0..n {
            for cc in 0..c {
                for hh in 0..h {
                    for ww in 0..w {
                        out[(ni, hh * w + ww, cc)] = xv[(ni, cc, hh, ww)];
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::NchwToNlc(a.0), ng)
    }

    pub fn nlc_to_nchw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let xv = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("nlc_to_nchw input must be [N,L,C]");
        let (n, l, c) = xv.dim();
        assert_eq!(l, h * w, "nlc_to_nchw: L != h*w");
        let mut out = ndarray::Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for cc in 0..c {
                for hh in 0..h {
                    for ww in 0..w {
                        out[(ni, cc, hh, ww)] = xv[(ni, hh * w + ww, cc)];
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::NlcToNchw { x: a.0, h, w }, ng)
    }

    /// Backpropagate from a scalar node. Gradients land on every
    /// grad-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, a, g.clone());
                    self.acc(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, a, g.clone());
                    self.acc(&mut grads, b, g.mapv(|t| -t));
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let da = &g * &self.nodes[b].value;
                        self.acc(&mut grads, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let db = &g * &self.nodes[a].value;
                        self.acc(&mut grads, b, db);
                    }
                }
                Op::Neg(a) => self.acc(&mut grads, a, g.mapv(|t| -t)),
                Op::Scale(a, c) => {
                    let cs = T::cast(c);
                    self.acc(&mut grads, a, g.mapv(|t| cs * t))
                }
                Op::AddScalar(a) => self.acc(&mut grads, a, g),
                Op::RowScale(a, coef) => {
                    let mut dg = g;
                    for (mut row, &c) in dg.axis_iter_mut(Axis(0)).zip(coef.iter()) {
                        let cs = T::cast(c);
                        row.mapv_inplace(|t| t * cs);
                    }
                    self.acc(&mut grads, a, dg);
                }
                Op::MatMul(a, b) => {
                    let gv = as2(&g);
                    if self.nodes[a].needs_grad {
                        let bv = as2(&self.nodes[b].value);
                        let da = gv.dot(&bv.t()).into_dyn();
                        self.acc(&mut grads, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let av = as2(&self.nodes[a].value);
                        let db = av.t().dot(&gv).into_dyn();
                        self.acc(&mut grads, b, db);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.nodes[a].value.view().into_dimensionality::<Ix3>().unwrap();
                    let bv = self.nodes[b].value.view().into_dimensionality::<Ix3>().unwrap();
                    let bn = av.dim().0;
                    if self.nodes[a].needs_grad {
                        let mut da = ndarray::Array3::<T>::zeros(av.dim());
                        for i2 in 0..bn {
                            let gi = gv.index_axis(Axis(0), i2);
                            let bi = bv.index_axis(Axis(0), i2);
                            let d = if trans_b { gi.dot(&bi) } else { gi.dot(&bi.t()) };
                            da.index_axis_mut(Axis(0), i2).assign(&d);
                        }
                        self.acc(&mut grads, a, da.into_dyn());
                    }
                    if self.nodes[b].needs_grad {
                        let mut db = ndarray::Array3::<T>::zeros(bv.dim());
                        for i2 in 0..bn {
                            let gi = gv.index_axis(Axis(0), i2);
                            let ai = av.index_axis(Axis(0), i2);
                            let d = if trans_b {
                                gi.t().dot(&ai)
                            } else {
                                ai.t().dot(&gi)
                            };
                            db.index_axis_mut(Axis(0), i2).assign(&d);
                        }
                        self.acc(&mut grads, b, db.into_dyn());
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&mut grads, &g, x, w, b, stride, pad);
                }
                Op::Silu(a) => {
                    let dv = self.nodes[a].value.mapv(|x| {
                        let s = sigmoid_s(x);
                        s * (T::one() + x * (T::one() - s))
                    });
                    self.acc(&mut grads, a, &g * &dv);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let dv = y.mapv(|t| t * (T::one() - t));
                    self.acc(&mut grads, a, &g * &dv);
                }
                Op::Softplus(a) => {
                    let dv = self.nodes[a].value.mapv(sigmoid_s);
                    self.acc(&mut grads, a, &g * &dv);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = T::cast(slope);
                    let dv = self.nodes[a]
                        .value
                        .mapv(|x| if x > T::zero() { T::one() } else { s });
                    self.acc(&mut grads, a, &g * &dv);
                }
                Op::GroupNorm { x, gamma, beta, groups } => {
                    self.group_norm_backward(&mut grads, &g, x, gamma, beta, groups);
                }
                Op::SoftmaxLast(a) => {
                    let y = self.nodes[i].value.clone();
                    let mut dx = g;
                    let last = y.ndim() - 1;
                    for (mut glane, ylane) in
                        dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                    {
                        let dot: f64 = glane
                            .iter()
                            .zip(ylane.iter())
                            .map(|(a2, b2)| a2.as_f64() * b2.as_f64())
                            .sum();
                        for (gt, &yt) in glane.iter_mut().zip(ylane.iter()) {
                            *gt = T::cast((gt.as_f64() - dot) * yt.as_f64());
                        }
                    }
                    self.acc(&mut grads, a, dx);
                }
                Op::Square(a) => {
                    let two = T::cast(2.0);
                    let dv = self.nodes[a].value.mapv(|x| two * x);
                    self.acc(&mut grads, a, &g * &dv);
                }
                Op::Abs(a) => {
                    let dv = self.nodes[a].value.mapv(|x| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(&mut grads, a, &g * &dv);
                }
                Op::MeanAll(a) => {
                    let len = self.nodes[a].value.len();
                    let gv = g.iter().copied().next().unwrap() / T::cast(len as f64);
                    let da = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                    self.acc(&mut grads, a, da);
                }
                Op::SumAll(a) => {
                    let gv = g.iter().copied().next().unwrap();
                    let da = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                    self.acc(&mut grads, a, da);
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.nodes[a].value.raw_dim();
                    let len = T::cast(shape[axis] as f64);
                    let mut da = ArrayD::<T>::zeros(shape);
                    for mut lane in da.axis_iter_mut(Axis(axis)) {
                        lane.zip_mut_with(&g, |t, &gv| *t = *t + gv / len);
                    }
                    self.acc(&mut grads, a, da);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a].value.raw_dim();
                    let da = g.to_shape(shape).unwrap().to_owned();
                    self.acc(&mut grads, a, da);
                }
                Op::Concat { a, b, axis } => {
                    let na = self.nodes[a].value.shape()[axis];
                    let da = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(0..na))
                        .to_owned();
                    let db = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(na..))
                        .to_owned();
                    self.acc(&mut grads, a, da);
                    self.acc(&mut grads, b, db);
                }
                Op::UpsampleNearest2(a) => {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n2, c, h2, w2) = gv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut da = ndarray::Array4::<T>::zeros((n2, c, h, w));
                    for ni in 0..n2 {
                        for cc in 0..c {
                            for hh in 0..h {
                                for ww in 0..w {
                                    da[(ni, cc, hh, ww)] = gv[(ni, cc, 2 * hh, 2 * ww)]
                                        + gv[(ni, cc, 2 * hh, 2 * ww + 1)]
                                        + gv[(ni, cc, 2 * hh + 1, 2 * ww)]
                                        + gv[(ni, cc, 2 * hh + 1, 2 * ww + 1)];
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, a, da.into_dyn());
                }
                Op::AvgPool2(a) => {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n2, c, ho, wo) = gv.dim();
                    let quarter = T::cast(0.25);
                    let mut da = ndarray::Array4::<T>::zeros((n2, c, ho * 2, wo * 2));
                    for ni in 0..n2 {
                        for cc in 0..c {
                            for hh in 0..ho {
                                for ww in 0..wo {
                                    let v = quarter * gv[(ni, cc, hh, ww)];
                                    da[(ni, cc, 2 * hh, 2 * ww)] = v;
                                    da[(ni, cc, 2 * hh, 2 * ww + 1)] = v;
                                    da[(ni, cc, 2 * hh + 1, 2 * ww)] = v;
                                    da[(ni, cc, 2 * hh + 1, 2 * ww + 1)] = v;
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, a, da.into_dyn());
                }
                Op::AddChanBias { x, b } => {
                    if self.nodes[x].needs_grad {
                        self.acc(&mut grads, x, g.clone());
                    }
                    if self.nodes[b].needs_grad {
                        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                        let (n2, c, _, _) = gv.dim();
                        let mut db = Array2::<T>::zeros((n2, c));
                        for ni in 0..n2 {
                            for cc in 0..c {
                                let s: f64 = gv
                                    .index_axis(Axis(0), ni)
                                    .index_axis(Axis(0), cc)
                                    .iter()
                                    .map(|t| t.as_f64())
                                    .sum();
                                db[(ni, cc)] = T::cast(s);
                            }
                        }
                        self.acc(&mut grads, b, db.into_dyn());
                    }
                }
                Op::AddBias1 { x, b } => {
                    if self.nodes[x].needs_grad {
                        self.acc(&mut grads, x, g.clone());
                    }
                    if self.nodes[b].needs_grad {
                        let gv = as2(&g);
                        let f = gv.dim().1;
                        let mut db = Array1::<T>::zeros(f);
                        for row in gv.axis_iter(Axis(0)) {
                            for (t, &gv2) in db.iter_mut().zip(row.iter()) {
                                *t = *t + gv2;
                            }
                        }
                        self.acc(&mut grads, b, db.into_dyn());
                    }
                }
                Op::BroadcastRow0(x) => {
                    let da = g.sum_axis(Axis(0));
                    self.acc(&mut grads, x, da);
                }
                Op::SelectRows { a, b, mask } => {
                    if self.nodes[a].needs_grad {
                        let mut da = g.clone();
                        for (i2, &use_b) in mask.iter().enumerate() {
                            if use_b {
                                da.index_axis_mut(Axis(0), i2).fill(T::zero());
                            }
                        }
                        self.acc(&mut grads, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let mut db = g.clone();
                        for (i2, &use_b) in mask.iter().enumerate() {
                            if !use_b {
                                db.index_axis_mut(Axis(0), i2).fill(T::zero());
                            }
                        }
                        self.acc(&mut grads, b, db);
                    }
                }
                Op::NchwToNlc(a) => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let xs = self.nodes[a].value.shape().to_vec();
                    let (n2, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut da = ndarray::Array4::<T>::zeros((n2, c, h, w));
                    for ni in 0..n2 {
                        for cc in 0..c {
                            for hh in 0..h {
                                for ww in 0..w {
                                    da[(ni, cc, hh, ww)] = gv[(ni, hh * w + ww, cc)];
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, a, da.into_dyn());
                }
                Op::NlcToNchw { x, h, w } => {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n2, c, _, _) = gv.dim();
                    let mut da = ndarray::Array3::<T>::zeros((n2, h * w, c));
                    for ni in 0..n2 {
                        for cc in 0..c {
                            for hh in 0..h {
                                for ww in 0..w {
                                    da[(ni, hh * w + ww, cc)] = gv[(ni, cc, hh, ww)];
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, x, da.into_dyn());
                }
            }
        }
        for (i, slot) in grads.into_iter().enumerate() {
            if let Some(gr) = slot {
                self.nodes[i].grad = Some(gr);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], target: usize, contribution: ArrayD<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<ArrayD<T>>],
        g: &ArrayD<T>,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    ) {
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, cin, h, wd) = xv.dim();
        let (cout, _, kh, kw) = wv.dim();
        let (_, _, ho, wo) = gv.dim();
        let plane = ho * wo;

        // [Cout, N*Ho*Wo]: each (c, n) plane is one contiguous copy.
        let mut gmat_t = Array2::<T>::zeros((cout, n * plane));
        {
            let gs = gv.to_slice().expect("grad must be contiguous");
            let gt = gmat_t.as_slice_mut().unwrap();
            for c in 0..cout {
                for ni in 0..n {
                    gt[c * n * plane + ni * plane..c * n * plane + (ni + 1) * plane]
                        .copy_from_slice(&gs[(ni * cout + c) * plane..(ni * cout + c + 1) * plane]);
                }
            }
        }

        if let Some(bb) = b {
            if self.nodes[bb].needs_grad {
                let mut db = Array1::<T>::zeros(cout);
                for c in 0..cout {
                    let s: f64 = gmat_t.row(c).iter().map(|t| t.as_f64()).sum();
                    db[c] = T::cast(s);
                }
                self.acc(grads, bb, db.into_dyn());
            }
        }

        if self.nodes[w].needs_grad {
            let cols = im2col(&xv, kh, kw, stride, pad);
            let dwmat = gmat_t.dot(&cols); // [Cout, Cin*k*k]
            let dw = dwmat
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            self.acc(grads, w, dw);
        }

        if self.nodes[x].needs_grad {
            let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
            let dcols = gmat_t.t().dot(&wmat); // [N*Ho*Wo, Cin*k*k]
            let dx = col2im(&dcols, n, cin, h, wd, kh, kw, stride, pad);
            self.acc(grads, x, dx.into_dyn());
        }
    }

    fn group_norm_backward(
        &self,
        grads: &mut [Option<ArrayD<T>>],
        g: &ArrayD<T>,
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
    ) {
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let gam = &self.nodes[gamma].value;
        let gs = gam.as_slice().unwrap();
        let (n, c, h, w) = xv.dim();
        let cg = c / groups;
        let plane = h * w;
        let m = (cg * plane) as f64;
        let xs = xv.to_slice().expect("group_norm input must be contiguous");
        let dys = gv.to_slice().expect("group_norm grad must be contiguous");

        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().unwrap();

        for ni in 0..n {
            for gr in 0..groups {
                let (mean, inv) = group_stats(xs, ni, gr, cg, c, plane, m);
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for cc in gr * cg..(gr + 1) * cg {
                    let base = (ni * c + cc) * plane;
                    let gcc = gs[cc].as_f64();
                    let mut dgo = 0.0f64;
                    let mut dbo = 0.0f64;
                    for (&xi, &dyi) in xs[base..base + plane].iter().zip(&dys[base..base + plane]) {
                        let xhat = (xi.as_f64() - mean) * inv;
                        let dy = dyi.as_f64();
                        let gy = dy * gcc;
                        s1 += gy;
                        s2 += gy * xhat;
                        dgo += dy * xhat;
                        dbo += dy;
                    }
                    dgamma[cc] += dgo;
                    dbeta[cc] += dbo;
                }
                let c1 = s1 / m;
                let c2 = s2 / m;
                for cc in gr * cg..(gr + 1) * cg {
                    let base = (ni * c + cc) * plane;
                    let gcc = gs[cc].as_f64();
                    for ((&xi, &dyi), o) in xs[base..base + plane]
                        .iter()
                        .zip(&dys[base..base + plane])
                        .zip(&mut dxs[base..base + plane])
                    {
                        let xhat = (xi.as_f64() - mean) * inv;
                        let gy = dyi.as_f64() * gcc;
                        *o = T::cast((gy - c1 - xhat * c2) * inv);
                    }
                }
            }
        }

        if self.nodes[x].needs_grad {
            self.acc(grads, x, dx.into_dyn());
        }
        if self.nodes[gamma].needs_grad {
            let dg: Vec<T> = dgamma.iter().map(|&t| T::cast(t)).collect();
            self.acc(grads, gamma, Array1::from_vec(dg).into_dyn());
        }
        if self.nodes[beta].needs_grad {
            let db: Vec<T> = dbeta.iter().map(|&t| T::cast(t)).collect();
            self.acc(grads, beta, Array1::from_vec(db).into_dyn());
        }
    }
}

const GN_EPS: f64 = 1e-5;

fn group_stats<T: Scalar>(
    xs: &[T],
    ni: usize,
    g: usize,
    cg: usize,
    c: usize,
    plane: usize,
    m: f64,
) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for cc in g * cg..(g + 1) * cg {
        let base = (ni * c + cc) * plane;
        for &t in &xs[base..base + plane] {
            let v = t.as_f64();
            sum += v;
            sumsq += v * v;
        }
    }
    let mean = sum / m;
    let var = (sumsq / m - mean * mean).max(0.0);
    let inv = 1.0 / (var + GN_EPS).sqrt();
    (mean, inv)
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

/// Unfold `[N,C,H,W]` into `[N*Ho*Wo, C*kh*kw]` with zero padding.
fn im2col<T: Scalar>(
    x: &ArrayView4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<T>::zeros((n * ho * wo, c * kh * kw));
    let cs = cols.as_slice_mut().unwrap();
    let xs = x.to_slice().expect("conv input must be contiguous");
    let rowlen = c * kh * kw;
    for ni in 0..n {
        for hh in 0..ho {
            for ww in 0..wo {
                let row = (ni * ho * wo + hh * wo + ww) * rowlen;
                let wbase = ww * stride;
                for cc in 0..c {
                    let xplane = (ni * c + cc) * h * w;
                    let colbase = row + cc * kh * kw;
                    for ki in 0..kh {
                        let hi = (hh * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let xrow = xplane + hi as usize * w;
                        let dst = colbase + ki * kw;
                        if stride == 1 && pad <= wbase && wbase + kw <= w + pad {
                            // Fully in-bounds kernel row: contiguous copy.
                            let src = xrow + wbase - pad;
                            cs[dst..dst + kw].copy_from_slice(&xs[src..src + kw]);
                        } else {
                            for kj in 0..kw {
                                let wi = (wbase + kj) as isize - pad as isize;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                cs[dst + kj] = xs[xrow + wi as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array4<T> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = ndarray::Array4::<T>::zeros((n, c, h, w));
    let os = out.as_slice_mut().unwrap();
    let cs = cols
        .as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| cols.iter().copied().collect());
    let rowlen = c * kh * kw;
    for ni in 0..n {
        for hh in 0..ho {
            for ww in 0..wo {
                let row = (ni * ho * wo + hh * wo + ww) * rowlen;
                let wbase = ww * stride;
                for cc in 0..c {
                    let xplane = (ni * c + cc) * h * w;
                    let colbase = row + cc * kh * kw;
                    for ki in 0..kh {
                        let hi = (hh * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let xrow = xplane + hi as usize * w;
                        let src = colbase + ki * kw;
                        for kj in 0..kw {
                            let wi = (wbase + kj) as isize - pad as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            let idx = xrow + wi as usize;
                            os[idx] = os[idx] + cs[src + kj];
                        }
                    }
                }
            }
        }
    }
    out
}
