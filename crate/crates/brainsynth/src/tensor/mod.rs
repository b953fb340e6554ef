//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] records one forward pass as a flat tape of nodes; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates parameter
//! gradients into the [`ParamStore`]. The op set is exactly what the models
//! in this crate need — dense layers, grouped 3D convolutions, nearest
//! upsampling, group norm, softmax attention and elementwise math.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks and numerics tests can instantiate `f64`.

pub mod conv;

use conv::ConvSpec;
use ndarray::{concatenate, Axis, IxDyn, Slice};

/// Element type for graphs: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn fl(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

pub type Arr<F> = ndarray::ArrayD<F>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct V(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors plus their gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Arr<F>>,
    grads: Vec<Arr<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.grads.push(Arr::zeros(value.raw_dim()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Arr<F> {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(F::zero());
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr<F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    /// Looks a parameter up by name (used when loading checkpoints).
    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Add(V, V),
    Sub(V, V),
    Mul(V, V),
    Scale(V, f64),
    AddScalar(V),
    MatMul(V, V),
    Transpose2(V),
    Conv3d {
        x: V,
        w: V,
        b: Option<V>,
        spec: ConvSpec,
    },
    Upsample2(V),
    Silu(V),
    LeakyRelu(V, f64),
    Exp(V),
    Abs(V),
    Clamp(V, f64, f64),
    SoftmaxLast(V),
    GroupNorm {
        x: V,
        gamma: V,
        beta: V,
        groups: usize,
        eps: f64,
    },
    Concat {
        xs: Vec<V>,
        axis: usize,
    },
    SliceAx {
        x: V,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(V),
    Mean(V),
    Sum(V),
    AddBias {
        x: V,
        b: V,
        axis: usize,
    },
    AddChanMap {
        x: V,
        m: V,
    },
}

struct Node<F: Scalar> {
    op: Op,
    val: Arr<F>,
}

/// One recorded forward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, val: Arr<F>) -> V {
        self.nodes.push(Node { op, val });
        V(self.nodes.len() - 1)
    }

    pub fn val(&self, v: V) -> &Arr<F> {
        &self.nodes[v.0].val
    }

    /// Value of a reduction node as a plain scalar.
    pub fn scalar(&self, v: V) -> F {
        let a = self.val(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&mut self, val: Arr<F>) -> V {
        self.push(Op::Input, val)
    }

    /// Leaf bound to a trainable parameter; gradients accumulate in the store.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> V {
        self.push(Op::Param(id), store.value(id).clone())
    }

    pub fn add(&mut self, a: V, b: V) -> V {
        let v = self.val(a) + self.val(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: V, b: V) -> V {
        let v = self.val(a) - self.val(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: V, b: V) -> V {
        let v = self.val(a) * self.val(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: V, k: f64) -> V {
        let v = self.val(a) * F::fl(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_scalar(&mut self, a: V, k: f64) -> V {
        let v = self.val(a) + F::fl(k);
        self.push(Op::AddScalar(a), v)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: V, b: V) -> V {
        let av = self.val(a).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let bv = self.val(b).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let v = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose2(&mut self, a: V) -> V {
        let av = self.val(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = av.t().as_standard_layout().to_owned().into_dyn();
        self.push(Op::Transpose2(a), v)
    }

    pub fn conv3d(&mut self, x: V, w: V, b: Option<V>, spec: ConvSpec) -> V {
        let v = conv::conv3d_fwd(
            self.val(x),
            self.val(w),
            b.map(|bb| self.val(bb)).as_ref().copied(),
            &spec,
        );
        self.push(Op::Conv3d { x, w, b, spec }, v)
    }

    pub fn upsample2(&mut self, x: V) -> V {
        let xv = self.val(x);
        let s = xv.shape();
        assert_eq!(s.len(), 5);
        let (bn, cn, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut out = Arr::zeros(IxDyn(&[bn, cn, d * 2, h * 2, w * 2]));
        for b in 0..bn {
            for c in 0..cn {
                for i in 0..d {
                    for j in 0..h {
                        for k in 0..w {
                            let v = xv[[b, c, i, j, k]];
                            for (a0, a1, a2) in
                                [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
                            {
                                out[[b, c, 2 * i + a0, 2 * j + a1, 2 * k + a2]] = v;
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::Upsample2(x), out)
    }

    pub fn silu(&mut self, a: V) -> V {
        let v = self.val(a).mapv(|x| x / (F::one() + (-x).exp()));
        self.push(Op::Silu(a), v)
    }

    pub fn leaky_relu(&mut self, a: V, slope: f64) -> V {
        let s = F::fl(slope);
        let v = self.val(a).mapv(|x| if x > F::zero() { x } else { x * s });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn exp(&mut self, a: V) -> V {
        let v = self.val(a).mapv(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn abs(&mut self, a: V) -> V {
        let v = self.val(a).mapv(|x| x.abs());
        self.push(Op::Abs(a), v)
    }

    pub fn clamp(&mut self, a: V, lo: f64, hi: f64) -> V {
        let (l, h) = (F::fl(lo), F::fl(hi));
        let v = self.val(a).mapv(|x| x.max(l).min(h));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: V) -> V {
        let mut v = self.val(a).clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let mx = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for x in lane.iter_mut() {
                *x = (*x - mx).exp();
                z = z + *x;
            }
            for x in lane.iter_mut() {
                *x = *x / z;
            }
        }
        self.push(Op::SoftmaxLast(a), v)
    }

    /// Group normalization over `[B, C, spatial...]` with affine parameters
    /// `gamma`, `beta` of length `C`.
    pub fn group_norm(&mut self, x: V, gamma: V, beta: V, groups: usize, eps: f64) -> V {
        let (mean, var) = self.gn_stats(x, groups, eps);
        let xv = self.val(x);
        let s = xv.shape().to_vec();
        let (bn, cn) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let cg = cn / groups;
        let gv = self.val(gamma).as_slice().unwrap().to_vec();
        let bv = self.val(beta).as_slice().unwrap().to_vec();
        let xs = xv.as_slice().unwrap();
        let mut out = vec![F::zero(); xs.len()];
        for b in 0..bn {
            for c in 0..cn {
                let g = c / cg;
                let mu = mean[b * groups + g];
                let inv = (var[b * groups + g] + F::fl(eps)).sqrt().recip();
                let base = (b * cn + c) * spatial;
                for i in 0..spatial {
                    out[base + i] = gv[c] * (xs[base + i] - mu) * inv + bv[c];
                }
            }
        }
        let val = Arr::from_shape_vec(IxDyn(&s), out).unwrap();
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            val,
        )
    }

    fn gn_stats(&self, x: V, groups: usize, _eps: f64) -> (Vec<F>, Vec<F>) {
        let xv = self.val(x);
        let s = xv.shape();
        let (bn, cn) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        assert_eq!(cn % groups, 0, "channels not divisible by groups");
        let cg = cn / groups;
        let n = F::from_usize(cg * spatial).unwrap();
        let xs = xv.as_slice().unwrap();
        let mut mean = vec![F::zero(); bn * groups];
        let mut var = vec![F::zero(); bn * groups];
        for b in 0..bn {
            for g in 0..groups {
                let mut acc = F::zero();
                for c in g * cg..(g + 1) * cg {
                    let base = (b * cn + c) * spatial;
                    for i in 0..spatial {
                        acc = acc + xs[base + i];
                    }
                }
                let mu = acc / n;
                let mut vv = F::zero();
                for c in g * cg..(g + 1) * cg {
                    let base = (b * cn + c) * spatial;
                    for i in 0..spatial {
                        let d = xs[base + i] - mu;
                        vv = vv + d * d;
                    }
                }
                mean[b * groups + g] = mu;
                var[b * groups + g] = vv / n;
            }
        }
        (mean, var)
    }

    pub fn concat(&mut self, xs: &[V], axis: usize) -> V {
        let views: Vec<_> = xs.iter().map(|v| self.val(*v).view()).collect();
        let v = concatenate(Axis(axis), &views).unwrap();
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            v.as_standard_layout().to_owned(),
        )
    }

    pub fn slice_axis(&mut self, x: V, axis: usize, start: usize, len: usize) -> V {
        let v = self
            .val(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(
            Op::SliceAx {
                x,
                axis,
                start,
                len,
            },
            v,
        )
    }

    pub fn reshape(&mut self, x: V, shape: &[usize]) -> V {
        let xv = self.val(x);
        assert_eq!(xv.len(), shape.iter().product::<usize>());
        let data: Vec<F> = xv.iter().cloned().collect();
        let v = Arr::from_shape_vec(IxDyn(shape), data).unwrap();
        self.push(Op::Reshape(x), v)
    }

    pub fn mean(&mut self, x: V) -> V {
        let xv = self.val(x);
        let m = xv.iter().cloned().sum::<F>() / F::from_usize(xv.len()).unwrap();
        self.push(Op::Mean(x), Arr::from_elem(IxDyn(&[]), m))
    }

    pub fn sum(&mut self, x: V) -> V {
        let s = self.val(x).iter().cloned().sum::<F>();
        self.push(Op::Sum(x), Arr::from_elem(IxDyn(&[]), s))
    }

    /// Adds a 1-D bias of length `x.shape()[axis]` broadcast over all other axes.
    pub fn add_bias(&mut self, x: V, b: V, axis: usize) -> V {
        let xv = self.val(x);
        let bv = self.val(b);
        assert_eq!(bv.ndim(), 1);
        assert_eq!(bv.len(), xv.shape()[axis]);
        let mut shape = vec![1usize; xv.ndim()];
        shape[axis] = bv.len();
        let bb = bv.view().into_shape_with_order(IxDyn(&shape)).unwrap();
        let v = xv + &bb;
        self.push(Op::AddBias { x, b, axis }, v)
    }

    /// Adds a per-(batch, channel) scalar map `m: [B, C]` to `x: [B, C, spatial...]`.
    pub fn add_chan_map(&mut self, x: V, m: V) -> V {
        let xv = self.val(x);
        let mv = self.val(m);
        let s = xv.shape().to_vec();
        assert_eq!(mv.shape(), &s[..2]);
        let mut shape = vec![1usize; xv.ndim()];
        shape[0] = s[0];
        shape[1] = s[1];
        let mm = mv.view().into_shape_with_order(IxDyn(&shape)).unwrap();
        let v = xv + &mm;
        self.push(Op::AddChanMap { x, m }, v)
    }

    /// Mean squared error between two nodes.
    pub fn mse(&mut self, a: V, b: V) -> V {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Mean absolute error between two nodes.
    pub fn mae(&mut self, a: V, b: V) -> V {
        let d = self.sub(a, b);
        let ab = self.abs(d);
        self.mean(ab)
    }

    /// Reverse pass from a scalar node; parameter gradients accumulate into
    /// `store.grads`. Gradients of non-parameter leaves are discarded.
    pub fn backward(&self, root: V, store: &mut ParamStore<F>) {
        let mut grads: Vec<Option<Arr<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::from_elem(self.nodes[root.0].val.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => {
                    store.grads[id.0] = &store.grads[id.0] + &go;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, go.clone());
                    accum(&mut grads, *b, go);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, go.clone());
                    accum(&mut grads, *b, go.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = &go * self.val(*b);
                    let gb = &go * self.val(*a);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accum(&mut grads, *a, &go * F::fl(*k)),
                Op::AddScalar(a) => accum(&mut grads, *a, go),
                Op::MatMul(a, b) => {
                    let g2 = go.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let av = self.val(*a).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                    let bv = self.val(*b).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                    accum(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    accum(&mut grads, *b, av.t().dot(&g2).into_dyn());
                }
                Op::Transpose2(a) => {
                    let g2 = go.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    accum(
                        &mut grads,
                        *a,
                        g2.t().as_standard_layout().to_owned().into_dyn(),
                    );
                }
                Op::Conv3d { x, w, b, spec } => {
                    let gx = conv::conv3d_bwd_x(&go, self.val(*x), self.val(*w), spec);
                    let gw = conv::conv3d_bwd_w(&go, self.val(*x), self.val(*w), spec);
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *w, gw);
                    if let Some(bb) = b {
                        accum(&mut grads, *bb, conv::conv3d_bwd_b(&go));
                    }
                }
                Op::Upsample2(x) => {
                    let xs = self.val(*x).shape().to_vec();
                    let (bn, cn, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                    let mut gx = Arr::zeros(IxDyn(&xs));
                    for b in 0..bn {
                        for c in 0..cn {
                            for i in 0..d {
                                for j in 0..h {
                                    for k in 0..w {
                                        let mut acc = F::zero();
                                        for (a0, a1, a2) in [
                                            (0, 0, 0),
                                            (0, 0, 1),
                                            (0, 1, 0),
                                            (0, 1, 1),
                                            (1, 0, 0),
                                            (1, 0, 1),
                                            (1, 1, 0),
                                            (1, 1, 1),
                                        ] {
                                            acc = acc
                                                + go[[b, c, 2 * i + a0, 2 * j + a1, 2 * k + a2]];
                                        }
                                        gx[[b, c, i, j, k]] = acc;
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::Silu(a) => {
                    let g = self.val(*a).mapv(|x| {
                        let s = F::one() / (F::one() + (-x).exp());
                        s * (F::one() + x * (F::one() - s))
                    });
                    accum(&mut grads, *a, &go * &g);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = F::fl(*slope);
                    let g = self
                        .val(*a)
                        .mapv(|x| if x > F::zero() { F::one() } else { s });
                    accum(&mut grads, *a, &go * &g);
                }
                Op::Exp(a) => {
                    accum(&mut grads, *a, &go * &self.nodes[i].val);
                }
                Op::Abs(a) => {
                    let g = self.val(*a).mapv(|x| {
                        if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    });
                    accum(&mut grads, *a, &go * &g);
                }
                Op::Clamp(a, lo, hi) => {
                    let (l, h) = (F::fl(*lo), F::fl(*hi));
                    let g = self
                        .val(*a)
                        .mapv(|x| if x > l && x < h { F::one() } else { F::zero() });
                    accum(&mut grads, *a, &go * &g);
                }
                Op::SoftmaxLast(a) => {
                    let y = &self.nodes[i].val;
                    let mut gx = go.clone();
                    let last = y.ndim() - 1;
                    for (mut glane, ylane) in
                        gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                    {
                        let dot: F = glane
                            .iter()
                            .zip(ylane.iter())
                            .map(|(g, y)| *g * *y)
                            .sum();
                        for (g, y) in glane.iter_mut().zip(ylane.iter()) {
                            *g = (*g - dot) * *y;
                        }
                    }
                    accum(&mut grads, *a, gx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (gx, gg, gb) = self.gn_backward(&go, *x, *gamma, *groups, *eps);
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *gamma, gg);
                    accum(&mut grads, *beta, gb);
                }
                Op::Concat { xs, axis } => {
                    let mut start = 0;
                    for xv in xs {
                        let len = self.val(*xv).shape()[*axis];
                        let part = go
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .as_standard_layout()
                            .to_owned();
                        accum(&mut grads, *xv, part);
                        start += len;
                    }
                }
                Op::SliceAx {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let mut gx = Arr::zeros(self.val(*x).raw_dim());
                    gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                        .assign(&go);
                    accum(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.val(*x).shape().to_vec();
                    let data: Vec<F> = go.iter().cloned().collect();
                    accum(
                        &mut grads,
                        *x,
                        Arr::from_shape_vec(IxDyn(&shape), data).unwrap(),
                    );
                }
                Op::Mean(x) => {
                    let xv = self.val(*x);
                    let g = *go.iter().next().unwrap() / F::from_usize(xv.len()).unwrap();
                    accum(&mut grads, *x, Arr::from_elem(xv.raw_dim(), g));
                }
                Op::Sum(x) => {
                    let xv = self.val(*x);
                    let g = *go.iter().next().unwrap();
                    accum(&mut grads, *x, Arr::from_elem(xv.raw_dim(), g));
                }
                Op::AddBias { x, b, axis } => {
                    let mut gb = go.clone();
                    for a in (0..go.ndim()).rev() {
                        if a != *axis {
                            gb = gb.sum_axis(Axis(a));
                        }
                    }
                    accum(&mut grads, *x, go);
                    accum(&mut grads, *b, gb.into_dyn());
                }
                Op::AddChanMap { x, m } => {
                    let mut gm = go.clone();
                    for a in (2..go.ndim()).rev() {
                        gm = gm.sum_axis(Axis(a));
                    }
                    accum(&mut grads, *x, go);
                    accum(&mut grads, *m, gm.into_dyn());
                }
            }
        }
    }

    fn gn_backward(
        &self,
        go: &Arr<F>,
        x: V,
        gamma: V,
        groups: usize,
        eps: f64,
    ) -> (Arr<F>, Arr<F>, Arr<F>) {
        let (mean, var) = self.gn_stats(x, groups, eps);
        let xv = self.val(x);
        let s = xv.shape().to_vec();
        let (bn, cn) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let cg = cn / groups;
        let n = F::from_usize(cg * spatial).unwrap();
        let xs = xv.as_slice().unwrap();
        let gos = go.as_slice().unwrap();
        let gv = self.val(gamma).as_slice().unwrap().to_vec();
        let mut gx = vec![F::zero(); xs.len()];
        let mut gg = vec![F::zero(); cn];
        let mut gb = vec![F::zero(); cn];

        for b in 0..bn {
            for g in 0..groups {
                let mu = mean[b * groups + g];
                let inv = (var[b * groups + g] + F::fl(eps)).sqrt().recip();
                // sums of gxhat and gxhat * xhat over the group
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                for c in g * cg..(g + 1) * cg {
                    let base = (b * cn + c) * spatial;
                    for i in 0..spatial {
                        let xh = (xs[base + i] - mu) * inv;
                        let gxh = gos[base + i] * gv[c];
                        s1 = s1 + gxh;
                        s2 = s2 + gxh * xh;
                        gg[c] = gg[c] + gos[base + i] * xh;
                        gb[c] = gb[c] + gos[base + i];
                    }
                }
                let s1n = s1 / n;
                let s2n = s2 / n;
                for c in g * cg..(g + 1) * cg {
                    let base = (b * cn + c) * spatial;
                    for i in 0..spatial {
                        let xh = (xs[base + i] - mu) * inv;
                        let gxh = gos[base + i] * gv[c];
                        gx[base + i] = inv * (gxh - s1n - xh * s2n);
                    }
                }
            }
        }
        (
            Arr::from_shape_vec(IxDyn(&s), gx).unwrap(),
            Arr::from_shape_vec(IxDyn(&[cn]), gg).unwrap(),
            Arr::from_shape_vec(IxDyn(&[cn]), gb).unwrap(),
        )
    }
}

fn accum<F: Scalar>(grads: &mut [Option<Arr<F>>], v: V, g: Arr<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing = &*existing + &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adam optimizer over a [`ParamStore`].
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Arr<F>>,
    v: Vec<Arr<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.values.iter().map(|v| Arr::zeros(v.raw_dim())).collect(),
            v: store.values.iter().map(|v| Arr::zeros(v.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.t += 1;
        let b1 = F::fl(self.beta1);
        let b2 = F::fl(self.beta2);
        let lr = F::fl(self.lr);
        let eps = F::fl(self.eps);
        let c1 = F::one() - F::fl(self.beta1.powi(self.t as i32));
        let c2 = F::one() - F::fl(self.beta2.powi(self.t as i32));
        for i in 0..store.values.len() {
            let g = &store.grads[i];
            self.m[i].zip_mut_with(g, |m, g| *m = b1 * *m + (F::one() - b1) * *g);
            self.v[i].zip_mut_with(g, |v, g| *v = b2 * *v + (F::one() - b2) * *g * *g);
            let m = &self.m[i];
            let v = &self.v[i];
            ndarray::Zip::from(&mut store.values[i])
                .and(m)
                .and(v)
                .for_each(|p, m, v| {
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Serializes moments for checkpoint resume: `(t, per-param (m, v))`.
    pub fn state(&self) -> (u64, Vec<(Arr<F>, Arr<F>)>) {
        (
            self.t,
            self.m.iter().cloned().zip(self.v.iter().cloned()).collect(),
        )
    }

    pub fn restore(&mut self, t: u64, moments: Vec<(Arr<F>, Arr<F>)>) {
        assert_eq!(moments.len(), self.m.len());
        self.t = t;
        for (i, (m, v)) in moments.into_iter().enumerate() {
            self.m[i] = m;
            self.v[i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr<f64> {
        let mut rng = crate::util::rng_for(seed, "tensortest", 0);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a small network exercising every op and checks backprop against
    /// central finite differences in f64.
    #[test]
    fn gradcheck_full_op_set() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w_conv = store.add("w_conv", randn(&[4, 2, 3, 3, 3], 1) * 0.5);
        let b_conv = store.add("b_conv", randn(&[4], 2) * 0.1);
        let gamma = store.add("gamma", Arr::from_elem(IxDyn(&[4]), 1.0));
        let beta = store.add("beta", Arr::zeros(IxDyn(&[4])));
        let w_dense = store.add("w_dense", randn(&[4, 3], 3) * 0.5);
        let b_dense = store.add("b_dense", randn(&[3], 4) * 0.1);
        let m_map = store.add("m_map", randn(&[1, 4], 5) * 0.3);

        let x0 = randn(&[1, 2, 4, 4, 4], 6);
        let ctx = randn(&[2, 4], 7);

        let forward = |store: &ParamStore<f64>| -> (Graph<f64>, V) {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let wc = g.param(store, w_conv);
            let bc = g.param(store, b_conv);
            let c = g.conv3d(x, wc, Some(bc), ConvSpec::new([2, 2, 2], [1, 1, 1], 1));
            let ga = g.param(store, gamma);
            let be = g.param(store, beta);
            let gn = g.group_norm(c, ga, be, 2, 1e-5);
            let mm = g.param(store, m_map);
            let withmap = g.add_chan_map(gn, mm);
            let act = g.silu(withmap);
            let up = g.upsample2(act);
            let lr = g.leaky_relu(up, 0.2);
            let half = g.slice_axis(lr, 1, 0, 2);
            let cat = g.concat(&[half, half], 1);
            let resh = g.reshape(cat, &[16, 16]);
            let toks = g.slice_axis(resh, 0, 0, 2);
            let toks = g.slice_axis(toks, 1, 0, 4);
            let wd = g.param(store, w_dense);
            let bd = g.param(store, b_dense);
            let q = g.matmul(toks, wd);
            let q = g.add_bias(q, bd, 1);
            let ctxv = g.input(ctx.clone());
            let kt = g.transpose2(ctxv);
            let kt = g.slice_axis(kt, 0, 0, 3);
            let scores = g.matmul(q, kt);
            let attn = g.softmax_last(scores);
            let e = g.exp(attn);
            let cl = g.clamp(e, 0.0, 2.0);
            let ab = g.abs(cl);
            let sc = g.scale(ab, 0.7);
            let sh = g.add_scalar(sc, -0.3);
            let sq = g.mul(sh, sh);
            let total = g.sum(sq);
            let m = g.mean(cl);
            let loss = g.add(total, m);
            (g, loss)
        };

        let (g, loss) = forward(&store);
        store.zero_grads();
        g.backward(loss, &mut store);
        let base_grads: Vec<Arr<f64>> = store.ids().map(|id| store.grad(id).clone()).collect();

        let h = 1e-6;
        for id in store.ids() {
            let len = store.value(id).len();
            let probe_idxs: Vec<usize> = if len <= 4 {
                (0..len).collect()
            } else {
                vec![0, len / 3, len - 1]
            };
            for pi in probe_idxs {
                let orig = store.value(id).as_slice().unwrap()[pi];
                store.value_mut(id).as_slice_mut().unwrap()[pi] = orig + h;
                let (gp, lp) = forward(&store);
                let fp = gp.scalar(lp);
                store.value_mut(id).as_slice_mut().unwrap()[pi] = orig - h;
                let (gm, lm) = forward(&store);
                let fm = gm.scalar(lm);
                store.value_mut(id).as_slice_mut().unwrap()[pi] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = base_grads[id.0].as_slice().unwrap()[pi];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {} [{}]: fd {} vs autodiff {}",
                    store.name(id),
                    pi,
                    fd,
                    an
                );
            }
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.add("p", Arr::from_elem(IxDyn(&[4]), 3.0));
        let mut opt = Adam::new(&store, 0.1);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            store.zero_grads();
            let mut g = Graph::new();
            let pv = g.param(&store, p);
            let sq = g.mul(pv, pv);
            let loss = g.mean(sq);
            let lv = g.scalar(loss);
            g.backward(loss, &mut store);
            opt.step(&mut store);
            last = lv;
        }
        assert!(last < 1e-3, "loss {last}");
    }
}
