//! Network building blocks on top of the autodiff graph: initializers,
//! dense and convolution layers, group norm, cross-attention and timestep
//! embeddings.

use crate::tensor::conv::ConvSpec;
use crate::tensor::{Arr, Graph, ParamId, ParamStore, Scalar, V};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian-initialized tensor with the given standard deviation.
pub fn randn_arr<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Arr<F> {
    Arr::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::fl(z * std)
    })
}

/// Standard-normal array (used for noise draws during training and sampling).
pub fn randn_like_shape<F: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Arr<F> {
    Arr::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::fl(z)
    })
}

/// Kaiming-style fan-in standard deviation for conv / dense weights.
fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// A dense (fully connected) layer `[n, din] -> [n, dout]`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), randn_arr(&[din, dout], kaiming_std(din), rng));
        let b = store.add(format!("{name}.b"), Arr::zeros(IxDyn(&[dout])));
        Self { w, b }
    }

    /// Zero-initialized output layer (stable start for residual predictions).
    pub fn init_zero<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Arr::zeros(IxDyn(&[din, dout])));
        let b = store.add(format!("{name}.b"), Arr::zeros(IxDyn(&[dout])));
        Self { w, b }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: V) -> V {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b, 1)
    }
}

/// A 3D convolution layer with optional grouping.
#[derive(Debug, Clone, Copy)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv3dLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin / spec.groups) * kernel.iter().product::<usize>();
        let w = store.add(
            format!("{name}.w"),
            randn_arr(
                &[cout, cin / spec.groups, kernel[0], kernel[1], kernel[2]],
                kaiming_std(fan_in),
                rng,
            ),
        );
        let b = store.add(format!("{name}.b"), Arr::zeros(IxDyn(&[cout])));
        Self { w, b, spec }
    }

    /// Zero-initialized variant for network output heads.
    pub fn init_zero<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Arr::zeros(IxDyn(&[cout, cin / spec.groups, kernel[0], kernel[1], kernel[2]])),
        );
        let b = store.add(format!("{name}.b"), Arr::zeros(IxDyn(&[cout])));
        Self { w, b, spec }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: V) -> V {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, Some(b), self.spec)
    }
}

/// Group normalization with learnable affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Arr::from_elem(IxDyn(&[channels]), F::one()),
        );
        let beta = store.add(format!("{name}.beta"), Arr::zeros(IxDyn(&[channels])));
        Self {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: V) -> V {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.group_norm(x, ga, be, self.groups, 1e-5)
    }
}

/// Single-head cross-attention from a spatial feature map to a small context
/// token sequence. The output projection starts at zero so the block begins
/// as an identity residual.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dk: usize,
}

impl CrossAttention {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        ctx_dim: usize,
        dk: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wq = store.add(
            format!("{name}.wq"),
            randn_arr(&[channels, dk], kaiming_std(channels), rng),
        );
        let wk = store.add(
            format!("{name}.wk"),
            randn_arr(&[ctx_dim, dk], kaiming_std(ctx_dim), rng),
        );
        let wv = store.add(
            format!("{name}.wv"),
            randn_arr(&[ctx_dim, dk], kaiming_std(ctx_dim), rng),
        );
        let wo = store.add(format!("{name}.wo"), Arr::zeros(IxDyn(&[dk, channels])));
        Self { wq, wk, wv, wo, dk }
    }

    /// `x: [B, C, D, H, W]`, `ctx: [B, S, E]` -> `x + attention` (residual).
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: V, ctx: V) -> V {
        let xs = g.val(x).shape().to_vec();
        let (bn, cn) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let cs = g.val(ctx).shape().to_vec();
        let (s_n, e_n) = (cs[1], cs[2]);
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let wo = g.param(store, self.wo);
        let scale = 1.0 / (self.dk as f64).sqrt();

        let mut outs = Vec::with_capacity(bn);
        for b in 0..bn {
            let xb = g.slice_axis(x, 0, b, 1); // [1, C, sp...]
            let flat = g.reshape(xb, &[cn, spatial]);
            let toks = g.transpose2(flat); // [sp, C]
            let cb = g.slice_axis(ctx, 0, b, 1);
            let cb = g.reshape(cb, &[s_n, e_n]); // [S, E]
            let q = g.matmul(toks, wq); // [sp, dk]
            let k = g.matmul(cb, wk); // [S, dk]
            let v = g.matmul(cb, wv); // [S, dk]
            let kt = g.transpose2(k);
            let scores = g.matmul(q, kt); // [sp, S]
            let scores = g.scale(scores, scale);
            let attn = g.softmax_last(scores);
            let o = g.matmul(attn, v); // [sp, dk]
            let o = g.matmul(o, wo); // [sp, C]
            let o = g.transpose2(o); // [C, sp]
            let mut shape = vec![1, cn];
            shape.extend_from_slice(&xs[2..]);
            outs.push(g.reshape(o, &shape));
        }
        let attn_out = g.concat(&outs, 0);
        g.add(x, attn_out)
    }
}

/// Sinusoidal timestep features of dimension `dim` (half sin, half cos),
/// computed outside the graph.
pub fn timestep_features<F: Scalar>(t: &[usize], dim: usize) -> Arr<F> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Arr::zeros(IxDyn(&[t.len(), dim]));
    for (i, &tv) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10000.0f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
            let arg = tv as f64 * freq;
            out[[i, j]] = F::fl(arg.sin());
            out[[i, half + j]] = F::fl(arg.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn cross_attention_is_residual_at_init() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_for(1, "nn", 0);
        let attn = CrossAttention::init(&mut store, "a", 4, 3, 8, &mut rng);
        let mut g = Graph::new();
        let x = g.input(randn_arr(&[2, 4, 2, 2, 2], 1.0, &mut rng));
        let ctx = g.input(randn_arr(&[2, 5, 3], 1.0, &mut rng));
        let y = attn.forward(&mut g, &store, x, ctx);
        // wo starts at zero, so the block begins as the identity.
        assert_eq!(g.val(y), g.val(x));
    }

    #[test]
    fn dense_layer_shapes() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(2, "nn", 0);
        let d = Dense::init(&mut store, "d", 3, 5, &mut rng);
        let mut g = Graph::new();
        let x = g.input(randn_arr(&[7, 3], 1.0, &mut rng));
        let y = d.forward(&mut g, &store, x);
        assert_eq!(g.val(y).shape(), &[7, 5]);
    }

    #[test]
    fn timestep_features_are_bounded_and_distinct() {
        let f = timestep_features::<f64>(&[1, 500, 1000], 16);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
        let r0: Vec<f64> = f.index_axis(ndarray::Axis(0), 0).iter().cloned().collect();
        let r1: Vec<f64> = f.index_axis(ndarray::Axis(0), 1).iter().cloned().collect();
        assert_ne!(r0, r1);
    }
}
