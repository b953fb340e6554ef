//! Autoencoder training objective: L1 + perceptual + patch-adversarial + KL.

use crate::nn::{randn_arr, Conv3dLayer};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{Arr, Graph, ParamStore, V};
use serde::{Deserialize, Serialize};

/// Per-term loss weights. The adversarial term is enabled only after the
/// configured warm-up fraction of training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 0.002,
            adversarial: 0.005,
            kl: 1e-7,
        }
    }
}

/// Scalar closed-form KL divergence of N(mean, exp(logvar)) from N(0, 1).
pub fn kl_scalar(mean: f64, logvar: f64) -> f64 {
    0.5 * (mean * mean + logvar.exp() - 1.0 - logvar)
}

/// Per-element average of the closed-form KL over a posterior, as a graph
/// node: `-0.5 · mean(1 + logvar - mean² - exp(logvar))`.
pub fn kl_graph(g: &mut Graph<f32>, mean: V, logvar: V) -> V {
    let one_plus = g.add_scalar(logvar, 1.0);
    let mu2 = g.mul(mean, mean);
    let ev = g.exp(logvar);
    let a = g.sub(one_plus, mu2);
    let b = g.sub(a, ev);
    let m = g.mean(b);
    g.scale(m, -0.5)
}

/// Frozen random-convolution feature pyramid used as the perceptual backbone.
/// The backbone is 2D (applied to the three central orthogonal slices and
/// averaged); weights are seeded constants, so the distance is deterministic
/// and requires no pretraining.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    weights: Vec<Arr<f32>>,
}

impl PerceptualNet {
    const WIDTHS: [usize; 3] = [8, 16, 24];

    pub fn new(seed: u64) -> Self {
        let mut rng = crate::util::rng_for(seed, "perceptual-init", 0);
        let mut weights = Vec::new();
        let mut cin = 1;
        for w in Self::WIDTHS {
            let fan_in = cin * 9;
            weights.push(randn_arr(
                &[w, cin, 1, 3, 3],
                (2.0 / fan_in as f64).sqrt(),
                &mut rng,
            ));
            cin = w;
        }
        Self { weights }
    }

    /// Feature maps of one `[B, 1, 1, S1, S2]` slice (weights enter the graph
    /// as constants; gradients flow to the activations only).
    fn slice_features(&self, g: &mut Graph<f32>, slice: V) -> Vec<V> {
        let spec = ConvSpec::new([1, 2, 2], [0, 1, 1], 1);
        let mut h = slice;
        let mut feats = Vec::new();
        for w in &self.weights {
            let wv = g.input(w.clone());
            h = g.conv3d(h, wv, None, spec);
            h = g.leaky_relu(h, 0.2);
            feats.push(h);
        }
        feats
    }

    fn central_slices(g: &mut Graph<f32>, x: V) -> Vec<V> {
        let s = g.val(x).shape().to_vec();
        let (b, d, h, w) = (s[0], s[2], s[3], s[4]);
        let sd = g.slice_axis(x, 2, d / 2, 1); // [B,1,1,H,W]
        let sh = g.slice_axis(x, 3, h / 2, 1); // [B,1,D,1,W]
        let sh = g.reshape(sh, &[b, 1, 1, d, w]);
        let sw = g.slice_axis(x, 4, w / 2, 1); // [B,1,D,H,1]
        let sw = g.reshape(sw, &[b, 1, 1, d, h]);
        vec![sd, sh, sw]
    }

    /// Mean squared feature distance between two `[B, 1, D, H, W]` nodes,
    /// averaged over the three central orthogonal slices and all layers.
    pub fn distance_graph(&self, g: &mut Graph<f32>, a: V, b: V) -> V {
        let slices_a = Self::central_slices(g, a);
        let slices_b = Self::central_slices(g, b);
        let mut acc: Option<V> = None;
        let mut count = 0usize;
        for (sa, sb) in slices_a.into_iter().zip(slices_b) {
            let fa = self.slice_features(g, sa);
            let fb = self.slice_features(g, sb);
            for (xa, xb) in fa.into_iter().zip(fb) {
                let d = g.mse(xa, xb);
                acc = Some(match acc {
                    Some(t) => g.add(t, d),
                    None => d,
                });
                count += 1;
            }
        }
        let total = acc.expect("at least one slice");
        g.scale(total, 1.0 / count as f64)
    }
}

/// 3D patch discriminator with a least-squares objective. Two stride-2
/// stages give a receptive field of 10 voxels, about a quarter of the desk
/// volume side.
pub struct PatchDiscriminator {
    pub store: ParamStore<f32>,
    convs: Vec<Conv3dLayer>,
    head: Conv3dLayer,
}

impl PatchDiscriminator {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::util::rng_for(seed, "disc-init", 0);
        let s2 = ConvSpec::new([2, 2, 2], [1, 1, 1], 1);
        let p0 = ConvSpec::new([1, 1, 1], [0, 0, 0], 1);
        let convs = vec![
            Conv3dLayer::init(&mut store, "d0", 1, 8, [4, 4, 4], s2, &mut rng),
            Conv3dLayer::init(&mut store, "d1", 8, 16, [4, 4, 4], s2, &mut rng),
        ];
        let head = Conv3dLayer::init(&mut store, "d_head", 16, 1, [1, 1, 1], p0, &mut rng);
        Self { store, convs, head }
    }

    /// Patch logits with trainable weights (discriminator update).
    pub fn forward_trainable(&self, g: &mut Graph<f32>, x: V) -> V {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, &self.store, h);
            h = g.leaky_relu(h, 0.2);
        }
        self.head.forward(g, &self.store, h)
    }

    /// Patch logits with weights frozen into the graph as constants
    /// (generator update: gradients flow to `x` only).
    pub fn forward_frozen(&self, g: &mut Graph<f32>, x: V) -> V {
        let mut h = x;
        for c in &self.convs {
            let w = g.input(self.store.value(c.w).clone());
            let b = g.input(self.store.value(c.b).clone());
            h = g.conv3d(h, w, Some(b), c.spec);
            h = g.leaky_relu(h, 0.2);
        }
        let w = g.input(self.store.value(self.head.w).clone());
        let b = g.input(self.store.value(self.head.b).clone());
        g.conv3d(h, w, Some(b), self.head.spec)
    }

    /// LSGAN discriminator loss: `0.5·(mean((D(real)-1)²) + mean(D(fake)²))`.
    pub fn loss_d(&self, g: &mut Graph<f32>, real: V, fake: V) -> V {
        let dr = self.forward_trainable(g, real);
        let df = self.forward_trainable(g, fake);
        let dr1 = g.add_scalar(dr, -1.0);
        let a = g.mul(dr1, dr1);
        let am = g.mean(a);
        let b = g.mul(df, df);
        let bm = g.mean(b);
        let s = g.add(am, bm);
        g.scale(s, 0.5)
    }

    /// LSGAN generator term: `mean((D(fake)-1)²)` with frozen weights.
    pub fn loss_g(&self, g: &mut Graph<f32>, fake: V) -> V {
        let df = self.forward_frozen(g, fake);
        let df1 = g.add_scalar(df, -1.0);
        let sq = g.mul(df1, df1);
        g.mean(sq)
    }
}

/// One evaluation of every training loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressorLossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub kl: f64,
    pub total: f64,
    pub weights: LossWeights,
    /// Whether the adversarial term contributed to `total` (post warm-up).
    pub adversarial_enabled: bool,
}

impl CompressorLossReport {
    /// Weighted sum of the enabled terms.
    pub fn compute_total(&self) -> f64 {
        let mut t = self.weights.l1 * self.l1
            + self.weights.perceptual * self.perceptual
            + self.weights.kl * self.kl;
        if self.adversarial_enabled {
            t += self.weights.adversarial * self.adversarial_g;
        }
        t
    }
}

/// Evaluates all loss terms for a `(volume batch, reconstruction, posterior)`
/// triple without touching any gradient state.
pub fn compressor_losses(
    g: &mut Graph<f32>,
    x: V,
    recon: V,
    mean: V,
    logvar: V,
    perceptual: &PerceptualNet,
    disc: &PatchDiscriminator,
    weights: LossWeights,
    adversarial_enabled: bool,
) -> (CompressorLossReport, V) {
    let l1 = g.mae(recon, x);
    let perc = perceptual.distance_graph(g, recon, x);
    let kl = kl_graph(g, mean, logvar);
    let adv_g = disc.loss_g(g, recon);
    let adv_d = disc.loss_d(g, x, recon);

    let l1w = g.scale(l1, weights.l1);
    let percw = g.scale(perc, weights.perceptual);
    let klw = g.scale(kl, weights.kl);
    let mut total = g.add(l1w, percw);
    total = g.add(total, klw);
    if adversarial_enabled {
        let advw = g.scale(adv_g, weights.adversarial);
        total = g.add(total, advw);
    }
    let report = CompressorLossReport {
        l1: g.scalar(l1) as f64,
        perceptual: g.scalar(perc) as f64,
        adversarial_g: g.scalar(adv_g) as f64,
        adversarial_d: g.scalar(adv_d) as f64,
        kl: g.scalar(kl) as f64,
        total: g.scalar(total) as f64,
        weights,
        adversarial_enabled,
    };
    (report, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Numerical integration oracle for KL(N(m, σ²) ‖ N(0, 1)) via Simpson's
    /// rule on the integrand p(x)·ln(p(x)/q(x)).
    fn kl_quadrature(mean: f64, logvar: f64) -> f64 {
        let var = logvar.exp();
        let sd = var.sqrt();
        let (lo, hi) = (mean - 14.0 * sd.max(1.0), mean + 14.0 * sd.max(1.0));
        let n = 40_000usize; // even
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let p = (-0.5 * (x - mean) * (x - mean) / var).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            if p < 1e-300 {
                0.0
            } else {
                let lnp = -0.5 * (x - mean) * (x - mean) / var - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                let lnq = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
                p * (lnp - lnq)
            }
        };
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += f(x) * if i % 2 == 0 { 2.0 } else { 4.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn kl_closed_form_matches_quadrature() {
        for (m, lv) in [(0.0, 0.0), (0.7, 0.0), (1.5, -1.0), (-0.4, 0.8), (2.0, 0.0)] {
            let closed = kl_scalar(m, lv);
            let numeric = kl_quadrature(m, lv);
            assert!(
                (closed - numeric).abs() < 1e-6,
                "m={m} lv={lv}: closed {closed} vs quadrature {numeric}"
            );
        }
    }

    #[test]
    fn kl_is_zero_for_standard_normal_posterior() {
        assert_eq!(kl_scalar(0.0, 0.0), 0.0);
    }

    #[test]
    fn kl_with_unit_variance_is_half_mean_squared() {
        for m in [0.3, 1.0, 2.5] {
            assert!((kl_scalar(m, 0.0) - m * m / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_graph_matches_scalar_formula() {
        let mut g: Graph<f32> = Graph::new();
        let mean = g.input(Arr::from_elem(IxDyn(&[1, 2, 2, 2, 2]), 0.7f32));
        let logvar = g.input(Arr::from_elem(IxDyn(&[1, 2, 2, 2, 2]), -0.3f32));
        let kl = kl_graph(&mut g, mean, logvar);
        let want = kl_scalar(0.7, -0.3);
        assert!((g.scalar(kl) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_have_zero_l1_and_perceptual() {
        let net = PerceptualNet::new(3);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(Arr::from_shape_fn(IxDyn(&[1, 1, 8, 8, 8]), |ix| {
            (ix[2] as f32 * 0.3).sin() * 0.5
        }));
        let l1 = g.mae(x, x);
        let p = net.distance_graph(&mut g, x, x);
        assert_eq!(g.scalar(l1), 0.0);
        assert_eq!(g.scalar(p), 0.0);
    }

    #[test]
    fn perceptual_distance_is_positive_for_different_inputs() {
        let net = PerceptualNet::new(3);
        let mut g: Graph<f32> = Graph::new();
        let a = g.input(Arr::from_elem(IxDyn(&[1, 1, 8, 8, 8]), 0.2f32));
        let b = g.input(Arr::from_shape_fn(IxDyn(&[1, 1, 8, 8, 8]), |ix| {
            if ix[3] < 4 {
                0.9f32
            } else {
                0.0
            }
        }));
        let p = net.distance_graph(&mut g, a, b);
        assert!(g.scalar(p) > 0.0);
    }

    #[test]
    fn report_total_is_weighted_sum_of_enabled_terms() {
        let w = LossWeights::default();
        let mut r = CompressorLossReport {
            l1: 0.5,
            perceptual: 2.0,
            adversarial_g: 1.0,
            adversarial_d: 0.7,
            kl: 10.0,
            total: 0.0,
            weights: w,
            adversarial_enabled: false,
        };
        r.total = r.compute_total();
        let warm = w.l1 * 0.5 + w.perceptual * 2.0 + w.kl * 10.0;
        assert!((r.total - warm).abs() < 1e-12);
        r.adversarial_enabled = true;
        assert!((r.compute_total() - (warm + w.adversarial)).abs() < 1e-12);
    }
}
