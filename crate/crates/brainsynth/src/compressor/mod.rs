//! KL-regularized compression autoencoder: the first stage that maps volumes
//! to latents and back. Fully convolutional, so any input whose sides are
//! divisible by the downsampling factor is accepted.

mod losses;
mod train;

pub use losses::{
    kl_scalar, CompressorLossReport, LossWeights, PatchDiscriminator, PerceptualNet,
};
pub use train::{train_compressor, AeTrainConfig, CompressorCheckpoint, LossRow};

use crate::nn::{randn_like_shape, Conv3dLayer};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{Arr, Graph, ParamStore, V};
use crate::volume::{Volume, VolumeSource};
use crate::{Error, Result};
use ndarray::{Array4, IxDyn};
use serde::{Deserialize, Serialize};

/// Compressed representation `z`: `[C, d, h, w]` with `(d, h, w)` equal to
/// the input shape divided by the downsampling factor.
pub type Latent = Array4<f32>;

/// Gaussian posterior over latents; log-variance is clamped to
/// [`LOGVAR_MIN`, `LOGVAR_MAX`].
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    pub mean: Latent,
    pub logvar: Latent,
}

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Architecture hyperparameters. `widths` has one entry per 2× downsampling
/// stage, so the factor is `2^widths.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub latent_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            widths: vec![12, 20, 28],
            seed: 7,
        }
    }
}

impl CompressorConfig {
    pub fn factor(&self) -> usize {
        1 << self.widths.len()
    }
}

/// The autoencoder. Encoder: stride-2 4³ convolutions; decoder: nearest
/// upsampling followed by 3³ convolutions, with a grouped refinement at full
/// resolution to keep the last stage cheap.
pub struct Compressor {
    pub cfg: CompressorConfig,
    pub store: ParamStore<f32>,
    enc: Vec<Conv3dLayer>,
    enc_mid: Conv3dLayer,
    enc_out: Conv3dLayer,
    dec_in: Conv3dLayer,
    dec_mid: Conv3dLayer,
    dec_up: Vec<Conv3dLayer>,
    dec_refine: Conv3dLayer,
    dec_out: Conv3dLayer,
}

impl Compressor {
    pub fn new(cfg: CompressorConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::util::rng_for(cfg.seed, "compressor-init", 0);
        let s2 = ConvSpec::new([2, 2, 2], [1, 1, 1], 1);
        let s1 = ConvSpec::new([1, 1, 1], [1, 1, 1], 1);
        let p0 = ConvSpec::new([1, 1, 1], [0, 0, 0], 1);

        let mut enc = Vec::new();
        let mut cin = 1;
        for (i, &w) in cfg.widths.iter().enumerate() {
            enc.push(Conv3dLayer::init(
                &mut store,
                &format!("enc{i}"),
                cin,
                w,
                [4, 4, 4],
                s2,
                &mut rng,
            ));
            cin = w;
        }
        let wlast = *cfg.widths.last().expect("at least one stage");
        let enc_mid = Conv3dLayer::init(&mut store, "enc_mid", wlast, wlast, [3, 3, 3], s1, &mut rng);
        let enc_out = Conv3dLayer::init(
            &mut store,
            "enc_out",
            wlast,
            2 * cfg.latent_channels,
            [1, 1, 1],
            p0,
            &mut rng,
        );
        let dec_in = Conv3dLayer::init(
            &mut store,
            "dec_in",
            cfg.latent_channels,
            wlast,
            [1, 1, 1],
            p0,
            &mut rng,
        );
        let dec_mid = Conv3dLayer::init(&mut store, "dec_mid", wlast, wlast, [3, 3, 3], s1, &mut rng);
        let mut dec_up = Vec::new();
        let mut cur = wlast;
        for (i, &w) in cfg.widths.iter().rev().skip(1).enumerate() {
            dec_up.push(Conv3dLayer::init(
                &mut store,
                &format!("dec_up{i}"),
                cur,
                w,
                [3, 3, 3],
                s1,
                &mut rng,
            ));
            cur = w;
        }
        // Last upsample keeps the width; full-resolution work is grouped.
        let n_up = cfg.widths.len() - 1;
        dec_up.push(Conv3dLayer::init(
            &mut store,
            &format!("dec_up{n_up}"),
            cur,
            cur,
            [3, 3, 3],
            ConvSpec::new([1, 1, 1], [1, 1, 1], cur.min(4)),
            &mut rng,
        ));
        let dec_refine = Conv3dLayer::init(
            &mut store,
            "dec_refine",
            cur,
            cur,
            [3, 3, 3],
            ConvSpec::new([1, 1, 1], [1, 1, 1], cur),
            &mut rng,
        );
        let dec_out = Conv3dLayer::init(&mut store, "dec_out", cur, 1, [1, 1, 1], p0, &mut rng);

        Self {
            cfg,
            store,
            enc,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_refine,
            dec_out,
        }
    }

    /// Encoder graph: `x [B,1,D,H,W]` -> `(mean, logvar)` each
    /// `[B, zc, D/F, H/F, W/F]`, log-variance clamped.
    pub fn encode_graph(&self, g: &mut Graph<f32>, x: V) -> (V, V) {
        let mut h = x;
        for layer in &self.enc {
            h = layer.forward(g, &self.store, h);
            h = g.silu(h);
        }
        h = self.enc_mid.forward(g, &self.store, h);
        h = g.silu(h);
        let out = self.enc_out.forward(g, &self.store, h);
        let zc = self.cfg.latent_channels;
        let mean = g.slice_axis(out, 1, 0, zc);
        let logvar_raw = g.slice_axis(out, 1, zc, zc);
        let logvar = g.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    /// Decoder graph: `z [B, zc, d, h, w]` -> `[B, 1, d·F, h·F, w·F]`.
    pub fn decode_graph(&self, g: &mut Graph<f32>, z: V) -> V {
        let mut h = self.dec_in.forward(g, &self.store, z);
        h = g.silu(h);
        h = self.dec_mid.forward(g, &self.store, h);
        h = g.silu(h);
        for layer in &self.dec_up {
            h = g.upsample2(h);
            h = layer.forward(g, &self.store, h);
            h = g.silu(h);
        }
        h = self.dec_refine.forward(g, &self.store, h);
        h = g.silu(h);
        self.dec_out.forward(g, &self.store, h)
    }

    fn batch_from_volume(v: &Volume) -> Arr<f32> {
        let [d, h, w] = v.shape();
        let data: Vec<f32> = v.data.iter().cloned().collect();
        Arr::from_shape_vec(IxDyn(&[1, 1, d, h, w]), data).unwrap()
    }

    /// Maps a volume to posterior parameters. Deterministic given model state.
    pub fn encode(&self, v: &Volume) -> Result<PosteriorParams> {
        let f = self.cfg.factor();
        let shape = v.shape();
        if shape.iter().any(|&n| n % f != 0) {
            return Err(Error::Shape {
                expected: format!("sides divisible by {f}"),
                found: format!("{shape:?}"),
            });
        }
        let mut g = Graph::new();
        let x = g.input(Self::batch_from_volume(v));
        let (mean, logvar) = self.encode_graph(&mut g, x);
        let to_latent = |a: &Arr<f32>| -> Latent {
            let s = a.shape().to_vec();
            Array4::from_shape_vec(
                (s[1], s[2], s[3], s[4]),
                a.iter().cloned().collect(),
            )
            .unwrap()
        };
        Ok(PosteriorParams {
            mean: to_latent(g.val(mean)),
            logvar: to_latent(g.val(logvar)),
        })
    }

    /// Reparameterized draw from the posterior: `mean + exp(logvar/2)·ε`.
    pub fn sample_posterior(p: &PosteriorParams, seed: u64) -> Latent {
        let mut rng = crate::util::rng_for(seed, "posterior", 0);
        let eps: Arr<f32> = randn_like_shape(p.mean.shape(), &mut rng);
        let mut z = p.mean.clone();
        for ((z, lv), e) in z.iter_mut().zip(p.logvar.iter()).zip(eps.iter()) {
            *z += (0.5 * lv).exp() * e;
        }
        z
    }

    /// Decodes a latent back to a volume.
    pub fn decode(&self, z: &Latent) -> Result<Volume> {
        let (c, d, h, w) = z.dim();
        if c != self.cfg.latent_channels {
            return Err(Error::Shape {
                expected: format!("{} latent channels", self.cfg.latent_channels),
                found: format!("{c}"),
            });
        }
        let mut g = Graph::new();
        let data: Vec<f32> = z.iter().cloned().collect();
        let zv = g.input(Arr::from_shape_vec(IxDyn(&[1, c, d, h, w]), data).unwrap());
        let out = self.decode_graph(&mut g, zv);
        let ov = g.val(out);
        let f = self.cfg.factor();
        let arr = ndarray::Array3::from_shape_vec(
            (d * f, h * f, w * f),
            ov.iter().cloned().collect(),
        )
        .unwrap();
        Volume::new(arr, [1.0; 3], VolumeSource::Synthetic).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Numerical("decoder produced non-finite voxels".into()),
            other => other,
        })
    }

    /// Decodes with the spacing taken from a reference grid.
    pub fn decode_to_grid(&self, z: &Latent, spacing: [f64; 3]) -> Result<Volume> {
        let mut v = self.decode(z)?;
        v.spacing = spacing;
        Ok(v)
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, v: &Volume) -> Result<Volume> {
        let p = self.encode(v)?;
        let mut out = self.decode(&p.mean)?;
        out.spacing = v.spacing;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn tiny_cfg() -> CompressorConfig {
        CompressorConfig {
            latent_channels: 2,
            widths: vec![4, 6, 8],
            seed: 1,
        }
    }

    fn vol(shape: [usize; 3]) -> Volume {
        Volume::new(
            Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
                ((i + 2 * j + 3 * k) as f32 * 0.05).sin() * 0.3 + 0.4
            }),
            [1.0; 3],
            VolumeSource::Phantom,
        )
        .unwrap()
    }

    #[test]
    fn desk_scale_latent_shape_is_input_over_factor() {
        let c = Compressor::new(tiny_cfg());
        let p = c.encode(&vol([32, 32, 32])).unwrap();
        assert_eq!(p.mean.dim(), (2, 4, 4, 4));
        assert_eq!(p.logvar.dim(), (2, 4, 4, 4));
    }

    #[test]
    fn indivisible_shape_is_rejected_before_compute() {
        let c = Compressor::new(tiny_cfg());
        assert!(matches!(
            c.encode(&vol([33, 32, 32])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn paper_scale_shape_contract() {
        // 160×224×160 at factor 8 compresses to 20×28×20.
        let c = Compressor::new(CompressorConfig {
            latent_channels: 1,
            widths: vec![2, 3, 4],
            seed: 2,
        });
        let v = Volume::new(
            Array3::from_elem((160, 224, 160), 0.5f32),
            [1.0; 3],
            VolumeSource::Phantom,
        )
        .unwrap();
        let p = c.encode(&v).unwrap();
        assert_eq!(p.mean.dim(), (1, 20, 28, 20));
    }

    #[test]
    fn posterior_sampling_at_clamp_floor_returns_mean() {
        let mean = Array4::from_elem((2, 3, 3, 3), 0.7f32);
        let logvar = Array4::from_elem((2, 3, 3, 3), LOGVAR_MIN as f32);
        let p = PosteriorParams { mean: mean.clone(), logvar };
        let z = Compressor::sample_posterior(&p, 42);
        for (a, b) in z.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_sampling_is_deterministic_per_seed() {
        let p = PosteriorParams {
            mean: Array4::zeros((2, 3, 3, 3)),
            logvar: Array4::zeros((2, 3, 3, 3)),
        };
        let a = Compressor::sample_posterior(&p, 9);
        let b = Compressor::sample_posterior(&p, 9);
        let c = Compressor::sample_posterior(&p, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn posterior_mc_variance_matches_logvar() {
        // Monte Carlo check of the reparameterization: the empirical variance
        // over many draws matches exp(logvar) within 5%.
        let p = PosteriorParams {
            mean: Array4::from_elem((1, 1, 1, 1), 0.3f32),
            logvar: Array4::from_elem((1, 1, 1, 1), -0.7f32),
        };
        let n = 10_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for s in 0..n {
            let z = Compressor::sample_posterior(&p, s as u64)[[0, 0, 0, 0]] as f64;
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want = (-0.7f64).exp();
        assert!((var - want).abs() / want < 0.05, "var {var}, want {want}");
    }

    #[test]
    fn untrained_decode_is_finite_for_standard_normal_latent() {
        let c = Compressor::new(tiny_cfg());
        let mut rng = crate::util::rng_for(3, "test", 0);
        let z: Latent = Array4::from_shape_fn((2, 4, 4, 4), |_| {
            use rand::Rng;
            rng.random_range(-2.0f32..2.0)
        });
        let v = c.decode(&z).unwrap();
        assert_eq!(v.shape(), [32, 32, 32]);
    }

    #[test]
    fn decode_rejects_wrong_channel_count() {
        let c = Compressor::new(tiny_cfg());
        let z: Latent = Array4::zeros((3, 4, 4, 4));
        assert!(matches!(c.decode(&z), Err(Error::Shape { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        // Shape contract: decode(encode(v)) restores v's shape for any
        // divisible shape.
        #[test]
        fn roundtrip_preserves_shape(d in 1usize..3, h in 1usize..3, w in 1usize..3) {
            let shape = [d * 8, h * 8, w * 8];
            let c = Compressor::new(tiny_cfg());
            let p = c.encode(&vol(shape)).unwrap();
            let back = c.decode(&p.mean).unwrap();
            prop_assert_eq!(back.shape(), shape);
        }
    }

    #[test]
    fn grid_validate_accepts_desk_scale() {
        GridSpec::desk_scale().validate(8).unwrap();
    }
}
