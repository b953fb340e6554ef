//! Procedural head phantoms with analytically known ventricular and brain
//! volumes, the threshold/flood-fill volumetry oracle, and validated
//! ingestion of externally supplied volumes.
//!
//! # Phantom intensity convention
//!
//! background 0, skull 0.3, ventricle cavity 0.1, brain tissue
//! `0.62 + 0.18·age_n` plus a ±0.025 cosine texture whose orientation encodes
//! sex, plus Gaussian noise at the configured level. Classes are separable by
//! fixed thresholds, so the volumetry oracle needs no learning.
//!
//! "Brain volume" throughout refers to the filled brain ellipsoid (tissue
//! plus the enclosed cavity); the oracle measures the same quantity.

use crate::covariates::Covariates;
use crate::volume::{GridSpec, Volume, VolumeSource};
use crate::{Error, Result};
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Fixed age range of the intensity convention (cohort years).
const AGE_LO: f64 = 44.0;
const AGE_HI: f64 = 82.0;
/// Skull shell outer scale relative to the brain ellipsoid.
const SKULL_FACTOR: f64 = 1.06;
/// Largest feasible cavity-to-brain volume ratio.
const MAX_CAVITY_RATIO: f64 = 0.65;
/// Intensity thresholds used by the volumetry oracle.
const BRAIN_THRESHOLD: f32 = 0.45;
const CAVITY_THRESHOLD: f32 = 0.3;

/// Deterministic phantom description: identical spec ⇒ identical phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub covariates: Covariates,
    pub geometry_seed: u64,
    pub noise_level: f64,
}

/// An ellipsoid in physical (mm) coordinates, rotated about the D axis.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    pub rot: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = p[0] - self.center[0];
        let h = p[1] - self.center[1];
        let w = p[2] - self.center[2];
        let (s, c) = self.rot.sin_cos();
        let hr = c * h + s * w;
        let wr = -s * h + c * w;
        let q = (d / self.axes[0]).powi(2)
            + (hr / self.axes[1]).powi(2)
            + (wr / self.axes[2]).powi(2);
        q <= 1.0
    }

    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.axes[0] * self.axes[1] * self.axes[2]
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            center: self.center,
            axes: [self.axes[0] * k, self.axes[1] * k, self.axes[2] * k],
            rot: self.rot,
        }
    }
}

/// Counts voxel centers inside an ellipsoid on the given grid.
pub fn ellipsoid_voxel_count(e: &Ellipsoid, grid: &GridSpec) -> usize {
    let mut count = 0;
    let maxax = e.axes.iter().cloned().fold(0.0, f64::max);
    let mut ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = ((e.center[a] - maxax) / grid.spacing[a] - 1.0).floor().max(0.0) as usize;
        let hi = (((e.center[a] + maxax) / grid.spacing[a]) + 1.0).ceil() as usize;
        ranges[a] = (lo, hi.min(grid.shape[a]));
    }
    for i in ranges[0].0..ranges[0].1 {
        for j in ranges[1].0..ranges[1].1 {
            for k in ranges[2].0..ranges[2].1 {
                let p = [
                    (i as f64 + 0.5) * grid.spacing[0],
                    (j as f64 + 0.5) * grid.spacing[1],
                    (k as f64 + 0.5) * grid.spacing[2],
                ];
                if e.contains(p) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Scales an ellipsoid so its voxel-counted volume matches `target_mm3` to
/// within the one-voxel quantization floor.
fn calibrate(e: &Ellipsoid, grid: &GridSpec, target_mm3: f64) -> Ellipsoid {
    let vox = grid.voxel_volume();
    let target = target_mm3 / vox;
    let (mut lo, mut hi) = (0.7, 1.3);
    for _ in 0..42 {
        let mid = 0.5 * (lo + hi);
        if (ellipsoid_voxel_count(&e.scaled(mid), grid) as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    e.scaled(0.5 * (lo + hi))
}

/// Resolved phantom geometry, exposed for tests and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct PhantomGeometry {
    pub brain: Ellipsoid,
    pub cavity: Option<Ellipsoid>,
    pub skull_outer: Ellipsoid,
    pub brain_base_intensity: f64,
}

/// Builds a phantom volume; see the module docs for the intensity convention.
pub fn generate_phantom(spec: &PhantomSpec, grid: &GridSpec) -> Result<Volume> {
    generate_phantom_with_geometry(spec, grid).map(|(v, _)| v)
}

/// As [`generate_phantom`] but also returns the resolved geometry.
pub fn generate_phantom_with_geometry(
    spec: &PhantomSpec,
    grid: &GridSpec,
) -> Result<(Volume, PhantomGeometry)> {
    grid.validate(0)?;
    let c = &spec.covariates;
    for (name, v) in [
        ("age", c.age),
        ("sex", c.sex),
        ("ventricular_volume", c.ventricular_volume),
        ("brain_volume_norm", c.brain_volume_norm),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("phantom covariate {name}"),
            });
        }
    }
    if c.brain_volume_norm <= 0.0 {
        return Err(Error::Infeasible("brain volume must be positive".into()));
    }
    if c.ventricular_volume < 0.0 {
        return Err(Error::Infeasible(
            "ventricular volume must be nonnegative".into(),
        ));
    }
    if !(spec.noise_level.is_finite() && spec.noise_level >= 0.0) {
        return Err(Error::Config("noise level must be finite and >= 0".into()));
    }
    let cavity_ratio = c.ventricular_volume / c.brain_volume_norm;
    if cavity_ratio > MAX_CAVITY_RATIO {
        return Err(Error::Infeasible(format!(
            "cavity-to-brain volume ratio {cavity_ratio:.3} exceeds {MAX_CAVITY_RATIO} \
             (cavity would not fit inside the brain)"
        )));
    }

    let mut rng = crate::util::rng_for(spec.geometry_seed, "phantom-geom", 0);
    let ext = [
        grid.shape[0] as f64 * grid.spacing[0],
        grid.shape[1] as f64 * grid.spacing[1],
        grid.shape[2] as f64 * grid.spacing[2],
    ];
    let geomean = (ext[0] * ext[1] * ext[2]).cbrt();

    // Brain anisotropy follows the box proportions, with a seeded wobble.
    let mut factors = [0.0; 3];
    for a in 0..3 {
        factors[a] = (ext[a] / geomean) * (1.0 + rng.random_range(-0.04..0.04));
    }
    let prod = (factors[0] * factors[1] * factors[2]).cbrt();
    for f in &mut factors {
        *f /= prod;
    }
    let rot = rng.random_range(-0.15..0.15);
    let mut center = [0.0; 3];
    for a in 0..3 {
        center[a] = ext[a] / 2.0 + rng.random_range(-0.75..0.75) * grid.spacing[a];
    }

    let r_brain = (3.0 * c.brain_volume_norm / (4.0 * std::f64::consts::PI)).cbrt();
    let brain0 = Ellipsoid {
        center,
        axes: [
            r_brain * factors[0],
            r_brain * factors[1],
            r_brain * factors[2],
        ],
        rot,
    };
    // The skull shell plus one voxel of background must fit inside the grid.
    for a in 0..3 {
        let reach = brain0.axes[a] * SKULL_FACTOR + (center[a] - ext[a] / 2.0).abs();
        if reach + grid.spacing[a] > ext[a] / 2.0 {
            return Err(Error::Infeasible(format!(
                "skull extent {:.1} mm exceeds grid half-extent {:.1} mm on axis {a}",
                reach + grid.spacing[a],
                ext[a] / 2.0
            )));
        }
    }
    let brain = calibrate(&brain0, grid, c.brain_volume_norm);

    let vox = grid.voxel_volume();
    let cavity = if c.ventricular_volume >= 0.5 * vox {
        let s = (c.ventricular_volume / c.brain_volume_norm).cbrt();
        let mut cav_factors = [0.0f64; 3];
        for f in &mut cav_factors {
            *f = 1.0 + rng.random_range(-0.03..0.03);
        }
        let prod = (cav_factors[0] * cav_factors[1] * cav_factors[2]).cbrt();
        for f in &mut cav_factors {
            *f /= prod;
        }
        let mut cav_center = brain.center;
        for a in 0..3 {
            let slack = (1.0 - s) * brain.axes[a];
            cav_center[a] += rng.random_range(-0.3..0.3) * slack;
        }
        let cav0 = Ellipsoid {
            center: cav_center,
            axes: [
                s * brain.axes[0] * cav_factors[0],
                s * brain.axes[1] * cav_factors[1],
                s * brain.axes[2] * cav_factors[2],
            ],
            rot,
        };
        Some(calibrate(&cav0, grid, c.ventricular_volume))
    } else {
        None
    };
    let skull_outer = brain.scaled(SKULL_FACTOR);

    let age_n = ((c.age - AGE_LO) / (AGE_HI - AGE_LO)).clamp(-0.25, 1.25);
    let brain_base = 0.62 + 0.18 * age_n;
    // Texture orientation encodes sex: along H for 0, along D for 1.
    let tex_axis = if c.sex >= 0.5 { 0 } else { 1 };
    let tex_period = ext[tex_axis] / 2.5;

    let mut noise_rng = crate::util::rng_for(spec.geometry_seed, "phantom-noise", 0);
    let mut data = Array3::<f32>::zeros((grid.shape[0], grid.shape[1], grid.shape[2]));
    for i in 0..grid.shape[0] {
        for j in 0..grid.shape[1] {
            for k in 0..grid.shape[2] {
                let p = [
                    (i as f64 + 0.5) * grid.spacing[0],
                    (j as f64 + 0.5) * grid.spacing[1],
                    (k as f64 + 0.5) * grid.spacing[2],
                ];
                let mut val = if cavity.as_ref().is_some_and(|cv| cv.contains(p)) {
                    0.1
                } else if brain.contains(p) {
                    let u = p[tex_axis] / tex_period * std::f64::consts::TAU;
                    brain_base + 0.025 * u.cos()
                } else if skull_outer.contains(p) {
                    0.3
                } else {
                    0.0
                };
                if spec.noise_level > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    val += spec.noise_level * z;
                }
                data[[i, j, k]] = val as f32;
            }
        }
    }
    let volume = Volume::new(data, grid.spacing, VolumeSource::Phantom)?;
    Ok((
        volume,
        PhantomGeometry {
            brain,
            cavity,
            skull_outer,
            brain_base_intensity: brain_base,
        },
    ))
}

/// Volumetry measured from a volume by the threshold / flood-fill oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleVolumes {
    pub ventricular_mm3: f64,
    pub brain_mm3: f64,
    /// Set when no brain tissue was found; both volumes are then zero.
    pub empty: bool,
}

/// Measures ventricular and (filled) brain volume by segmentation:
/// brain tissue is everything above the brain threshold, enclosed holes are
/// recovered by flood-filling the complement from the grid boundary, and
/// hole voxels below the cavity threshold count as ventricle.
pub fn oracle_volumes(v: &Volume) -> OracleVolumes {
    let [d, h, w] = v.shape();
    let n = d * h * w;
    let data = v.data.as_slice().expect("standard layout");
    let brain_mask: Vec<bool> = data.iter().map(|&x| x > BRAIN_THRESHOLD).collect();

    // Flood fill the non-brain complement from the boundary (6-connectivity).
    let mut outside = vec![false; n];
    let mut queue = VecDeque::new();
    let idx = |i: usize, j: usize, k: usize| (i * h + j) * w + k;
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if (i == 0 || i == d - 1 || j == 0 || j == h - 1 || k == 0 || k == w - 1)
                    && !brain_mask[idx(i, j, k)]
                {
                    outside[idx(i, j, k)] = true;
                    queue.push_back((i, j, k));
                }
            }
        }
    }
    while let Some((i, j, k)) = queue.pop_front() {
        let mut visit = |ni: usize, nj: usize, nk: usize, queue: &mut VecDeque<_>| {
            let ii = idx(ni, nj, nk);
            if !outside[ii] && !brain_mask[ii] {
                outside[ii] = true;
                queue.push_back((ni, nj, nk));
            }
        };
        if i > 0 {
            visit(i - 1, j, k, &mut queue);
        }
        if i + 1 < d {
            visit(i + 1, j, k, &mut queue);
        }
        if j > 0 {
            visit(i, j - 1, k, &mut queue);
        }
        if j + 1 < h {
            visit(i, j + 1, k, &mut queue);
        }
        if k > 0 {
            visit(i, j, k - 1, &mut queue);
        }
        if k + 1 < w {
            visit(i, j, k + 1, &mut queue);
        }
    }

    let mut brain_count = 0usize;
    let mut vent_count = 0usize;
    for i in 0..n {
        let hole = !brain_mask[i] && !outside[i];
        if brain_mask[i] || hole {
            brain_count += 1;
        }
        if hole && data[i] < CAVITY_THRESHOLD {
            vent_count += 1;
        }
    }
    let vox = v.grid().voxel_volume();
    OracleVolumes {
        ventricular_mm3: vent_count as f64 * vox,
        brain_mm3: brain_count as f64 * vox,
        empty: brain_count == 0,
    }
}

/// Intensity handling when ingesting external volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntensityScaling {
    /// Keep stored intensities (already in the canonical [0, 1] convention).
    None,
    /// Rescale by the file's own min-max.
    MinMax,
    /// Rescale by an externally supplied (dataset-level) range.
    Range { min: f64, max: f64 },
}

/// Validates and loads a pre-registered volume: the file must parse, match
/// the expected grid, contain only finite voxels, and is rescaled to [0, 1]
/// according to `scaling`.
pub fn ingest_volume(
    path: &std::path::Path,
    expected: &GridSpec,
    scaling: IntensityScaling,
) -> Result<Volume> {
    let mut v = crate::nifti::read_nifti(path)?;
    if v.shape() != expected.shape {
        return Err(Error::Shape {
            expected: format!("{:?}", expected.shape),
            found: format!("{:?} in {}", v.shape(), path.display()),
        });
    }
    for a in 0..3 {
        if (v.spacing[a] - expected.spacing[a]).abs() > 1e-3 {
            return Err(Error::Shape {
                expected: format!("spacing {:?}", expected.spacing),
                found: format!("spacing {:?} in {}", v.spacing, path.display()),
            });
        }
    }
    match scaling {
        IntensityScaling::None => {}
        IntensityScaling::MinMax => {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &x in v.data.iter() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            if !(hi - lo).is_finite() || hi - lo < 1e-12 {
                return Err(Error::Degenerate(format!(
                    "{}: constant intensity, cannot min-max rescale",
                    path.display()
                )));
            }
            v.data.mapv_inplace(|x| (x - lo) / (hi - lo));
        }
        IntensityScaling::Range { min, max } => {
            if !(max - min).is_finite() || max - min < 1e-12 {
                return Err(Error::Config("invalid intensity range".into()));
            }
            let (min, max) = (min as f32, max as f32);
            v.data.mapv_inplace(|x| (x - min) / (max - min));
        }
    }
    v.check()?;
    Ok(v)
}
