//! The x-space object: a 3D scalar intensity grid with spacing and provenance.

use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Where a volume came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeSource {
    Phantom,
    Ingested,
    Synthetic,
}

/// Grid geometry: shape in voxels `(D, H, W)` and spacing in mm per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridSpec {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self { shape, spacing }
    }

    /// The paper-scale contract: 160×224×160 voxels at 1 mm³.
    pub fn paper_scale() -> Self {
        Self::new([160, 224, 160], [1.0, 1.0, 1.0])
    }

    /// Desk-scale default: 32³ voxels at 4 mm.
    pub fn desk_scale() -> Self {
        Self::new([32, 32, 32], [4.0, 4.0, 4.0])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self, downsampling_factor: usize) -> Result<()> {
        for (axis, (&n, &s)) in self.shape.iter().zip(self.spacing.iter()).enumerate() {
            if n == 0 {
                return Err(Error::Config(format!("shape axis {axis} is zero")));
            }
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("spacing axis {axis} must be positive")));
            }
            if downsampling_factor > 0 && n % downsampling_factor != 0 {
                return Err(Error::Config(format!(
                    "shape axis {axis} ({n}) not divisible by downsampling factor {downsampling_factor}"
                )));
            }
        }
        Ok(())
    }
}

/// A 3D scalar intensity grid. Intensities follow the phantom convention
/// (background ≈ 0, tissue classes below 1) but are not clamped.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub source: VolumeSource,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], source: VolumeSource) -> Result<Self> {
        let v = Self {
            data,
            spacing,
            source,
        };
        v.check()?;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.shape(), self.spacing)
    }

    pub fn check(&self) -> Result<()> {
        if self.shape().iter().any(|&n| n == 0) {
            return Err(Error::Shape {
                expected: "positive shape".into(),
                found: format!("{:?}", self.shape()),
            });
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!(
                "non-positive voxel spacing {:?}",
                self.spacing
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "volume voxels".into(),
            });
        }
        Ok(())
    }
}

/// Peak signal-to-noise ratio in dB for intensities on a [0, 1] scale.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.shape()),
            found: format!("{:?}", b.shape()),
        });
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_non_finite_voxels() {
        let mut data = Array3::zeros((4, 4, 4));
        data[[1, 1, 1]] = f32::NAN;
        assert!(Volume::new(data, [1.0; 3], VolumeSource::Phantom).is_err());
    }

    #[test]
    fn psnr_of_identical_volumes_is_infinite() {
        let v = Volume::new(Array3::from_elem((4, 4, 4), 0.5), [1.0; 3], VolumeSource::Phantom)
            .unwrap();
        assert!(psnr(&v, &v).unwrap().is_infinite());
    }

    #[test]
    fn grid_validation_enforces_divisibility() {
        assert!(GridSpec::new([33, 32, 32], [1.0; 3]).validate(8).is_err());
        assert!(GridSpec::new([32, 32, 32], [1.0; 3]).validate(8).is_ok());
        assert!(GridSpec::paper_scale().validate(8).is_ok());
    }
}
