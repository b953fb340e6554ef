//! Conditioning covariates and their min-max normalization.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Raw subject covariates: age in years, sex (0 = female, 1 = male),
/// ventricular CSF volume in mm³ and brain volume normalised for head size
/// in mm³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub age: f64,
    pub sex: f64,
    pub ventricular_volume: f64,
    pub brain_volume_norm: f64,
}

impl Covariates {
    pub fn new(age: f64, sex: f64, ventricular_volume: f64, brain_volume_norm: f64) -> Self {
        Self {
            age,
            sex,
            ventricular_volume,
            brain_volume_norm,
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("age", self.age),
            ("sex", self.sex),
            ("ventricular_volume", self.ventricular_volume),
            ("brain_volume_norm", self.brain_volume_norm),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("covariate {name}"),
                });
            }
        }
        Ok(())
    }
}

/// Min-max bounds for each normalized covariate. Sex is passed through
/// unnormalized as {0, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateBounds {
    pub age: (f64, f64),
    pub ventricular_volume: (f64, f64),
    pub brain_volume_norm: (f64, f64),
}

impl CovariateBounds {
    /// The published UK Biobank cohort ranges.
    pub fn cohort() -> Self {
        Self {
            age: (44.0, 82.0),
            ventricular_volume: (6995.68, 171375.0),
            brain_volume_norm: (1_144_240.0, 1_793_910.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("age", self.age),
            ("ventricular_volume", self.ventricular_volume),
            ("brain_volume_norm", self.brain_volume_norm),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "covariate bounds for {name} must satisfy min < max (got {lo}..{hi})"
                )));
            }
        }
        Ok(())
    }
}

impl Default for CovariateBounds {
    fn default() -> Self {
        Self::cohort()
    }
}

/// Normalized conditioning vector in the fixed order
/// (age, sex, ventricular volume, brain volume).
pub type Conditioning = [f64; 4];

/// Min-max normalization of covariates: `(raw - min) / (max - min)` per
/// field, sex passed through. Values outside the bounds map outside `[0, 1]`
/// (extrapolation mode); non-finite input is rejected.
pub fn normalize_covariates(c: &Covariates, b: &CovariateBounds) -> Result<Conditioning> {
    b.validate()?;
    c.check_finite()?;
    Ok([
        minmax(c.age, b.age),
        c.sex,
        minmax(c.ventricular_volume, b.ventricular_volume),
        minmax(c.brain_volume_norm, b.brain_volume_norm),
    ])
}

/// Inverse of [`normalize_covariates`].
pub fn denormalize_covariates(n: &Conditioning, b: &CovariateBounds) -> Result<Covariates> {
    b.validate()?;
    for v in n {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "normalized conditioning".into(),
            });
        }
    }
    Ok(Covariates {
        age: inv_minmax(n[0], b.age),
        sex: n[1],
        ventricular_volume: inv_minmax(n[2], b.ventricular_volume),
        brain_volume_norm: inv_minmax(n[3], b.brain_volume_norm),
    })
}

fn minmax(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v - lo) / (hi - lo)
}

fn inv_minmax(v: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + v * (hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bounds() -> CovariateBounds {
        CovariateBounds::cohort()
    }

    #[test]
    fn ventricular_bounds_map_to_unit_interval() {
        let b = bounds();
        let lo = Covariates::new(44.0, 0.0, 6995.68, 1_144_240.0);
        let hi = Covariates::new(82.0, 1.0, 171_375.0, 1_793_910.0);
        let nl = normalize_covariates(&lo, &b).unwrap();
        let nh = normalize_covariates(&hi, &b).unwrap();
        assert_abs_diff_eq!(nl[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nh[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ventricular_midpoint_maps_to_half() {
        let b = bounds();
        let mid = Covariates::new(63.0, 1.0, 89_185.34, 1_469_075.0);
        let n = normalize_covariates(&mid, &b).unwrap();
        assert_abs_diff_eq!(n[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let b = bounds();
        let c = Covariates::new(f64::NAN, 0.0, 10_000.0, 1_200_000.0);
        assert!(matches!(
            normalize_covariates(&c, &b),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let mut b = bounds();
        b.age = (82.0, 44.0);
        let c = Covariates::new(50.0, 0.0, 10_000.0, 1_200_000.0);
        assert!(matches!(normalize_covariates(&c, &b), Err(Error::Config(_))));
    }

    proptest! {
        // Normalization round-trip: denormalize(normalize(raw)) = raw within
        // 1e-9 relative, for raw values inside the bounds.
        #[test]
        fn roundtrip_within_bounds(
            age in 44.0..82.0f64,
            sex in 0..=1u8,
            vent in 6995.68..171_375.0f64,
            brain in 1_144_240.0..1_793_910.0f64,
        ) {
            let b = bounds();
            let c = Covariates::new(age, sex as f64, vent, brain);
            let n = normalize_covariates(&c, &b).unwrap();
            for v in n { prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v)); }
            let back = denormalize_covariates(&n, &b).unwrap();
            let rel = |a: f64, r: f64| (a - r).abs() / r.abs().max(1.0);
            prop_assert!(rel(back.age, c.age) < 1e-9);
            prop_assert!(rel(back.ventricular_volume, c.ventricular_volume) < 1e-9);
            prop_assert!(rel(back.brain_volume_norm, c.brain_volume_norm) < 1e-9);
            prop_assert_eq!(back.sex, c.sex);
        }

        // Strict monotonicity of the map.
        #[test]
        fn normalization_is_strictly_monotone(
            v1 in 6995.68..171_374.0f64,
            dv in 1.0..1000.0f64,
        ) {
            let b = bounds();
            let c1 = Covariates::new(50.0, 0.0, v1, 1_200_000.0);
            let c2 = Covariates::new(50.0, 0.0, v1 + dv, 1_200_000.0);
            let n1 = normalize_covariates(&c1, &b).unwrap();
            let n2 = normalize_covariates(&c2, &b).unwrap();
            prop_assert!(n2[2] > n1[2]);
        }
    }
}
