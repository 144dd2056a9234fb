//! Distributions for the relative-risk factor Theta.
//!
//! Predictors and their error formulas depend on Theta only through its
//! mean and variance, so any law here can drive the simulators and oracles;
//! the mean-one laws make a sub-population's rates an unbiased scaling of
//! the global ones.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LawError {
    #[error("uniform law needs lo <= hi, got lo={lo}, hi={hi}")]
    BadUniform { lo: f64, hi: f64 },
    #[error("variance must be non-negative and finite, got {variance}")]
    BadVariance { variance: f64 },
    #[error("two-point mean-one law needs variance <= 1 to stay non-negative, got {variance}")]
    TwoPointTooWide { variance: f64 },
    #[error("theta values must be non-negative and finite, got {value}")]
    BadValue { value: f64 },
}

/// Law of the relative-risk factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ThetaLaw {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Lognormal rescaled to mean one: sigma^2 = ln(1 + variance),
    /// location -sigma^2/2.
    LognormalMeanOne { variance: f64 },
    /// Takes 1 - sqrt(variance) and 1 + sqrt(variance) with equal
    /// probability.
    TwoPointMeanOne { variance: f64 },
}

/// Location and scale of the mean-one lognormal with the given variance.
pub fn lognormal_mean_one_params(variance: f64) -> (f64, f64) {
    let sigma2 = variance.ln_1p();
    (-0.5 * sigma2, sigma2.sqrt())
}

impl ThetaLaw {
    pub fn validate(&self) -> Result<(), LawError> {
        match *self {
            ThetaLaw::Constant { value } => {
                if !value.is_finite() || value < 0.0 {
                    return Err(LawError::BadValue { value });
                }
            }
            ThetaLaw::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(LawError::BadUniform { lo, hi });
                }
                if lo < 0.0 {
                    return Err(LawError::BadValue { value: lo });
                }
            }
            ThetaLaw::LognormalMeanOne { variance } => {
                if !variance.is_finite() || variance < 0.0 {
                    return Err(LawError::BadVariance { variance });
                }
            }
            ThetaLaw::TwoPointMeanOne { variance } => {
                if !variance.is_finite() || variance < 0.0 {
                    return Err(LawError::BadVariance { variance });
                }
                if variance > 1.0 {
                    return Err(LawError::TwoPointTooWide { variance });
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ThetaLaw::Constant { value } => value,
            ThetaLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            ThetaLaw::LognormalMeanOne { .. } | ThetaLaw::TwoPointMeanOne { .. } => 1.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ThetaLaw::Constant { .. } => 0.0,
            ThetaLaw::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            ThetaLaw::LognormalMeanOne { variance } | ThetaLaw::TwoPointMeanOne { variance } => variance,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ThetaLaw::Constant { value } => value,
            ThetaLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ThetaLaw::LognormalMeanOne { variance } => {
                let (loc, scale) = lognormal_mean_one_params(variance);
                LogNormal::new(loc, scale).expect("valid lognormal parameters").sample(rng)
            }
            ThetaLaw::TwoPointMeanOne { variance } => {
                let step = variance.sqrt();
                if rng.random::<bool>() {
                    1.0 + step
                } else {
                    1.0 - step
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{substream, tag};

    fn sample_moments(law: &ThetaLaw, seed: u64, n: usize) -> (f64, f64) {
        let mut rng = substream(seed, &[tag::THETA, 77]);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = law.sample(&mut rng);
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        (mean, s2 / n as f64 - mean * mean)
    }

    #[test]
    fn lognormal_params_match_moment_identities() {
        let v = 0.05;
        let (loc, scale) = lognormal_mean_one_params(v);
        assert!((scale * scale - 1.05f64.ln()).abs() < 1e-15);
        assert!((loc + 0.5 * 1.05f64.ln()).abs() < 1e-15);
        // implied mean and variance
        let mean = (loc + 0.5 * scale * scale).exp();
        let var = ((scale * scale).exp_m1()) * (2.0 * loc + scale * scale).exp();
        assert!((mean - 1.0).abs() < 1e-14);
        assert!((var - v).abs() < 1e-14);
    }

    #[test]
    fn sampled_moments_match_declared_moments() {
        let laws = [
            ThetaLaw::Constant { value: 0.8 },
            ThetaLaw::Uniform { lo: 0.7, hi: 0.8 },
            ThetaLaw::Uniform { lo: 1.2, hi: 1.3 },
            ThetaLaw::LognormalMeanOne { variance: 0.05 },
            ThetaLaw::TwoPointMeanOne { variance: 0.04 },
        ];
        for (k, law) in laws.iter().enumerate() {
            law.validate().unwrap();
            let (mean, var) = sample_moments(law, 1000 + k as u64, 1_000_000);
            assert!(
                (mean - law.mean()).abs() <= 0.01 * law.mean().max(0.01),
                "{law:?}: mean {mean} vs {}",
                law.mean()
            );
            let tol = 0.01 * law.variance().max(1e-6);
            assert!(
                (var - law.variance()).abs() <= tol.max(3e-6),
                "{law:?}: var {var} vs {}",
                law.variance()
            );
        }
    }

    #[test]
    fn coefficient_of_variation_identity() {
        // 1/Var(Theta) equals 1/CV(mu * Theta)^2 for any mu > 0 and any
        // mean-one law
        for v in [0.01, 0.05, 0.25] {
            for law in [
                ThetaLaw::LognormalMeanOne { variance: v },
                ThetaLaw::TwoPointMeanOne { variance: v },
            ] {
                let mu = 0.0123;
                let mean = mu * law.mean();
                let var = mu * mu * law.variance();
                let cv2 = var / (mean * mean);
                assert!((1.0 / law.variance() - 1.0 / cv2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(ThetaLaw::Uniform { lo: 1.0, hi: 0.5 }.validate().is_err());
        assert!(ThetaLaw::Uniform { lo: -0.1, hi: 0.5 }.validate().is_err());
        assert!(ThetaLaw::LognormalMeanOne { variance: -0.01 }.validate().is_err());
        assert!(ThetaLaw::TwoPointMeanOne { variance: 1.5 }.validate().is_err());
        assert!(ThetaLaw::Constant { value: f64::NAN }.validate().is_err());
    }

    #[test]
    fn serde_round_trip_with_tagged_layout() {
        let law = ThetaLaw::Uniform { lo: 0.7, hi: 0.8 };
        let json = serde_json::to_value(&law).unwrap();
        assert_eq!(json["law"], "uniform");
        assert_eq!(json["lo"], 0.7);
        let back: ThetaLaw = serde_json::from_value(json).unwrap();
        assert_eq!(back, law);

        let law = ThetaLaw::LognormalMeanOne { variance: 0.05 };
        let json = serde_json::to_string(&law).unwrap();
        assert!(json.contains("lognormal_mean_one"), "{json}");
    }
}
