//! Prediction-error quantification for the blended forecast.
//!
//! The closed-form decomposition splits the mean squared error of prediction
//! into the variance of the future rate around the global forecast and the
//! estimation noise of the relative-risk ratio. A Monte-Carlo routine
//! re-derives the same quantity by brute force, one-standard-deviation
//! Poisson bounds describe finite-population noise around any rate, and a
//! residual bootstrap benchmarks the standalone per-population model.
//!
//! The in-sample rates entering the ratio estimate are treated as known
//! throughout; plug-in error from estimating them is not accounted for.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credibility::credibility_predict;
use crate::forecast::{fit_indices, rate_moments, ForecastError, MeanMode};
use crate::gapc::{self, deviance_residual, FittedGapc};
use crate::grid::Span;
use crate::laws::{LawError, ThetaLaw};
use crate::streams::{substream, tag};
use crate::table::MortalityTable;

#[derive(Debug, Error)]
pub enum MsepError {
    #[error("expected deaths sum to zero, the relative-risk ratio is undefined")]
    ZeroWeight,
    #[error("relative-risk variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("credibility weight must lie in [0, 1], got {0}")]
    WeightOutOfRange(f64),
    #[error("window weights must be non-negative and finite, got {0}")]
    BadWindowWeight(f64),
    #[error("future rate moments must be positive mean and non-negative variance, got mean {mean} variance {variance}")]
    BadRateMoments { mean: f64, variance: f64 },
    #[error("need at least {min} simulations, got {got}")]
    TooFewSims { got: usize, min: usize },
    #[error("simulation law must have mean 1, got {0}")]
    LawNotMeanOne(f64),
    #[error("need at least {min} bootstrap replicates, got {got}")]
    TooFewReplicates { got: usize, min: usize },
    #[error(transparent)]
    Law(#[from] LawError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error("failed writing prediction-error output: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed writing prediction-error output: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean squared error of prediction split into its sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsepDecomposition {
    pub mu_bar: f64,
    pub sigma2_bar: f64,
    pub z: f64,
    /// Variance of the future rate around the global forecast, including the
    /// relative-risk mixing.
    pub var_mu_theta: f64,
    /// Variance of the relative-risk ratio estimate given the window.
    pub var_theta_hat: f64,
    pub msep: f64,
}

/// Closed-form MSEP of the blended predictor.
///
/// `weights` holds the per-window-period expected deaths `E_t * mu_t`. The
/// decomposition is
/// `var_mu_theta = sigma2_bar (V + 1) + mu_bar^2 V`,
/// `var_theta_hat = V sum(w^2)/sum(w)^2 + 1/sum(w)`, and
/// `msep = var_mu_theta + z^2 mu_bar^2 var_theta_hat`.
pub fn msep_closed_form(
    mu_bar: f64,
    sigma2_bar: f64,
    var_theta: f64,
    z: f64,
    weights: &[f64],
) -> Result<MsepDecomposition, MsepError> {
    if !(mu_bar > 0.0) || !(sigma2_bar >= 0.0) {
        return Err(MsepError::BadRateMoments { mean: mu_bar, variance: sigma2_bar });
    }
    if !(var_theta >= 0.0) {
        return Err(MsepError::NegativeVariance(var_theta));
    }
    if !(0.0..=1.0).contains(&z) {
        return Err(MsepError::WeightOutOfRange(z));
    }
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    for w in weights {
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(MsepError::BadWindowWeight(*w));
        }
        sum_w += w;
        sum_w2 += w * w;
    }
    if sum_w <= 0.0 {
        return Err(MsepError::ZeroWeight);
    }
    let var_theta_hat = var_theta * sum_w2 / (sum_w * sum_w) + 1.0 / sum_w;
    let var_mu_theta = sigma2_bar * (var_theta + 1.0) + mu_bar * mu_bar * var_theta;
    let msep = var_mu_theta + z * z * mu_bar * mu_bar * var_theta_hat;
    Ok(MsepDecomposition { mu_bar, sigma2_bar, z, var_mu_theta, var_theta_hat, msep })
}

/// Monte-Carlo MSEP estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloMsep {
    pub msep: f64,
    pub std_error: f64,
    pub n_sims: usize,
}

const MC_BLOCK: usize = 1 << 14;
const MIN_SIMS: usize = 10_000;

/// Estimate the blended predictor's MSEP by simulation.
///
/// Each draw samples an independent relative-risk level per window period
/// and for the target period, a lognormal future rate matched to
/// `(mu_bar, sigma2_bar)`, and Poisson deaths with means `weights[t] * theta_t`;
/// the ratio estimate and blend are then recomputed and scored against the
/// realized target rate. Simulation is split into fixed blocks with
/// independently derived random streams, so the result is identical for any
/// worker count.
pub fn msep_monte_carlo(
    law: &ThetaLaw,
    mu_bar: f64,
    sigma2_bar: f64,
    z: f64,
    weights: &[f64],
    n_sims: usize,
    seed: u64,
) -> Result<MonteCarloMsep, MsepError> {
    law.validate()?;
    let law_mean = law.mean();
    if (law_mean - 1.0).abs() > 1e-12 {
        return Err(MsepError::LawNotMeanOne(law_mean));
    }
    if n_sims < MIN_SIMS {
        return Err(MsepError::TooFewSims { got: n_sims, min: MIN_SIMS });
    }
    // reuse the argument validation of the closed form
    msep_closed_form(mu_bar, sigma2_bar, law.variance(), z, weights)?;

    let sig2 = if sigma2_bar > 0.0 { (sigma2_bar / (mu_bar * mu_bar)).ln_1p() } else { 0.0 };
    let rate_dist = if sigma2_bar > 0.0 {
        Some(LogNormal::new(mu_bar.ln() - 0.5 * sig2, sig2.sqrt()).expect("valid lognormal"))
    } else {
        None
    };
    let sum_w: f64 = weights.iter().sum();

    let n_blocks = n_sims.div_ceil(MC_BLOCK);
    let block_stats: Vec<(f64, f64)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, &[tag::MSEP_MC, b as u64]);
            let lo = b * MC_BLOCK;
            let hi = ((b + 1) * MC_BLOCK).min(n_sims);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in lo..hi {
                let target_theta = law.sample(&mut rng);
                let future_mu = match &rate_dist {
                    Some(d) => d.sample(&mut rng),
                    None => mu_bar,
                };
                let target = future_mu * target_theta;
                let mut deaths = 0.0;
                for w in weights {
                    let lambda = w * law.sample(&mut rng);
                    if lambda > 0.0 {
                        deaths += Poisson::new(lambda).expect("positive mean").sample(&mut rng);
                    }
                }
                let theta_hat = deaths / sum_w;
                let (pred, _) = credibility_predict(mu_bar, theta_hat, z);
                let sq = (target - pred) * (target - pred);
                sum += sq;
                sum_sq += sq * sq;
            }
            (sum, sum_sq)
        })
        .collect();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (s, s2) in block_stats {
        sum += s;
        sum_sq += s2;
    }
    let n = n_sims as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(MonteCarloMsep { msep: mean, std_error: (var / n).sqrt(), n_sims })
}

/// Simulated one-standard-deviation bounds on the observed rate when deaths
/// are Poisson with mean `exposure * mu`.
///
/// Returns `(mean - sd, mean + sd)` of the simulated death rate; the analytic
/// counterpart is [`poisson_bounds_analytic`].
pub fn poisson_predictive_bounds(
    mu: f64,
    exposure: f64,
    n_sims: usize,
    seed: u64,
) -> Result<(f64, f64), MsepError> {
    if !(exposure > 0.0) {
        return Err(MsepError::BadWindowWeight(exposure));
    }
    if n_sims < MIN_SIMS {
        return Err(MsepError::TooFewSims { got: n_sims, min: MIN_SIMS });
    }
    let lambda = exposure * mu;
    if lambda <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let mut rng = substream(seed, &[tag::POISSON_BOUNDS]);
    let dist = Poisson::new(lambda).expect("positive mean");
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_sims {
        let f: f64 = dist.sample(&mut rng) / exposure;
        sum += f;
        sum_sq += f * f;
    }
    let n = n_sims as f64;
    let mean = sum / n;
    let sd = ((sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0)).sqrt();
    Ok((mean - sd, mean + sd))
}

/// `mu ± sqrt(mu / exposure)`, the exact one-standard-deviation band of a
/// Poisson death rate.
pub fn poisson_bounds_analytic(mu: f64, exposure: f64) -> (f64, f64) {
    let half = (mu / exposure).sqrt();
    (mu - half, mu + half)
}

/// Turn a resampled deviance residual back into a pseudo death count.
///
/// The residual is a strictly increasing function of the observed count for
/// a fixed expectation, so the inverse is found by bisection; residuals
/// below the value attained at zero deaths floor at zero.
pub fn invert_deviance_residual(residual: f64, expected: f64) -> f64 {
    if expected <= 0.0 || residual == 0.0 {
        return expected.max(0.0);
    }
    let at_zero = -(2.0 * expected).sqrt();
    if residual <= at_zero {
        return 0.0;
    }
    let (mut lo, mut hi) = if residual < 0.0 {
        (0.0, expected)
    } else {
        let mut hi = 2.0 * expected + 2.0;
        while deviance_residual(hi, expected) < residual {
            hi *= 2.0;
        }
        (expected, hi)
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if deviance_residual(mid, expected) < residual {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + hi) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Bootstrap MSEP of the standalone per-population model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapMsep {
    pub population_id: String,
    pub ages: Span,
    pub horizon: usize,
    /// `msep[i][k]` is the value for age index `i` at horizon `k + 1`.
    pub msep: Vec<Vec<f64>>,
    pub n_kept: usize,
    pub n_dropped: usize,
    /// Set when more than 20% of replicates had to be dropped.
    pub unreliable: bool,
}

const MIN_BOOTSTRAP: usize = 200;

/// Residual-bootstrap MSEP of fitting and forecasting a population on its
/// own data.
///
/// Deviance residuals of `fit` on `table` are resampled with replacement,
/// inverted to pseudo death counts, and the model is refitted and
/// re-forecast on each pseudo table. The MSEP per age and horizon is the
/// variance of the bootstrap forecasts plus the squared bias against the
/// original point forecast. Replicates whose refit fails or does not
/// converge are dropped; losing more than 20% flags the result unreliable.
pub fn bootstrap_msep_benchmark(
    fit: &FittedGapc,
    table: &MortalityTable,
    horizon: usize,
    n_replicates: usize,
    seed: u64,
) -> Result<BootstrapMsep, MsepError> {
    if n_replicates < MIN_BOOTSTRAP {
        return Err(MsepError::TooFewReplicates { got: n_replicates, min: MIN_BOOTSTRAP });
    }
    let ages = table.ages();
    let years = table.years();
    let point = forecast_matrix(fit, horizon)?;

    // expected deaths and the residual pool over positive-exposure cells
    let mut expected = vec![0.0; ages.len() * years.len()];
    let mut pool = Vec::new();
    for (i, age) in ages.iter().enumerate() {
        for (j, year) in years.iter().enumerate() {
            let e = table.exposure(age, year);
            if e <= 0.0 {
                continue;
            }
            let mu = fit.predict_mu(age, year).expect("in-sample cell");
            let d_hat = e * mu;
            expected[i * years.len() + j] = d_hat;
            pool.push(deviance_residual(table.deaths(age, year), d_hat));
        }
    }

    let replicate_forecasts: Vec<Option<Vec<Vec<f64>>>> = (0..n_replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, &[tag::BOOTSTRAP, rep as u64]);
            let mut deaths = vec![0.0; ages.len() * years.len()];
            for (cell, d) in deaths.iter_mut().enumerate() {
                let d_hat = expected[cell];
                if d_hat > 0.0 {
                    let r = pool[rng.random_range(0..pool.len())];
                    *d = invert_deviance_residual(r, d_hat);
                }
            }
            let exposure: Vec<f64> = ages
                .iter()
                .flat_map(|age| years.iter().map(move |year| (age, year)))
                .map(|(age, year)| table.exposure(age, year))
                .collect();
            let pseudo =
                MortalityTable::new(table.population_id(), ages, years, exposure, deaths).ok()?;
            let refit = gapc::fit(&pseudo, fit.family).ok()?;
            if !refit.converged {
                return None;
            }
            forecast_matrix(&refit, horizon).ok()
        })
        .collect();

    let kept: Vec<&Vec<Vec<f64>>> = replicate_forecasts.iter().flatten().collect();
    let n_kept = kept.len();
    let n_dropped = n_replicates - n_kept;
    let unreliable = (n_dropped as f64) > 0.2 * n_replicates as f64;

    let mut msep = vec![vec![0.0; horizon]; ages.len()];
    if n_kept > 0 {
        for i in 0..ages.len() {
            for k in 0..horizon {
                let mean: f64 = kept.iter().map(|m| m[i][k]).sum::<f64>() / n_kept as f64;
                let var: f64 = kept
                    .iter()
                    .map(|m| (m[i][k] - mean) * (m[i][k] - mean))
                    .sum::<f64>()
                    / n_kept as f64;
                let bias = mean - point[i][k];
                msep[i][k] = var + bias * bias;
            }
        }
    }
    Ok(BootstrapMsep {
        population_id: table.population_id().to_string(),
        ages,
        horizon,
        msep,
        n_kept,
        n_dropped,
        unreliable,
    })
}

/// Point forecasts per age (rows) and horizon (columns).
fn forecast_matrix(fit: &FittedGapc, horizon: usize) -> Result<Vec<Vec<f64>>, ForecastError> {
    let indices = fit_indices(fit, horizon)?;
    let mut out = Vec::with_capacity(fit.ages.len());
    for age in fit.ages.iter() {
        let mut row = Vec::with_capacity(horizon);
        for h in 1..=horizon {
            let (mean, _) = rate_moments(fit, &indices, age, h, MeanMode::Lognormal)?;
            row.push(mean);
        }
        out.push(row);
    }
    Ok(out)
}

/// One output row of a prediction-error table.
///
/// Decomposition fields are absent for methods that do not produce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsepRow {
    pub population: String,
    pub age: i32,
    pub horizon: usize,
    pub msep: f64,
    pub var_mu_theta: Option<f64>,
    pub var_theta_hat: Option<f64>,
    pub z: Option<f64>,
    pub method: String,
}

/// Write rows as CSV with the column layout
/// `population,age,horizon,msep,var_mu_theta,var_theta_hat,z,method`.
pub fn write_msep_csv<W: Write>(rows: &[MsepRow], writer: W) -> Result<(), MsepError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
