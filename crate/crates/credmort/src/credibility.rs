//! Relative-risk estimation and linear credibility blending.
//!
//! For each sub-population the observed deaths in the fitting window are
//! compared against the global model's in-sample rates: a ratio estimate
//! measures the sub-population's mortality level relative to the reference,
//! a moment-based plug-in estimator (clamped at zero) measures how much that
//! level varies, and both are smoothed over age by the regression tree in
//! [`crate::cart`]. The blended predictor shrinks the sub-population rate
//! toward the global rate with a weight that grows with the expected death
//! count, so small groups lean on the reference and large groups stand on
//! their own data.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cart::cart_bin_k;
use crate::grid::Span;
use crate::table::MortalityTable;

#[derive(Debug, Error)]
pub enum CredibilityError {
    #[error("failed writing credibility output: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed writing credibility output: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-age relative-risk estimates for one sub-population.
///
/// All vectors are parallel to `ages`. Raw per-age values are `None` for
/// ages without any positive-exposure cell; the binned variants are always
/// defined, falling back to a neutral level of 1 with zero variance when no
/// age in the table has usable data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaEstimates {
    pub population_id: String,
    pub ages: Span,
    /// Observed deaths divided by deaths expected under the global model.
    pub theta_raw: Vec<Option<f64>>,
    /// Zero-adjusted moment estimate of the variance of the age's
    /// relative-risk level.
    pub var_raw: Vec<Option<f64>>,
    /// Expected deaths under the global model, summed over the window; this
    /// is the weight denominator feeding [`credibility_weight`].
    pub effective_deaths: Vec<f64>,
    pub theta_binned: Vec<f64>,
    pub var_binned: Vec<f64>,
}

impl ThetaEstimates {
    pub fn theta_at(&self, age: i32) -> Option<f64> {
        self.ages.index_of(age).map(|i| self.theta_binned[i])
    }

    pub fn var_at(&self, age: i32) -> Option<f64> {
        self.ages.index_of(age).map(|i| self.var_binned[i])
    }

    pub fn effective_deaths_at(&self, age: i32) -> Option<f64> {
        self.ages.index_of(age).map(|i| self.effective_deaths[i])
    }
}

/// Estimate per-age relative-risk levels of `table` against the in-sample
/// rates `mu_hat(age, year)` of a model fitted to the reference population.
///
/// Cells with zero exposure are excluded from every sum. For each age the
/// ratio estimate is total deaths over total expected deaths, and the
/// variance estimate is the moment-based plug-in form clamped at zero. Ages
/// whose expected deaths vanish entirely get `None` raw values and an
/// effective-deaths weight of 0, which forces the credibility weight to 0
/// downstream.
fn default_use_binned() -> bool {
    true
}

fn default_cv_folds() -> usize {
    5
}

/// Smoothing options for per-age relative-risk estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityOptions {
    /// Smooth raw per-age estimates into piecewise-constant age bins.
    /// Disabling it keeps raw estimates, filling undefined ages from the
    /// nearest defined one.
    #[serde(default = "default_use_binned")]
    pub use_binned: bool,
    /// Cross-validation folds used when choosing the bin structure.
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
}

impl Default for CredibilityOptions {
    fn default() -> Self {
        CredibilityOptions { use_binned: default_use_binned(), cv_folds: default_cv_folds() }
    }
}

pub fn estimate_thetas<F>(table: &MortalityTable, mu_hat: F) -> ThetaEstimates
where
    F: Fn(i32, i32) -> f64,
{
    estimate_thetas_opts(table, mu_hat, &CredibilityOptions::default())
}

/// [`estimate_thetas`] with explicit smoothing options.
pub fn estimate_thetas_opts<F>(
    table: &MortalityTable,
    mu_hat: F,
    options: &CredibilityOptions,
) -> ThetaEstimates
where
    F: Fn(i32, i32) -> f64,
{
    let ages = table.ages();
    let years = table.years();
    let n = ages.len();
    let mut theta_raw = vec![None; n];
    let mut var_raw = vec![None; n];
    let mut effective_deaths = vec![0.0; n];

    for (i, age) in ages.iter().enumerate() {
        let mut sum_d = 0.0;
        let mut sum_emu = 0.0;
        let mut sum_f = 0.0;
        let mut sum_mu = 0.0;
        let mut sum_mu_over_e = 0.0;
        for year in years.iter() {
            let e = table.exposure(age, year);
            if e <= 0.0 {
                continue;
            }
            let mu = mu_hat(age, year);
            sum_d += table.deaths(age, year);
            sum_emu += e * mu;
            sum_f += table.deaths(age, year) / e;
            sum_mu += mu;
            sum_mu_over_e += mu / e;
        }
        effective_deaths[i] = sum_emu;
        if sum_emu > 0.0 {
            theta_raw[i] = Some(sum_d / sum_emu);
            let diff = sum_f - sum_mu;
            let var_m = (diff * diff - sum_mu_over_e) / (sum_mu * sum_mu);
            var_raw[i] = Some(var_m.max(0.0));
        }
    }

    let defined: Vec<usize> = (0..n).filter(|i| theta_raw[*i].is_some()).collect();
    let (theta_binned, var_binned) = if defined.is_empty() {
        (vec![1.0; n], vec![0.0; n])
    } else {
        let bin_ages: Vec<i32> = defined.iter().map(|i| ages.value_at(*i)).collect();
        let thetas: Vec<f64> = defined.iter().map(|i| theta_raw[*i].expect("defined")).collect();
        let vars: Vec<f64> = defined.iter().map(|i| var_raw[*i].expect("defined")).collect();
        if options.use_binned {
            let theta_fit = cart_bin_k(&bin_ages, &thetas, None, options.cv_folds);
            let var_fit = cart_bin_k(&bin_ages, &vars, None, options.cv_folds);
            let tb: Vec<f64> = ages.iter().map(|x| theta_fit.predict(x).max(0.0)).collect();
            let vb: Vec<f64> = ages.iter().map(|x| var_fit.predict(x).max(0.0)).collect();
            (tb, vb)
        } else {
            // fill gaps with the nearest defined age so every output age
            // still carries a usable level
            let nearest = |x: i32| {
                let best = bin_ages
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, a)| (**a - x).abs())
                    .map(|(k, _)| k)
                    .expect("non-empty defined set");
                best
            };
            let tb: Vec<f64> =
                ages.iter().map(|x| thetas[nearest(x)].max(0.0)).collect();
            let vb: Vec<f64> = ages.iter().map(|x| vars[nearest(x)].max(0.0)).collect();
            (tb, vb)
        }
    };

    ThetaEstimates {
        population_id: table.population_id().to_string(),
        ages,
        theta_raw,
        var_raw,
        effective_deaths,
        theta_binned,
        var_binned,
    }
}

/// Credibility weight `Z = W / (1/V + W)` with `W` the expected deaths and
/// `V` the relative-risk variance; zero variance or zero weight gives 0.
pub fn credibility_weight(effective_deaths: f64, var_theta: f64) -> f64 {
    if var_theta <= 0.0 || effective_deaths <= 0.0 {
        return 0.0;
    }
    effective_deaths / (1.0 / var_theta + effective_deaths)
}

/// Blend the global rate with the sub-population level.
///
/// Returns `(mu_cred, theta_blend)` where `theta_blend = 1 + z(theta_hat - 1)`
/// and `mu_cred = mu_global * theta_blend`, so the scale-factor identity
/// holds bit for bit.
pub fn credibility_predict(mu_global: f64, theta_hat: f64, z: f64) -> (f64, f64) {
    let theta_blend = 1.0 + z * (theta_hat - 1.0);
    (mu_global * theta_blend, theta_blend)
}

/// Per-age output of the age-only blended predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeOnlyCell {
    pub age: i32,
    /// `None` when the age has no positive-exposure cells.
    pub theta_hat: Option<f64>,
    pub z: f64,
    pub predictor: f64,
}

/// Blended predictor for a deterministic age-only rate schedule.
///
/// `mu_x` gives the known per-age rate and `var_theta` the assumed
/// relative-risk variance. This routes through the same estimator and weight
/// as the full model with the rate held constant over years, so outputs agree
/// exactly with the general path.
pub fn credibility_age_only<F>(
    table: &MortalityTable,
    mu_x: F,
    var_theta: f64,
) -> Vec<AgeOnlyCell>
where
    F: Fn(i32) -> f64,
{
    let est = estimate_thetas(table, |age, _| mu_x(age));
    est.ages
        .iter()
        .enumerate()
        .map(|(i, age)| {
            let z = match est.theta_raw[i] {
                Some(_) => credibility_weight(est.effective_deaths[i], var_theta),
                None => 0.0,
            };
            let theta = est.theta_raw[i].unwrap_or(1.0);
            let (predictor, _) = credibility_predict(mu_x(age), theta, z);
            AgeOnlyCell { age, theta_hat: est.theta_raw[i], z, predictor }
        })
        .collect()
}

/// One output row of the blended forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityRow {
    pub population: String,
    pub age: i32,
    pub year: i32,
    pub z: f64,
    pub theta_hat: f64,
    pub var_theta: f64,
    pub mu_global: f64,
    pub mu_sub: f64,
    pub mu_cred: f64,
}

/// Write rows as CSV with the column layout
/// `population,age,year,z,theta_hat,var_theta,mu_global,mu_sub,mu_cred`.
pub fn write_credibility_csv<W: Write>(rows: &[CredibilityRow], writer: W) -> Result<(), CredibilityError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
