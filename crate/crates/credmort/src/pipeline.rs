//! Glue between the fitting, forecasting, credibility, and uncertainty
//! modules: document serialization for fitted models and row builders for
//! the CSV artifacts the command-line front end writes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credibility::{
    credibility_predict, credibility_weight, estimate_thetas_opts, CredibilityOptions,
    CredibilityRow,
};
use crate::forecast::{fit_indices, rate_moments, ForecastError, IndexForecasts, MeanMode};
use crate::gapc::{FittedGapc, GapcError};
use crate::msep::{msep_closed_form, poisson_predictive_bounds, MsepError, MsepRow};
use crate::streams::{derive_seed, tag};
use crate::table::{MortalityTable, TableError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gapc(#[from] GapcError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Msep(#[from] MsepError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("failed serializing fit document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("failed writing pipeline output: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed writing pipeline output: {0}")]
    Io(#[from] std::io::Error),
}

/// A fitted global model and, optionally, the index forecasts layered on
/// top of it. This is the JSON artifact the fit and forecast commands write
/// and later stages read back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub fit: FittedGapc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<IndexForecasts>,
}

impl FitDocument {
    pub fn to_json(&self) -> Result<String, PipelineError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-age credibility state shared by the row builders: smoothed level,
/// smoothed variance, effective-deaths weight, credibility weight, and the
/// in-sample expected-deaths weights per year.
struct AgeState {
    theta: f64,
    var: f64,
    z: f64,
    weights: Vec<f64>,
}

fn age_states(
    global: &FittedGapc,
    sub: &MortalityTable,
    options: &CredibilityOptions,
) -> Vec<AgeState> {
    let est = estimate_thetas_opts(
        sub,
        |age, year| global.predict_mu(age, year).expect("in-sample cell inside fit"),
        options,
    );
    let ages = sub.ages();
    ages.iter()
        .enumerate()
        .map(|(i, age)| {
            let weights: Vec<f64> = sub
                .years()
                .iter()
                .filter(|year| sub.exposure(age, *year) > 0.0)
                .map(|year| {
                    sub.exposure(age, year)
                        * global.predict_mu(age, year).expect("in-sample cell inside fit")
                })
                .collect();
            AgeState {
                theta: est.theta_binned[i],
                var: est.var_binned[i],
                z: credibility_weight(est.effective_deaths[i], est.var_binned[i]),
                weights,
            }
        })
        .collect()
}

/// Build the credibility CSV rows for one sub-population: for every age and
/// forecast step, the global forecast mean, the unshrunk sub-population
/// rate, and the blended predictor along with its weight components.
///
/// The sub-population table must cover the same in-sample window the global
/// model was fitted on.
pub fn credibility_rows(
    global: &FittedGapc,
    indices: &IndexForecasts,
    sub: &MortalityTable,
    mean_mode: MeanMode,
    options: &CredibilityOptions,
) -> Result<Vec<CredibilityRow>, PipelineError> {
    let states = age_states(global, sub, options);
    let mut rows = Vec::new();
    for (i, age) in sub.ages().iter().enumerate() {
        let s = &states[i];
        for h in 1..=indices.horizon {
            let (mu_global, _) = rate_moments(global, indices, age, h, mean_mode)?;
            let (mu_cred, _) = credibility_predict(mu_global, s.theta, s.z);
            rows.push(CredibilityRow {
                population: sub.population_id().to_string(),
                age,
                year: global.years.end + h as i32,
                z: s.z,
                theta_hat: s.theta,
                var_theta: s.var,
                mu_global,
                mu_sub: mu_global * s.theta,
                mu_cred,
            });
        }
    }
    Ok(rows)
}

/// Build closed-form prediction-error rows for one sub-population, one row
/// per age and forecast step. Ages without any positive-exposure in-sample
/// cell are skipped: with a zero weight the decomposition is undefined.
pub fn msep_rows(
    global: &FittedGapc,
    indices: &IndexForecasts,
    sub: &MortalityTable,
    mean_mode: MeanMode,
    options: &CredibilityOptions,
) -> Result<Vec<MsepRow>, PipelineError> {
    let states = age_states(global, sub, options);
    let mut rows = Vec::new();
    for (i, age) in sub.ages().iter().enumerate() {
        let s = &states[i];
        if s.weights.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        for h in 1..=indices.horizon {
            let (mu_bar, sigma2_bar) = rate_moments(global, indices, age, h, mean_mode)?;
            let decomp = msep_closed_form(mu_bar, sigma2_bar, s.var, s.z, &s.weights)?;
            rows.push(MsepRow {
                population: sub.population_id().to_string(),
                age,
                horizon: h,
                msep: decomp.msep,
                var_mu_theta: Some(decomp.var_mu_theta),
                var_theta_hat: Some(decomp.var_theta_hat),
                z: Some(decomp.z),
                method: "closed_form".to_string(),
            });
        }
    }
    Ok(rows)
}

/// One cell of the forecast-versus-observed fan: the credibility predictor
/// with prediction-error bounds and Poisson simulation bounds, next to the
/// observed rate when the test year has exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanRow {
    pub population: String,
    pub age: i32,
    pub year: i32,
    #[serde(rename = "observed_F")]
    pub observed_f: Option<f64>,
    pub mu_hat: f64,
    pub msep_lo: f64,
    pub msep_hi: f64,
    pub pois_lo: f64,
    pub pois_hi: f64,
}

/// Compare credibility forecasts made at `t_prime` against what the test
/// years actually recorded.
///
/// The global model must be fitted through `t_prime` only; `sub_full` keeps
/// its test years, which supply observed rates and the exposures behind the
/// Poisson simulation bounds. Prediction-error bounds are the predictor
/// plus/minus one root mean squared error of prediction; Poisson bounds are
/// one standard deviation of simulated rates at the predicted level.
pub fn fan_analysis(
    global: &FittedGapc,
    sub_full: &MortalityTable,
    t_prime: i32,
    h: usize,
    mean_mode: MeanMode,
    options: &CredibilityOptions,
    n_sims: usize,
    seed: u64,
) -> Result<Vec<FanRow>, PipelineError> {
    let indices = fit_indices(global, h)?;
    let train = sub_full.restrict_years(t_prime)?;
    let states = age_states(global, &train, options);
    let mut rows = Vec::new();
    for (i, age) in sub_full.ages().iter().enumerate() {
        let s = &states[i];
        for step in 1..=h {
            let year = t_prime + step as i32;
            let (mu_bar, sigma2_bar) = rate_moments(global, &indices, age, step, mean_mode)?;
            let (mu_hat, _) = credibility_predict(mu_bar, s.theta, s.z);
            let rmsep = if s.weights.iter().sum::<f64>() > 0.0 {
                msep_closed_form(mu_bar, sigma2_bar, s.var, s.z, &s.weights)?.msep.sqrt()
            } else {
                sigma2_bar.sqrt()
            };
            let exposure =
                if sub_full.years().contains(year) { sub_full.exposure(age, year) } else { 0.0 };
            let observed_f = if exposure > 0.0 {
                Some(sub_full.deaths(age, year) / exposure)
            } else {
                None
            };
            let cell_seed = derive_seed(seed, &[tag::POISSON_BOUNDS, i as u64, step as u64]);
            let (pois_lo, pois_hi) =
                poisson_predictive_bounds(mu_hat, exposure, n_sims, cell_seed)?;
            rows.push(FanRow {
                population: sub_full.population_id().to_string(),
                age,
                year,
                observed_f,
                mu_hat,
                msep_lo: mu_hat - rmsep,
                msep_hi: mu_hat + rmsep,
                pois_lo,
                pois_hi,
            });
        }
    }
    Ok(rows)
}

/// Write fan rows as CSV with the column layout
/// `population,age,year,observed_F,mu_hat,msep_lo,msep_hi,pois_lo,pois_hi`;
/// missing observations serialize as empty fields.
pub fn write_fan_csv<W: std::io::Write>(rows: &[FanRow], writer: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
