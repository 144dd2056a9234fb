//! Rolling-window out-of-sample evaluation.
//!
//! Starting from a last in-sample year, each window step refits the global
//! model on all data up to the step's train end, produces one-year-ahead
//! rates for every sub-population under four approaches, and scores them
//! against the held-out year. The window then grows by one year and the
//! process repeats. Metrics are the mean absolute relative error and the
//! mean Poisson deviance, reported per approach, population, and age group,
//! with independent simulation replications giving whisker spread.
//!
//! Approaches: the credibility blend of the global forecast with the
//! sub-population's relative level; the unshrunk relative-survival rate;
//! a model fit to the sub-population alone (falling back to the global
//! forecast when that fit does not converge); and the global forecast
//! applied as-is.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credibility::{
    credibility_predict, credibility_weight, estimate_thetas_opts, CredibilityOptions,
};
use crate::forecast::{fit_indices, rate_moments, ForecastError, MeanMode};
use crate::gapc::{self, poisson_deviance_cell, GapcError, ModelFamily};
use crate::grid::Span;
use crate::popsim::{simulate, SimConfig, SimError, SimOutput};
use crate::streams::{derive_seed, tag};
use crate::table::{MortalityTable, TableError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("window size must be at least 1")]
    ZeroHorizon,
    #[error("test year {test_year} is past the last data year {last_year}")]
    WindowPastData { test_year: i32, last_year: i32 },
    #[error("age group {group_start}-{group_end} is outside the table ages {ages_start}-{ages_end}")]
    AgeGroupOutsideTable { group_start: i32, group_end: i32, ages_start: i32, ages_end: i32 },
    #[error("prediction {value} at cell {index} is not positive")]
    NonPositivePrediction { index: usize, value: f64 },
    #[error("global model fit through {train_end} failed: {source}")]
    GlobalFit {
        train_end: i32,
        #[source]
        source: GapcError,
    },
    #[error("global index forecast at train end {train_end} failed: {source}")]
    GlobalForecast {
        train_end: i32,
        #[source]
        source: ForecastError,
    },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("failed writing evaluation output: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed writing evaluation output: {0}")]
    Io(#[from] std::io::Error),
}

/// One forecasting approach under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Approach {
    /// Credibility blend of the global forecast and the sub-population level.
    A,
    /// Relative-survival rate: global forecast times the raw level.
    B,
    /// Model fit to the sub-population alone, global fallback.
    C,
    /// Global forecast applied unchanged.
    D,
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Approach::A => "A",
            Approach::B => "B",
            Approach::C => "C",
            Approach::D => "D",
        })
    }
}

/// Five-year brackets covering ages 16 through 85.
pub fn default_age_groups() -> Vec<Span> {
    (0..14).map(|k| Span::new(16 + 5 * k, 20 + 5 * k)).collect()
}

fn default_t_prime() -> i32 {
    2019
}

fn default_h() -> usize {
    6
}

fn default_approaches() -> Vec<Approach> {
    vec![Approach::A, Approach::B, Approach::C, Approach::D]
}

fn default_replications() -> usize {
    3
}

fn default_plan_seed() -> u64 {
    42
}

fn default_family() -> ModelFamily {
    ModelFamily::Lc
}

/// What one evaluation run should do; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Last year of the first in-sample window.
    #[serde(default = "default_t_prime")]
    pub t_prime: i32,
    /// Number of one-year-ahead window steps.
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_age_groups")]
    pub age_groups: Vec<Span>,
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    /// Independent simulation copies to evaluate.
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_plan_seed")]
    pub seed: u64,
    #[serde(default = "default_family")]
    pub family: ModelFamily,
    #[serde(default)]
    pub mean_mode: MeanMode,
    #[serde(default)]
    pub credibility: CredibilityOptions,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            t_prime: default_t_prime(),
            h: default_h(),
            age_groups: default_age_groups(),
            approaches: default_approaches(),
            replications: default_replications(),
            seed: default_plan_seed(),
            family: default_family(),
            mean_mode: MeanMode::default(),
            credibility: CredibilityOptions::default(),
        }
    }
}

/// The (train_end, test_year) pairs of a rolling window: models refit on
/// data through train_end and predict test_year, then the window grows by
/// one year.
pub fn rolling_windows(t_prime: i32, h: usize) -> Result<Vec<(i32, i32)>, EvalError> {
    if h == 0 {
        return Err(EvalError::ZeroHorizon);
    }
    Ok((0..h as i32).map(|j| (t_prime + j, t_prime + j + 1)).collect())
}

/// Mean absolute relative error over parallel prediction/observation cells;
/// cells with a zero observed rate contribute zero.
pub fn mare(predictions: &[f64], observations: &[f64]) -> f64 {
    assert_eq!(predictions.len(), observations.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let total: f64 = predictions
        .iter()
        .zip(observations)
        .map(|(mu, f)| if *f == 0.0 { 0.0 } else { (mu - f).abs() / f })
        .sum();
    total / predictions.len() as f64
}

/// Mean Poisson deviance over parallel cells, `2E(F log(F/mu) - F + mu)`
/// per cell with the `F log F` term continuous at zero. Predictions must be
/// strictly positive rates.
pub fn mean_poisson_deviance(
    predictions: &[f64],
    observations: &[f64],
    exposures: &[f64],
) -> Result<f64, EvalError> {
    assert_eq!(predictions.len(), observations.len());
    assert_eq!(predictions.len(), exposures.len());
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (index, ((mu, f), e)) in predictions.iter().zip(observations).zip(exposures).enumerate() {
        if *mu <= 0.0 || !mu.is_finite() {
            return Err(EvalError::NonPositivePrediction { index, value: *mu });
        }
        total += poisson_deviance_cell(e * f, e * mu);
    }
    Ok(total / predictions.len() as f64)
}

/// One-year-ahead rates for one population under all four approaches,
/// parallel to `ages`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationStep {
    pub population: String,
    pub ages: Span,
    /// Approach A: credibility-blended rates.
    pub credibility: Vec<f64>,
    /// Approach B: global forecast scaled by the raw relative level.
    pub relative: Vec<f64>,
    /// Approach C: rates from the population's own model fit.
    pub individual: Vec<f64>,
    /// Approach D: the global forecast unchanged.
    pub global: Vec<f64>,
    /// Whether approach C fell back to the global forecast.
    pub individual_fell_back: bool,
    /// Credibility weight per age.
    pub z: Vec<f64>,
    /// Smoothed relative level per age.
    pub theta: Vec<f64>,
}

impl PopulationStep {
    pub fn rates(&self, approach: Approach) -> &[f64] {
        match approach {
            Approach::A => &self.credibility,
            Approach::B => &self.relative,
            Approach::C => &self.individual,
            Approach::D => &self.global,
        }
    }
}

/// All populations' one-year-ahead rates for a single window step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPredictions {
    pub train_end: i32,
    pub test_year: i32,
    pub populations: Vec<PopulationStep>,
}

/// Fit the global model on the reference table through `train_end` and
/// produce every population's one-year-ahead rates under each approach.
/// Only data up to `train_end` is read.
pub fn step_predictions(
    reference: &MortalityTable,
    populations: &[&MortalityTable],
    family: ModelFamily,
    mean_mode: MeanMode,
    options: &CredibilityOptions,
    train_end: i32,
) -> Result<StepPredictions, EvalError> {
    let train_ref = reference.restrict_years(train_end)?;
    let global = gapc::fit(&train_ref, family)
        .map_err(|source| EvalError::GlobalFit { train_end, source })?;
    let indices = fit_indices(&global, 1)
        .map_err(|source| EvalError::GlobalForecast { train_end, source })?;
    let ages = reference.ages();
    let mut global_rates = Vec::with_capacity(ages.len());
    for age in ages.iter() {
        let (mean, _) = rate_moments(&global, &indices, age, 1, mean_mode)
            .map_err(|source| EvalError::GlobalForecast { train_end, source })?;
        global_rates.push(mean);
    }

    let mut steps = Vec::with_capacity(populations.len());
    for table in populations {
        let train_sub = table.restrict_years(train_end)?;
        let est = estimate_thetas_opts(
            &train_sub,
            |age, year| global.predict_mu(age, year).expect("training cell inside fit"),
            options,
        );
        let mut credibility = Vec::with_capacity(ages.len());
        let mut relative = Vec::with_capacity(ages.len());
        let mut z = Vec::with_capacity(ages.len());
        let mut theta = Vec::with_capacity(ages.len());
        for (i, _) in ages.iter().enumerate() {
            let weight = credibility_weight(est.effective_deaths[i], est.var_binned[i]);
            let level = est.theta_binned[i];
            let (blended, _) = credibility_predict(global_rates[i], level, weight);
            credibility.push(blended);
            relative.push(global_rates[i] * level);
            z.push(weight);
            theta.push(level);
        }

        let own = individual_rates(&train_sub, family, mean_mode, ages);
        let (individual, individual_fell_back) = match own {
            Some(rates) => (rates, false),
            None => (global_rates.clone(), true),
        };

        steps.push(PopulationStep {
            population: table.population_id().to_string(),
            ages,
            credibility,
            relative,
            individual,
            global: global_rates.clone(),
            individual_fell_back,
            z,
            theta,
        });
    }

    Ok(StepPredictions { train_end, test_year: train_end + 1, populations: steps })
}

/// One-year-ahead rates from a model fit to one population alone, or `None`
/// when the fit fails, does not converge, or produces unusable numbers.
fn individual_rates(
    train: &MortalityTable,
    family: ModelFamily,
    mean_mode: MeanMode,
    ages: Span,
) -> Option<Vec<f64>> {
    let fit = gapc::fit(train, family).ok()?;
    if !fit.converged {
        return None;
    }
    let indices = fit_indices(&fit, 1).ok()?;
    let mut rates = Vec::with_capacity(ages.len());
    for age in ages.iter() {
        let (mean, _) = rate_moments(&fit, &indices, age, 1, mean_mode).ok()?;
        if !mean.is_finite() || mean <= 0.0 {
            return None;
        }
        rates.push(mean);
    }
    Some(rates)
}

/// One metric row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub approach: Approach,
    pub population: String,
    pub age_group: String,
    pub replication: usize,
    pub mare: f64,
    pub deviance: f64,
}

fn group_label(group: Span) -> String {
    format!("{}-{}", group.start, group.end)
}

/// Score one dataset over the plan's rolling window.
///
/// The reference table drives the global fit; it and every sub-population
/// table are each evaluated as prediction targets. Observed rates come from
/// the held-out test years, with empty cells contributing zero to both
/// metrics.
pub fn evaluate_dataset(
    reference: &MortalityTable,
    populations: &[&MortalityTable],
    plan: &EvalPlan,
    replication: usize,
) -> Result<Vec<MetricRow>, EvalError> {
    let windows = rolling_windows(plan.t_prime, plan.h)?;
    let last_test = windows.last().expect("h >= 1").1;
    if last_test > reference.years().end {
        return Err(EvalError::WindowPastData {
            test_year: last_test,
            last_year: reference.years().end,
        });
    }
    let ages = reference.ages();
    for group in &plan.age_groups {
        if group.start < ages.start || group.end > ages.end {
            return Err(EvalError::AgeGroupOutsideTable {
                group_start: group.start,
                group_end: group.end,
                ages_start: ages.start,
                ages_end: ages.end,
            });
        }
    }

    let mut targets: Vec<&MortalityTable> = vec![reference];
    targets.extend_from_slice(populations);

    // cells[(approach, target, group)] accumulates (prediction, observed
    // rate, exposure) triples across every window step
    let mut cells: Vec<Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>>> =
        vec![
            vec![vec![(Vec::new(), Vec::new(), Vec::new()); plan.age_groups.len()]; targets.len()];
            plan.approaches.len()
        ];

    for (train_end, test_year) in windows {
        let step = step_predictions(
            reference,
            &targets,
            plan.family,
            plan.mean_mode,
            &plan.credibility,
            train_end,
        )?;
        debug_assert_eq!(step.test_year, test_year);
        for (p, pop_step) in step.populations.iter().enumerate() {
            let table = targets[p];
            for (g, group) in plan.age_groups.iter().enumerate() {
                for age in group.iter() {
                    let i = ages.index_of(age).expect("group inside table ages");
                    let e = table.exposure(age, test_year);
                    let f = if e > 0.0 { table.deaths(age, test_year) / e } else { 0.0 };
                    for (a, approach) in plan.approaches.iter().enumerate() {
                        let (preds, obs, exps) = &mut cells[a][p][g];
                        preds.push(pop_step.rates(*approach)[i]);
                        obs.push(f);
                        exps.push(e);
                    }
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (a, approach) in plan.approaches.iter().enumerate() {
        for (p, table) in targets.iter().enumerate() {
            for (g, group) in plan.age_groups.iter().enumerate() {
                let (preds, obs, exps) = &cells[a][p][g];
                rows.push(MetricRow {
                    approach: *approach,
                    population: table.population_id().to_string(),
                    age_group: group_label(*group),
                    replication,
                    mare: mare(preds, obs),
                    deviance: mean_poisson_deviance(preds, obs, exps)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Simulate independent population copies and score each, concatenating the
/// rows in replication order. Replication `r` reseeds the simulation from
/// the plan seed, so results are reproducible and independent of scheduling.
pub fn run_replications(config: &SimConfig, plan: &EvalPlan) -> Result<Vec<MetricRow>, EvalError> {
    let per_rep: Vec<Vec<MetricRow>> = (0..plan.replications)
        .into_par_iter()
        .map(|r| {
            let mut rep_config = config.clone();
            rep_config.seed = derive_seed(plan.seed, &[tag::EVAL_REPLICATION, r as u64]);
            let data = simulate(&rep_config)?;
            let subs: Vec<&MortalityTable> = data.tables.iter().collect();
            evaluate_dataset(&data.aggregate, &subs, plan, r)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

/// Score one already-simulated dataset as replication 0.
pub fn run_approaches(data: &SimOutput, plan: &EvalPlan) -> Result<Vec<MetricRow>, EvalError> {
    let subs: Vec<&MortalityTable> = data.tables.iter().collect();
    evaluate_dataset(&data.aggregate, &subs, plan, 0)
}

/// Write metric rows as CSV with the column layout
/// `approach,population,age_group,replication,mare,deviance`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
