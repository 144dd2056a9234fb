//! Poisson age-period-cohort models for central mortality rates.
//!
//! Three predictors for the log rate are supported:
//! `LC` (alpha_x + beta_x kappa_t), `APC` (alpha_x + kappa_t + gamma_{t-x})
//! and `RH` (alpha_x + beta_x kappa_t + gamma_{t-x}). Deaths are Poisson
//! with mean exposure times rate, and fitting runs a cyclic block-Newton
//! scheme: one exact Newton step per parameter block per sweep, with step
//! halving so the deviance never increases.
//!
//! The likelihood is invariant to moving constants between blocks, so after
//! every sweep the parameters are projected onto identification constraints
//! without changing any fitted rate: beta sums to one and kappa sums to zero
//! where those blocks exist, gamma sums to zero (for `APC` additionally with
//! zero linear trend against centered cohort values, which pins the trend
//! that can otherwise wander between alpha, kappa and gamma). Pinning the
//! kappa level is a convention, not something the likelihood decides; any
//! other choice yields the same fitted rates.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::grid::Span;
use crate::table::MortalityTable;

/// Sweep-to-sweep absolute deviance change below which a fit is converged.
pub const DEVIANCE_TOL: f64 = 1e-8;
/// Hard cap on block-Newton sweeps.
pub const MAX_SWEEPS: usize = 10_000;
const MAX_HALVINGS: usize = 30;
const ALPHA_INIT_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "LC")]
    Lc,
    #[serde(rename = "APC")]
    Apc,
    #[serde(rename = "RH")]
    Rh,
}

impl ModelFamily {
    pub fn all() -> [ModelFamily; 3] {
        [ModelFamily::Lc, ModelFamily::Apc, ModelFamily::Rh]
    }

    fn has_beta(self) -> bool {
        matches!(self, ModelFamily::Lc | ModelFamily::Rh)
    }

    fn has_gamma(self) -> bool {
        matches!(self, ModelFamily::Apc | ModelFamily::Rh)
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelFamily::Lc => "LC",
            ModelFamily::Apc => "APC",
            ModelFamily::Rh => "RH",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LC" => Ok(ModelFamily::Lc),
            "APC" => Ok(ModelFamily::Apc),
            "RH" => Ok(ModelFamily::Rh),
            other => Err(format!("unknown model family '{other}', expected LC, APC or RH")),
        }
    }
}

#[derive(Debug, Error)]
pub enum GapcError {
    #[error("need at least 3 ages and 3 years with positive exposure, got {ages} ages x {years} years")]
    TooSmall { ages: usize, years: usize },
    #[error("age {age} has no cells with positive exposure")]
    EmptyAge { age: i32 },
    #[error("year {year} has no cells with positive exposure")]
    EmptyYear { year: i32 },
    #[error("no tables to fit")]
    NoTables,
    #[error("table '{id}' does not share the age/year window of the first table")]
    PooledSpanMismatch { id: String },
    #[error("likelihood became non-finite at sweep {sweep}; last finite deviance {last_deviance}")]
    NonFiniteLikelihood { sweep: usize, last_deviance: f64 },
    #[error("({age}, {year}) lies outside the fitted window (ages {age_start}..={age_end}, years {year_start}..={year_end}); rates beyond the data window come from the index-forecast interfaces")]
    OutOfRange { age: i32, year: i32, age_start: i32, age_end: i32, year_start: i32, year_end: i32 },
}

/// A fitted model: parameter vectors over the data window plus diagnostics.
///
/// Serializes to JSON with these exact keys: `family`, `ages`, `years`,
/// `cohorts`, `alpha`, `beta`, `kappa`, `gamma`, `loglik`, `deviance`,
/// `bic`, `k_free`, `n_cells`, `converged`, `n_iter`. Spans serialize as
/// `{"start": .., "end": ..}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedGapc {
    pub family: ModelFamily,
    pub ages: Span,
    pub years: Span,
    /// Cohort label range (year - age); None for LC.
    pub cohorts: Option<Span>,
    pub alpha: Vec<f64>,
    /// Age loading on kappa; None for APC (implicitly one).
    pub beta: Option<Vec<f64>>,
    pub kappa: Vec<f64>,
    /// Cohort effects; None for LC.
    pub gamma: Option<Vec<f64>>,
    /// Full Poisson log-likelihood, including the ln Gamma(D+1) terms.
    pub loglik: f64,
    pub deviance: f64,
    pub bic: f64,
    /// Parameters minus one per identification constraint.
    pub k_free: usize,
    /// Observation count: non-missing cells summed over the fitted tables.
    pub n_cells: usize,
    pub converged: bool,
    pub n_iter: usize,
}

impl FittedGapc {
    /// In-sample fitted rate exp(predictor) at (age, year).
    pub fn predict_mu(&self, age: i32, year: i32) -> Result<f64, GapcError> {
        let out_of_range = || GapcError::OutOfRange {
            age,
            year,
            age_start: self.ages.start,
            age_end: self.ages.end,
            year_start: self.years.start,
            year_end: self.years.end,
        };
        let i = self.ages.index_of(age).ok_or_else(out_of_range)?;
        let j = self.years.index_of(year).ok_or_else(out_of_range)?;
        let beta = self.beta.as_ref().map_or(1.0, |b| b[i]);
        let gamma = match (&self.gamma, self.cohorts) {
            (Some(g), Some(span)) => g[span.index_of(year - age).expect("cohort span covers the window")],
            _ => 0.0,
        };
        Ok((self.alpha[i] + beta * self.kappa[j] + gamma).exp())
    }

    /// Signed distances from each identification constraint, for diagnostics.
    pub fn constraint_residuals(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(beta) = &self.beta {
            out.push(("sum(beta) - 1", beta.iter().sum::<f64>() - 1.0));
        }
        out.push(("sum(kappa)", self.kappa.iter().sum::<f64>()));
        if let (Some(gamma), Some(span)) = (&self.gamma, self.cohorts) {
            out.push(("sum(gamma)", gamma.iter().sum::<f64>()));
            if self.family == ModelFamily::Apc {
                let n = gamma.len() as f64;
                let cbar = span.iter().map(f64::from).sum::<f64>() / n;
                let trend = span
                    .iter()
                    .zip(gamma)
                    .map(|(c, g)| (f64::from(c) - cbar) * g)
                    .sum::<f64>();
                out.push(("sum(centered cohort * gamma)", trend));
            }
        }
        out
    }
}

/// Bayesian information criterion; `n_obs` is real-valued so callers can
/// score pooled or weighted observation counts.
pub fn bic(loglik: f64, k_free: usize, n_obs: f64) -> f64 {
    -2.0 * loglik + k_free as f64 * n_obs.ln()
}

/// One cell's contribution to the Poisson deviance, 2[D ln(D/D̂) - (D - D̂)].
///
/// Evaluated as 2·D̂·((1+u)·ln_1p(u) - u) with u = (D - D̂)/D̂: the direct
/// form loses most of its digits to cancellation when D ≈ D̂ with large
/// counts, which would stall the sweep-convergence test on high-exposure
/// data.
pub fn poisson_deviance_cell(observed: f64, fitted: f64) -> f64 {
    debug_assert!(observed >= 0.0 && fitted >= 0.0);
    if fitted == 0.0 {
        return if observed == 0.0 { 0.0 } else { f64::INFINITY };
    }
    if observed == 0.0 {
        return 2.0 * fitted;
    }
    let u = (observed - fitted) / fitted;
    // (1+u)ln(1+u) - u cancels to O(u^2) as u -> 0, so switch to its power
    // series when the direct evaluation would lose the leading digits.
    let g = if u.abs() < 1e-3 {
        let series = 0.5 + u * (-1.0 / 6.0 + u * (1.0 / 12.0 + u * (-1.0 / 20.0 + u / 30.0)));
        u * u * series
    } else {
        (1.0 + u) * u.ln_1p() - u
    };
    2.0 * fitted * g
}

/// Signed square root of the cell deviance.
pub fn deviance_residual(observed: f64, fitted: f64) -> f64 {
    let sign = if observed < fitted { -1.0 } else { 1.0 };
    sign * poisson_deviance_cell(observed, fitted).sqrt()
}

/// Fit one population's table.
pub fn fit(table: &MortalityTable, family: ModelFamily) -> Result<FittedGapc, GapcError> {
    fit_pooled(&[table], family)
}

/// Fit several tables over identical age/year windows with one shared rate
/// surface: the likelihood stacks every table's cells against the same
/// predictor.
pub fn fit_pooled(tables: &[&MortalityTable], family: ModelFamily) -> Result<FittedGapc, GapcError> {
    let (ages, years, cells) = build_cells(tables)?;
    fit_cells(family, ages, years, &cells)
}

struct Cell {
    i: usize,
    j: usize,
    c: usize,
    e: f64,
    d: f64,
}

fn build_cells(tables: &[&MortalityTable]) -> Result<(Span, Span, Vec<Cell>), GapcError> {
    let first = tables.first().ok_or(GapcError::NoTables)?;
    let ages = first.ages();
    let years = first.years();
    for t in &tables[1..] {
        if t.ages() != ages || t.years() != years {
            return Err(GapcError::PooledSpanMismatch { id: t.population_id().to_string() });
        }
    }
    let cohorts = Span::new(years.start - ages.end, years.end - ages.start);
    let mut cells = Vec::with_capacity(tables.len() * ages.len() * years.len());
    let mut age_covered = vec![false; ages.len()];
    let mut year_covered = vec![false; years.len()];
    for table in tables {
        for (i, x) in ages.iter().enumerate() {
            for (j, y) in years.iter().enumerate() {
                let e = table.exposure(x, y);
                if e > 0.0 {
                    age_covered[i] = true;
                    year_covered[j] = true;
                    let c = cohorts.index_of(y - x).expect("cohort span covers the window");
                    cells.push(Cell { i, j, c, e, d: table.deaths(x, y) });
                }
            }
        }
    }
    if let Some(i) = age_covered.iter().position(|covered| !covered) {
        return Err(GapcError::EmptyAge { age: ages.value_at(i) });
    }
    if let Some(j) = year_covered.iter().position(|covered| !covered) {
        return Err(GapcError::EmptyYear { year: years.value_at(j) });
    }
    if ages.len() < 3 || years.len() < 3 {
        return Err(GapcError::TooSmall { ages: ages.len(), years: years.len() });
    }
    Ok((ages, years, cells))
}

struct State {
    family: ModelFamily,
    ages: Span,
    years: Span,
    cohorts: Span,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    kappa: Vec<f64>,
    gamma: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    Alpha,
    Kappa,
    Beta,
    Gamma,
}

impl State {
    fn beta_at(&self, i: usize) -> f64 {
        if self.family.has_beta() {
            self.beta[i]
        } else {
            1.0
        }
    }

    fn eta(&self, cell: &Cell) -> f64 {
        let gamma = if self.family.has_gamma() { self.gamma[cell.c] } else { 0.0 };
        self.alpha[cell.i] + self.beta_at(cell.i) * self.kappa[cell.j] + gamma
    }

    /// Fitted deaths per cell under the current parameters.
    fn fitted_deaths(&self, cells: &[Cell]) -> Vec<f64> {
        cells.iter().map(|cell| cell.e * self.eta(cell).exp()).collect()
    }

    fn block_vec(&mut self, block: Block) -> &mut Vec<f64> {
        match block {
            Block::Alpha => &mut self.alpha,
            Block::Kappa => &mut self.kappa,
            Block::Beta => &mut self.beta,
            Block::Gamma => &mut self.gamma,
        }
    }

    /// Newton step for one block: per-parameter gradient over (minus)
    /// curvature, both diagonal because cells hit each block entry linearly.
    fn newton_deltas(&self, cells: &[Cell], fitted: &[f64], block: Block) -> Vec<f64> {
        let len = match block {
            Block::Alpha | Block::Beta => self.alpha.len(),
            Block::Kappa => self.kappa.len(),
            Block::Gamma => self.gamma.len(),
        };
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        for (cell, dhat) in cells.iter().zip(fitted) {
            let (idx, w) = match block {
                Block::Alpha => (cell.i, 1.0),
                Block::Kappa => (cell.j, self.beta_at(cell.i)),
                Block::Beta => (cell.i, self.kappa[cell.j]),
                Block::Gamma => (cell.c, 1.0),
            };
            num[idx] += w * (cell.d - dhat);
            den[idx] += w * w * dhat;
        }
        num.iter()
            .zip(&den)
            .map(|(n, d)| if *d > 1e-300 { n / d } else { 0.0 })
            .collect()
    }

    /// Apply one block update with step halving; returns the deviance after
    /// the accepted step (or `dev_in` if every step made things worse).
    fn update_block(&mut self, cells: &[Cell], block: Block, dev_in: f64) -> f64 {
        let fitted = self.fitted_deaths(cells);
        let deltas = self.newton_deltas(cells, &fitted, block);
        let saved = self.block_vec(block).clone();
        let accept_at = dev_in + 1e-12 * (1.0 + dev_in.abs());
        let mut step = 1.0;
        for _ in 0..=MAX_HALVINGS {
            {
                let params = self.block_vec(block);
                for ((p, s), delta) in params.iter_mut().zip(&saved).zip(&deltas) {
                    *p = s + step * delta;
                }
            }
            let dev = deviance_total(cells, &self.fitted_deaths(cells));
            if dev.is_finite() && dev <= accept_at {
                return dev;
            }
            step *= 0.5;
        }
        *self.block_vec(block) = saved;
        dev_in
    }

    /// Move the parameters onto the identification constraints via
    /// transformations that leave every fitted rate unchanged.
    fn project(&mut self) {
        match self.family {
            ModelFamily::Lc => {
                self.center_kappa_into_alpha();
                self.normalize_beta();
            }
            ModelFamily::Apc => {
                self.detrend_gamma();
                self.center_kappa_into_alpha();
            }
            ModelFamily::Rh => {
                let gbar = mean(&self.gamma);
                for g in &mut self.gamma {
                    *g -= gbar;
                }
                for a in &mut self.alpha {
                    *a += gbar;
                }
                self.center_kappa_into_alpha();
                self.normalize_beta();
            }
        }
    }

    fn center_kappa_into_alpha(&mut self) {
        let kbar = mean(&self.kappa);
        for k in &mut self.kappa {
            *k -= kbar;
        }
        let has_beta = self.family.has_beta();
        for (i, a) in self.alpha.iter_mut().enumerate() {
            *a += kbar * if has_beta { self.beta[i] } else { 1.0 };
        }
    }

    fn normalize_beta(&mut self) {
        let s: f64 = self.beta.iter().sum();
        if s.abs() > 1e-12 {
            for b in &mut self.beta {
                *b /= s;
            }
            for k in &mut self.kappa {
                *k *= s;
            }
        }
    }

    /// Remove level and linear trend from gamma by least squares against
    /// centered cohort values, folding the removed plane back into alpha and
    /// kappa so the predictor is untouched.
    fn detrend_gamma(&mut self) {
        let n = self.gamma.len() as f64;
        let cohort_values: Vec<f64> = self.cohorts.iter().map(f64::from).collect();
        let cbar = cohort_values.iter().sum::<f64>() / n;
        let gbar = mean(&self.gamma);
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (c, g) in cohort_values.iter().zip(&self.gamma) {
            let dc = c - cbar;
            sxx += dc * dc;
            sxy += dc * (g - gbar);
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        for (g, c) in self.gamma.iter_mut().zip(&cohort_values) {
            *g -= gbar + slope * (c - cbar);
        }
        for (a, x) in self.alpha.iter_mut().zip(self.ages.iter()) {
            *a -= slope * f64::from(x);
        }
        let intercept = gbar - slope * cbar;
        for (k, t) in self.kappa.iter_mut().zip(self.years.iter()) {
            *k += intercept + slope * f64::from(t);
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn deviance_total(cells: &[Cell], fitted: &[f64]) -> f64 {
    cells
        .iter()
        .zip(fitted)
        .map(|(cell, dhat)| poisson_deviance_cell(cell.d, *dhat))
        .sum()
}

fn fit_cells(family: ModelFamily, ages: Span, years: Span, cells: &[Cell]) -> Result<FittedGapc, GapcError> {
    let na = ages.len();
    let nt = years.len();
    let cohorts = Span::new(years.start - ages.end, years.end - ages.start);
    let nc = cohorts.len();

    let mut sum_d = vec![0.0; na];
    let mut sum_e = vec![0.0; na];
    for cell in cells {
        sum_d[cell.i] += cell.d;
        sum_e[cell.i] += cell.e;
    }
    let alpha = sum_d
        .iter()
        .zip(&sum_e)
        .map(|(d, e)| if *d > 0.0 { (d / e).ln() } else { ALPHA_INIT_FLOOR })
        .collect();

    let mut state = State {
        family,
        ages,
        years,
        cohorts,
        alpha,
        beta: if family.has_beta() { vec![1.0 / na as f64; na] } else { Vec::new() },
        kappa: vec![0.0; nt],
        gamma: if family.has_gamma() { vec![0.0; nc] } else { Vec::new() },
    };

    let mut dev_prev = deviance_total(cells, &state.fitted_deaths(cells));
    if !dev_prev.is_finite() {
        return Err(GapcError::NonFiniteLikelihood { sweep: 0, last_deviance: f64::NAN });
    }

    let blocks: Vec<Block> = [Block::Alpha, Block::Kappa, Block::Beta, Block::Gamma]
        .into_iter()
        .filter(|b| match b {
            Block::Beta => family.has_beta(),
            Block::Gamma => family.has_gamma(),
            _ => true,
        })
        .collect();

    let mut converged = false;
    let mut n_iter = MAX_SWEEPS;
    for sweep in 1..=MAX_SWEEPS {
        let mut dev = dev_prev;
        for &block in &blocks {
            dev = state.update_block(cells, block, dev);
        }
        state.project();
        let dev_projected = deviance_total(cells, &state.fitted_deaths(cells));
        if !dev_projected.is_finite() {
            return Err(GapcError::NonFiniteLikelihood { sweep, last_deviance: dev });
        }
        debug_assert!(
            dev_projected <= dev_prev + 1e-7 * (1.0 + dev_prev.abs()),
            "deviance rose from {dev_prev} to {dev_projected} at sweep {sweep}"
        );
        if (dev_prev - dev_projected).abs() < DEVIANCE_TOL {
            converged = true;
            n_iter = sweep;
            break;
        }
        dev_prev = dev_projected;
    }

    let fitted = state.fitted_deaths(cells);
    let deviance = deviance_total(cells, &fitted);
    let loglik: f64 = cells
        .iter()
        .zip(&fitted)
        .map(|(cell, dhat)| {
            let dlog = if cell.d > 0.0 { cell.d * dhat.ln() } else { 0.0 };
            dlog - dhat - ln_gamma(cell.d + 1.0)
        })
        .sum();
    let k_free = match family {
        ModelFamily::Lc => 2 * na + nt - 2,
        ModelFamily::Apc => na + nt + nc - 3,
        ModelFamily::Rh => 2 * na + nt + nc - 3,
    };
    let n_cells = cells.len();
    Ok(FittedGapc {
        family,
        ages,
        years,
        cohorts: family.has_gamma().then_some(cohorts),
        alpha: state.alpha,
        beta: family.has_beta().then_some(state.beta),
        kappa: state.kappa,
        gamma: family.has_gamma().then_some(state.gamma),
        loglik,
        deviance,
        bic: bic(loglik, k_free, n_cells as f64),
        k_free,
        n_cells,
        converged,
        n_iter,
    })
}
