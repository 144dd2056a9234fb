//! Extrapolation of fitted period and cohort indices, and the forecast
//! moments of the rate surface they drive.
//!
//! Each stochastic index is modelled as an integrated ARIMA with drift,
//! chosen by BIC among (0,1,0), (1,1,0) and (0,1,1), all estimated by
//! Gaussian conditional sum of squares on the differenced series. Forecast
//! means and variances use the exact closed forms of the selected model.
//! The log rate at a future cell is then Gaussian, so the rate itself is
//! lognormal; its conditional mean and variance follow from the lognormal
//! moment formulas, with a plug-in alternative that exponentiates the
//! predictor mean instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gapc::{FittedGapc, ModelFamily};

const COEF_BOUND: f64 = 0.995;
/// Variance floor used only to keep likelihoods finite on exact fits.
const SIGMA2_FLOOR: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("index series has {len} points; need at least 5")]
    SeriesTooShort { len: usize },
    #[error("forecast horizon must be at least 1")]
    ZeroHorizon,
    #[error("age {age} is outside the fitted ages")]
    AgeOutsideFit { age: i32 },
    #[error("horizon step {h} is not in the forecast window of length {len}")]
    HorizonOutsideWindow { h: usize, len: usize },
}

/// Integrated ARIMA with drift for one index series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexModel {
    /// (p, d, q); d is always 1 here.
    pub order: (usize, usize, usize),
    pub drift: f64,
    pub ar: Option<f64>,
    pub ma: Option<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    pub bic: f64,
}

/// Fit the three candidate models to one index series and keep the BIC
/// minimizer. An exactly deterministic series (constant differences) gets
/// sigma2 = 0 with the likelihood evaluated at a tiny variance floor, so it
/// always wins selection and still serializes as finite numbers.
pub fn fit_index(series: &[f64]) -> Result<IndexModel, ForecastError> {
    if series.len() < 5 {
        return Err(ForecastError::SeriesTooShort { len: series.len() });
    }
    let w: Vec<f64> = series.windows(2).map(|p| p[1] - p[0]).collect();
    let candidates = [fit_rwd(&w), fit_ar1(&w), fit_ma1(&w)];
    Ok(candidates
        .into_iter()
        .min_by(|a, b| a.bic.partial_cmp(&b.bic).expect("BIC is finite"))
        .expect("three candidates"))
}

fn gaussian_css_loglik(sum_sq: f64, n: usize) -> (f64, f64) {
    let n_f = n as f64;
    let sigma2 = (sum_sq / n_f).max(0.0);
    let loglik = -0.5 * n_f * ((2.0 * std::f64::consts::PI * sigma2.max(SIGMA2_FLOOR)).ln() + 1.0);
    (sigma2, loglik)
}

fn fit_rwd(w: &[f64]) -> IndexModel {
    let m = w.len() as f64;
    let drift = w.iter().sum::<f64>() / m;
    let ss: f64 = w.iter().map(|v| (v - drift).powi(2)).sum();
    let (sigma2, loglik) = gaussian_css_loglik(ss, w.len());
    IndexModel {
        order: (0, 1, 0),
        drift,
        ar: None,
        ma: None,
        sigma2,
        loglik,
        bic: -2.0 * loglik + 2.0 * m.ln(),
    }
}

fn fit_ar1(w: &[f64]) -> IndexModel {
    // regress w_t on (1, w_{t-1}); the intercept a maps to drift a/(1-phi)
    let n = w.len() - 1;
    let y = &w[1..];
    let x = &w[..w.len() - 1];
    let xbar = x.iter().sum::<f64>() / n as f64;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xbar).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xv, yv)| (xv - xbar) * (yv - ybar)).sum();
    let phi_raw = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let phi = phi_raw.clamp(-COEF_BOUND, COEF_BOUND);
    let intercept = ybar - phi * xbar;
    let ss: f64 = x.iter().zip(y).map(|(xv, yv)| (yv - intercept - phi * xv).powi(2)).sum();
    let (sigma2, loglik) = gaussian_css_loglik(ss, n);
    IndexModel {
        order: (1, 1, 0),
        drift: intercept / (1.0 - phi),
        ar: Some(phi),
        ma: None,
        sigma2,
        loglik,
        bic: -2.0 * loglik + 3.0 * (n as f64).ln(),
    }
}

/// Conditional-sum-of-squares objective for MA(1) at a fixed coefficient,
/// with the drift concentrated out in closed form.
fn ma1_css(w: &[f64], theta: f64) -> (f64, f64) {
    // residual e_t = A_t - c B_t with A_t = w_t - theta A_{t-1},
    // B_t = 1 - theta B_{t-1}; c minimizing sum(e^2) is sum(AB)/sum(B^2)
    let mut a_prev = 0.0;
    let mut b_prev = 0.0;
    let mut sum_ab = 0.0;
    let mut sum_bb = 0.0;
    let mut aa = Vec::with_capacity(w.len());
    let mut bb = Vec::with_capacity(w.len());
    for &wt in w {
        let a = wt - theta * a_prev;
        let b = 1.0 - theta * b_prev;
        sum_ab += a * b;
        sum_bb += b * b;
        aa.push(a);
        bb.push(b);
        a_prev = a;
        b_prev = b;
    }
    let c = if sum_bb > 0.0 { sum_ab / sum_bb } else { 0.0 };
    let css: f64 = aa.iter().zip(&bb).map(|(a, b)| (a - c * b).powi(2)).sum();
    (css, c)
}

fn fit_ma1(w: &[f64]) -> IndexModel {
    let mut best_theta = 0.0;
    let mut best_css = f64::INFINITY;
    let mut t = -0.99;
    while t <= 0.99 {
        let (css, _) = ma1_css(w, t);
        if css < best_css {
            best_css = css;
            best_theta = t;
        }
        t += 0.01;
    }
    // golden-section refinement around the best grid point
    let gr = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut lo = (best_theta - 0.01).max(-COEF_BOUND);
    let mut hi = (best_theta + 0.01).min(COEF_BOUND);
    for _ in 0..60 {
        let c1 = hi - gr * (hi - lo);
        let c2 = lo + gr * (hi - lo);
        if ma1_css(w, c1).0 < ma1_css(w, c2).0 {
            hi = c2;
        } else {
            lo = c1;
        }
    }
    let theta = 0.5 * (lo + hi);
    let (css, c) = ma1_css(w, theta);
    let (sigma2, loglik) = gaussian_css_loglik(css, w.len());
    IndexModel {
        order: (0, 1, 1),
        drift: c,
        ar: None,
        ma: Some(theta),
        sigma2,
        loglik,
        bic: -2.0 * loglik + 3.0 * (w.len() as f64).ln(),
    }
}

/// Exact h-step predictive mean and variance of the undifferenced series.
pub fn forecast_index(model: &IndexModel, series: &[f64], h: usize) -> Result<(f64, f64), ForecastError> {
    if h == 0 {
        return Err(ForecastError::ZeroHorizon);
    }
    if series.len() < 2 {
        return Err(ForecastError::SeriesTooShort { len: series.len() });
    }
    let y_n = *series.last().unwrap();
    let c = model.drift;
    let hf = h as f64;
    Ok(match model.order {
        (0, 1, 0) => (y_n + hf * c, hf * model.sigma2),
        (1, 1, 0) => {
            let phi = model.ar.expect("AR coefficient");
            let w_n = series[series.len() - 1] - series[series.len() - 2];
            let geom = phi * (1.0 - phi.powi(h as i32)) / (1.0 - phi);
            let mean = y_n + hf * c + (w_n - c) * geom;
            let var: f64 = (1..=h)
                .map(|k| {
                    let cum = (1.0 - phi.powi((h - k + 1) as i32)) / (1.0 - phi);
                    cum * cum
                })
                .sum::<f64>()
                * model.sigma2;
            (mean, var)
        }
        (0, 1, 1) => {
            let theta = model.ma.expect("MA coefficient");
            // rebuild the last in-sample innovation by the same recursion
            // the fit used
            let mut eps = 0.0;
            for pair in series.windows(2) {
                eps = (pair[1] - pair[0]) - c - theta * eps;
            }
            let mean = y_n + hf * c + theta * eps;
            let var = model.sigma2 * ((hf - 1.0) * (1.0 + theta).powi(2) + 1.0);
            (mean, var)
        }
        other => unreachable!("unsupported order {other:?}"),
    })
}

/// Whether the forecast mean is the lognormal conditional mean or the plain
/// exponentiated predictor. The conditional variance is the same either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    #[default]
    Lognormal,
    Plugin,
}

/// Mean and variance of exp(a + bK) for K ~ Normal(m, s2).
pub fn lognormal_rate_moments(a: f64, b: f64, m: f64, s2: f64, mode: MeanMode) -> (f64, f64) {
    let loc = a + b * m;
    let v = b * b * s2;
    let mean = match mode {
        MeanMode::Lognormal => (loc + 0.5 * v).exp(),
        MeanMode::Plugin => loc.exp(),
    };
    let var = v.exp_m1() * (2.0 * loc + v).exp();
    (mean, var)
}

/// Index models fitted to a model's stochastic indices, plus the forecast
/// moments they imply over a fixed horizon window. Serializes under the
/// `forecast` key of the fit document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexForecasts {
    pub horizon: usize,
    pub kappa: IndexModel,
    /// Per-step (mean, variance) of kappa at t' + 1 ..= t' + horizon.
    pub kappa_steps: Vec<(f64, f64)>,
    pub gamma: Option<IndexModel>,
    /// Per-step (mean, variance) of gamma beyond the last observed cohort.
    pub gamma_steps: Vec<(f64, f64)>,
}

/// Fit index models to kappa (and gamma when present) and tabulate their
/// step-ahead moments out to `horizon`.
pub fn fit_indices(fit: &FittedGapc, horizon: usize) -> Result<IndexForecasts, ForecastError> {
    if horizon == 0 {
        return Err(ForecastError::ZeroHorizon);
    }
    let kappa = fit_index(&fit.kappa)?;
    let kappa_steps = (1..=horizon)
        .map(|h| forecast_index(&kappa, &fit.kappa, h))
        .collect::<Result<Vec<_>, _>>()?;
    let (gamma, gamma_steps) = match &fit.gamma {
        Some(series) => {
            let model = fit_index(series)?;
            // a cell at (x, t'+h) can sit at most h cohorts past the last
            // observed one
            let steps = (1..=horizon)
                .map(|h| forecast_index(&model, series, h))
                .collect::<Result<Vec<_>, _>>()?;
            (Some(model), steps)
        }
        None => (None, Vec::new()),
    };
    Ok(IndexForecasts { horizon, kappa, kappa_steps, gamma, gamma_steps })
}

/// Conditional mean and variance of the rate at age `x`, `h` years past the
/// fitted window.
///
/// Deterministic parts of the predictor (alpha, observed-cohort gamma) form
/// the offset; the kappa forecast and, for cohorts past the observed range,
/// the gamma forecast contribute Gaussian terms treated as independent, so
/// their variances add.
pub fn rate_moments(
    fit: &FittedGapc,
    forecasts: &IndexForecasts,
    x: i32,
    h: usize,
    mode: MeanMode,
) -> Result<(f64, f64), ForecastError> {
    if h == 0 {
        return Err(ForecastError::ZeroHorizon);
    }
    if h > forecasts.horizon {
        return Err(ForecastError::HorizonOutsideWindow { h, len: forecasts.horizon });
    }
    let i = fit
        .ages
        .index_of(x)
        .ok_or(ForecastError::AgeOutsideFit { age: x })?;
    let beta = fit.beta.as_ref().map_or(1.0, |b| b[i]);
    let (kappa_mean, kappa_var) = forecasts.kappa_steps[h - 1];

    let mut offset = fit.alpha[i];
    let mut mean = beta * kappa_mean;
    let mut var = beta * beta * kappa_var;
    if let (Some(gamma), Some(span)) = (&fit.gamma, fit.cohorts) {
        let cohort = fit.years.end + h as i32 - x;
        match span.index_of(cohort) {
            Some(idx) => offset += gamma[idx],
            None => {
                let step = (cohort - span.end) as usize;
                let (gm, gv) = *forecasts
                    .gamma_steps
                    .get(step - 1)
                    .ok_or(ForecastError::HorizonOutsideWindow { h: step, len: forecasts.gamma_steps.len() })?;
                mean += gm;
                var += gv;
            }
        }
    }
    // fold the combined Gaussian (mean, var) through the lognormal moments
    let (mu_bar, sigma2_bar) = lognormal_rate_moments(offset, 1.0, mean, var, mode);
    Ok((mu_bar, sigma2_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Span;
    use crate::streams::{substream, tag};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_linear_trend_selects_rwd_with_zero_variance() {
        let kappa = [0.0, -1.0, -2.0, -3.0, -4.0];
        let m = fit_index(&kappa).unwrap();
        assert_eq!(m.order, (0, 1, 0));
        assert!((m.drift - (-1.0)).abs() < 1e-12);
        assert_eq!(m.sigma2, 0.0);

        let flat = [2.5; 6];
        let m = fit_index(&flat).unwrap();
        assert_eq!(m.order, (0, 1, 0));
        assert_eq!(m.drift, 0.0);
        assert_eq!(m.sigma2, 0.0);
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(matches!(
            fit_index(&[1.0, 2.0, 3.0, 4.0]),
            Err(ForecastError::SeriesTooShort { len: 4 })
        ));
    }

    #[test]
    fn rwd_forecast_closed_form() {
        let model = IndexModel {
            order: (0, 1, 0),
            drift: -1.0,
            ar: None,
            ma: None,
            sigma2: 0.25,
            loglik: 0.0,
            bic: 0.0,
        };
        let series = [0.0, -1.0, -2.0, -3.0, -4.0];
        let (m, s2) = forecast_index(&model, &series, 4).unwrap();
        assert!((m - (-8.0)).abs() < 1e-12);
        assert!((s2 - 1.0).abs() < 1e-12);
        assert!(matches!(forecast_index(&model, &series, 0), Err(ForecastError::ZeroHorizon)));
    }

    #[test]
    fn ar1_forecast_matches_path_simulation() {
        let model = IndexModel {
            order: (1, 1, 0),
            drift: -0.5,
            ar: Some(0.6),
            ma: None,
            sigma2: 0.09,
            loglik: 0.0,
            bic: 0.0,
        };
        let series = [10.0, 9.2, 8.9, 8.1, 7.8];
        let h = 5;
        let (mean, var) = forecast_index(&model, &series, h).unwrap();

        let mut rng = substream(7, &[tag::BOOTSTRAP, 1]);
        let noise = Normal::new(0.0, model.sigma2.sqrt()).unwrap();
        let n_paths = 1_000_000;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        let w_n = series[4] - series[3];
        for _ in 0..n_paths {
            let mut w = w_n;
            let mut y = series[4];
            for _ in 0..h {
                w = model.drift + 0.6 * (w - model.drift) + noise.sample(&mut rng);
                y += w;
            }
            s1 += y;
            s2 += y * y;
        }
        let mc_mean = s1 / n_paths as f64;
        let mc_var = s2 / n_paths as f64 - mc_mean * mc_mean;
        assert!(
            ((mean - mc_mean) / mc_mean).abs() < 5e-3,
            "mean {mean} vs MC {mc_mean}"
        );
        assert!(((var - mc_var) / mc_var).abs() < 5e-3, "var {var} vs MC {mc_var}");
    }

    #[test]
    fn ma1_forecast_matches_path_simulation() {
        let model = IndexModel {
            order: (0, 1, 1),
            drift: 0.3,
            ar: None,
            ma: Some(0.55),
            sigma2: 0.04,
            loglik: 0.0,
            bic: 0.0,
        };
        // series consistent with some innovation path
        let series = [1.0, 1.5, 1.7, 2.4, 2.6, 3.1];
        let h = 4;
        let (mean, var) = forecast_index(&model, &series, h).unwrap();

        // the conditional distribution starts from the recursion's last
        // innovation
        let mut eps_n = 0.0;
        for pair in series.windows(2) {
            eps_n = (pair[1] - pair[0]) - model.drift - 0.55 * eps_n;
        }
        let mut rng = substream(11, &[tag::BOOTSTRAP, 2]);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let n_paths = 1_000_000;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..n_paths {
            let mut prev_eps = eps_n;
            let mut y = *series.last().unwrap();
            for _ in 0..h {
                let eps = noise.sample(&mut rng);
                y += model.drift + eps + 0.55 * prev_eps;
                prev_eps = eps;
            }
            s1 += y;
            s2 += y * y;
        }
        let mc_mean = s1 / n_paths as f64;
        let mc_var = s2 / n_paths as f64 - mc_mean * mc_mean;
        assert!(((mean - mc_mean) / mc_mean).abs() < 5e-3, "mean {mean} vs MC {mc_mean}");
        assert!(((var - mc_var) / mc_var).abs() < 5e-3, "var {var} vs MC {mc_var}");
    }

    #[test]
    fn white_noise_differences_have_drift_near_zero_on_average() {
        let n = 50;
        let mut drifts = Vec::new();
        for rep in 0..100u64 {
            let mut rng = substream(42, &[tag::BOOTSTRAP, 3, rep]);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let mut series = vec![0.0];
            for _ in 1..n {
                let prev = *series.last().unwrap();
                series.push(prev + noise.sample(&mut rng));
            }
            drifts.push(fit_rwd(
                &series.windows(2).map(|p| p[1] - p[0]).collect::<Vec<_>>(),
            )
            .drift);
        }
        let mean = drifts.iter().sum::<f64>() / drifts.len() as f64;
        let sd = (drifts.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let se = sd / 10.0;
        assert!(mean.abs() < 3.0 * se, "mean drift {mean}, se {se}");
    }

    #[test]
    fn ar1_differences_select_the_ar_model() {
        let mut hits = 0;
        for rep in 0..100u64 {
            let mut rng = substream(99, &[tag::BOOTSTRAP, 4, rep]);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let mut w = 0.0;
            let mut series = vec![0.0];
            for _ in 0..500 {
                w = 0.8 * w + noise.sample(&mut rng);
                let prev = *series.last().unwrap();
                series.push(prev + w);
            }
            if fit_index(&series).unwrap().order == (1, 1, 0) {
                hits += 1;
            }
        }
        assert!(hits >= 90, "AR model selected {hits}/100 times");
    }

    #[test]
    fn ma1_css_recovers_the_generating_coefficient() {
        let mut rng = substream(5, &[tag::BOOTSTRAP, 5]);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut eps_prev = 0.0;
        let mut series = vec![0.0];
        for _ in 0..4000 {
            let eps: f64 = noise.sample(&mut rng);
            let w = 0.1 + eps + 0.6 * eps_prev;
            eps_prev = eps;
            let prev = *series.last().unwrap();
            series.push(prev + w);
        }
        let w: Vec<f64> = series.windows(2).map(|p| p[1] - p[0]).collect();
        let m = fit_ma1(&w);
        assert!((m.ma.unwrap() - 0.6).abs() < 0.05, "theta {:?}", m.ma);
        assert!((m.drift - 0.1).abs() < 0.05, "drift {}", m.drift);
    }

    #[test]
    fn lognormal_moment_formulas() {
        let (mu, s2) = lognormal_rate_moments(-4.0, 1.0, 0.0, 0.04, MeanMode::Lognormal);
        assert!((mu - (-3.98f64).exp()).abs() < 1e-15);
        let expect_var = 0.04f64.exp_m1() * (-7.96f64).exp();
        assert!((s2 - expect_var).abs() < 1e-18);
        assert!((mu - 0.018685639337732773).abs() < 1e-17);
        assert!((s2 - 1.4249209035221373e-5).abs() < 1e-19);

        // deterministic limit
        let (mu, s2) = lognormal_rate_moments(-4.0, 2.0, 0.5, 0.0, MeanMode::Lognormal);
        assert_eq!(mu, (-3.0f64).exp());
        assert_eq!(s2, 0.0);

        // plug-in mean ignores the variance half-term but keeps the variance
        let (mu_p, s2_p) = lognormal_rate_moments(-4.0, 1.0, 0.0, 0.04, MeanMode::Plugin);
        assert_eq!(mu_p, (-4.0f64).exp());
        assert!((s2_p - expect_var).abs() < 1e-18);

        // Jensen direction
        assert!(lognormal_rate_moments(-4.0, 1.0, 0.0, 0.3, MeanMode::Lognormal).0 > (-4.0f64).exp());
    }

    #[test]
    fn lognormal_moments_match_monte_carlo() {
        let (a, b, m, s2) = (-3.2, 0.7, -0.4, 0.09);
        let (mu, var) = lognormal_rate_moments(a, b, m, s2, MeanMode::Lognormal);
        let mut rng = substream(123, &[tag::MSEP_MC, 1]);
        let noise = Normal::new(m, s2.sqrt()).unwrap();
        let n = 10_000_000;
        let (mut s1, mut sq) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let v = (a + b * noise.sample(&mut rng)).exp();
            s1 += v;
            sq += v * v;
        }
        let mc_mean = s1 / n as f64;
        let mc_var = sq / n as f64 - mc_mean * mc_mean;
        assert!(((mu - mc_mean) / mc_mean).abs() < 1e-3, "{mu} vs {mc_mean}");
        assert!(((var - mc_var) / mc_var).abs() < 1e-2, "{var} vs {mc_var}");
    }

    fn lc_fit_for_forecasting() -> FittedGapc {
        FittedGapc {
            family: ModelFamily::Lc,
            ages: Span::new(60, 62),
            years: Span::new(2000, 2006),
            cohorts: None,
            alpha: vec![-4.0, -3.8, -3.6],
            beta: Some(vec![0.5, 0.3, 0.2]),
            kappa: vec![3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0],
            gamma: None,
            loglik: 0.0,
            deviance: 0.0,
            bic: 0.0,
            k_free: 0,
            n_cells: 0,
            converged: true,
            n_iter: 1,
        }
    }

    #[test]
    fn rate_moments_compose_index_forecasts() {
        let fit = lc_fit_for_forecasting();
        let fc = fit_indices(&fit, 3).unwrap();
        // kappa is an exact linear trend: drift -1, zero variance
        assert_eq!(fc.kappa.order, (0, 1, 0));
        assert_eq!(fc.kappa.sigma2, 0.0);
        let (mu, s2) = rate_moments(&fit, &fc, 60, 2, MeanMode::Lognormal).unwrap();
        // eta = -4.0 + 0.5 * (-5.0)
        assert!((mu - (-6.5f64).exp()).abs() < 1e-15);
        assert_eq!(s2, 0.0);
        assert!(matches!(
            rate_moments(&fit, &fc, 59, 1, MeanMode::Lognormal),
            Err(ForecastError::AgeOutsideFit { age: 59 })
        ));
        assert!(matches!(
            rate_moments(&fit, &fc, 60, 4, MeanMode::Lognormal),
            Err(ForecastError::HorizonOutsideWindow { .. })
        ));
    }

    #[test]
    fn rate_moments_cover_observed_and_future_cohorts() {
        // RH-style fit where gamma matters: ages 60..=62, years 2000..=2006,
        // cohorts 1938..=1946
        let cohorts = Span::new(1938, 1946);
        // dyadic step so the linear trend is exact in floating point
        let gamma: Vec<f64> = (0..9).map(|k| k as f64 / 64.0).collect();
        let fit = FittedGapc {
            family: ModelFamily::Rh,
            ages: Span::new(60, 62),
            years: Span::new(2000, 2006),
            cohorts: Some(cohorts),
            alpha: vec![-4.0, -3.8, -3.6],
            beta: Some(vec![0.5, 0.3, 0.2]),
            kappa: vec![3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0],
            gamma: Some(gamma.clone()),
            loglik: 0.0,
            deviance: 0.0,
            bic: 0.0,
            k_free: 0,
            n_cells: 0,
            converged: true,
            n_iter: 1,
        };
        let fc = fit_indices(&fit, 2).unwrap();
        // age 62 at h=1: cohort 2007-62=1945, observed; gamma index 7
        let (mu, _) = rate_moments(&fit, &fc, 62, 1, MeanMode::Lognormal).unwrap();
        let eta: f64 = -3.6 + 0.2 * (-4.0) + 7.0 / 64.0;
        assert!((mu - eta.exp()).abs() < 1e-15, "mu {mu} vs {}", eta.exp());
        // age 60 at h=1: cohort 1947 is one step past the observed range;
        // gamma extrapolates its exact linear trend one step with zero
        // variance
        let (mu, s2) = rate_moments(&fit, &fc, 60, 1, MeanMode::Lognormal).unwrap();
        let eta: f64 = -4.0 + 0.5 * (-4.0) + 9.0 / 64.0;
        assert!((mu - eta.exp()).abs() < 1e-12, "mu {mu} vs {}", eta.exp());
        assert_eq!(s2, 0.0);
    }

    #[test]
    fn rate_moments_match_monte_carlo_for_stochastic_kappa() {
        let mut fit = lc_fit_for_forecasting();
        // noisy kappa so the index model keeps positive variance
        fit.kappa = vec![3.1, 1.8, 1.2, -0.1, -0.8, -2.2, -2.9];
        let h = 3;
        let fc = fit_indices(&fit, h).unwrap();
        let (m_h, s2_h) = fc.kappa_steps[h - 1];
        let x = 61;
        let (mu, var) = rate_moments(&fit, &fc, x, h, MeanMode::Lognormal).unwrap();

        let mut rng = substream(31, &[tag::MSEP_MC, 2]);
        let noise = Normal::new(m_h, s2_h.sqrt()).unwrap();
        let n = 10_000_000;
        let (mut s1, mut sq) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let k: f64 = noise.sample(&mut rng);
            let v = (-3.8 + 0.3 * k).exp();
            s1 += v;
            sq += v * v;
        }
        let mc_mean = s1 / n as f64;
        let mc_var = sq / n as f64 - mc_mean * mc_mean;
        assert!(((mu - mc_mean) / mc_mean).abs() < 1e-3, "{mu} vs {mc_mean}");
        assert!(((var - mc_var) / mc_var).abs() < 1e-2, "{var} vs {mc_var}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rwd_forecast_variance_is_nondecreasing_in_h(
                drift in -2.0f64..2.0,
                sigma2 in 0.0f64..4.0,
                y_n in -10.0f64..10.0,
            ) {
                let model = IndexModel {
                    order: (0, 1, 0), drift, ar: None, ma: None,
                    sigma2, loglik: 0.0, bic: 0.0,
                };
                let series = [y_n - drift, y_n];
                let mut prev = 0.0;
                for h in 1..=10 {
                    let (m, v) = forecast_index(&model, &series, h).unwrap();
                    prop_assert!(v >= prev);
                    prop_assert!((m - (y_n + h as f64 * drift)).abs() < 1e-9);
                    prev = v;
                }
            }

            #[test]
            fn jensen_gap_is_nonnegative(
                a in -8.0f64..0.0,
                b in -2.0f64..2.0,
                m in -3.0f64..3.0,
                s2 in 0.0f64..1.0,
            ) {
                let (mu, var) = lognormal_rate_moments(a, b, m, s2, MeanMode::Lognormal);
                prop_assert!(mu >= (a + b * m).exp() * (1.0 - 1e-15));
                prop_assert!(var >= 0.0);
                prop_assert!(mu.is_finite());
            }

            #[test]
            fn selected_models_have_valid_coefficients(
                seed in 0u64..500,
                n in 6usize..40,
            ) {
                let mut rng = substream(seed, &[tag::BOOTSTRAP, 6]);
                let mut series = vec![0.0];
                for _ in 1..n {
                    let prev = *series.last().unwrap();
                    series.push(prev - 0.3 + rng.random::<f64>() - 0.5);
                }
                let m = fit_index(&series).unwrap();
                prop_assert!(m.sigma2 >= 0.0);
                if let Some(ar) = m.ar { prop_assert!(ar.abs() < 1.0); }
                if let Some(ma) = m.ma { prop_assert!(ma.abs() < 1.0); }
                prop_assert!(m.bic.is_finite());
            }
        }
    }
}
