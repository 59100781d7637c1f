//! Common-tail-index marginal model: pooled shape, conditional scale
//! re-fits and the scaling constants `K_j` in `P(X_j > t) ~ K_j t^-alpha`.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpd::{self, FitDiagnostics, FitOptions, GpdParams, ThresholdOptions};
use crate::ingest::WeeklyPanel;
use crate::par;

pub const MODEL_SCHEMA: &str = "oprisk.marginal_model/1";

/// Outcome of a goodness-of-fit or independence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KMethod {
    #[default]
    Pot,
    Mvr,
}

impl std::fmt::Display for KMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KMethod::Pot => "pot",
            KMethod::Mvr => "mvr",
        })
    }
}

impl std::str::FromStr for KMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pot" => Ok(KMethod::Pot),
            "mvr" => Ok(KMethod::Mvr),
            other => Err(Error::InvalidInput(format!("unknown K method {other:?} (expected pot or mvr)"))),
        }
    }
}

pub const Z95: f64 = 1.96;
pub const Z99: f64 = 2.576;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub margin: usize,
    pub xi: f64,
    pub se: f64,
    pub covered_95: bool,
    pub covered_99: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledShape {
    pub xi_mean: f64,
    pub alpha: f64,
    pub coverage: Vec<Coverage>,
}

/// Arithmetic mean of per-margin shapes, with normal-interval coverage of
/// the mean by each margin's 95% and 99% confidence interval.
pub fn pool_shape(xis: &[f64], ses: &[f64]) -> Result<PooledShape> {
    if xis.is_empty() || xis.len() != ses.len() {
        return Err(Error::InvalidInput("pool_shape needs matching, nonempty shape and se vectors".into()));
    }
    if let Some(&xi) = xis.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::NotHeavyTailed { xi });
    }
    let xi_mean = xis.iter().sum::<f64>() / xis.len() as f64;
    let coverage = xis
        .iter()
        .zip(ses)
        .enumerate()
        .map(|(j, (&xi, &se))| Coverage {
            margin: j + 1,
            xi,
            se,
            covered_95: (xi_mean - xi).abs() <= Z95 * se,
            covered_99: (xi_mean - xi).abs() <= Z99 * se,
        })
        .collect();
    Ok(PooledShape { xi_mean, alpha: 1.0 / xi_mean, coverage })
}

/// `K = (alpha beta)^alpha * P_n(X > u)`.
pub fn estimate_k_pot(sample: &[f64], params: &GpdParams) -> Result<f64> {
    let exceed = sample.iter().filter(|x| **x > params.u).count();
    if exceed == 0 {
        return Err(Error::TooFewExceedances { got: 0, min: 1 });
    }
    let alpha = params.alpha();
    Ok((alpha * params.beta).powf(alpha) * exceed as f64 / sample.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvrEstimate {
    pub k: f64,
    /// `(k, K_hat(k))` over the whole range.
    pub curve: Vec<(usize, f64)>,
    /// First and last exceedance count of the detected stable window.
    pub stable_range: (usize, usize),
    /// Set when no stable window could be formed and the whole range was averaged.
    pub fallback: bool,
}

pub const MVR_WINDOW: usize = 10;

/// `K_hat(k) = t_k^alpha * P_n(X >= t_k)` with `t_k` the k-th largest
/// observation, stabilized by averaging over the window of `MVR_WINDOW`
/// consecutive range values with the smallest coefficient of variation.
pub fn estimate_k_mvr(sample: &[f64], alpha: f64, k_range: &[usize]) -> Result<MvrEstimate> {
    let n = sample.len();
    if k_range.is_empty() {
        return Err(Error::InvalidInput("empty k range".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("tail index must be positive, got {alpha}")));
    }
    if let Some(k) = k_range.iter().find(|k| **k < 1 || **k > n) {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={n}")));
    }
    let mut desc = sample.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let curve: Vec<(usize, f64)> = k_range
        .iter()
        .map(|&k| {
            let t = desc[k - 1];
            // Ties at t_k are counted, as the indicator is inclusive.
            let count = k + desc[k..].iter().take_while(|v| **v >= t).count();
            (k, t.powf(alpha) * count as f64 / n as f64)
        })
        .collect();
    if curve.len() < MVR_WINDOW {
        log::warn!("K estimator: k range shorter than the stability window; averaging the whole range");
        let mean = curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64;
        return Ok(MvrEstimate {
            k: mean,
            stable_range: (curve[0].0, curve[curve.len() - 1].0),
            curve,
            fallback: true,
        });
    }
    let mut best = (f64::INFINITY, 0usize);
    for start in 0..=curve.len() - MVR_WINDOW {
        let w = &curve[start..start + MVR_WINDOW];
        let mean = w.iter().map(|c| c.1).sum::<f64>() / MVR_WINDOW as f64;
        let var = w.iter().map(|c| (c.1 - mean).powi(2)).sum::<f64>() / MVR_WINDOW as f64;
        let cv = var.sqrt() / mean;
        if cv.is_finite() && cv < best.0 {
            best = (cv, start);
        }
    }
    if !best.0.is_finite() {
        let mean = curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64;
        return Ok(MvrEstimate {
            k: mean,
            stable_range: (curve[0].0, curve[curve.len() - 1].0),
            curve,
            fallback: true,
        });
    }
    let w = &curve[best.1..best.1 + MVR_WINDOW];
    Ok(MvrEstimate {
        k: w.iter().map(|c| c.1).sum::<f64>() / MVR_WINDOW as f64,
        stable_range: (w[0].0, w[MVR_WINDOW - 1].0),
        curve,
        fallback: false,
    })
}

/// Default exceedance counts for the MVR estimator: a geometric grid
/// from 10 up to the POT exceedance count (capped at `n/2`).
pub fn default_mvr_k_range(n: usize, k_pot: usize) -> Vec<usize> {
    let hi = k_pot.min(n / 2).max(10);
    let lo = 10usize.min(hi);
    let steps = 40;
    let mut ks: Vec<usize> = (0..=steps)
        .map(|i| {
            let f = i as f64 / steps as f64;
            ((lo as f64).ln() * (1.0 - f) + (hi as f64).ln() * f).exp().round() as usize
        })
        .collect();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalOptions {
    pub threshold: ThresholdOptions,
    pub fit: FitOptions,
    pub k_method: KMethod,
    /// Explicit MVR exceedance counts; `None` selects [`default_mvr_k_range`].
    pub mvr_k_range: Option<Vec<usize>>,
    pub min_observations: usize,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        MarginalOptions {
            threshold: ThresholdOptions::default(),
            fit: FitOptions::default(),
            k_method: KMethod::Pot,
            mvr_k_range: None,
            min_observations: 100,
        }
    }
}

/// Per-margin fit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginFit {
    pub margin: usize,
    pub threshold: f64,
    pub n_exceedances: usize,
    pub threshold_fallback: bool,
    /// Unconstrained POT fit at this margin's threshold.
    pub unconstrained: GpdParams,
    pub unconstrained_diagnostics: FitDiagnostics,
    /// Scale re-fitted at the pooled shape.
    pub refit_diagnostics: FitDiagnostics,
    pub ks: TestResult,
    pub k_pot: f64,
    pub k_mvr: Option<MvrEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub schema: String,
    pub d: usize,
    pub n_observations: usize,
    pub alpha: f64,
    pub xi_mean: f64,
    pub per_margin: Vec<GpdParams>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub k_method: KMethod,
    pub coverage: Vec<Coverage>,
    pub margins: Vec<MarginFit>,
    /// Label of the threshold rule; it is a heuristic stand-in.
    pub threshold_method: String,
}

impl MarginalModel {
    /// Builds a model directly from known constants, e.g. for oracles.
    pub fn from_constants(alpha: f64, k: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("tail index must be positive, got {alpha}")));
        }
        if let Some(v) = k.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("scaling constants must be positive, got {v}")));
        }
        Ok(MarginalModel {
            schema: MODEL_SCHEMA.into(),
            d: k.len(),
            n_observations: 0,
            alpha,
            xi_mean: 1.0 / alpha,
            per_margin: Vec::new(),
            k,
            k_method: KMethod::Pot,
            coverage: Vec::new(),
            margins: Vec::new(),
            threshold_method: "none".into(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: MarginalModel = serde_json::from_str(s)?;
        if m.schema != MODEL_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported model schema {:?}", m.schema)));
        }
        Ok(m)
    }

    /// Same model with every `K_j` multiplied by `c`.
    pub fn scaled_k(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.k.iter_mut().for_each(|v| *v *= c);
        m
    }
}

struct FirstStage {
    sample: Vec<f64>,
    threshold: gpd::ThresholdChoice,
    excess: Vec<f64>,
    params: GpdParams,
    diag: FitDiagnostics,
}

/// Full marginal pipeline on an `n x d` observation matrix.
pub fn fit_marginal_sample(x: ArrayView2<f64>, opts: &MarginalOptions) -> Result<MarginalModel> {
    let (n, d) = x.dim();
    if d == 0 {
        return Err(Error::InvalidInput("observation matrix has no columns".into()));
    }
    if n < opts.min_observations {
        return Err(Error::InvalidInput(format!(
            "marginal fit needs at least {} observations, got {n}",
            opts.min_observations
        )));
    }
    let first: Vec<Result<FirstStage>> = par::map_indices(d, |j| {
        let sample: Vec<f64> = x.column(j).to_vec();
        let stage = || -> Result<FirstStage> {
            let threshold = gpd::select_threshold(&sample, &opts.threshold)?;
            let excess = gpd::excesses_over(&sample, threshold.u);
            if excess.is_empty() {
                return Err(Error::TooFewExceedances { got: 0, min: opts.fit.min_exceedances });
            }
            let (p, diag) = gpd::fit_gpd_mle(&excess, &opts.fit)?;
            Ok(FirstStage { params: p.with_threshold(threshold.u), sample: sample.clone(), threshold, excess, diag })
        };
        stage().map_err(|e| e.in_margin(j + 1))
    });
    let first: Vec<FirstStage> = first.into_iter().collect::<Result<_>>()?;

    let xis: Vec<f64> = first.iter().map(|f| f.params.xi).collect();
    let ses: Vec<f64> = first.iter().map(|f| f.diag.se_xi).collect();
    let pooled = pool_shape(&xis, &ses)?;
    let xi_mean = pooled.xi_mean;
    let alpha = 1.0 / xi_mean;

    let second: Vec<Result<(GpdParams, MarginFit)>> = par::map_indices(d, |j| {
        let f = &first[j];
        let stage = || -> Result<(GpdParams, MarginFit)> {
            let (beta, refit) = gpd::fit_beta_given_xi(&f.excess, xi_mean, &opts.fit)?;
            let params = GpdParams { xi: xi_mean, beta, u: f.threshold.u };
            let ks = gpd::ks_test(&f.excess, &|y| params.excess_cdf(y))?;
            let k_pot = estimate_k_pot(&f.sample, &params)?;
            let k_range = opts
                .mvr_k_range
                .clone()
                .unwrap_or_else(|| default_mvr_k_range(f.sample.len(), f.excess.len()));
            let k_mvr = estimate_k_mvr(&f.sample, alpha, &k_range).ok();
            if opts.k_method == KMethod::Mvr && k_mvr.is_none() {
                return Err(Error::InvalidInput("MVR K estimate unavailable for this margin".into()));
            }
            Ok((
                params,
                MarginFit {
                    margin: j + 1,
                    threshold: f.threshold.u,
                    n_exceedances: f.excess.len(),
                    threshold_fallback: f.threshold.fallback,
                    unconstrained: f.params,
                    unconstrained_diagnostics: f.diag,
                    refit_diagnostics: refit,
                    ks,
                    k_pot,
                    k_mvr,
                },
            ))
        };
        stage().map_err(|e| e.in_margin(j + 1))
    });
    let second: Vec<(GpdParams, MarginFit)> = second.into_iter().collect::<Result<_>>()?;
    let (per_margin, margins): (Vec<_>, Vec<_>) = second.into_iter().unzip();
    let k = margins
        .iter()
        .map(|m: &MarginFit| match opts.k_method {
            KMethod::Pot => m.k_pot,
            KMethod::Mvr => m.k_mvr.as_ref().expect("checked above").k,
        })
        .collect();
    Ok(MarginalModel {
        schema: MODEL_SCHEMA.into(),
        d,
        n_observations: n,
        alpha,
        xi_mean,
        per_margin,
        k,
        k_method: opts.k_method,
        coverage: pooled.coverage,
        margins,
        threshold_method: "sequential nested shape test (heuristic)".into(),
    })
}

/// Marginal pipeline on the weekly event-type vectors of a panel.
pub fn fit_marginal_model(panel: &WeeklyPanel, opts: &MarginalOptions) -> Result<MarginalModel> {
    if panel.n_weeks() < opts.min_observations {
        return Err(Error::InvalidInput(format!(
            "panel has {} weeks; at least {} are required",
            panel.n_weeks(),
            opts.min_observations
        )));
    }
    fit_marginal_sample(panel.et_observations().view(), opts)
}
