//! Generalized Pareto tails: evaluation, maximum likelihood, threshold
//! selection and Kolmogorov-Smirnov goodness of fit.
//!
//! The likelihood is maximized over `(xi, ln beta)` with Newton steps on the
//! analytic gradient and Hessian, a Levenberg shift when the Hessian is not
//! negative definite, and backtracking that keeps every iterate inside the
//! support. Failed runs are restarted from a fixed grid of seeds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginals::TestResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub xi: f64,
    pub beta: f64,
    pub u: f64,
}

impl GpdParams {
    pub fn new(xi: f64, beta: f64, u: f64) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::NotHeavyTailed { xi });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("scale must be positive, got {beta}")));
        }
        Ok(GpdParams { xi, beta, u })
    }

    pub fn alpha(&self) -> f64 {
        1.0 / self.xi
    }

    /// Survival function `(1 + xi (t-u)/beta)^(-1/xi)` for `t >= u`.
    pub fn tail(&self, t: f64) -> Result<f64> {
        if t < self.u || t.is_nan() {
            return Err(Error::Domain(format!("tail evaluated below threshold: t = {t} < u = {}", self.u)));
        }
        Ok(self.tail_unchecked(t))
    }

    fn tail_unchecked(&self, t: f64) -> f64 {
        (-(self.xi * (t - self.u) / self.beta).ln_1p() / self.xi).exp()
    }

    /// Distribution function of the threshold excess `t - u`; zero below.
    pub fn excess_cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else {
            -((-(self.xi * y / self.beta).ln_1p() / self.xi).exp_m1())
        }
    }

    /// Quantile of the excess distribution.
    pub fn excess_quantile(&self, p: f64) -> f64 {
        self.beta / self.xi * ((-self.xi * (-p).ln_1p()).exp_m1())
    }

    pub fn with_threshold(self, u: f64) -> Self {
        GpdParams { u, ..self }
    }
}

/// Standalone survival function; see [`GpdParams::tail`].
pub fn gpd_tail(params: &GpdParams, t: f64) -> Result<f64> {
    params.tail(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_exceedances: usize,
    pub loglik: f64,
    pub se_xi: f64,
    pub se_beta: f64,
    pub cov_xi_beta: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub min_exceedances: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_exceedances: 30,
            grad_tol: 1e-8,
            max_iter: 200,
        }
    }
}

const XI_MIN: f64 = -0.9;
const XI_MAX: f64 = 20.0;

/// Mean log-likelihood with gradient and Hessian in `(xi, eta = ln beta)`.
#[derive(Debug, Clone, Copy)]
struct LikPoint {
    ll: f64,
    g: [f64; 2],
    h: [[f64; 2]; 2],
}

/// Mean log-likelihood only; `None` outside the support.
fn mean_loglik(y: &[f64], xi: f64, eta: f64) -> Option<f64> {
    if !(XI_MIN..=XI_MAX).contains(&xi) || xi.abs() < 1e-9 {
        return None;
    }
    let inv_beta = (-eta).exp();
    let a = 1.0 + 1.0 / xi;
    let mut s = 0.0;
    for &yi in y {
        let z = xi * yi * inv_beta;
        if z <= -1.0 {
            return None;
        }
        s += z.ln_1p();
    }
    let n = y.len() as f64;
    let ll = -eta - a * s / n;
    ll.is_finite().then_some(ll)
}

fn lik_point(y: &[f64], xi: f64, eta: f64) -> Option<LikPoint> {
    let ll = mean_loglik(y, xi, eta)?;
    let inv_beta = (-eta).exp();
    let a = 1.0 + 1.0 / xi;
    let (mut gx, mut ge, mut hxx, mut hxe, mut hee) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &yi in y {
        let c = yi * inv_beta;
        let w = 1.0 + xi * c;
        let lw = (xi * c).ln_1p();
        let cw = c / w;
        gx += lw / (xi * xi) - a * cw;
        ge += (1.0 + xi) * cw;
        hxx += -2.0 * lw / (xi * xi * xi) + 2.0 * cw / (xi * xi) + a * cw * cw;
        hxe += c * (1.0 - c) / (w * w);
        hee += -(1.0 + xi) * cw / w;
    }
    let n = y.len() as f64;
    Some(LikPoint {
        ll,
        g: [gx / n, ge / n - 1.0],
        h: [[hxx / n, hxe / n], [hxe / n, hee / n]],
    })
}

fn norm2(g: [f64; 2]) -> f64 {
    (g[0] * g[0] + g[1] * g[1]).sqrt()
}

/// Solves `(-H + lambda I) d = g` for the 2x2 case.
fn damped_newton_dir(p: &LikPoint, lambda: f64) -> Option<[f64; 2]> {
    let a = -p.h[0][0] + lambda;
    let b = -p.h[0][1];
    let d = -p.h[1][1] + lambda;
    let det = a * d - b * b;
    if !(a > 0.0 && det > 0.0) {
        return None;
    }
    Some([(d * p.g[0] - b * p.g[1]) / det, (a * p.g[1] - b * p.g[0]) / det])
}

struct Optimum {
    xi: f64,
    eta: f64,
    point: LikPoint,
    iterations: usize,
}

fn newton_from(y: &[f64], xi0: f64, eta0: f64, opts: &FitOptions) -> std::result::Result<Optimum, f64> {
    let (mut xi, mut eta) = (xi0, eta0);
    let mut p = match lik_point(y, xi, eta) {
        Some(p) => p,
        None => return Err(f64::INFINITY),
    };
    for it in 0..opts.max_iter {
        let gn = norm2(p.g);
        if gn < opts.grad_tol {
            return Ok(Optimum { xi, eta, point: p, iterations: it });
        }
        // Levenberg shift until the direction is an ascent direction.
        let mut lambda = 0.0;
        let dir = loop {
            if let Some(d) = damped_newton_dir(&p, lambda) {
                break d;
            }
            lambda = if lambda == 0.0 { 1e-6 + gn } else { lambda * 10.0 };
            if lambda > 1e12 {
                return Err(gn);
            }
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let (nx, ne) = (xi + step * dir[0], eta + step * dir[1]);
            if let Some(ll) = mean_loglik(y, nx, ne) {
                if ll >= p.ll - 1e-15 * p.ll.abs().max(1.0) {
                    if let Some(np) = lik_point(y, nx, ne) {
                        xi = nx;
                        eta = ne;
                        p = np;
                        moved = true;
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        if !moved {
            let gn = norm2(p.g);
            return if gn < opts.grad_tol.sqrt() * 1e-2 {
                // Flat to machine precision along every ascent direction.
                Ok(Optimum { xi, eta, point: p, iterations: it })
            } else {
                Err(gn)
            };
        }
    }
    let gn = norm2(p.g);
    if gn < opts.grad_tol {
        Ok(Optimum { xi, eta, point: p, iterations: opts.max_iter })
    } else {
        Err(gn)
    }
}

/// Probability-weighted-moment starting values (Hosking & Wallis).
fn pwm_start(y: &[f64]) -> (f64, f64) {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let a0 = s.iter().sum::<f64>() / n;
    let a1 = s
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 - (i as f64 + 0.35) / n))
        .sum::<f64>()
        / n;
    let denom = a0 - 2.0 * a1;
    let (xi, beta) = if denom > 0.0 {
        let k = a0 / denom - 2.0;
        (-k, 2.0 * a0 * a1 / denom)
    } else {
        (0.5, a0)
    };
    let xi = if xi.is_finite() { xi.clamp(0.05, 0.95) } else { 0.5 };
    let beta = if beta.is_finite() && beta > 0.0 { beta } else { a0.max(f64::MIN_POSITIVE) };
    (xi, beta)
}

fn check_excesses(excesses: &[f64], min: usize) -> Result<()> {
    if excesses.len() < min {
        return Err(Error::TooFewExceedances { got: excesses.len(), min });
    }
    if excesses.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("excesses must be finite and nonnegative".into()));
    }
    let (lo, hi) = excesses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if hi <= 0.0 || hi - lo <= 1e-12 * hi {
        return Err(Error::Degenerate("all excesses are equal".into()));
    }
    Ok(())
}

fn diagnostics(y: &[f64], opt: &Optimum) -> FitDiagnostics {
    let n = y.len() as f64;
    let beta = opt.eta.exp();
    // Observed information in (xi, eta) is -n H.
    let i11 = -n * opt.point.h[0][0];
    let i12 = -n * opt.point.h[0][1];
    let i22 = -n * opt.point.h[1][1];
    let det = i11 * i22 - i12 * i12;
    let (vxx, vxe, vee) = if det > 0.0 {
        (i22 / det, -i12 / det, i11 / det)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    FitDiagnostics {
        n_exceedances: y.len(),
        loglik: n * opt.point.ll,
        se_xi: vxx.max(0.0).sqrt(),
        se_beta: beta * vee.max(0.0).sqrt(),
        cov_xi_beta: beta * vxe,
        iterations: opt.iterations,
        grad_norm: norm2(opt.point.g),
    }
}

/// Unconstrained MLE; may return `xi <= 0`.
fn fit_unconstrained(y: &[f64], opts: &FitOptions, start: Option<(f64, f64)>) -> Result<(f64, f64, FitDiagnostics)> {
    let scale = y.iter().sum::<f64>() / y.len() as f64;
    let mut seeds = Vec::with_capacity(8);
    if let Some(s) = start {
        seeds.push(s);
    }
    seeds.push(pwm_start(y));
    for xi in [0.1, 0.3, 0.6, 1.0, 1.5, 3.0] {
        seeds.push((xi, scale * (1.0 - xi).max(0.1)));
    }
    let mut best_grad = f64::INFINITY;
    for (xi0, beta0) in seeds {
        match newton_from(y, xi0, beta0.ln(), opts) {
            Ok(opt) => {
                let d = diagnostics(y, &opt);
                return Ok((opt.xi, opt.eta.exp(), d));
            }
            Err(g) => best_grad = best_grad.min(g),
        }
    }
    Err(Error::NonConvergence { grad_norm: best_grad })
}

/// Maximum likelihood fit of a GPD to threshold excesses. The returned
/// parameters have `u = 0`; set the threshold with [`GpdParams::with_threshold`].
pub fn fit_gpd_mle(excesses: &[f64], opts: &FitOptions) -> Result<(GpdParams, FitDiagnostics)> {
    check_excesses(excesses, opts.min_exceedances)?;
    let (xi, beta, d) = fit_unconstrained(excesses, opts, None)?;
    if xi <= 0.0 {
        return Err(Error::NotHeavyTailed { xi });
    }
    Ok((GpdParams { xi, beta, u: 0.0 }, d))
}

/// Conditional MLE of the scale at a fixed shape.
///
/// The score in `ln beta` is strictly decreasing for `xi > 0`, so a sign
/// bracket followed by safeguarded Newton finds the unique root.
pub fn fit_beta_given_xi(excesses: &[f64], xi: f64, opts: &FitOptions) -> Result<(f64, FitDiagnostics)> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::NotHeavyTailed { xi });
    }
    check_excesses(excesses, opts.min_exceedances)?;
    let n = excesses.len() as f64;
    // Mean score and its derivative in eta.
    let score = |eta: f64| -> (f64, f64) {
        let inv_beta = (-eta).exp();
        let (mut s, mut ds) = (0.0, 0.0);
        for &yi in excesses {
            let c = yi * inv_beta;
            let w = 1.0 + xi * c;
            s += c / w;
            ds += c / (w * w);
        }
        ((1.0 + xi) * s / n - 1.0, -(1.0 + xi) * ds / n)
    };
    let mean = excesses.iter().sum::<f64>() / n;
    let mut lo = mean.ln();
    let mut hi = lo;
    let mut guard = 0;
    while score(lo).0 <= 0.0 {
        lo -= 1.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::NonConvergence { grad_norm: score(lo).0.abs() });
        }
    }
    while score(hi).0 >= 0.0 {
        hi += 1.0;
        guard += 1;
        if guard > 400 {
            return Err(Error::NonConvergence { grad_norm: score(hi).0.abs() });
        }
    }
    let mut eta = 0.5 * (lo + hi);
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let (s, ds) = score(eta);
        if s.abs() < 1e-13 {
            converged = true;
            break;
        }
        if s > 0.0 {
            lo = eta;
        } else {
            hi = eta;
        }
        let newton = eta - s / ds;
        eta = if ds < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * eta.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let (s, ds) = score(eta);
    if !converged && s.abs() > opts.grad_tol {
        return Err(Error::NonConvergence { grad_norm: s.abs() });
    }
    let beta = eta.exp();
    let ll = n * mean_loglik(excesses, xi, eta).ok_or_else(|| Error::Domain("scale outside support".into()))?;
    let info = -n * ds;
    let se_eta = if info > 0.0 { (1.0 / info).sqrt() } else { f64::NAN };
    Ok((
        beta,
        FitDiagnostics {
            n_exceedances: excesses.len(),
            loglik: ll,
            se_xi: 0.0,
            se_beta: beta * se_eta,
            cov_xi_beta: 0.0,
            iterations,
            grad_norm: s.abs(),
        },
    ))
}

/// Total log-likelihood of excesses under `(xi, beta)`; `-inf` outside the support.
pub fn gpd_loglik(excesses: &[f64], xi: f64, beta: f64) -> f64 {
    if beta <= 0.0 {
        return f64::NEG_INFINITY;
    }
    mean_loglik(excesses, xi, beta.ln())
        .map(|m| m * excesses.len() as f64)
        .unwrap_or(f64::NEG_INFINITY)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOptions {
    /// Candidate exceedance fractions of the sample size.
    pub fractions: Vec<f64>,
    /// Critical value for the nested shape-difference statistic.
    pub z_crit: f64,
    /// A candidate is compared with higher candidates holding at most this
    /// fraction of its exceedances.
    pub nest_ratio: f64,
    /// The chosen count is at most this fraction of the last admissible
    /// count, since contamination just past the change point is hard to detect.
    pub backoff: f64,
    pub fallback_quantile: f64,
    pub fit: FitOptions,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        ThresholdOptions {
            fractions: (0..=32).map(|i| 0.10 + 0.025 * i as f64).collect(),
            z_crit: 3.0,
            nest_ratio: 0.6,
            backoff: 0.65,
            fallback_quantile: 0.90,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub k: usize,
    pub u: f64,
    pub xi: f64,
    pub se_xi: f64,
    /// Largest standardized shape difference against any higher threshold.
    pub max_z: f64,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub u: f64,
    pub k_used: usize,
    /// Set when no candidate could be fitted and the fallback quantile was used.
    pub fallback: bool,
    pub candidates: Vec<CandidateScore>,
}

pub const MIN_THRESHOLD_SAMPLE: usize = 100;

/// Empirical quantile by the "type 7" rule.
pub fn empirical_quantile(sorted_asc: &[f64], p: f64) -> f64 {
    let n = sorted_asc.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted_asc[lo] + (h - lo as f64) * (sorted_asc[hi] - sorted_asc[lo])
}

/// Excesses of `sample` strictly above `u`.
pub fn excesses_over(sample: &[f64], u: f64) -> Vec<f64> {
    sample.iter().filter(|x| **x > u).map(|x| x - u).collect()
}

/// Deterministic bias-variance threshold choice.
///
/// For each candidate exceedance count `k` the threshold is the `(k+1)`-th
/// largest observation and a GPD is fitted to the excesses. Candidates are
/// scanned from the highest threshold down. For nested fits the shape
/// difference `xi(k') - xi(k)`, `k' < k`, has variance close to
/// `se(k')^2 - se(k)^2`; the scan stops at the first candidate whose
/// standardized difference to some higher candidate exceeds `z_crit`
/// (bias detected). The chosen candidate is the largest admissible one
/// holding at most `backoff` times the exceedances of the last admissible
/// candidate.
pub fn select_threshold(sample: &[f64], opts: &ThresholdOptions) -> Result<ThresholdChoice> {
    let n = sample.len();
    if n < MIN_THRESHOLD_SAMPLE {
        return Err(Error::InvalidInput(format!(
            "threshold selection needs at least {MIN_THRESHOLD_SAMPLE} observations, got {n}"
        )));
    }
    let mut desc = sample.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));

    struct Fitted {
        k: usize,
        u: f64,
        xi: f64,
        se_xi: f64,
    }
    let mut ks: Vec<usize> = opts
        .fractions
        .iter()
        .map(|f| ((f * n as f64).round() as usize).clamp(1, n - 1))
        .collect();
    ks.sort_unstable();
    ks.dedup();
    let fitted: Vec<Option<Fitted>> = crate::par::map_slice(&ks, |&k| {
        let u = desc[k];
        let excess = excesses_over(&desc[..k], u);
        if excess.len() < opts.fit.min_exceedances || check_excesses(&excess, 1).is_err() {
            return None;
        }
        let (xi, _, d) = fit_unconstrained(&excess, &opts.fit, None).ok()?;
        (d.se_xi.is_finite() && d.se_xi > 0.0).then_some(Fitted { k: excess.len(), u, xi, se_xi: d.se_xi })
    });
    // Candidates past an unfittable one are not comparable.
    let fitted: Vec<Fitted> = fitted.into_iter().skip_while(Option::is_none).map_while(|f| f).collect();

    if fitted.is_empty() {
        let mut asc = desc.clone();
        asc.reverse();
        let u = empirical_quantile(&asc, opts.fallback_quantile);
        let k_used = sample.iter().filter(|x| **x > u).count();
        log::warn!(
            "threshold selection: no candidate could be fitted, falling back to the {} quantile",
            opts.fallback_quantile
        );
        return Ok(ThresholdChoice { u, k_used, fallback: true, candidates: Vec::new() });
    }

    let mut candidates = Vec::with_capacity(fitted.len());
    let mut open = true;
    let mut last = 0;
    for (c, f) in fitted.iter().enumerate() {
        let max_z = fitted[..c]
            .iter()
            .filter(|h| h.k as f64 <= opts.nest_ratio * f.k as f64)
            .map(|h| {
                let var = (h.se_xi * h.se_xi - f.se_xi * f.se_xi).max(1e-300);
                (h.xi - f.xi).abs() / var.sqrt()
            })
            .fold(0.0, f64::max);
        open = open && max_z <= opts.z_crit;
        if open {
            last = c;
        }
        candidates.push(CandidateScore { k: f.k, u: f.u, xi: f.xi, se_xi: f.se_xi, max_z, admissible: open });
    }
    let cap = opts.backoff * fitted[last].k as f64;
    let best = (0..=last).rev().find(|&c| fitted[c].k as f64 <= cap).unwrap_or(0);
    Ok(ThresholdChoice { u: fitted[best].u, k_used: fitted[best].k, fallback: false, candidates })
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form converges fast for small arguments.
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda);
        let s: f64 = (1..=20).map(|k| (-((2 * k - 1) as f64).powi(2) * c).exp()).sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// One-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_test(sample: &[f64], cdf: &dyn Fn(f64) -> f64) -> Result<TestResult> {
    if sample.is_empty() {
        return Err(Error::InvalidInput("KS test needs a nonempty sample".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf(n.sqrt() * d),
        method: "kolmogorov-smirnov (asymptotic)".into(),
        n_resamples: 0,
        seed: 0,
    })
}

/// Inversion sampler for GPD excesses.
pub fn sample_excesses<R: Rng + ?Sized>(params: &GpdParams, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| params.excess_quantile(rng.random::<f64>())).collect()
}
