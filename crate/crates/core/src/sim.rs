//! Mixture marginal sampler, random network sampler and the seeded Monte
//! Carlo study harness.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use chrono::NaiveDate;

use crate::ingest::{Cents, FractionMatrix, LossRecord, WeekRule, N_BUSINESS_LINES, N_EVENT_TYPES};
use crate::marginals::{fit_marginal_sample, KMethod, MarginalOptions};
use crate::par;
use crate::risk::estimate_constants;
use crate::seed::{child_rng, child_seed, SimRng};
use crate::spectral::{identity_network, scale_with, RadialRanking};

const STREAM_DATA: u64 = 1;
const STREAM_NETWORK: u64 = 2;

/// Lognormal body below `u`, GPD tail above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureMargin {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub beta: f64,
    pub u: f64,
}

impl MixtureMargin {
    /// Body mass `H(u)`.
    pub fn body_mass(&self) -> f64 {
        std_normal().cdf((self.u.ln() - self.mu) / self.sigma)
    }

    /// `K` in `P(X > t) ~ K t^(-1/xi)`.
    pub fn tail_constant(&self) -> f64 {
        let alpha = 1.0 / self.xi;
        (1.0 - self.body_mass()) * (alpha * self.beta).powf(alpha)
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let h_u = self.body_mass();
        if t < self.u {
            std_normal().cdf((t.ln() - self.mu) / self.sigma)
        } else {
            let g = 1.0 - (1.0 + self.xi * (t - self.u) / self.beta).powf(-1.0 / self.xi);
            h_u + (1.0 - h_u) * g
        }
    }

    /// Inverse CDF.
    pub fn quantile(&self, v: f64) -> f64 {
        let h_u = self.body_mass();
        if v < h_u {
            (self.mu + self.sigma * std_normal().inverse_cdf(v)).exp()
        } else {
            let p = (v - h_u) / (1.0 - h_u);
            self.u + self.beta / self.xi * ((1.0 - p).powf(-self.xi) - 1.0)
        }
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub margins: Vec<MixtureMargin>,
}

impl MixtureSpec {
    pub fn new(margins: Vec<MixtureMargin>) -> Result<Self> {
        if margins.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one margin".into()));
        }
        for (j, m) in margins.iter().enumerate() {
            if !(m.sigma > 0.0 && m.beta > 0.0 && m.xi > 0.0 && m.u > 0.0 && m.mu.is_finite()) {
                return Err(Error::Domain(format!("margin {}: need sigma, beta, xi, u > 0", j + 1)));
            }
        }
        Ok(MixtureSpec { margins })
    }

    pub fn d(&self) -> usize {
        self.margins.len()
    }

    /// Tail index when every margin shares one shape.
    pub fn common_alpha(&self) -> Option<f64> {
        let xi = self.margins[0].xi;
        self.margins.iter().all(|m| m.xi == xi).then(|| 1.0 / xi)
    }

    pub fn tail_constants(&self) -> Vec<f64> {
        self.margins.iter().map(MixtureMargin::tail_constant).collect()
    }

    /// Copy with every shape replaced by their mean.
    pub fn with_common_shape(&self) -> Self {
        let xi = self.margins.iter().map(|m| m.xi).sum::<f64>() / self.d() as f64;
        MixtureSpec { margins: self.margins.iter().map(|m| MixtureMargin { xi, ..*m }).collect() }
    }
}

pub fn scenario1_spec() -> MixtureSpec {
    let beta = [1.0, 5.0, 50.0];
    let u = [1.0, 10.0, 50.0];
    let mu = [0.0, 1.0, 2.0];
    let sigma = [1.0, 2.0, 4.0];
    MixtureSpec {
        margins: (0..3)
            .map(|j| MixtureMargin { mu: mu[j], sigma: sigma[j], xi: 0.5, beta: beta[j], u: u[j] })
            .collect(),
    }
}

/// Lognormal body scale used for the second scenario, where the body
/// parameters are not available.
pub const SCENARIO2_BODY_SIGMA: f64 = 1.0;
/// Body mass below the threshold for the second scenario placeholders.
pub const SCENARIO2_BODY_MASS: f64 = 0.9;

/// Seven event types with the published per-type shapes, scales and
/// thresholds. Bodies are placeholders: `sigma = 1` and `mu` chosen so that
/// `H(u) = 0.9`.
pub fn scenario2_spec() -> MixtureSpec {
    let xi = [0.61, 0.56, 0.44, 0.59, 0.64, 0.77, 0.70];
    let beta = [2_508_366.0, 1_736_738.0, 571_195.0, 9_091_252.0, 190_547.0, 105_049.0, 2_401_487.0];
    let u: [f64; 7] = [3_320_328.0, 4_150_559.0, 633_702.0, 10_463_268.0, 187_932.0, 49_243.0, 3_417_419.0];
    let z = std_normal().inverse_cdf(SCENARIO2_BODY_MASS);
    MixtureSpec {
        margins: (0..7)
            .map(|j| MixtureMargin {
                mu: u[j].ln() - SCENARIO2_BODY_SIGMA * z,
                sigma: SCENARIO2_BODY_SIGMA,
                xi: xi[j],
                beta: beta[j],
                u: u[j],
            })
            .collect(),
    }
}

/// `n x d` independent draws by inversion; margin `j` uses its own stream.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Array2<f64> {
    let cols: Vec<Vec<f64>> = par::map_indices(spec.d(), |j| {
        let m = &spec.margins[j];
        let mut rng = child_rng(seed, STREAM_DATA, j as u64);
        (0..n).map(|_| m.quantile(rng.random::<f64>())).collect()
    });
    Array2::from_shape_fn((n, spec.d()), |(i, j)| cols[j][i])
}

/// Synthetic loss records: one weekly event-type vector per week from
/// `spec` (which must have seven margins), each event-type loss split over a
/// random Bernoulli(`p`) set of business lines with uniform random shares.
pub fn synthetic_losses(spec: &MixtureSpec, n_weeks: usize, start: NaiveDate, p: f64, seed: u64) -> Result<Vec<LossRecord>> {
    if spec.d() != N_EVENT_TYPES {
        return Err(Error::InvalidInput(format!("need {N_EVENT_TYPES} event types, spec has {}", spec.d())));
    }
    let x = sample_mixture(spec, n_weeks, seed);
    let mut rng = child_rng(seed, STREAM_NETWORK, 0);
    let monday = WeekRule::Iso.week_start(start);
    let mut out = Vec::new();
    for w in 0..n_weeks {
        let week = monday + chrono::Duration::days(7 * w as i64);
        for j in 0..N_EVENT_TYPES {
            let total = (x[[w, j]] * 100.0).round() as Cents;
            let mut lines: Vec<usize> = (0..N_BUSINESS_LINES).filter(|_| rng.random::<f64>() < p).collect();
            if lines.is_empty() {
                lines.push(rng.random_range(0..N_BUSINESS_LINES));
            }
            let shares: Vec<f64> = lines.iter().map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = shares.iter().sum();
            let mut left = total;
            for (idx, (&i, sh)) in lines.iter().zip(&shares).enumerate() {
                let amount = if idx + 1 == lines.len() { left } else { ((total as f64) * sh / sum).floor() as Cents };
                left -= amount;
                if amount > 0 {
                    out.push(LossRecord {
                        date: week + chrono::Duration::days(rng.random_range(0..5)),
                        amount,
                        event_type: (j + 1) as u8,
                        business_line: (i + 1) as u8,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Bernoulli(`p`) link pattern; each linked column entry is `1/deg(j)`.
pub fn sample_homogeneous_network_with<R: Rng + ?Sized>(p: f64, q: usize, d: usize, rng: &mut R) -> FractionMatrix {
    let mut a = Array2::zeros((q, d));
    for j in 0..d {
        let links: Vec<usize> = (0..q).filter(|_| rng.random::<f64>() < p).collect();
        let w = 1.0 / links.len().max(1) as f64;
        for i in links {
            a[[i, j]] = w;
        }
    }
    FractionMatrix::new(a).expect("column sums are 0 or 1")
}

pub fn sample_homogeneous_network(p: f64, q: usize, d: usize, seed: u64) -> Result<FractionMatrix> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("connectivity must lie in (0, 1), got {p}")));
    }
    let mut rng: SimRng = crate::seed::rng_from(seed);
    Ok(sample_homogeneous_network_with(p, q, d, &mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NetworkMode {
    /// `count` fresh Bernoulli networks per replication.
    Homogeneous { p: f64, q: usize, count: usize },
    /// Fixed matrices shared by every replication.
    Empirical { matrices: Vec<FractionMatrix> },
    Identity,
}

impl NetworkMode {
    fn validate(&self, d: usize) -> Result<()> {
        match self {
            NetworkMode::Homogeneous { p, q, count } => {
                if !(*p > 0.0 && *p < 1.0) || *q == 0 || *count == 0 {
                    return Err(Error::InvalidInput("homogeneous network needs p in (0,1), q >= 1, count >= 1".into()));
                }
            }
            NetworkMode::Empirical { matrices } => {
                if matrices.is_empty() {
                    return Err(Error::InvalidInput("empirical network mode needs at least one matrix".into()));
                }
                let q = matrices[0].entries().nrows();
                if matrices.iter().any(|m| m.entries().dim() != (q, d)) {
                    return Err(Error::InvalidInput(format!("every network must be {q} x {d}")));
                }
            }
            NetworkMode::Identity => {}
        }
        Ok(())
    }

    pub fn q(&self, d: usize) -> usize {
        match self {
            NetworkMode::Homogeneous { q, .. } => *q,
            NetworkMode::Empirical { matrices } => matrices[0].entries().nrows(),
            NetworkMode::Identity => d,
        }
    }

    fn draw(&self, d: usize, master: u64, replication: u64) -> Vec<Array2<f64>> {
        match self {
            NetworkMode::Homogeneous { p, q, count } => {
                let mut rng = child_rng(master, STREAM_NETWORK, replication);
                (0..*count)
                    .map(|_| sample_homogeneous_network_with(*p, *q, d, &mut rng).into_inner())
                    .collect()
            }
            NetworkMode::Empirical { matrices } => matrices.iter().map(|m| m.entries().clone()).collect(),
            NetworkMode::Identity => vec![identity_network(d)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub spec: MixtureSpec,
    pub n: usize,
    pub m: usize,
    pub k_grid: Vec<usize>,
    pub network: NetworkMode,
    pub k_method: KMethod,
    pub master_seed: u64,
    pub marginal: MarginalOptions,
    /// Largest tolerated fraction of failed replications.
    pub failure_budget: f64,
}

/// `200, 190, ..., 10`.
pub fn default_k_grid() -> Vec<usize> {
    (1..=20).rev().map(|i| 10 * i).collect()
}

impl StudyConfig {
    pub fn new(spec: MixtureSpec, network: NetworkMode, master_seed: u64) -> Self {
        StudyConfig {
            spec,
            n: 1000,
            m: 500,
            k_grid: default_k_grid(),
            network,
            k_method: KMethod::Mvr,
            master_seed,
            marginal: MarginalOptions::default(),
            failure_budget: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kmax = self.k_grid.iter().copied().max().unwrap_or(0);
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::InvalidInput("k grid must be nonempty with positive entries".into()));
        }
        if self.n < kmax + 1 {
            return Err(Error::InvalidInput(format!("n = {} must exceed the largest k = {kmax}", self.n)));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("m must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return Err(Error::InvalidInput("failure budget must lie in [0, 1]".into()));
        }
        self.network.validate(self.spec.d())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// `(C^S)^(1/alpha)`.
    SystemRoot,
    /// `(C^i)^(1/alpha)`.
    UnitRoot,
    /// `CA^i`.
    Allocation,
}

impl Statistic {
    pub fn label(self) -> &'static str {
        match self {
            Statistic::SystemRoot => "system_root",
            Statistic::UnitRoot => "unit_root",
            Statistic::Allocation => "allocation",
        }
    }
}

/// One (k, statistic, unit) cell across successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub k: usize,
    pub statistic: Statistic,
    /// One-based unit, `None` for the system.
    pub unit: Option<usize>,
    /// Aligned with `StudyResult::replications`.
    pub values: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub replications: Vec<usize>,
    /// Fitted tail index per successful replication.
    pub alphas: Vec<f64>,
    /// Fitted scaling constants per successful replication.
    pub scaling: Vec<Vec<f64>>,
    pub failures: Vec<Failure>,
    pub cells: Vec<StudyCell>,
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Values of one replication, in cell order.
struct Replication {
    alpha: f64,
    k: Vec<f64>,
    values: Vec<f64>,
}

fn cell_layout(k_grid: &[usize], q: usize) -> Vec<(usize, Statistic, Option<usize>)> {
    let mut out = Vec::new();
    for &k in k_grid {
        out.push((k, Statistic::SystemRoot, None));
        for i in 0..q {
            out.push((k, Statistic::UnitRoot, Some(i + 1)));
        }
        for i in 0..q {
            out.push((k, Statistic::Allocation, Some(i + 1)));
        }
    }
    out
}

fn run_replication(config: &StudyConfig, r: usize) -> Result<Replication> {
    let d = config.spec.d();
    let x = sample_mixture(&config.spec, config.n, child_seed(config.master_seed, STREAM_DATA, r as u64));
    let mut opts = config.marginal.clone();
    opts.k_method = config.k_method;
    let model = fit_marginal_sample(x.view(), &opts)?;
    let networks = config.network.draw(d, config.master_seed, r as u64);
    let scaled = scale_with(x.view(), model.alpha, &model.k)?;
    let ranking = RadialRanking::new(&scaled);
    let q = networks[0].nrows();
    let mut values = Vec::with_capacity(config.k_grid.len() * (1 + 2 * q));
    for &k in &config.k_grid {
        let angular = ranking.angular_set(k)?;
        let c = estimate_constants(&angular, &networks, model.alpha, &model.k_method.to_string())?;
        let inv = 1.0 / model.alpha;
        values.push(c.c_system.powf(inv));
        values.extend(c.c_unit.iter().map(|v| v.powf(inv)));
        match &c.ca {
            Some(ca) => values.extend(ca.iter().copied()),
            None => values.extend(std::iter::repeat_n(f64::NAN, q)),
        }
    }
    Ok(Replication { alpha: model.alpha, k: model.k, values })
}

/// Reference values under asymptotic independence with the true constants,
/// when the tail index is common and the networks are fixed.
fn references(config: &StudyConfig, layout: &[(usize, Statistic, Option<usize>)]) -> Vec<Option<f64>> {
    let alpha = match config.spec.common_alpha() {
        Some(a) => a,
        None => return vec![None; layout.len()],
    };
    let networks: Vec<Array2<f64>> = match &config.network {
        NetworkMode::Homogeneous { .. } => return vec![None; layout.len()],
        other => other.draw(config.spec.d(), 0, 0),
    };
    let k = config.spec.tail_constants();
    let measure = crate::spectral::DiscreteSpectralMeasure::axes(&k);
    let sys = crate::risk::theoretical_constant(&measure, &networks, crate::spectral::sum_norm, alpha).ok();
    layout
        .iter()
        .map(|(_, stat, unit)| match (stat, unit) {
            (Statistic::SystemRoot, _) => sys.map(|c| c.powf(1.0 / alpha)),
            (Statistic::UnitRoot, Some(i)) => crate::risk::theoretical_constant(&measure, &networks, |v| v[i - 1], alpha)
                .ok()
                .map(|c| c.powf(1.0 / alpha)),
            (Statistic::Allocation, Some(i)) if alpha > 1.0 => {
                let f = crate::risk::theoretical_allocation(&measure, &networks, alpha, i - 1).ok()?;
                sys.map(|c| c.powf(1.0 / alpha - 1.0) * f)
            }
            _ => None,
        })
        .collect()
}

pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let q = config.network.q(config.spec.d());
    let layout = cell_layout(&config.k_grid, q);
    let outcomes = par::map_indices(config.m, |r| run_replication(config, r));
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut alphas = Vec::new();
    let mut scaling = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rep) => {
                replications.push(r);
                alphas.push(rep.alpha);
                scaling.push(rep.k);
                rows.push(rep.values);
            }
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push(Failure { replication: r, message: e.to_string() });
            }
        }
    }
    if failures.len() as f64 > config.failure_budget * config.m as f64 {
        return Err(Error::FailureBudget { failed: failures.len(), total: config.m });
    }
    let refs = references(config, &layout);
    let cells = layout
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(c, (&(k, statistic, unit), reference))| {
            let values: Vec<f64> = rows.iter().map(|row| row[c]).collect();
            let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
            sorted.sort_by(f64::total_cmp);
            StudyCell {
                k,
                statistic,
                unit,
                median: quantile_sorted(&sorted, 0.5),
                q1: quantile_sorted(&sorted, 0.25),
                q3: quantile_sorted(&sorted, 0.75),
                values,
                reference,
            }
        })
        .collect();
    Ok(StudyResult { config: config.clone(), replications, alphas, scaling, failures, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub k: usize,
    pub statistic: Statistic,
    pub unit: Option<usize>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub reference: Option<f64>,
}

impl StudyResult {
    pub fn cell(&self, k: usize, statistic: Statistic, unit: Option<usize>) -> Option<&StudyCell> {
        self.cells.iter().find(|c| c.k == k && c.statistic == statistic && c.unit == unit)
    }

    /// Long form: `replication,k,statistic,unit,value`.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("replication,k,statistic,unit,value\n");
        for (idx, r) in self.replications.iter().enumerate() {
            for c in &self.cells {
                let unit = c.unit.map(|u| u.to_string()).unwrap_or_else(|| "system".into());
                out.push_str(&format!("{r},{},{},{unit},{}\n", c.k, c.statistic.label(), c.values[idx]));
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<CellSummary> {
        self.cells
            .iter()
            .map(|c| CellSummary {
                k: c.k,
                statistic: c.statistic,
                unit: c.unit,
                median: c.median,
                q1: c.q1,
                q3: c.q3,
                reference: c.reference,
            })
            .collect()
    }
}
