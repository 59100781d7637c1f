//! Marginal scaling, radial/angular decomposition and empirical spectral
//! integrals under the sum norm.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginals::MarginalModel;
use crate::par;

/// Observations divided componentwise by `K_j^(1/alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSample {
    pub y: Array2<f64>,
    pub alpha: f64,
    pub k: Vec<f64>,
}

pub fn scale_with(x: ArrayView2<f64>, alpha: f64, k: &[f64]) -> Result<ScaledSample> {
    let d = x.ncols();
    if k.len() != d {
        return Err(Error::InvalidInput(format!("model has {} margins, data has {d} columns", k.len())));
    }
    if let Some(v) = k.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("scaling constants must be positive, got {v}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("tail index must be positive, got {alpha}")));
    }
    if x.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput("observations must be finite and nonnegative".into()));
    }
    let div: Vec<f64> = k.iter().map(|kj| kj.powf(1.0 / alpha)).collect();
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        for (v, s) in row.iter_mut().zip(&div) {
            *v /= s;
        }
    }
    Ok(ScaledSample { y, alpha, k: k.to_vec() })
}

pub fn scale_sample(x: ArrayView2<f64>, model: &MarginalModel) -> Result<ScaledSample> {
    if model.d != x.ncols() {
        return Err(Error::InvalidInput(format!("model dimension {} does not match data dimension {}", model.d, x.ncols())));
    }
    scale_with(x, model.alpha, &model.k)
}

/// The `k` scaled observations with the largest sum norm, as angles on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularSet {
    pub k: usize,
    pub radial_threshold: f64,
    /// `k x d`, rows sum to one.
    pub angles: Array2<f64>,
    /// Row indices of the selected observations.
    pub indices: Vec<usize>,
    pub alpha: f64,
    /// Scaling constants used to produce the angles.
    pub scaling: Vec<f64>,
    pub norm: String,
}

impl AngularSet {
    /// Wraps given angles directly, e.g. ones drawn from a known measure.
    pub fn from_angles(angles: Array2<f64>, alpha: f64, scaling: Vec<f64>) -> Result<Self> {
        if angles.nrows() == 0 {
            return Err(Error::InvalidInput("angular set is empty".into()));
        }
        if scaling.len() != angles.ncols() {
            return Err(Error::InvalidInput("scaling length does not match angle dimension".into()));
        }
        for row in angles.rows() {
            let s: f64 = row.sum();
            if row.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput("angles must be nonnegative and sum to one".into()));
            }
        }
        Ok(AngularSet {
            k: angles.nrows(),
            radial_threshold: f64::NAN,
            indices: (0..angles.nrows()).collect(),
            angles,
            alpha,
            scaling,
            norm: "sum".into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.angles.ncols()
    }

    /// Empirical spectral measure: distinct angles with their relative frequency.
    pub fn empirical_measure(&self) -> DiscreteSpectralMeasure {
        let mut atoms: Vec<Vec<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for row in self.angles.rows() {
            let r = row.to_vec();
            match atoms.iter().position(|a| *a == r) {
                Some(p) => weights[p] += 1.0,
                None => {
                    atoms.push(r);
                    weights.push(1.0);
                }
            }
        }
        let total = self.k as f64;
        weights.iter_mut().for_each(|w| *w /= total);
        DiscreteSpectralMeasure { atoms, weights }
    }
}

/// Sum norms sorted once, so several `k` can be extracted cheaply.
#[derive(Debug, Clone)]
pub struct RadialRanking<'a> {
    scaled: &'a ScaledSample,
    /// `(norm, row)` for nonzero rows, largest norm first, ties by row index.
    order: Vec<(f64, usize)>,
}

impl<'a> RadialRanking<'a> {
    pub fn new(scaled: &'a ScaledSample) -> Self {
        let mut order: Vec<(f64, usize)> = scaled
            .y
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r.sum(), i))
            .filter(|(s, _)| *s > 0.0)
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        RadialRanking { scaled, order }
    }

    pub fn n_nonzero(&self) -> usize {
        self.order.len()
    }

    pub fn angular_set(&self, k: usize) -> Result<AngularSet> {
        if k == 0 || k >= self.order.len() {
            return Err(Error::InvalidInput(format!(
                "k = {k} must lie in 1..{} (number of nonzero rows)",
                self.order.len()
            )));
        }
        let d = self.scaled.y.ncols();
        let mut angles = Array2::zeros((k, d));
        let mut indices = Vec::with_capacity(k);
        for (r, &(norm, i)) in self.order[..k].iter().enumerate() {
            for (j, v) in self.scaled.y.row(i).iter().enumerate() {
                angles[[r, j]] = v / norm;
            }
            indices.push(i);
        }
        Ok(AngularSet {
            k,
            radial_threshold: self.order[k - 1].0,
            angles,
            indices,
            alpha: self.scaled.alpha,
            scaling: self.scaled.k.clone(),
            norm: "sum".into(),
        })
    }
}

pub fn angular_components(scaled: &ScaledSample, k: usize) -> Result<AngularSet> {
    RadialRanking::new(scaled).angular_set(k)
}

pub fn identity_network(d: usize) -> Array2<f64> {
    Array2::eye(d)
}

fn check_networks(networks: &[Array2<f64>], d: usize) -> Result<usize> {
    let first = networks
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one network matrix is required".into()))?;
    let q = first.nrows();
    for a in networks {
        if a.ncols() != d || a.nrows() != q {
            return Err(Error::InvalidInput(format!(
                "network of shape {:?} does not match {q} x {d}",
                a.dim()
            )));
        }
    }
    Ok(q)
}

/// Angles mapped back to the original margins: `K^(1/alpha) s`.
fn unscaled_angles(angular: &AngularSet) -> Vec<Vec<f64>> {
    let m: Vec<f64> = angular.scaling.iter().map(|k| k.powf(1.0 / angular.alpha)).collect();
    angular
        .angles
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&m).map(|(s, c)| s * c).collect())
        .collect()
}

/// `sum_s s_c^alpha` at the first coordinate (starting at `coord`) that is positive.
fn normalizer(angular: &AngularSet, alpha: f64, coord: usize) -> Result<f64> {
    let d = angular.dim();
    if coord >= d {
        return Err(Error::InvalidInput(format!("normalization coordinate {} out of range", coord + 1)));
    }
    for c in (coord..d).chain(0..coord) {
        let s: f64 = angular.angles.column(c).iter().map(|v| v.powf(alpha)).sum();
        if s > 0.0 {
            if c != coord {
                log::warn!("normalization coordinate {} has no mass; using {}", coord + 1, c + 1);
            }
            return Ok(s);
        }
    }
    Err(Error::ZeroDenominator)
}

/// Several self-normalized integrals in one pass. `integrand(v, out)` adds
/// its contributions for the transformed angle `v` into `out` (length `n_out`).
pub fn spectral_integrals_raw<G>(
    angular: &AngularSet,
    networks: &[Array2<f64>],
    n_out: usize,
    integrand: G,
    alpha: f64,
    coord: usize,
) -> Result<Vec<f64>>
where
    G: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    if (alpha - angular.alpha).abs() > 1e-12 * alpha.abs().max(1.0) {
        return Err(Error::Domain(format!(
            "tail index {alpha} differs from the one used for scaling ({})",
            angular.alpha
        )));
    }
    let q = check_networks(networks, angular.dim())?;
    let denom = normalizer(angular, alpha, coord)?;
    let v = unscaled_angles(angular);
    let per_network = par::map_slice(networks, |a| {
        let mut buf = vec![0.0; q];
        let mut acc = vec![0.0; n_out];
        for s in &v {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = a.row(i).iter().zip(s).map(|(x, y)| x * y).sum();
            }
            integrand(&buf, &mut acc);
        }
        acc
    });
    let m = networks.len() as f64;
    let mut out = vec![0.0; n_out];
    for acc in &per_network {
        for (o, a) in out.iter_mut().zip(acc) {
            *o += a;
        }
    }
    Ok(out.into_iter().map(|o| o / m / denom).collect())
}

/// Self-normalized empirical integral of an arbitrary integrand `g`:
///
/// `(1/m) sum_l sum_s g(A_l K^(1/alpha) s) / sum_s s_c^alpha`.
pub fn spectral_integral_raw<G>(
    angular: &AngularSet,
    networks: &[Array2<f64>],
    integrand: G,
    alpha: f64,
    coord: usize,
) -> Result<f64>
where
    G: Fn(&[f64]) -> f64 + Sync + Send,
{
    let out = spectral_integrals_raw(angular, networks, 1, |v, acc| acc[0] += integrand(v), alpha, coord)?;
    Ok(out[0])
}

/// Empirical integral of `f(A K^(1/alpha) s)^alpha` for a 1-homogeneous `f`,
/// normalized at the first coordinate.
pub fn spectral_integral<F>(angular: &AngularSet, networks: &[Array2<f64>], f: F, alpha: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    spectral_integral_raw(angular, networks, |v| f(v).powf(alpha), alpha, 0)
}

pub fn sum_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Finite measure on the positive simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpectralMeasure {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteSpectralMeasure {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::InvalidInput("measure needs matching, nonempty atoms and weights".into()));
        }
        let d = atoms[0].len();
        for a in &atoms {
            let s: f64 = a.iter().sum();
            if a.len() != d || a.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput("atoms must lie on the positive unit simplex".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        Ok(DiscreteSpectralMeasure { atoms, weights })
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Asymptotic independence: unit vectors with weights `K_j`.
    pub fn axes(k: &[f64]) -> Self {
        let d = k.len();
        let atoms = (0..d)
            .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        DiscreteSpectralMeasure { atoms, weights: k.to_vec() }
    }

    /// Full dependence: a single atom on the ray through `K^(1/alpha) 1`.
    pub fn comonotone(k: &[f64], alpha: f64) -> Self {
        let kmax = k.iter().copied().fold(0.0, f64::max);
        let c: Vec<f64> = k.iter().map(|v| (v / kmax).powf(1.0 / alpha)).collect();
        let norm = sum_norm(&c);
        DiscreteSpectralMeasure {
            atoms: vec![c.iter().map(|v| v / norm).collect()],
            weights: vec![kmax * norm.powf(alpha)],
        }
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().cloned());
        let mut weights: Vec<f64> = self.weights.iter().map(|w| w * lambda).collect();
        weights.extend(other.weights.iter().map(|w| w * (1.0 - lambda)));
        DiscreteSpectralMeasure { atoms, weights }
    }

    /// `int s_j^alpha dGamma` for every coordinate; equals `K_j` for an exponent measure.
    pub fn marginal_masses(&self, alpha: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.atoms.iter().zip(&self.weights).map(|(a, w)| w * a[j].powf(alpha)).sum())
            .collect()
    }

    /// Image under the linear map `diag(c)`, reprojected onto the simplex.
    pub fn rescaled(&self, c: &[f64], alpha: f64) -> Self {
        let ln_c: Vec<f64> = c.iter().map(|v| v.ln()).collect();
        self.rescaled_ln(&ln_c, alpha)
    }

    /// [`rescaled`](Self::rescaled) with `c` given on the log scale; weights
    /// stay finite even when `c` itself would overflow.
    fn rescaled_ln(&self, ln_c: &[f64], alpha: f64) -> Self {
        let shift = ln_c.iter().copied().filter(|v| v.is_finite()).fold(f64::MIN, f64::max);
        let c: Vec<f64> = ln_c.iter().map(|v| (v - shift).exp()).collect();
        let mut atoms = Vec::with_capacity(self.atoms.len());
        let mut weights = Vec::with_capacity(self.atoms.len());
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            let b: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x * y).collect();
            let norm = sum_norm(&b);
            if norm > 0.0 {
                atoms.push(b.iter().map(|v| v / norm).collect());
                weights.push(w * (alpha * (norm.ln() + shift)).exp());
            }
        }
        DiscreteSpectralMeasure { atoms, weights }
    }

    /// Rescales coordinates so that the marginal masses equal `k`.
    pub fn with_margins(&self, k: &[f64], alpha: f64) -> Self {
        let m = self.marginal_masses(alpha);
        let ln_c: Vec<f64> = k.iter().zip(&m).map(|(kj, mj)| (kj.ln() - mj.ln()) / alpha).collect();
        self.rescaled_ln(&ln_c, alpha)
    }

    /// Measure of the scaled vector `K^(-1/alpha) X`.
    pub fn scaled_by(&self, k: &[f64], alpha: f64) -> Self {
        let ln_c: Vec<f64> = k.iter().map(|v| -v.ln() / alpha).collect();
        self.rescaled_ln(&ln_c, alpha)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.total_mass();
        DiscreteSpectralMeasure {
            atoms: self.atoms.clone(),
            weights: self.weights.iter().map(|w| w / t).collect(),
        }
    }

    /// Random measure with marginal masses `k`: a random mixture of the axis
    /// measure, the comonotone atom and `n_inner` random interior atoms.
    pub fn random_interpolating<R: Rng + ?Sized>(k: &[f64], alpha: f64, n_inner: usize, rng: &mut R) -> Self {
        let d = k.len();
        let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(n_inner);
        for _ in 0..n_inner {
            let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let t: f64 = e.iter().sum();
            atoms.push(e.iter().map(|v| v / t).collect());
        }
        let weights = (0..n_inner).map(|_| rng.random::<f64>()).collect();
        let inner = DiscreteSpectralMeasure { atoms, weights };
        let ends = Self::axes(k).mix(&Self::comonotone(k, alpha), rng.random::<f64>());
        let mixed = if n_inner == 0 { ends } else { ends.mix(&inner.with_margins(k, alpha), rng.random::<f64>()) };
        mixed.with_margins(k, alpha)
    }

    /// Draws `n` angles i.i.d. from the normalized measure.
    pub fn sample_angles<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let total = self.total_mass();
        let mut cum = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w / total;
            cum.push(acc);
        }
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for r in 0..n {
            let u: f64 = rng.random();
            let idx = cum.iter().position(|c| u < *c).unwrap_or(cum.len() - 1);
            for j in 0..d {
                out[[r, j]] = self.atoms[idx][j];
            }
        }
        out
    }
}
