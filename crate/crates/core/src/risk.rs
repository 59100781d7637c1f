//! Risk constants, asymptotic VaR and CoTE, Euler allocation and dependence bounds.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginals::MarginalModel;
use crate::par;
use crate::spectral::{self, sum_norm, AngularSet, DiscreteSpectralMeasure};

pub const REPORT_SCHEMA: &str = "oprisk.risk_report/1";
pub const DEFAULT_GAMMAS: [f64; 3] = [0.05, 0.01, 0.001];

/// Estimated constants for one angular set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskConstants {
    pub alpha: f64,
    pub c_system: f64,
    pub c_unit: Vec<f64>,
    /// Absent when `alpha <= 1`.
    pub ca: Option<Vec<f64>>,
    pub k_used: usize,
    pub k_method: String,
}

/// Quantity whose constant is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    System,
    /// Zero-based unit index.
    Unit(usize),
}

pub fn risk_constant_system(angular: &AngularSet, networks: &[Array2<f64>], alpha: f64) -> Result<f64> {
    spectral::spectral_integral(angular, networks, sum_norm, alpha)
}

pub fn risk_constant_unit(angular: &AngularSet, networks: &[Array2<f64>], i: usize, alpha: f64) -> Result<f64> {
    let q = networks.first().map(|a| a.nrows()).unwrap_or(0);
    if i >= q {
        return Err(Error::InvalidInput(format!("unit {} out of range 1..={q}", i + 1)));
    }
    spectral::spectral_integral(angular, networks, |v| v[i], alpha)
}

fn require_finite_mean(alpha: f64) -> Result<()> {
    if alpha <= 1.0 {
        return Err(Error::Domain(format!("allocation requires finite mean (alpha = {alpha} <= 1)")));
    }
    Ok(())
}

fn allocation_factors(angular: &AngularSet, networks: &[Array2<f64>], alpha: f64) -> Result<Vec<f64>> {
    let q = networks.first().map(|a| a.nrows()).unwrap_or(0);
    spectral::spectral_integrals_raw(
        angular,
        networks,
        q,
        |v, acc| {
            let w = sum_norm(v).powf(alpha - 1.0);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        },
        alpha,
        0,
    )
}

/// `CA_i = C_S^(1/alpha - 1) * int ||As||^(alpha-1) (As)_i`, so that the
/// constants add up to `C_S^(1/alpha)`.
pub fn allocation_constants(
    angular: &AngularSet,
    networks: &[Array2<f64>],
    alpha: f64,
    c_system: f64,
) -> Result<Vec<f64>> {
    require_finite_mean(alpha)?;
    if !(c_system > 0.0) {
        return Err(Error::Domain(format!("system constant must be positive, got {c_system}")));
    }
    let f = allocation_factors(angular, networks, alpha)?;
    let scale = c_system.powf(1.0 / alpha - 1.0);
    Ok(f.into_iter().map(|v| v * scale).collect())
}

/// System, unit and (for `alpha > 1`) allocation constants in one pass.
pub fn estimate_constants(
    angular: &AngularSet,
    networks: &[Array2<f64>],
    alpha: f64,
    k_method: &str,
) -> Result<RiskConstants> {
    let q = networks.first().map(|a| a.nrows()).unwrap_or(0);
    let with_ca = alpha > 1.0;
    let n_out = if with_ca { 1 + 2 * q } else { 1 + q };
    let out = spectral::spectral_integrals_raw(
        angular,
        networks,
        n_out,
        |v, acc| {
            let norm = sum_norm(v);
            acc[0] += norm.powf(alpha);
            for (i, x) in v.iter().enumerate() {
                acc[1 + i] += x.powf(alpha);
            }
            if with_ca {
                let w = norm.powf(alpha - 1.0);
                for (i, x) in v.iter().enumerate() {
                    acc[1 + q + i] += w * x;
                }
            }
        },
        alpha,
        0,
    )?;
    let c_system = out[0];
    let ca = if with_ca && c_system > 0.0 {
        let scale = c_system.powf(1.0 / alpha - 1.0);
        Some(out[1 + q..].iter().map(|v| v * scale).collect())
    } else {
        None
    };
    Ok(RiskConstants {
        alpha,
        c_system,
        c_unit: out[1..1 + q].to_vec(),
        ca,
        k_used: angular.k,
        k_method: k_method.to_string(),
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("tail probability must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

/// `C^(1/alpha) gamma^(-1/alpha)`.
pub fn var_asym(c: f64, alpha: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(c >= 0.0) || !(alpha > 0.0) {
        return Err(Error::Domain(format!("need C >= 0 and alpha > 0, got C = {c}, alpha = {alpha}")));
    }
    Ok(c.powf(1.0 / alpha) * gamma.powf(-1.0 / alpha))
}

pub fn cote_asym(c: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if alpha <= 1.0 {
        return Err(Error::Domain(format!("CoTE undefined for alpha <= 1 (alpha = {alpha})")));
    }
    Ok(alpha / (alpha - 1.0) * var_asym(c, alpha, gamma)?)
}

fn mean_over<F: Fn(&Array2<f64>) -> f64>(networks: &[Array2<f64>], f: F) -> f64 {
    networks.iter().map(f).sum::<f64>() / networks.len() as f64
}

/// Constants under asymptotic independence and under full dependence.
pub fn bounds_constants(k: &[f64], alpha: f64, networks: &[Array2<f64>], target: Target) -> Result<(f64, f64)> {
    if let Some(v) = k.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("scaling constants must be positive, got {v}")));
    }
    let d = k.len();
    let q = networks
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one network matrix is required".into()))?
        .nrows();
    if networks.iter().any(|a| a.dim() != (q, d)) {
        return Err(Error::InvalidInput("network shapes do not match the margins".into()));
    }
    if let Target::Unit(i) = target {
        if i >= q {
            return Err(Error::InvalidInput(format!("unit {} out of range 1..={q}", i + 1)));
        }
    }
    // K^(1/alpha) relative to the largest K, so small alpha cannot overflow
    let kmax = k.iter().copied().fold(0.0, f64::max);
    let root: Vec<f64> = k.iter().map(|v| (v / kmax).powf(1.0 / alpha)).collect();
    let c_ind = mean_over(networks, |a| {
        (0..d)
            .map(|j| {
                let col = a.column(j);
                let x = match target {
                    Target::System => col.sum(),
                    Target::Unit(i) => col[i],
                };
                k[j] * x.powf(alpha)
            })
            .sum()
    });
    let c_dep = mean_over(networks, |a| {
        let v = a.dot(&ndarray::ArrayView1::from(&root));
        kmax * match target {
            Target::System => v.sum().powf(alpha),
            Target::Unit(i) => v[i].powf(alpha),
        }
    });
    Ok((c_ind, c_dep))
}

/// Exact constant for a discrete (unnormalized) spectral measure:
/// mean over networks of `sum_atoms w f(A a)^alpha`.
pub fn theoretical_constant<F>(
    measure: &DiscreteSpectralMeasure,
    networks: &[Array2<f64>],
    f: F,
    alpha: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if networks.is_empty() {
        return Err(Error::InvalidInput("at least one network matrix is required".into()));
    }
    let d = measure.dim();
    if networks.iter().any(|a| a.ncols() != d) {
        return Err(Error::InvalidInput("network shapes do not match the measure".into()));
    }
    Ok(mean_over(networks, |a| {
        measure
            .atoms
            .iter()
            .zip(&measure.weights)
            .map(|(s, w)| {
                let v = a.dot(&ndarray::ArrayView1::from(s.as_slice()));
                w * f(v.as_slice().expect("contiguous")).powf(alpha)
            })
            .sum()
    }))
}

/// Exact allocation factor `mean_A sum_atoms w ||A a||^(alpha-1) (A a)_i`.
pub fn theoretical_allocation(
    measure: &DiscreteSpectralMeasure,
    networks: &[Array2<f64>],
    alpha: f64,
    i: usize,
) -> Result<f64> {
    require_finite_mean(alpha)?;
    if networks.is_empty() || networks.iter().any(|a| a.ncols() != measure.dim() || i >= a.nrows()) {
        return Err(Error::InvalidInput("network shapes do not match the measure or unit".into()));
    }
    Ok(mean_over(networks, |a| {
        measure
            .atoms
            .iter()
            .zip(&measure.weights)
            .map(|(s, w)| {
                let v = a.dot(&ndarray::ArrayView1::from(s.as_slice()));
                w * v.sum().powf(alpha - 1.0) * v[i]
            })
            .sum()
    }))
}

/// Independence and comonotone constants for the system and each unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    pub system: (f64, f64),
    pub units: Vec<(f64, f64)>,
}

pub fn bound_set(k: &[f64], alpha: f64, networks: &[Array2<f64>]) -> Result<BoundSet> {
    let q = networks.first().map(|a| a.nrows()).unwrap_or(0);
    Ok(BoundSet {
        system: bounds_constants(k, alpha, networks, Target::System)?,
        units: (0..q)
            .map(|i| bounds_constants(k, alpha, networks, Target::Unit(i)))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRisk {
    pub unit: usize,
    pub var: f64,
    pub cote: Option<f64>,
    /// Euler contribution to the system VaR.
    pub contribution: Option<f64>,
    /// Euler contribution to the system CoTE.
    pub cote_contribution: Option<f64>,
    pub var_ind: Option<f64>,
    pub var_dep: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRisk {
    /// Tail probability.
    pub gamma: f64,
    pub confidence: f64,
    pub system_var: f64,
    pub system_cote: Option<f64>,
    pub system_var_ind: Option<f64>,
    pub system_var_dep: Option<f64>,
    pub units: Vec<UnitRisk>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: Option<String>,
    pub k: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub schema: String,
    pub alpha: f64,
    pub cote_defined: bool,
    pub notes: Vec<String>,
    pub constants: RiskConstants,
    pub bounds: Option<BoundSet>,
    pub levels: Vec<LevelRisk>,
    pub provenance: Provenance,
}

fn opt_var(c: Option<f64>, alpha: f64, gamma: f64) -> Result<Option<f64>> {
    c.map(|c| var_asym(c, alpha, gamma)).transpose()
}

pub fn build_report(
    model: &MarginalModel,
    constants: &RiskConstants,
    gammas: &[f64],
    bounds: Option<BoundSet>,
) -> Result<RiskReport> {
    let alpha = constants.alpha;
    if (model.alpha - alpha).abs() > 1e-12 * alpha {
        return Err(Error::Domain(format!(
            "model tail index {} differs from constants tail index {alpha}",
            model.alpha
        )));
    }
    let gammas: Vec<f64> = if gammas.is_empty() { DEFAULT_GAMMAS.to_vec() } else { gammas.to_vec() };
    for g in &gammas {
        check_gamma(*g)?;
    }
    let cote_defined = alpha > 1.0;
    let mut notes = Vec::new();
    if !cote_defined {
        notes.push(format!(
            "alpha = {alpha} <= 1: infinite mean, CoTE and risk contributions omitted"
        ));
    }
    let ratio = alpha / (alpha - 1.0);
    let levels: Vec<Result<LevelRisk>> = par::map_slice(&gammas, |&gamma| {
        let g = gamma.powf(-1.0 / alpha);
        let system_var = var_asym(constants.c_system, alpha, gamma)?;
        let units = constants
            .c_unit
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let var = var_asym(c, alpha, gamma)?;
                let contribution = if cote_defined { constants.ca.as_ref().map(|ca| g * ca[i]) } else { None };
                Ok(UnitRisk {
                    unit: i + 1,
                    var,
                    cote: cote_defined.then_some(ratio * var),
                    contribution,
                    cote_contribution: contribution.map(|c| ratio * c),
                    var_ind: opt_var(bounds.as_ref().map(|b| b.units[i].0), alpha, gamma)?,
                    var_dep: opt_var(bounds.as_ref().map(|b| b.units[i].1), alpha, gamma)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LevelRisk {
            gamma,
            confidence: 1.0 - gamma,
            system_var,
            system_cote: cote_defined.then_some(ratio * system_var),
            system_var_ind: opt_var(bounds.as_ref().map(|b| b.system.0), alpha, gamma)?,
            system_var_dep: opt_var(bounds.as_ref().map(|b| b.system.1), alpha, gamma)?,
            units,
        })
    });
    Ok(RiskReport {
        schema: REPORT_SCHEMA.into(),
        alpha,
        cote_defined,
        notes,
        constants: constants.clone(),
        bounds,
        levels: levels.into_iter().collect::<Result<_>>()?,
        provenance: Provenance { model_hash: None, k: constants.k_used, seeds: Vec::new() },
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl RiskReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV: `unit,gamma,var,cote,contribution,c_ind,c_dep`; the system
    /// row uses `unit = system` and `contribution` carries the summed shares.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit,gamma,var,cote,contribution,c_ind,c_dep\n");
        for level in &self.levels {
            let total = level.units.iter().map(|u| u.contribution).sum::<Option<f64>>();
            out.push_str(&format!(
                "system,{},{},{},{},{},{}\n",
                level.gamma,
                level.system_var,
                cell(level.system_cote),
                cell(total),
                cell(self.bounds.as_ref().map(|b| b.system.0)),
                cell(self.bounds.as_ref().map(|b| b.system.1)),
            ));
            for u in &level.units {
                let b = self.bounds.as_ref().map(|b| b.units[u.unit - 1]);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    u.unit,
                    level.gamma,
                    u.var,
                    cell(u.cote),
                    cell(u.contribution),
                    cell(b.map(|b| b.0)),
                    cell(b.map(|b| b.1)),
                ));
            }
        }
        out
    }
}

/// `k,estimate,reference` rows for plotting stability in `k`.
pub fn curve_csv(points: &[(usize, f64)], reference: Option<f64>) -> String {
    let mut out = String::from(if reference.is_some() { "k,estimate,reference\n" } else { "k,estimate\n" });
    for (k, v) in points {
        match reference {
            Some(r) => out.push_str(&format!("{k},{v},{r}\n")),
            None => out.push_str(&format!("{k},{v}\n")),
        }
    }
    out
}
