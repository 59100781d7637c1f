//! Distance covariance independence test with permutation calibration.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::marginals::TestResult;
use crate::par;
use crate::seed::child_rng;

pub const DEFAULT_PERMUTATIONS: usize = 199;
pub const MIN_OBSERVATIONS: usize = 20;
pub const METHOD: &str = "distance covariance (V-statistic), permutation p-value";

/// Double-centered Euclidean distance matrix of the rows of `x`.
fn centered_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            a[[i, j]] = d;
            a[[j, i]] = d;
        }
    }
    let row_means: Vec<f64> = a.rows().into_iter().map(|r| r.sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] += grand - row_means[i] - row_means[j];
        }
    }
    a
}

fn is_constant(x: ArrayView2<f64>) -> bool {
    let first = x.row(0);
    x.rows().into_iter().all(|r| r == first)
}

/// `(1/n^2) sum_kl A_kl B_{p(k) p(l)}`.
fn dcov(a: &Array2<f64>, b: &Array2<f64>, perm: Option<&[usize]>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    match perm {
        None => {
            for (x, y) in a.iter().zip(b.iter()) {
                s += x * y;
            }
        }
        Some(p) => {
            for k in 0..n {
                let bk = b.row(p[k]);
                for l in 0..n {
                    s += a[[k, l]] * bk[p[l]];
                }
            }
        }
    }
    (s / (n * n) as f64).max(0.0)
}

/// Squared empirical distance covariance between the rows of `u` and `v`.
pub fn distance_covariance(u: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<f64> {
    check(u, v)?;
    Ok(dcov(&centered_distances(u), &centered_distances(v), None))
}

fn check(u: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<()> {
    if u.nrows() != v.nrows() {
        return Err(Error::InvalidInput(format!("row counts differ: {} vs {}", u.nrows(), v.nrows())));
    }
    if u.nrows() < MIN_OBSERVATIONS {
        return Err(Error::InvalidInput(format!(
            "independence test needs at least {MIN_OBSERVATIONS} observations, got {}",
            u.nrows()
        )));
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("inputs must be finite".into()));
    }
    if is_constant(u) && is_constant(v) {
        return Err(Error::Degenerate("both inputs are constant; the statistic is undefined".into()));
    }
    Ok(())
}

/// Permutation test of independence between the rows of `u` and `v`.
/// Permutation `r` draws from its own child stream of `seed`.
pub fn independence_test(u: ArrayView2<f64>, v: ArrayView2<f64>, n_permutations: usize, seed: u64) -> Result<TestResult> {
    check(u, v)?;
    let n = u.nrows();
    let a = centered_distances(u);
    let b = centered_distances(v);
    let observed = dcov(&a, &b, None);
    let tol = 1e-12 * observed.abs();
    let perm_stats = par::map_indices(n_permutations, |r| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut child_rng(seed, 0, r as u64));
        dcov(&a, &b, Some(&p))
    });
    let exceed = perm_stats.iter().filter(|t| **t >= observed - tol).count();
    Ok(TestResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (n_permutations + 1) as f64,
        method: METHOD.into(),
        n_resamples: n_permutations,
        seed,
    })
}
