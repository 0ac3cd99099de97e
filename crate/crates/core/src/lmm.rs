//! Linear mixed model with known `sigma^2` and `D` and a flat prior on `beta`:
//!
//! ```text
//! y_i = X_i W_i beta + X_i alpha~_i + eps_i,   alpha~_i ~ N((I - W_i) beta, D)
//! ```
//!
//! Mean-field VB alternates closed-form Gaussian updates for `q(beta)` and
//! each `q(alpha~_i)`. With the tuning matrices from [`compute_w_lmm`] the
//! `beta` update no longer depends on `alpha~`, so one cycle reaches the
//! fixed point and the factorised posterior is exact.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Spd};
use crate::model::ClusterData;

/// `W = (X^T X / sigma^2 + D^{-1})^{-1} D^{-1}`.
pub fn compute_w_lmm(x: &DMatrix<f64>, sigma2: f64, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain {
            func: "compute_w_lmm",
            msg: format!("residual variance must be positive, got {sigma2}"),
        });
    }
    let d_inv = Spd::new(d, "D")?.inverse();
    let a = x.transpose() * x / sigma2 + &d_inv;
    Ok(Spd::new(&a, "X^T X / sigma^2 + D^{-1}")?.solve(&d_inv))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmmTuning {
    Centered,
    Noncentered,
    /// Per-cluster `W_i` from [`compute_w_lmm`].
    Optimal,
    Given(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub mu_beta: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub mu_alpha: Vec<DVector<f64>>,
    pub sigma_alpha: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    /// Max-abs change of all means and covariances, one entry per cycle.
    pub change_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmmFit {
    /// Number of cycles after which nothing moved, or `None` if the
    /// iteration never settled.
    pub fn cycles_to_fixed_point(&self, tol: f64) -> Option<usize> {
        self.change_trace.iter().skip(1).position(|&c| c <= tol).map(|k| k + 1)
    }
}

/// Runs the cyclic updates from `mu_alpha = 0`, `Sigma_alpha = D`, using
/// `X^R` of each cluster as its design.
pub fn lmm_fit(
    clusters: &[ClusterData],
    sigma2: f64,
    d: &DMatrix<f64>,
    tuning: &LmmTuning,
    tol: f64,
    max_iter: usize,
) -> Result<LmmFit> {
    let r = d.nrows();
    let n = clusters.len();
    if n == 0 {
        return Err(Error::InvalidData(vec!["no clusters".into()]));
    }
    for c in clusters {
        if c.xr.ncols() != r {
            return Err(Error::shape("X_i columns", r, c.xr.ncols()));
        }
    }
    let d_inv = Spd::new(d, "D")?.inverse();
    let eye = DMatrix::<f64>::identity(r, r);
    let w: Vec<DMatrix<f64>> = match tuning {
        LmmTuning::Centered => vec![DMatrix::zeros(r, r); n],
        LmmTuning::Noncentered => vec![eye.clone(); n],
        LmmTuning::Optimal => clusters.iter().map(|c| compute_w_lmm(&c.xr, sigma2, d)).collect::<Result<_>>()?,
        LmmTuning::Given(ws) => {
            if ws.len() != n {
                return Err(Error::shape("tuning matrices", n, ws.len()));
            }
            ws.clone()
        }
    };

    let xtx: Vec<DMatrix<f64>> = clusters.iter().map(|c| c.xr.transpose() * &c.xr / sigma2).collect();
    let xty: Vec<DVector<f64>> = clusters.iter().map(|c| c.xr.transpose() * &c.y / sigma2).collect();
    // coupling B_i = D^{-1}(I - W_i) - X_i^T X_i W_i / sigma^2
    let coupling: Vec<DMatrix<f64>> = (0..n).map(|i| &d_inv * (&eye - &w[i]) - &xtx[i] * &w[i]).collect();

    let mut prec_beta = DMatrix::zeros(r, r);
    for i in 0..n {
        let a = &eye - &w[i];
        prec_beta += a.transpose() * &d_inv * &a + w[i].transpose() * &xtx[i] * &w[i];
    }
    let beta_chol = Spd::new(&symmetrize(&prec_beta), "flat-prior beta precision").map_err(|_| {
        Error::RankDeficient(vec![format!("beta normal equations are singular under the chosen W (r = {r})")])
    })?;
    let sigma_beta = beta_chol.inverse();
    let alpha_chol: Vec<Spd> = (0..n)
        .map(|i| Spd::new(&(&d_inv + &xtx[i]), "D^{-1} + X^T X / sigma^2"))
        .collect::<Result<_>>()?;
    let sigma_alpha: Vec<DMatrix<f64>> = alpha_chol.iter().map(Spd::inverse).collect();

    let mut mu_beta = DVector::zeros(r);
    let mut mu_alpha = vec![DVector::zeros(r); n];
    let mut change_trace = Vec::new();
    let mut converged = false;
    let mut first = true;
    for _ in 0..max_iter {
        let mut rhs = DVector::zeros(r);
        for i in 0..n {
            rhs += w[i].transpose() * &xty[i] + coupling[i].transpose() * &mu_alpha[i];
        }
        let new_beta = beta_chol.solve_vec(&rhs);
        let mut change = (&new_beta - &mu_beta).abs().max();
        for i in 0..n {
            let a = alpha_chol[i].solve_vec(&(&xty[i] + &coupling[i] * &new_beta));
            change = change.max((&a - &mu_alpha[i]).abs().max());
            mu_alpha[i] = a;
        }
        if first {
            // covariances are set on the first pass and never change
            change = change.max(sigma_beta.abs().max());
            first = false;
        }
        mu_beta = new_beta;
        change_trace.push(change);
        if change <= tol && change_trace.len() > 1 {
            converged = true;
            break;
        }
    }
    Ok(LmmFit {
        mu_beta,
        sigma_beta,
        mu_alpha,
        sigma_alpha,
        w,
        iterations: change_trace.len(),
        change_trace,
        converged,
    })
}
