//! Natural-parameter fixed-point update for a Gaussian variational factor.
//!
//! A Gaussian `N(mu, Sigma)` on `R^d` is written in exponential-family form
//! with sufficient statistics `[vech(theta theta^T); theta]` and natural
//! parameters
//!
//! ```text
//! lambda_1 = -1/2 D_d^T vec(Sigma^{-1}),   lambda_2 = Sigma^{-1} mu.
//! ```
//!
//! The nonconjugate message-passing step is `lambda <- V(lambda)^{-1} U(lambda) g`
//! where `g = [dS/dvec(Sigma); dS/dmu]`. This module builds that step from
//! explicit duplication matrices and Kronecker products and, alongside it,
//! the mean/covariance form
//!
//! ```text
//! Sigma <- -1/2 [vec^{-1}(dS/dvec(Sigma))]^{-1},   mu <- mu + Sigma dS/dmu
//! ```
//!
//! that the production updates use. It is meant for small `d`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Spd};

/// `vec(A)`: columns stacked left to right.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

pub fn unvec(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(d, d, v.as_slice())
}

/// `vech(A)`: the on-and-below-diagonal part of `vec(A)`.
pub fn vech(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            out.push(a[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Symmetric matrix with the given `vech`.
pub fn unvech(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            a[(i, j)] = v[k];
            a[(j, i)] = v[k];
            k += 1;
        }
    }
    a
}

/// `D_d`, the `d^2 x d(d+1)/2` matrix with `D_d vech(A) = vec(A)` for
/// symmetric `A`.
pub fn duplication_matrix(d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d * d, d * (d + 1) / 2);
    for j in 0..d {
        for i in 0..d {
            m[(j * d + i, vech_position(d, i, j))] = 1.0;
        }
    }
    m
}

fn vech_position(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    let before: usize = (0..j).map(|c| d - c).sum();
    before + (i - j)
}

/// Moore–Penrose inverse `D_d^+ = (D_d^T D_d)^{-1} D_d^T`.
pub fn duplication_pinv(d: usize) -> DMatrix<f64> {
    let dd = duplication_matrix(d);
    // D_d^T D_d is diagonal: 1 for diagonal entries, 2 for off-diagonal ones
    let gram = dd.transpose() * &dd;
    let mut out = dd.transpose();
    for (k, mut row) in out.row_iter_mut().enumerate() {
        row /= gram[(k, k)];
    }
    out
}

/// `[lambda_1; lambda_2]` for `N(mu, Sigma)`.
pub fn natural_params(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = mu.len();
    let prec = Spd::new(sigma, "Gaussian covariance")?.inverse();
    let l1 = duplication_matrix(d).transpose() * vec(&prec) * -0.5;
    let l2 = &prec * mu;
    Ok(stack(&l1, &l2))
}

/// Inverse of [`natural_params`]: recovers `(mu, Sigma)` from `lambda`.
pub fn moments_from_natural(lambda: &DVector<f64>, d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = d * (d + 1) / 2;
    if lambda.len() != k + d {
        return Err(Error::shape("natural parameter", k + d, lambda.len()));
    }
    let prec = precision_from_lambda1(&lambda.rows(0, k).into_owned(), d);
    let spd = Spd::new(&prec, "natural precision")?;
    let mu = spd.solve_vec(&lambda.rows(k, d).into_owned());
    Ok((mu, spd.inverse()))
}

/// `vech(P) = (D_d^T D_d)^{-1} (-2 lambda_1)`.
fn precision_from_lambda1(l1: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let dd = duplication_matrix(d);
    let gram = dd.transpose() * &dd;
    let v = DVector::from_fn(l1.len(), |k, _| -2.0 * l1[k] / gram[(k, k)]);
    unvech(&v, d)
}

/// Log-partition `h(lambda) = 1/2 mu^T Sigma^{-1} mu + 1/2 log|Sigma| + d/2 log(2 pi)`.
pub fn log_partition(lambda: &DVector<f64>, d: usize) -> Result<f64> {
    let k = d * (d + 1) / 2;
    let prec = precision_from_lambda1(&lambda.rows(0, k).into_owned(), d);
    let spd = Spd::new(&prec, "natural precision")?;
    let l2 = lambda.rows(k, d).into_owned();
    let quad = l2.dot(&spd.solve_vec(&l2));
    Ok(0.5 * quad - 0.5 * spd.logdet() + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// `U(lambda)`: Jacobian of `(vec(Sigma), mu)` with respect to `lambda`.
pub fn u_matrix(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = mu.len();
    let k = d * (d + 1) / 2;
    let dp = duplication_pinv(d);
    let mut u = DMatrix::zeros(k + d, d * d + d);
    u.view_mut((0, 0), (k, d * d)).copy_from(&(&dp * sigma.kronecker(sigma) * 2.0));
    u.view_mut((0, d * d), (k, d)).copy_from(&(&dp * mu.kronecker(sigma) * 2.0));
    u.view_mut((k, d * d), (d, d)).copy_from(sigma);
    u
}

/// `V(lambda)`: covariance of the sufficient statistics.
pub fn v_matrix(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = mu.len();
    let k = d * (d + 1) / 2;
    let dp = duplication_pinv(d);
    let mm = mu * mu.transpose();
    let inner = mm.kronecker(sigma) + sigma.kronecker(&mm) + sigma.kronecker(sigma);
    let top_left = &dp * inner * dp.transpose() * 2.0;
    let top_right = &dp * mu.kronecker(sigma) * 2.0;
    let mut v = DMatrix::zeros(k + d, k + d);
    v.view_mut((0, 0), (k, k)).copy_from(&top_left);
    v.view_mut((0, k), (k, d)).copy_from(&top_right);
    v.view_mut((k, 0), (d, k)).copy_from(&top_right.transpose());
    v.view_mut((k, k), (d, d)).copy_from(sigma);
    v
}

/// Both forms of one Gaussian update.
#[derive(Debug, Clone)]
pub struct GaussianUpdate {
    /// `V(lambda)^{-1} U(lambda) g`.
    pub generic: DVector<f64>,
    /// Natural parameters of the mean/covariance form.
    pub simplified: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// One update of `N(mu, Sigma)` given `g_sigma = dS/dvec(Sigma)` (length
/// `d^2`, a vectorised symmetric matrix) and `g_mu = dS/dmu`.
pub fn generic_gaussian_update(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    g_sigma: &DVector<f64>,
    g_mu: &DVector<f64>,
) -> Result<GaussianUpdate> {
    let d = mu.len();
    if sigma.shape() != (d, d) {
        return Err(Error::shape("Sigma", format!("{d}x{d}"), format!("{}x{}", sigma.nrows(), sigma.ncols())));
    }
    if g_sigma.len() != d * d {
        return Err(Error::shape("dS/dvec(Sigma)", d * d, g_sigma.len()));
    }
    if g_mu.len() != d {
        return Err(Error::shape("dS/dmu", d, g_mu.len()));
    }
    let v = v_matrix(mu, sigma);
    let rhs = u_matrix(mu, sigma) * stack(g_sigma, g_mu);
    let generic = v.lu().solve(&rhs).ok_or_else(|| Error::Domain {
        func: "generic_gaussian_update",
        msg: "V(lambda) is singular".into(),
    })?;

    let grad = symmetrize(&unvec(g_sigma, d));
    let new_sigma = Spd::new(&(-2.0 * &grad), "-2 dS/dSigma")?.inverse();
    let new_mu = mu + &new_sigma * g_mu;
    let simplified = natural_params(&new_mu, &new_sigma)?;
    Ok(GaussianUpdate {
        generic,
        simplified,
        mu: new_mu,
        sigma: new_sigma,
    })
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}
