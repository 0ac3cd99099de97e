//! Starting values from a pooled GLM fit (random effects set to zero) and
//! the data-driven inverse-Wishart prior
//!
//! ```text
//! R^ = c (n^{-1} sum_i X^R_i^T M_i(beta^) X^R_i)^{-1},   nu = r,   S = r R^
//! ```
//!
//! where `M_i` holds the GLM working weights.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{compute_w_glmm, fit, FitOptions};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, weighted_gram, Spd};
use crate::model::{build_cluster_design, ClusterState, Dataset, Family, FitResult, Parametrization, PriorSpec, VariationalState};
use crate::special::logistic;

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-10;
/// `|beta^|` beyond this is taken as a sign of separation.
const SEPARATION_BOUND: f64 = 30.0;
const SEPARATION_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta_hat: DVector<f64>,
    /// Diagonal of `M_i(beta^)` for each cluster.
    pub weights: Vec<DVector<f64>>,
    /// `X_i beta^`, excluding offsets.
    pub eta: Vec<DVector<f64>>,
    /// `(X^T M X)^{-1}` at `beta^`.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub deviance_trace: Vec<f64>,
    /// Whether the separation ridge was switched on.
    pub ridged: bool,
}

/// Names the columns of `x` that are linear combinations of earlier ones.
pub fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for k in 0..x.ncols() {
        let mut v = x.column(k).into_owned();
        let scale = v.norm();
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        // second pass keeps Gram–Schmidt stable
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let resid = v.norm();
        if scale == 0.0 || resid <= 1e-9 * scale {
            bad.push(names.get(k).cloned().unwrap_or_else(|| format!("column {k}")));
        } else {
            basis.push(v / resid);
        }
    }
    bad
}

fn deviance(family: Family, y: f64, mean: f64) -> f64 {
    match family {
        Family::Poisson => {
            let t = if y > 0.0 { y * (y / mean).ln() } else { 0.0 };
            2.0 * (t - (y - mean))
        }
        Family::Bernoulli => {
            let m = mean.clamp(1e-300, 1.0 - 1e-16);
            -2.0 * if y > 0.5 { m.ln() } else { (1.0 - m).ln() }
        }
    }
}

/// Pooled GLM by iteratively reweighted least squares.
pub fn glm_irls(ds: &Dataset) -> Result<GlmFit> {
    let designs: Vec<DMatrix<f64>> = ds.clusters.iter().map(|c| c.fixed_design()).collect();
    let p = ds.p();
    let n_obs = ds.n_obs();
    let mut pooled = DMatrix::zeros(n_obs, p);
    let mut row = 0;
    for x in &designs {
        pooled.view_mut((row, 0), (x.nrows(), p)).copy_from(x);
        row += x.nrows();
    }
    let bad = collinear_columns(&pooled, &ds.fixed_names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }

    let log_offset: Vec<DVector<f64>> = ds
        .clusters
        .iter()
        .map(|c| match ds.family {
            Family::Poisson => c.offset.map(f64::ln),
            Family::Bernoulli => DVector::zeros(c.len()),
        })
        .collect();

    // starting means
    let mut eta: Vec<DVector<f64>> = ds
        .clusters
        .iter()
        .map(|c| match ds.family {
            Family::Poisson => c.y.map(|y| (y + 0.5).ln()),
            Family::Bernoulli => c.y.map(|y| {
                let m = (y + 0.5) / 2.0;
                (m / (1.0 - m)).ln()
            }),
        })
        .collect();

    let working = |eta: &[DVector<f64>]| -> (Vec<DVector<f64>>, Vec<DVector<f64>>, f64) {
        let mut ws = Vec::with_capacity(eta.len());
        let mut zs = Vec::with_capacity(eta.len());
        let mut dev = 0.0;
        for ((c, e), lo) in ds.clusters.iter().zip(eta).zip(&log_offset) {
            let n = c.len();
            let mut w = DVector::zeros(n);
            let mut z = DVector::zeros(n);
            for j in 0..n {
                let (mean, var) = match ds.family {
                    Family::Poisson => {
                        let m = e[j].exp();
                        (m, m)
                    }
                    Family::Bernoulli => {
                        let m = logistic(e[j]);
                        (m, m * (1.0 - m))
                    }
                };
                let var = var.max(1e-12);
                w[j] = var;
                z[j] = e[j] - lo[j] + (c.y[j] - mean) / var;
                dev += deviance(ds.family, c.y[j], mean);
            }
            ws.push(w);
            zs.push(z);
        }
        (ws, zs, dev)
    };

    let mut beta = DVector::zeros(p);
    let mut ridge = 0.0;
    let mut ridged = false;
    let mut trace = Vec::new();
    let mut converged = false;
    let (mut w, mut z, mut dev) = working(&eta);
    for _ in 0..IRLS_MAX_ITER {
        let mut xtwx = DMatrix::identity(p, p) * ridge;
        let mut xtwz = DVector::zeros(p);
        for ((x, wi), zi) in designs.iter().zip(&w).zip(&z) {
            xtwx += weighted_gram(x, wi);
            xtwz += x.transpose() * wi.component_mul(zi);
        }
        beta = Spd::new(&xtwx, "X^T M X")?.solve_vec(&xtwz);
        if !ridged && beta.amax() > SEPARATION_BOUND {
            warn!("pooled GLM coefficients diverge (max |beta| = {:.1}); possible separation, adding ridge {SEPARATION_RIDGE}", beta.amax());
            ridge = SEPARATION_RIDGE;
            ridged = true;
        }
        eta = designs
            .iter()
            .zip(&log_offset)
            .map(|(x, lo)| x * &beta + lo)
            .collect();
        let old = dev;
        (w, z, dev) = working(&eta);
        trace.push(dev);
        if (dev - old).abs() / (dev.abs() + 0.1) < IRLS_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("pooled GLM did not converge in {IRLS_MAX_ITER} iterations");
    }
    let mut info = DMatrix::identity(p, p) * ridge;
    for (x, wi) in designs.iter().zip(&w) {
        info += weighted_gram(x, wi);
    }
    let covariance = Spd::new(&symmetrize(&info), "X^T M X")?.inverse();
    Ok(GlmFit {
        eta: designs.iter().map(|x| x * &beta).collect(),
        beta_hat: beta,
        weights: w,
        covariance,
        converged,
        deviance_trace: trace,
        ridged,
    })
}

/// `R^ = c (n^{-1} sum_i X^R_i^T M_i X^R_i)^{-1}`.
pub fn first_stage_covariance(ds: &Dataset, fit: &GlmFit, c: f64) -> Result<DMatrix<f64>> {
    if !(c > 0.0) {
        return Err(Error::Domain {
            func: "first_stage_covariance",
            msg: format!("inflation factor must be positive, got {c}"),
        });
    }
    let r = ds.r;
    let mut info = DMatrix::zeros(r, r);
    for (cl, w) in ds.clusters.iter().zip(&fit.weights) {
        info += weighted_gram(&cl.xr, w);
    }
    info /= ds.n() as f64;
    Ok(Spd::new(&info, "average random-effects information")?.inverse() * c)
}

/// Prior `(nu, S) = (r, r R^)`.
pub fn prior_scale_from_data(ds: &Dataset, fit: &GlmFit, c: f64) -> Result<(f64, DMatrix<f64>)> {
    let r_hat = first_stage_covariance(ds, fit, c)?;
    Ok((ds.r as f64, r_hat * ds.r as f64))
}

/// Initial tuning matrices for a parametrization.
pub fn initial_tuning(ds: &Dataset, fit: &GlmFit, r_hat: &DMatrix<f64>, parametrization: Parametrization) -> Result<Vec<DMatrix<f64>>> {
    let r = ds.r;
    ds.clusters
        .iter()
        .zip(&fit.eta)
        .map(|(c, eta)| match parametrization {
            Parametrization::Centered => Ok(DMatrix::zeros(r, r)),
            Parametrization::Noncentered => Ok(DMatrix::identity(r, r)),
            Parametrization::PartialFixed | Parametrization::PartialAdaptive => compute_w_glmm(ds.family, c, r_hat, eta),
        })
        .collect()
}

/// Starting state: `q(beta)` from the GLM fit, `alpha~_i` at its prior mean
/// `(I - W_i) C_i beta^{RG1}` with covariance `R^`, and `S^q = S + n R^`.
pub fn init_state(
    ds: &Dataset,
    prior: &PriorSpec,
    fit: &GlmFit,
    r_hat: &DMatrix<f64>,
    parametrization: Parametrization,
) -> Result<VariationalState> {
    let (r, g1) = (ds.r, ds.g1);
    let tuning = initial_tuning(ds, fit, r_hat, parametrization)?;
    let brg1 = fit.beta_hat.rows(0, r + g1).into_owned();
    let clusters = ds
        .clusters
        .iter()
        .zip(tuning)
        .map(|(c, w)| {
            let design = build_cluster_design(c, &w)?;
            let mu_alpha = (DMatrix::identity(r, r) - &w) * &design.c * &brg1;
            Ok(ClusterState {
                mu_alpha,
                sigma_alpha: r_hat.clone(),
                w,
                v: design.v,
                w_tilde: design.w_tilde,
                c: design.c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalState {
        mu_beta: fit.beta_hat.clone(),
        sigma_beta: fit.covariance.clone(),
        nu_q: ds.n() as f64 + prior.nu,
        s_q: &prior.s + r_hat * ds.n() as f64,
        clusters,
    })
}

/// How the prior is chosen; unset fields fall back to the data-driven
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// `Sigma_beta = sigma_beta_scale * I`.
    pub sigma_beta_scale: f64,
    pub nu: Option<f64>,
    /// Row-major `r x r` scale matrix.
    pub s: Option<Vec<Vec<f64>>>,
    /// Inflation factor for `R^`.
    pub c: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            sigma_beta_scale: 1000.0,
            nu: None,
            s: None,
            c: 1.0,
        }
    }
}

/// Everything needed to start a fit.
#[derive(Debug, Clone)]
pub struct Start {
    pub prior: PriorSpec,
    pub state: VariationalState,
    pub glm: GlmFit,
    pub r_hat: DMatrix<f64>,
}

pub fn prepare(ds: &Dataset, config: &PriorConfig, parametrization: Parametrization) -> Result<Start> {
    let glm = glm_irls(ds)?;
    let r_hat = first_stage_covariance(ds, &glm, config.c)?;
    let (nu_default, s_default) = prior_scale_from_data(ds, &glm, config.c)?;
    let s = match &config.s {
        Some(rows) => {
            let r = ds.r;
            if rows.len() != r || rows.iter().any(|row| row.len() != r) {
                return Err(Error::Config(format!("prior S must be {r}x{r}")));
            }
            DMatrix::from_fn(r, r, |a, b| rows[a][b])
        }
        None => s_default,
    };
    if !(config.sigma_beta_scale > 0.0) {
        return Err(Error::Config(format!("sigma_beta_scale must be positive, got {}", config.sigma_beta_scale)));
    }
    let prior = PriorSpec::new(
        DMatrix::identity(ds.p(), ds.p()) * config.sigma_beta_scale,
        config.nu.unwrap_or(nu_default),
        s,
    )?;
    let state = init_state(ds, &prior, &glm, &r_hat, parametrization)?;
    Ok(Start { prior, state, glm, r_hat })
}

/// GLM start, data-driven prior, then [`fit`].
pub fn fit_model(ds: &Dataset, config: &PriorConfig, parametrization: Parametrization, options: &FitOptions) -> Result<FitResult> {
    let start = prepare(ds, config, parametrization)?;
    fit(ds, &start.prior, parametrization, options, start.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClusterData;
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(family: Family, ys: &[&[f64]]) -> Dataset {
        let clusters = ys
            .iter()
            .map(|y| {
                let n = y.len();
                ClusterData::new(DVector::from_column_slice(y), DMatrix::from_element(n, 1, 1.0), DVector::zeros(0), DMatrix::zeros(n, 0))
            })
            .collect();
        Dataset::new(family, clusters).unwrap()
    }

    fn random_poisson(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..8)
            .map(|_| {
                let n = rng.gen_range(2..6);
                let xr = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
                let xg2 = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
                let y = DVector::from_fn(n, |_, _| rng.gen_range(0..5) as f64);
                let e = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
                ClusterData::new(y, xr, DVector::from_element(1, rng.gen_range(-1.0..1.0)), xg2).with_offset(e)
            })
            .collect();
        Dataset::new(Family::Poisson, clusters).unwrap()
    }

    #[test]
    fn poisson_intercept_closed_form() {
        let e = std::f64::consts::E;
        let ds = intercept_only(Family::Poisson, &[&[e, e], &[e]]);
        let fit = glm_irls(&ds).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.beta_hat[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn logistic_intercept_balanced() {
        let ds = intercept_only(Family::Bernoulli, &[&[0.0, 1.0], &[1.0, 0.0]]);
        let fit = glm_irls(&ds).unwrap();
        assert!(fit.beta_hat[0].abs() < 1e-12);
    }

    #[test]
    fn score_equations_hold() {
        let ds = random_poisson(1);
        let fit = glm_irls(&ds).unwrap();
        let mut score = DVector::zeros(ds.p());
        for (c, eta) in ds.clusters.iter().zip(&fit.eta) {
            let mean = c.offset.component_mul(&eta.map(f64::exp));
            score += c.fixed_design().transpose() * (&c.y - mean);
        }
        assert!(score.amax() < 1e-8, "{score}");
    }

    #[test]
    fn pooled_fit_ignores_cluster_order() {
        let ds = random_poisson(2);
        let mut shuffled = ds.clone();
        shuffled.clusters.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let a = glm_irls(&ds).unwrap();
        let b = glm_irls(&shuffled).unwrap();
        assert_relative_eq!(a.beta_hat, b.beta_hat, epsilon = 1e-10);
    }

    #[test]
    fn collinearity_is_named() {
        let mut ds = random_poisson(4);
        for c in &mut ds.clusters {
            let col = c.xr.column(1) * 2.0;
            c.xg2.set_column(0, &col);
        }
        match glm_irls(&ds) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["g2_1".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        let clusters = (0..4)
            .map(|i| {
                let x = DMatrix::from_row_slice(2, 1, &[i as f64 - 2.0, i as f64 - 1.5]);
                let y = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }).column(0).into_owned();
                ClusterData::new(y, DMatrix::from_element(2, 1, 1.0), DVector::zeros(0), x)
            })
            .collect();
        let ds = Dataset::new(Family::Bernoulli, clusters).unwrap();
        let fit = glm_irls(&ds).unwrap();
        assert!(fit.ridged);
        assert!(fit.beta_hat.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn prior_scale_scalar_and_linear_in_c() {
        // all fitted means equal m, n_i = k: R^ = c / (k m)
        let ds = intercept_only(Family::Poisson, &[&[2.0, 2.0, 2.0], &[2.0, 2.0, 2.0]]);
        let fit = glm_irls(&ds).unwrap();
        let (nu, s) = prior_scale_from_data(&ds, &fit, 1.0).unwrap();
        assert_eq!(nu, 1.0);
        assert_relative_eq!(s[(0, 0)], 1.0 / 6.0, epsilon = 1e-10);
        let (_, s2) = prior_scale_from_data(&ds, &fit, 2.0).unwrap();
        assert_relative_eq!(s2[(0, 0)], 2.0 * s[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn prior_scale_matches_direct_sum() {
        let ds = random_poisson(5);
        let fit = glm_irls(&ds).unwrap();
        let mut info = DMatrix::zeros(2, 2);
        for (c, eta) in ds.clusters.iter().zip(&fit.eta) {
            for j in 0..c.len() {
                let m = c.offset[j] * eta[j].exp();
                let x = c.xr.row(j).transpose();
                info += &x * x.transpose() * m;
            }
        }
        let r_hat = (info / ds.n() as f64).try_inverse().unwrap();
        let (_, s) = prior_scale_from_data(&ds, &fit, 1.0).unwrap();
        assert_relative_eq!(s, r_hat * 2.0, epsilon = 1e-8);
    }

    #[test]
    fn initial_states() {
        let ds = random_poisson(6);
        for param in Parametrization::ALL {
            let start = prepare(&ds, &PriorConfig::default(), param).unwrap();
            start.state.check_invariants(&ds, &start.prior).unwrap();
            if param == Parametrization::Noncentered {
                assert!(start.state.clusters.iter().all(|c| c.mu_alpha.amax() == 0.0));
            }
            if param == Parametrization::Centered {
                let cs = &start.state.clusters[0];
                let expected = &cs.c * start.glm.beta_hat.rows(0, 3);
                assert_relative_eq!(cs.mu_alpha, expected, epsilon = 1e-14);
            }
            // E[alpha_i] is the same under every parametrization
            let a = start.state.alpha_mean(3);
            let expected = &start.state.clusters[3].c * start.glm.beta_hat.rows(0, 3);
            assert_relative_eq!(a, expected, epsilon = 1e-12);
        }
    }
}
