//! Nonconjugate variational message passing for Poisson and logistic GLMMs.
//!
//! One cycle runs, in order: an optional refresh of the tuning matrices,
//! the Gaussian update of `q(beta)`, the Gaussian update of every
//! `q(alpha~_i)`, the conjugate inverse-Wishart update of `q(D)`, and an
//! evaluation of the lower bound. Gaussian means move by
//! `mu <- mu + damping * Sigma * grad`, where `grad` is the exact gradient of
//! the lower bound with respect to `mu`.
//!
//! Per-cluster work may run on a rayon pool, but every cluster sum is
//! reduced serially in cluster order, so results do not depend on the
//! number of workers.

use std::f64::consts::{LN_2, PI};
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{diag_quad_form, symmetrize, weighted_gram, Spd};
use crate::model::{
    ClusterData, ClusterState, Dataset, Family, FitResult, Parametrization, PosteriorSummary, PriorSpec,
    VariationalState,
};
use crate::quadrature::{gauss_hermite_rule, logistic_moments, QuadratureRule};
use crate::special::{log_multigamma, multi_digamma, softplus_derivative};

/// Largest exponent accepted in `kappa = exp(mu + sigma^2 / 2)`.
const MAX_EXPONENT: f64 = 700.0;

/// Decreases smaller than this fraction of `|L|` are treated as round-off.
const ELBO_DECREASE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ElboCheck {
    /// Record decreases of the lower bound and carry on.
    #[default]
    Monitor,
    /// Abort the fit when the lower bound decreases.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Stop once `|(L_t - L_{t-1}) / L_t|` falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub quad_points: usize,
    /// Fraction of each mean increment that is applied, in `(0, 1]`.
    pub damping: f64,
    pub seed: u64,
    pub elbo_check: ElboCheck,
    /// Single-threaded cluster loops.
    pub deterministic: bool,
    /// Share the first-derivative recentering across all three logistic
    /// integrals of an observation.
    pub reuse_recentering: bool,
    /// Worker threads for per-cluster work; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-6,
            max_iterations: 500,
            quad_points: 10,
            damping: 1.0,
            seed: 0,
            elbo_check: ElboCheck::Monitor,
            deterministic: false,
            reuse_recentering: true,
            workers: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(1..=100).contains(&self.quad_points) {
            return Err(Error::Config(format!("quad_points must be in 1..=100, got {}", self.quad_points)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-cluster quantities derived from the current `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterWorkspace {
    /// `E_q[eta_i]`.
    pub mu: DVector<f64>,
    /// Elementwise SD of `eta_i` under `q`.
    pub sigma: DVector<f64>,
    /// `exp(mu + sigma^2 / 2)`, Poisson only.
    pub kappa: Option<DVector<f64>>,
    /// Curvature weights `F_ij`.
    pub f: DVector<f64>,
    /// `G_i`, the expected mean response.
    pub g: DVector<f64>,
    /// `y_i - G_i`.
    pub score: DVector<f64>,
    /// `S_{y_i} = E_q log p(y_i | beta, alpha~_i)`.
    pub loglik: f64,
}

/// Mean and SD of `eta_i = V_i beta + X^R_i alpha~_i` under `q`.
pub fn linear_predictor_moments(
    cluster: &ClusterData,
    cs: &ClusterState,
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let mu = &cs.v * mu_beta + &cluster.xr * &cs.mu_alpha;
    let var = diag_quad_form(&cs.v, sigma_beta) + diag_quad_form(&cluster.xr, &cs.sigma_alpha);
    (mu, var.map(|v| v.max(0.0).sqrt()))
}

pub fn refresh_workspace(
    family: Family,
    index: usize,
    cluster: &ClusterData,
    cs: &ClusterState,
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
    rule: &QuadratureRule,
    reuse_recentering: bool,
) -> Result<ClusterWorkspace> {
    let (mu, sigma) = linear_predictor_moments(cluster, cs, mu_beta, sigma_beta);
    let n = cluster.len();
    match family {
        Family::Poisson => {
            let mut kappa = DVector::zeros(n);
            for j in 0..n {
                let exponent = mu[j] + 0.5 * sigma[j] * sigma[j];
                if !(exponent <= MAX_EXPONENT) {
                    return Err(Error::Overflow {
                        cluster: index,
                        row: j,
                        exponent,
                    });
                }
                kappa[j] = exponent.exp();
            }
            let g = cluster.offset.component_mul(&kappa);
            let loglik = (0..n)
                .map(|j| {
                    let y = cluster.y[j];
                    y * (cluster.offset[j].ln() + mu[j]) - g[j] - ln_gamma(y + 1.0)
                })
                .sum();
            Ok(ClusterWorkspace {
                score: &cluster.y - &g,
                f: g.clone(),
                g,
                kappa: Some(kappa),
                mu,
                sigma,
                loglik,
            })
        }
        Family::Bernoulli => {
            let m = logistic_moments(mu.as_slice(), sigma.as_slice(), rule, reuse_recentering)?;
            let g = DVector::from_vec(m.b1);
            let loglik = cluster.y.dot(&mu) - m.b0.iter().sum::<f64>();
            Ok(ClusterWorkspace {
                score: &cluster.y - &g,
                f: DVector::from_vec(m.b2),
                g,
                kappa: None,
                mu,
                sigma,
                loglik,
            })
        }
    }
}

/// Workspace for a Gaussian identity-link likelihood with known variance,
/// under which the updates here reduce to the linear mixed model scheme.
pub fn gaussian_workspace(
    cluster: &ClusterData,
    cs: &ClusterState,
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
    sigma2: f64,
) -> ClusterWorkspace {
    let (mu, sigma) = linear_predictor_moments(cluster, cs, mu_beta, sigma_beta);
    let n = cluster.len();
    let resid = &cluster.y - &mu;
    let loglik = -0.5 * n as f64 * (2.0 * PI * sigma2).ln()
        - 0.5 * (resid.norm_squared() + sigma.norm_squared()) / sigma2;
    ClusterWorkspace {
        score: resid / sigma2,
        f: DVector::from_element(n, 1.0 / sigma2),
        g: mu.clone(),
        kappa: None,
        mu,
        sigma,
        loglik,
    }
}

/// Observed information of the cluster log-likelihood in `alpha~`:
/// `sum_j y_ij x x^T` (Poisson, response-approximated) or
/// `sum_j logistic'(eta_ij) x x^T` (Bernoulli).
pub fn cluster_information(family: Family, cluster: &ClusterData, eta: &DVector<f64>) -> DMatrix<f64> {
    let w = match family {
        Family::Poisson => cluster.y.clone(),
        Family::Bernoulli => eta.map(|e| softplus_derivative(2, e)),
    };
    weighted_gram(&cluster.xr, &w)
}

/// `W = (I_f + D^{-1})^{-1} D^{-1}`; falls back to `W = I` with a warning
/// if either matrix fails to factorize.
pub fn compute_w_glmm(family: Family, cluster: &ClusterData, d_est: &DMatrix<f64>, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let r = cluster.r();
    if d_est.shape() != (r, r) {
        return Err(Error::shape("D estimate", format!("{r}x{r}"), format!("{}x{}", d_est.nrows(), d_est.ncols())));
    }
    if eta.len() != cluster.len() {
        return Err(Error::shape("eta", cluster.len(), eta.len()));
    }
    let info = cluster_information(family, cluster, eta);
    let attempt = || -> Result<DMatrix<f64>> {
        let d_inv = Spd::new(d_est, "D estimate")?.inverse();
        Ok(Spd::new(&(info + &d_inv), "I_f + D^{-1}")?.solve(&d_inv))
    };
    match attempt() {
        Ok(w) if w.iter().all(|v| v.is_finite()) => Ok(w),
        Ok(_) => {
            warn!("non-finite tuning matrix; using the noncentered W = I");
            Ok(DMatrix::identity(r, r))
        }
        Err(e) => {
            warn!("{e}; using the noncentered W = I");
            Ok(DMatrix::identity(r, r))
        }
    }
}

/// `(mu_alpha - W~ mu_beta)` for one cluster.
fn deviation(cs: &ClusterState, mu_beta: &DVector<f64>) -> DVector<f64> {
    &cs.mu_alpha - &cs.w_tilde * mu_beta
}

/// Updates `q(beta)` from fresh workspaces. `prior_precision` is
/// `Sigma_beta^{-1}` (zero for a flat prior).
pub fn update_beta(
    state: &mut VariationalState,
    workspaces: &[ClusterWorkspace],
    prior_precision: &DMatrix<f64>,
    damping: f64,
) -> Result<()> {
    let p = state.mu_beta.len();
    if workspaces.len() != state.clusters.len() {
        return Err(Error::shape("workspaces", state.clusters.len(), workspaces.len()));
    }
    let s_inv = Spd::new(&state.s_q, "S^q")?.inverse() * state.nu_q;
    let mut prec = prior_precision.clone();
    let mut grad = -(prior_precision * &state.mu_beta);
    for (cs, ws) in state.clusters.iter().zip(workspaces) {
        let wt_s = cs.w_tilde.transpose() * &s_inv;
        prec += &wt_s * &cs.w_tilde + weighted_gram(&cs.v, &ws.f);
        grad += &wt_s * deviation(cs, &state.mu_beta) + cs.v.transpose() * &ws.score;
    }
    debug_assert_eq!(prec.nrows(), p);
    let chol = Spd::new(&symmetrize(&prec), "Sigma_beta^q precision")?;
    state.sigma_beta = chol.inverse();
    state.mu_beta += &state.sigma_beta * grad * damping;
    Ok(())
}

/// New `(mu_alpha, Sigma_alpha)` for one cluster; `s_inv_scaled` is
/// `nu_q (S^q)^{-1}`.
pub fn alpha_step(
    cluster: &ClusterData,
    cs: &ClusterState,
    ws: &ClusterWorkspace,
    s_inv_scaled: &DMatrix<f64>,
    mu_beta: &DVector<f64>,
    damping: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let prec = s_inv_scaled + weighted_gram(&cluster.xr, &ws.f);
    let sigma = Spd::new(&symmetrize(&prec), "Sigma_alpha^q precision")?.inverse();
    let grad = -(s_inv_scaled * deviation(cs, mu_beta)) + cluster.xr.transpose() * &ws.score;
    let mu = &cs.mu_alpha + &sigma * grad * damping;
    Ok((mu, sigma))
}

pub fn update_alpha(
    state: &mut VariationalState,
    index: usize,
    cluster: &ClusterData,
    ws: &ClusterWorkspace,
    damping: f64,
) -> Result<()> {
    let s_inv = Spd::new(&state.s_q, "S^q")?.inverse() * state.nu_q;
    let (mu, sigma) = alpha_step(cluster, &state.clusters[index], ws, &s_inv, &state.mu_beta, damping)?;
    state.clusters[index].mu_alpha = mu;
    state.clusters[index].sigma_alpha = sigma;
    Ok(())
}

/// `E_q[(alpha~_i - W~_i beta)(alpha~_i - W~_i beta)^T]`.
pub fn expected_outer(cs: &ClusterState, mu_beta: &DVector<f64>, sigma_beta: &DMatrix<f64>) -> DMatrix<f64> {
    let d = deviation(cs, mu_beta);
    &d * d.transpose() + &cs.sigma_alpha + &cs.w_tilde * sigma_beta * cs.w_tilde.transpose()
}

/// Conjugate update `S^q = S + sum_i E_q[(alpha~_i - W~_i beta)(...)^T]`.
pub fn update_sq(state: &mut VariationalState, prior: &PriorSpec) -> Result<()> {
    let mut s = prior.s.clone();
    for cs in &state.clusters {
        s += expected_outer(cs, &state.mu_beta, &state.sigma_beta);
    }
    let s = symmetrize(&s);
    Spd::new(&s, "S^q")?;
    state.s_q = s;
    Ok(())
}

/// Closed-form lower bound, valid right after [`update_sq`].
pub fn elbo(state: &VariationalState, prior: &PriorSpec, workspaces: &[ClusterWorkspace]) -> Result<f64> {
    let n = state.clusters.len() as f64;
    let r = state.s_q.nrows();
    let p = state.mu_beta.len();
    let prior_chol = Spd::new(&prior.sigma_beta, "Sigma_beta")?;
    let post_chol = Spd::new(&state.sigma_beta, "Sigma_beta^q")?;
    let sq_logdet = Spd::new(&state.s_q, "S^q")?.logdet();
    let s_logdet = Spd::new(&prior.s, "S")?.logdet();

    let mut total: f64 = workspaces.iter().map(|w| w.loglik).sum();
    for cs in &state.clusters {
        total += 0.5 * Spd::new(&cs.sigma_alpha, "Sigma_alpha^q")?.logdet();
    }
    total += 0.5 * (post_chol.logdet() - prior_chol.logdet());
    total -= 0.5 * prior_chol.solve(&state.sigma_beta).trace();
    total -= 0.5 * state.mu_beta.dot(&prior_chol.solve_vec(&state.mu_beta));
    total -= 0.5 * state.nu_q * sq_logdet;
    total += 0.5 * prior.nu * s_logdet;
    // the normaliser of q(D) enters with a positive sign; the pi terms of
    // the two multivariate gammas cancel
    total += log_multigamma(state.nu_q, r)? - log_multigamma(prior.nu, r)?;
    total += 0.5 * (p as f64 + n * r as f64) + 0.5 * n * r as f64 * LN_2;
    Ok(total)
}

/// Lower bound assembled term by term; valid for any state.
pub fn elbo_full(state: &VariationalState, prior: &PriorSpec, workspaces: &[ClusterWorkspace]) -> Result<f64> {
    let r = state.s_q.nrows();
    let rf = r as f64;
    let p = state.mu_beta.len() as f64;
    let ln2pi = (2.0 * PI).ln();
    let nu_q = state.nu_q;
    let sq = Spd::new(&state.s_q, "S^q")?;
    let sq_inv = sq.inverse();
    let e_log_det_d = sq.logdet() - multi_digamma(nu_q, r)? - rf * LN_2;
    let e_d_inv = &sq_inv * nu_q;

    // E log p(y | .)
    let mut total: f64 = workspaces.iter().map(|w| w.loglik).sum();

    // E log p(beta)
    let prior_chol = Spd::new(&prior.sigma_beta, "Sigma_beta")?;
    total += -0.5 * p * ln2pi - 0.5 * prior_chol.logdet()
        - 0.5 * state.mu_beta.dot(&prior_chol.solve_vec(&state.mu_beta))
        - 0.5 * prior_chol.solve(&state.sigma_beta).trace();

    // E log p(alpha~_i | beta, D) and -E log q(alpha~_i)
    for cs in &state.clusters {
        let outer = expected_outer(cs, &state.mu_beta, &state.sigma_beta);
        total += -0.5 * rf * ln2pi - 0.5 * e_log_det_d - 0.5 * (&e_d_inv * outer).trace();
        total += 0.5 * rf * (1.0 + ln2pi) + 0.5 * Spd::new(&cs.sigma_alpha, "Sigma_alpha^q")?.logdet();
    }

    // E log p(D)
    let s_logdet = Spd::new(&prior.s, "S")?.logdet();
    total += 0.5 * prior.nu * s_logdet - 0.5 * prior.nu * rf * LN_2 - log_multigamma(prior.nu, r)?
        - 0.5 * (prior.nu + rf + 1.0) * e_log_det_d
        - 0.5 * (&e_d_inv * &prior.s).trace();

    // -E log q(beta)
    total += 0.5 * p * (1.0 + ln2pi) + 0.5 * Spd::new(&state.sigma_beta, "Sigma_beta^q")?.logdet();

    // -E log q(D)
    total -= 0.5 * nu_q * sq.logdet() - 0.5 * nu_q * rf * LN_2 - log_multigamma(nu_q, r)?
        - 0.5 * (nu_q + rf + 1.0) * e_log_det_d
        - 0.5 * nu_q * rf;
    Ok(total)
}

/// Evaluates `f` for every cluster index, in parallel when asked, and
/// returns results in index order. The first failing index wins.
pub(crate) fn map_clusters<T, F>(n: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = if parallel {
        (0..n).into_par_iter().map(&f).collect()
    } else {
        (0..n).map(&f).collect()
    };
    results.into_iter().collect()
}

/// Refreshes every workspace.
pub fn refresh_all(
    ds: &Dataset,
    state: &VariationalState,
    rule: &QuadratureRule,
    reuse_recentering: bool,
    parallel: bool,
) -> Result<Vec<ClusterWorkspace>> {
    map_clusters(ds.n(), parallel, |i| {
        refresh_workspace(
            ds.family,
            i,
            &ds.clusters[i],
            &state.clusters[i],
            &state.mu_beta,
            &state.sigma_beta,
            rule,
            reuse_recentering,
        )
    })
}

/// Moves cluster `i` to tuning matrix `w`, shifting `mu_alpha` so that
/// `E_q[alpha_i]` is unchanged.
pub fn retune_cluster(state: &mut VariationalState, i: usize, cluster: &ClusterData, w: DMatrix<f64>) -> Result<()> {
    let mu_alpha = state.mu_alpha_for_tuning(i, &w);
    state.set_tuning(i, cluster, w)?;
    state.clusters[i].mu_alpha = mu_alpha;
    Ok(())
}

/// Tuning matrices from the current `q`: `D` is replaced by
/// `S^q / (nu_q - r - 1)` and `eta_i` by `V_i mu_beta + X^R_i mu_alpha_i`.
pub fn adaptive_tuning(ds: &Dataset, state: &VariationalState, parallel: bool) -> Result<Vec<DMatrix<f64>>> {
    let r = ds.r as f64;
    let denom = if state.nu_q - r - 1.0 > 0.0 { state.nu_q - r - 1.0 } else { state.nu_q };
    let d_est = &state.s_q / denom;
    map_clusters(ds.n(), parallel, |i| {
        let cs = &state.clusters[i];
        let cluster = &ds.clusters[i];
        let eta = &cs.v * &state.mu_beta + &cluster.xr * &cs.mu_alpha;
        compute_w_glmm(ds.family, cluster, &d_est, &eta)
    })
}

/// One full cycle; returns the lower bound at its end.
fn cycle(
    ds: &Dataset,
    prior: &PriorSpec,
    prior_precision: &DMatrix<f64>,
    parametrization: Parametrization,
    options: &FitOptions,
    rule: &QuadratureRule,
    state: &mut VariationalState,
) -> Result<f64> {
    let parallel = !options.deterministic;
    let reuse = options.reuse_recentering;
    if parametrization == Parametrization::PartialAdaptive {
        let ws = adaptive_tuning(ds, state, parallel)?;
        for (i, w) in ws.into_iter().enumerate() {
            retune_cluster(state, i, &ds.clusters[i], w)?;
        }
    }

    let workspaces = refresh_all(ds, state, rule, reuse, parallel)?;
    update_beta(state, &workspaces, prior_precision, options.damping)?;

    let workspaces = refresh_all(ds, state, rule, reuse, parallel)?;
    let s_inv = Spd::new(&state.s_q, "S^q")?.inverse() * state.nu_q;
    let frozen: &VariationalState = state;
    let updates = map_clusters(ds.n(), parallel, |i| {
        alpha_step(
            &ds.clusters[i],
            &frozen.clusters[i],
            &workspaces[i],
            &s_inv,
            &frozen.mu_beta,
            options.damping,
        )
    })?;
    for (cs, (mu, sigma)) in state.clusters.iter_mut().zip(updates) {
        cs.mu_alpha = mu;
        cs.sigma_alpha = sigma;
    }

    update_sq(state, prior)?;
    let workspaces = refresh_all(ds, state, rule, reuse, parallel)?;
    elbo(state, prior, &workspaces)
}

/// Fits the model from `init` until the relative change of the lower bound
/// drops below the tolerance or the iteration budget runs out.
///
/// Hard numerical failures abort with [`Error::FitAborted`], which carries
/// the state at the start of the failing cycle.
pub fn fit(
    ds: &Dataset,
    prior: &PriorSpec,
    parametrization: Parametrization,
    options: &FitOptions,
    init: VariationalState,
) -> Result<FitResult> {
    options.validate()?;
    if prior.p() != ds.p() || prior.r() != ds.r {
        return Err(Error::shape(
            "prior",
            format!("p={}, r={}", ds.p(), ds.r),
            format!("p={}, r={}", prior.p(), prior.r()),
        ));
    }
    init.check_invariants(ds, prior)?;
    let started = Instant::now();
    let rule = gauss_hermite_rule(options.quad_points)?;
    let prior_precision = prior.beta_precision()?;

    let mut state = init;
    let fixed_w = match parametrization {
        Parametrization::Centered => Some(DMatrix::zeros(ds.r, ds.r)),
        Parametrization::Noncentered => Some(DMatrix::identity(ds.r, ds.r)),
        _ => None,
    };
    if let Some(w) = fixed_w {
        for i in 0..ds.n() {
            if state.clusters[i].w != w {
                retune_cluster(&mut state, i, &ds.clusters[i], w.clone())?;
            }
        }
    }

    let run = |state: &mut VariationalState| -> Result<(Vec<f64>, bool)> {
        let mut trace: Vec<f64> = Vec::new();
        let mut converged = false;
        for iteration in 1..=options.max_iterations {
            let snapshot = state.clone();
            let value = cycle(ds, prior, &prior_precision, parametrization, options, &rule, state)
                .and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Domain {
                            func: "elbo",
                            msg: "lower bound is not finite".into(),
                        })
                    }
                })
                .map_err(|e| Error::FitAborted {
                    iteration,
                    source: Box::new(e),
                    state: Box::new(snapshot.clone()),
                })?;
            if let Some(&previous) = trace.last() {
                if value < previous - ELBO_DECREASE_SLACK * value.abs() {
                    debug!("lower bound decreased at cycle {iteration}: {previous} -> {value}");
                    if options.elbo_check == ElboCheck::Strict {
                        return Err(Error::FitAborted {
                            iteration,
                            source: Box::new(Error::ElboDecrease {
                                iteration,
                                previous,
                                current: value,
                            }),
                            state: Box::new(snapshot),
                        });
                    }
                }
                trace.push(value);
                if ((value - previous) / value).abs() < options.tolerance {
                    converged = true;
                    break;
                }
            } else {
                trace.push(value);
            }
        }
        Ok((trace, converged))
    };

    let (elbo_trace, converged) = match options.workers {
        Some(k) if !options.deterministic => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {k} workers: {e}")))?;
            pool.install(|| run(&mut state))?
        }
        _ => run(&mut state)?,
    };

    let summary = PosteriorSummary::from_state(&state, ds);
    Ok(FitResult {
        iterations: elbo_trace.len(),
        elbo_trace,
        converged,
        summary,
        parametrization,
        data_fingerprint: ds.response_fingerprint(),
        wall_time: started.elapsed(),
        state,
    })
}
