//! Whole-cycle checks of the variational updates against independent oracles.

use approx::assert_relative_eq;
use glmmvb::engine::{
    alpha_step, elbo_full, gaussian_workspace, refresh_all, update_beta, update_sq, ClusterWorkspace,
};
use glmmvb::init::{prepare, PriorConfig};
use glmmvb::lmm::{lmm_fit, LmmTuning};
use glmmvb::model::{build_cluster_design, ClusterData, ClusterState, Dataset, Family, Parametrization, PriorSpec, VariationalState};
use glmmvb::quadrature::{gauss_hermite_rule, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

fn rule() -> QuadratureRule {
    gauss_hermite_rule(10).unwrap()
}

fn state_for(ds: &Dataset, w: &[DMatrix<f64>], nu_q: f64, s_q: DMatrix<f64>, sigma_alpha: &DMatrix<f64>) -> VariationalState {
    let p = ds.p();
    let clusters = ds
        .clusters
        .iter()
        .zip(w)
        .map(|(c, w)| {
            let d = build_cluster_design(c, w).unwrap();
            ClusterState {
                mu_alpha: DVector::zeros(ds.r),
                sigma_alpha: sigma_alpha.clone(),
                w: w.clone(),
                v: d.v,
                w_tilde: d.w_tilde,
                c: d.c,
            }
        })
        .collect();
    VariationalState {
        mu_beta: DVector::zeros(p),
        sigma_beta: DMatrix::identity(p, p),
        nu_q,
        s_q,
        clusters,
    }
}

fn gaussian_clusters(seed: u64) -> Vec<ClusterData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..6)
        .map(|_| {
            let n = rng.gen_range(2..7);
            let xr = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.gen_range(-1.5..1.5) });
            let y = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..3.0));
            ClusterData::new(y, xr, DVector::zeros(0), DMatrix::zeros(n, 0))
        })
        .collect()
}

fn gaussian_workspaces(ds: &Dataset, st: &VariationalState, sigma2: f64) -> Vec<ClusterWorkspace> {
    ds.clusters
        .iter()
        .zip(&st.clusters)
        .map(|(c, cs)| gaussian_workspace(c, cs, &st.mu_beta, &st.sigma_beta, sigma2))
        .collect()
}

/// With a Gaussian identity-link workspace and `nu_q (S^q)^{-1} = D^{-1}`
/// held fixed, the cycle is the linear mixed model scheme.
#[test]
fn identity_link_cycle_matches_lmm() {
    let clusters = gaussian_clusters(1);
    let ds = Dataset::new(Family::Poisson, clusters.clone()).unwrap();
    let sigma2 = 0.7;
    let d = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let given: Vec<DMatrix<f64>> = (0..ds.n())
        .map(|_| DMatrix::from_fn(2, 2, |a, b| if a == b { rng.gen_range(0.1..0.9) } else { rng.gen_range(-0.2..0.2) }))
        .collect();
    for tuning in [LmmTuning::Centered, LmmTuning::Noncentered, LmmTuning::Optimal, LmmTuning::Given(given)] {
        let oracle = lmm_fit(&clusters, sigma2, &d, &tuning, 1e-14, 10_000).unwrap();
        assert!(oracle.converged);
        let nu_q = 12.0;
        let mut st = state_for(&ds, &oracle.w, nu_q, &d * nu_q, &d);
        let flat = DMatrix::zeros(2, 2);
        let s_inv = st.s_q.clone().try_inverse().unwrap() * st.nu_q;
        for _ in 0..10_000 {
            let before = st.clone();
            let ws = gaussian_workspaces(&ds, &st, sigma2);
            update_beta(&mut st, &ws, &flat, 1.0).unwrap();
            let ws = gaussian_workspaces(&ds, &st, sigma2);
            for (i, c) in ds.clusters.iter().enumerate() {
                let (mu, sigma) = alpha_step(c, &st.clusters[i], &ws[i], &s_inv, &st.mu_beta, 1.0).unwrap();
                st.clusters[i].mu_alpha = mu;
                st.clusters[i].sigma_alpha = sigma;
            }
            let moved = st
                .clusters
                .iter()
                .zip(&before.clusters)
                .map(|(a, b)| (&a.mu_alpha - &b.mu_alpha).abs().max())
                .fold((&st.mu_beta - &before.mu_beta).abs().max(), f64::max);
            if moved < 1e-14 {
                break;
            }
        }
        assert_relative_eq!(st.mu_beta, oracle.mu_beta, epsilon = 1e-8);
        assert_relative_eq!(st.sigma_beta, oracle.sigma_beta, epsilon = 1e-8);
        for i in 0..ds.n() {
            assert_relative_eq!(st.clusters[i].mu_alpha, oracle.mu_alpha[i], epsilon = 1e-8);
            assert_relative_eq!(st.clusters[i].sigma_alpha, oracle.sigma_alpha[i], epsilon = 1e-8);
        }
    }
}

/// For a quadratic log-likelihood the `beta` step is exact: it lands on the
/// conditional optimum whatever the current `mu_beta`.
#[test]
fn identity_link_beta_step_is_exact() {
    let clusters = gaussian_clusters(3);
    let ds = Dataset::new(Family::Poisson, clusters).unwrap();
    let sigma2 = 1.3;
    let d = DMatrix::from_row_slice(2, 2, &[0.6, -0.1, -0.1, 0.4]);
    let w = vec![DMatrix::from_diagonal_element(2, 2, 0.4); ds.n()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut st = state_for(&ds, &w, 9.0, &d * 9.0, &d);
    for cs in &mut st.clusters {
        cs.mu_alpha = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
    }
    let prior_prec = DMatrix::identity(2, 2) * 0.01;
    let e_d_inv = st.s_q.clone().try_inverse().unwrap() * st.nu_q;

    let mut prec = prior_prec.clone();
    let mut rhs = DVector::zeros(2);
    for (c, cs) in ds.clusters.iter().zip(&st.clusters) {
        prec += cs.w_tilde.transpose() * &e_d_inv * &cs.w_tilde + cs.v.transpose() * &cs.v / sigma2;
        rhs += cs.w_tilde.transpose() * &e_d_inv * &cs.mu_alpha + cs.v.transpose() * (&c.y - &c.xr * &cs.mu_alpha) / sigma2;
    }
    let sigma = prec.try_inverse().unwrap();
    let mu = &sigma * rhs;

    for start in [DVector::zeros(2), DVector::from_vec(vec![5.0, -3.0])] {
        let mut trial = st.clone();
        trial.mu_beta = start;
        let ws = gaussian_workspaces(&ds, &trial, sigma2);
        update_beta(&mut trial, &ws, &prior_prec, 1.0).unwrap();
        assert_relative_eq!(trial.mu_beta, mu, epsilon = 1e-10);
        assert_relative_eq!(trial.sigma_beta, sigma, epsilon = 1e-10);
    }
}

/// Central differences of the full bound in the named coordinate.
fn fd<F: Fn(&mut VariationalState, f64)>(ds: &Dataset, st: &VariationalState, prior: &PriorSpec, h: f64, perturb: F) -> f64 {
    let eval = |delta: f64| {
        let mut s = st.clone();
        perturb(&mut s, delta);
        let ws = refresh_all(ds, &s, &rule(), true, false).unwrap();
        elbo_full(&s, prior, &ws).unwrap()
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

fn single_cluster(family: Family, y: &[f64]) -> Dataset {
    let n = y.len();
    let xr = DMatrix::from_element(n, 1, 1.0);
    let xg2 = DMatrix::from_fn(n, 1, |j, _| j as f64 - 0.5);
    Dataset::new(family, vec![ClusterData::new(DVector::from_column_slice(y), xr, DVector::zeros(0), xg2)]).unwrap()
}

/// A single Poisson count under an almost flat prior: iterating the `beta`
/// step alone reaches a stationary point of the bound in `(mu_beta,
/// Sigma_beta)`.
#[test]
fn poisson_beta_fixed_point_is_stationary() {
    let n = 1;
    let xr = DMatrix::from_element(n, 1, 1.0);
    let ds = Dataset::new(Family::Poisson, vec![ClusterData::new(DVector::from_element(1, 3.0), xr, DVector::zeros(0), DMatrix::zeros(1, 0))]).unwrap();
    let prior = PriorSpec::new(DMatrix::from_element(1, 1, 1e8), 1.0, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let prec = prior.beta_precision().unwrap();
    let w = vec![DMatrix::from_element(1, 1, 0.6)];
    let mut st = state_for(&ds, &w, 2.0, DMatrix::from_element(1, 1, 0.8), &DMatrix::from_element(1, 1, 0.3));
    st.clusters[0].mu_alpha[0] = 0.2;
    for _ in 0..500 {
        let ws = refresh_all(&ds, &st, &rule(), true, false).unwrap();
        let before = st.mu_beta[0];
        update_beta(&mut st, &ws, &prec, 1.0).unwrap();
        if (st.mu_beta[0] - before).abs() < 1e-14 {
            break;
        }
    }
    let h = 1e-5;
    let g_mu = fd(&ds, &st, &prior, h, |s, d| s.mu_beta[0] += d);
    let g_sigma = fd(&ds, &st, &prior, h * st.sigma_beta[(0, 0)], |s, d| s.sigma_beta[(0, 0)] += d);
    assert!(g_mu.abs() < 1e-6, "dL/dmu_beta = {g_mu}");
    assert!(g_sigma.abs() * st.sigma_beta[(0, 0)] < 1e-6, "dL/dSigma_beta = {g_sigma}");

    // the optimum of y m - exp(m + s^2/2 + c) with c from alpha
    let cs = &st.clusters[0];
    let ws = refresh_all(&ds, &st, &rule(), true, false).unwrap();
    let shrink = (cs.w_tilde[(0, 0)].powi(2)) * st.nu_q / st.s_q[(0, 0)];
    let score = 3.0 - ws[0].g[0];
    let pull = cs.w_tilde[(0, 0)] * st.nu_q / st.s_q[(0, 0)] * (cs.mu_alpha[0] - cs.w_tilde[(0, 0)] * st.mu_beta[0]);
    assert!((cs.v[(0, 0)] * score + pull - st.mu_beta[0] / 1e8).abs() < 1e-10);
    assert_relative_eq!(1.0 / st.sigma_beta[(0, 0)], 1e-8 + shrink + cs.v[(0, 0)].powi(2) * ws[0].f[0], epsilon = 1e-9);
}

/// Iterating only the `alpha` step on a one-cluster toy (`r = 1`, two
/// observations) reaches the coordinate-wise optimum of the bound.
#[test]
fn alpha_fixed_point_is_stationary() {
    for (family, y) in [(Family::Poisson, [2.0, 0.0]), (Family::Bernoulli, [1.0, 0.0])] {
        let ds = single_cluster(family, &y);
        let prior = PriorSpec::new(DMatrix::identity(2, 2) * 10.0, 1.0, DMatrix::from_element(1, 1, 0.5)).unwrap();
        let w = vec![DMatrix::from_element(1, 1, 0.3)];
        let mut st = state_for(&ds, &w, 2.0, DMatrix::from_element(1, 1, 1.1), &DMatrix::from_element(1, 1, 0.4));
        st.mu_beta = DVector::from_vec(vec![0.3, -0.4]);
        st.sigma_beta = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.3]);
        let s_inv = st.s_q.clone().try_inverse().unwrap() * st.nu_q;
        for _ in 0..1000 {
            let ws = refresh_all(&ds, &st, &rule(), true, false).unwrap();
            let (mu, sigma) = alpha_step(&ds.clusters[0], &st.clusters[0], &ws[0], &s_inv, &st.mu_beta, 1.0).unwrap();
            let moved = (mu[0] - st.clusters[0].mu_alpha[0]).abs() + (sigma[(0, 0)] - st.clusters[0].sigma_alpha[(0, 0)]).abs();
            st.clusters[0].mu_alpha = mu;
            st.clusters[0].sigma_alpha = sigma;
            if moved < 1e-15 {
                break;
            }
        }
        let h = 1e-5;
        let g_mu = fd(&ds, &st, &prior, h, |s, d| s.clusters[0].mu_alpha[0] += d);
        let g_sigma = fd(&ds, &st, &prior, h, |s, d| s.clusters[0].sigma_alpha[(0, 0)] += d);
        assert!(g_mu.abs() < 1e-6, "{family}: dL/dmu_alpha = {g_mu}");
        assert!(g_sigma.abs() < 1e-6, "{family}: dL/dSigma_alpha = {g_sigma}");
    }
}

/// The conjugate `S^q` update is the stationary point of the bound in `S^q`.
#[test]
fn sq_update_is_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for family in [Family::Poisson, Family::Bernoulli] {
        let clusters = (0..5)
            .map(|_| {
                let n = rng.gen_range(2..6);
                let xr = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
                let y = DVector::from_fn(n, |_, _| rng.gen_range(0..2) as f64);
                ClusterData::new(y, xr, DVector::from_element(1, rng.gen_range(-1.0..1.0)), DMatrix::zeros(n, 0))
            })
            .collect();
        let ds = Dataset::new(family, clusters).unwrap();
        let start = prepare(&ds, &PriorConfig::default(), Parametrization::PartialFixed).unwrap();
        let mut st = start.state;
        for cs in &mut st.clusters {
            cs.mu_alpha += DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
        }
        update_sq(&mut st, &start.prior).unwrap();
        for (a, b) in [(0, 0), (1, 1), (0, 1)] {
            let h = 1e-5 * st.s_q[(a, a)];
            let g = fd(&ds, &st, &start.prior, h, |s, d| {
                s.s_q[(a, b)] += d;
                if a != b {
                    s.s_q[(b, a)] += d;
                }
            });
            assert!(g.abs() * st.s_q[(a, a)] < 1e-6, "{family}: dL/dS^q[{a},{b}] = {g}");
        }
    }
}

#[test]
fn no_clusters_leave_prior_scale() {
    let prior = PriorSpec::new(DMatrix::identity(3, 3), 2.0, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
    let mut st = VariationalState {
        mu_beta: DVector::from_vec(vec![0.1, 0.2, 0.3]),
        sigma_beta: DMatrix::identity(3, 3),
        nu_q: prior.nu,
        s_q: DMatrix::identity(2, 2),
        clusters: Vec::new(),
    };
    update_sq(&mut st, &prior).unwrap();
    assert_eq!(st.s_q, prior.s);
}

/// Log joint density minus log `q`, for `r = 1`.
fn log_ratio(ds: &Dataset, st: &VariationalState, prior: &PriorSpec, beta: &DVector<f64>, alpha: &[f64], d: f64) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let normal = |x: f64, m: f64, v: f64| -0.5 * (ln2pi + v.ln() + (x - m).powi(2) / v);
    let inv_gamma = |x: f64, nu: f64, s: f64| 0.5 * nu * (0.5 * s).ln() - ln_gamma(0.5 * nu) - (0.5 * nu + 1.0) * x.ln() - 0.5 * s / x;
    let gaussian = |x: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>| {
        let chol = s.clone().cholesky().unwrap();
        let z = chol.l().solve_lower_triangular(&(x - m)).unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        -0.5 * (x.len() as f64 * ln2pi + logdet + z.norm_squared())
    };
    let mut total = 0.0;
    for ((c, cs), &a) in ds.clusters.iter().zip(&st.clusters).zip(alpha) {
        let eta = &cs.v * beta + &c.xr * DVector::from_element(1, a);
        for j in 0..c.len() {
            let log_rate = c.offset[j].ln() + eta[j];
            total += c.y[j] * log_rate - log_rate.exp() - ln_gamma(c.y[j] + 1.0);
        }
        let prior_mean = (&cs.w_tilde * beta)[0];
        total += normal(a, prior_mean, d) - normal(a, cs.mu_alpha[0], cs.sigma_alpha[(0, 0)]);
    }
    total += gaussian(beta, &DVector::zeros(beta.len()), &prior.sigma_beta) - gaussian(beta, &st.mu_beta, &st.sigma_beta);
    total += inv_gamma(d, prior.nu, prior.s[(0, 0)]) - inv_gamma(d, st.nu_q, st.s_q[(0, 0)]);
    total
}

#[test]
fn full_bound_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let clusters = (0..3)
        .map(|_| {
            let y = DVector::from_fn(3, |_, _| rng.gen_range(0..4) as f64);
            let xg2 = DMatrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
            let e = DVector::from_fn(3, |_, _| rng.gen_range(0.5..1.5));
            ClusterData::new(y, DMatrix::from_element(3, 1, 1.0), DVector::zeros(0), xg2).with_offset(e)
        })
        .collect();
    let ds = Dataset::new(Family::Poisson, clusters).unwrap();
    let start = prepare(&ds, &PriorConfig { sigma_beta_scale: 4.0, ..PriorConfig::default() }, Parametrization::PartialFixed).unwrap();
    let (prior, mut st) = (start.prior, start.state);
    for cs in &mut st.clusters {
        cs.mu_alpha[0] += rng.gen_range(-0.3..0.3);
    }
    let ws = refresh_all(&ds, &st, &rule(), true, false).unwrap();
    let bound = elbo_full(&st, &prior, &ws).unwrap();

    let chol = st.sigma_beta.clone().cholesky().unwrap().l();
    let shape = Gamma::new(0.5 * st.nu_q, 1.0).unwrap();
    let draws = 1_000_000;
    let (mut sum, mut sumsq) = (0.0, 0.0);
    let mut alpha = vec![0.0; ds.n()];
    for _ in 0..draws {
        let z = DVector::from_fn(ds.p(), |_, _| StandardNormal.sample(&mut rng));
        let beta = &st.mu_beta + &chol * z;
        for (a, cs) in alpha.iter_mut().zip(&st.clusters) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a = cs.mu_alpha[0] + cs.sigma_alpha[(0, 0)].sqrt() * z;
        }
        let d = 0.5 * st.s_q[(0, 0)] / shape.sample(&mut rng);
        let v = log_ratio(&ds, &st, &prior, &beta, &alpha, d);
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / draws as f64;
    let se = ((sumsq / draws as f64 - mean * mean) / draws as f64).sqrt();
    assert!((mean - bound).abs() < 3.0 * se, "Monte Carlo {mean} (se {se}) vs {bound}");
}
