//! Data model for Poisson and logistic mixed models.
//!
//! For cluster `i` the linear predictor is
//!
//! ```text
//! eta_i = X^R_i (C_i beta^{RG1} + u_i) + X^{G2}_i beta^{G2}
//!       = V_i beta + X^R_i alpha~_i
//! ```
//!
//! with `alpha~_i = C_i beta^{RG1} + u_i - W_i C_i beta^{RG1}`. The tuning
//! matrix `W_i` slides between the centered (`W_i = 0`) and noncentered
//! (`W_i = I`) parametrizations. Fixed effects are ordered
//! `beta = [beta^R; beta^{G1}; beta^{G2}]`.

use std::fmt;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::Spd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Poisson counts with log link and optional exposure offsets `E_ij`.
    Poisson,
    /// Binary responses with logit link.
    Bernoulli,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Poisson => f.write_str("poisson"),
            Family::Bernoulli => f.write_str("bernoulli"),
        }
    }
}

/// One cluster of grouped observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub y: DVector<f64>,
    /// `n_i x r` random-effects design; first column is the intercept.
    pub xr: DMatrix<f64>,
    /// Subject-level covariate row `x_i^{G1}` (constant within the cluster).
    pub xg1: DVector<f64>,
    /// `n_i x g2` within-cluster fixed-effects design.
    pub xg2: DMatrix<f64>,
    /// Exposure `E_i`; all ones unless a Poisson offset is supplied.
    pub offset: DVector<f64>,
}

impl ClusterData {
    pub fn new(y: DVector<f64>, xr: DMatrix<f64>, xg1: DVector<f64>, xg2: DMatrix<f64>) -> Self {
        let n = y.len();
        ClusterData {
            y,
            xr,
            xg1,
            xg2,
            offset: DVector::from_element(n, 1.0),
        }
    }

    pub fn with_offset(mut self, offset: DVector<f64>) -> Self {
        self.offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn r(&self) -> usize {
        self.xr.ncols()
    }

    pub fn g1(&self) -> usize {
        self.xg1.len()
    }

    pub fn g2(&self) -> usize {
        self.xg2.ncols()
    }

    /// Pooled fixed-effects rows `[X^R  1 x^{G1 T}  X^{G2}]`.
    pub fn fixed_design(&self) -> DMatrix<f64> {
        let (n, r, g1, g2) = (self.len(), self.r(), self.g1(), self.g2());
        DMatrix::from_fn(n, r + g1 + g2, |j, k| {
            if k < r {
                self.xr[(j, k)]
            } else if k < r + g1 {
                self.xg1[k - r]
            } else {
                self.xg2[(j, k - r - g1)]
            }
        })
    }
}

/// An ordered collection of clusters sharing one model structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub family: Family,
    pub clusters: Vec<ClusterData>,
    pub r: usize,
    pub g1: usize,
    pub g2: usize,
    /// Fixed-effect names in `beta` order.
    pub fixed_names: Vec<String>,
    /// Random-effect names (columns of `X^R`).
    pub random_names: Vec<String>,
    /// Cluster labels in cluster order.
    pub cluster_ids: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with generic parameter names, checking that every
    /// cluster agrees on `r`, `g1` and `g2`.
    pub fn new(family: Family, clusters: Vec<ClusterData>) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| Error::InvalidData(vec!["dataset has no clusters".into()]))?;
        let (r, g1, g2) = (first.r(), first.g1(), first.g2());
        for (i, c) in clusters.iter().enumerate() {
            if c.r() != r {
                return Err(Error::shape("X^R columns", r, format!("{} in cluster {i}", c.r())));
            }
            if c.g1() != g1 {
                return Err(Error::shape("x^{G1} length", g1, format!("{} in cluster {i}", c.g1())));
            }
            if c.g2() != g2 {
                return Err(Error::shape("X^{G2} columns", g2, format!("{} in cluster {i}", c.g2())));
            }
            for (block, rows) in [("X^R rows", c.xr.nrows()), ("X^{G2} rows", c.xg2.nrows()), ("offset length", c.offset.len())] {
                if rows != c.len() {
                    return Err(Error::shape(block, c.len(), format!("{rows} in cluster {i}")));
                }
            }
        }
        if r == 0 {
            return Err(Error::InvalidData(vec!["at least one random effect (the intercept) is required".into()]));
        }
        let mut fixed_names = vec!["(Intercept)".to_string()];
        fixed_names.extend((1..r).map(|k| format!("xr{k}")));
        fixed_names.extend((0..g1).map(|k| format!("g1_{}", k + 1)));
        fixed_names.extend((0..g2).map(|k| format!("g2_{}", k + 1)));
        let mut random_names = vec!["(Intercept)".to_string()];
        random_names.extend((1..r).map(|k| format!("xr{k}")));
        let cluster_ids = (0..clusters.len()).map(|i| (i + 1).to_string()).collect();
        Ok(Dataset {
            family,
            clusters,
            r,
            g1,
            g2,
            fixed_names,
            random_names,
            cluster_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.r + self.g1 + self.g2
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(ClusterData::len).sum()
    }

    /// Hash of the family, cluster sizes, responses and offsets. Models with
    /// different covariates on the same responses share a fingerprint, which
    /// is what ELBO-based comparison requires.
    pub fn response_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.family.to_string().as_bytes());
        for c in &self.clusters {
            h.update((c.len() as u64).to_le_bytes());
            for v in c.y.iter().chain(c.offset.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Checks every data invariant and collects all violations.
pub fn validate_dataset(ds: &Dataset) -> Result<()> {
    let mut problems = Vec::new();
    for (i, c) in ds.clusters.iter().enumerate() {
        if c.is_empty() {
            problems.push(format!("cluster {i}: no observations"));
            continue;
        }
        let has_random_design = c.xr.iter().any(|&v| v != 0.0);
        if has_random_design {
            let bad: Vec<usize> = (0..c.len()).filter(|&j| c.xr[(j, 0)] != 1.0).collect();
            if !bad.is_empty() {
                problems.push(format!(
                    "cluster {i}: first column of X^R must be the intercept (all ones); rows {bad:?}"
                ));
            }
        }
        let bad_y: Vec<usize> = (0..c.len())
            .filter(|&j| {
                let y = c.y[j];
                match ds.family {
                    Family::Poisson => !(y >= 0.0 && y.fract() == 0.0 && y.is_finite()),
                    Family::Bernoulli => y != 0.0 && y != 1.0,
                }
            })
            .collect();
        if !bad_y.is_empty() {
            let expected = match ds.family {
                Family::Poisson => "nonnegative integer counts",
                Family::Bernoulli => "0/1 responses",
            };
            problems.push(format!("cluster {i}: expected {expected}; rows {bad_y:?}"));
        }
        match ds.family {
            Family::Poisson => {
                let bad: Vec<usize> = (0..c.len()).filter(|&j| !(c.offset[j] > 0.0 && c.offset[j].is_finite())).collect();
                if !bad.is_empty() {
                    problems.push(format!("cluster {i}: offsets must be positive; rows {bad:?}"));
                }
            }
            Family::Bernoulli => {
                let bad: Vec<usize> = (0..c.len()).filter(|&j| c.offset[j] != 1.0).collect();
                if !bad.is_empty() {
                    problems.push(format!("cluster {i}: bernoulli clusters cannot carry offsets; rows {bad:?}"));
                }
            }
        }
        let nonfinite = c.xr.iter().chain(c.xg1.iter()).chain(c.xg2.iter()).any(|v| !v.is_finite());
        if nonfinite {
            problems.push(format!("cluster {i}: non-finite covariate"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidData(problems))
    }
}

/// Advisory check: columns of a pooled matrix that are constant within every
/// cluster, and hence eligible to be declared subject-level.
pub fn constant_within_clusters(columns: &[DMatrix<f64>]) -> Vec<usize> {
    let Some(first) = columns.first() else {
        return Vec::new();
    };
    (0..first.ncols())
        .filter(|&k| {
            columns.iter().all(|m| {
                let col = m.column(k);
                col.iter().all(|&v| v == col[0])
            })
        })
        .collect()
}

/// Gaussian prior on `beta` and inverse-Wishart `IW(nu, S)` on `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma_beta: DMatrix<f64>,
    pub nu: f64,
    pub s: DMatrix<f64>,
}

impl PriorSpec {
    pub fn new(sigma_beta: DMatrix<f64>, nu: f64, s: DMatrix<f64>) -> Result<Self> {
        Spd::new(&sigma_beta, "prior Sigma_beta")?;
        Spd::new(&s, "prior scale S")?;
        let r = s.nrows();
        if !(nu >= r as f64) {
            return Err(Error::Domain {
                func: "PriorSpec::new",
                msg: format!("inverse-Wishart degrees of freedom {nu} must be at least r = {r}"),
            });
        }
        Ok(PriorSpec { sigma_beta, nu, s })
    }

    pub fn r(&self) -> usize {
        self.s.nrows()
    }

    pub fn p(&self) -> usize {
        self.sigma_beta.nrows()
    }

    pub fn beta_precision(&self) -> Result<DMatrix<f64>> {
        Ok(Spd::new(&self.sigma_beta, "prior Sigma_beta")?.inverse())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// `W_i = 0`.
    Centered,
    /// `W_i = I`.
    Noncentered,
    /// `W_i` set once from the initial fit, then frozen.
    PartialFixed,
    /// `W_i` refreshed at the start of every cycle.
    PartialAdaptive,
}

impl Parametrization {
    pub const ALL: [Parametrization; 4] = [
        Parametrization::Centered,
        Parametrization::Noncentered,
        Parametrization::PartialFixed,
        Parametrization::PartialAdaptive,
    ];

    pub fn is_partial(self) -> bool {
        matches!(self, Parametrization::PartialFixed | Parametrization::PartialAdaptive)
    }
}

impl fmt::Display for Parametrization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parametrization::Centered => "centered",
            Parametrization::Noncentered => "noncentered",
            Parametrization::PartialFixed => "partial-fixed",
            Parametrization::PartialAdaptive => "partial-adaptive",
        })
    }
}

impl std::str::FromStr for Parametrization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Parametrization::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown parametrization '{s}'")))
    }
}

/// `V_i`, `W~_i` and `C_i` for one cluster under a given tuning matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDesign {
    pub v: DMatrix<f64>,
    pub w_tilde: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// `C_i = [I_r | e_1 x^{G1 T}]`: the subject-level row only shifts the
/// intercept.
pub fn subject_map(cluster: &ClusterData) -> DMatrix<f64> {
    let (r, g1) = (cluster.r(), cluster.g1());
    DMatrix::from_fn(r, r + g1, |a, b| {
        if b < r {
            if a == b { 1.0 } else { 0.0 }
        } else if a == 0 {
            cluster.xg1[b - r]
        } else {
            0.0
        }
    })
}

pub fn build_cluster_design(cluster: &ClusterData, w: &DMatrix<f64>) -> Result<ClusterDesign> {
    let (r, g1, g2) = (cluster.r(), cluster.g1(), cluster.g2());
    if w.shape() != (r, r) {
        return Err(Error::shape("W", format!("{r}x{r}"), format!("{}x{}", w.nrows(), w.ncols())));
    }
    if cluster.xr.nrows() != cluster.len() {
        return Err(Error::shape("X^R rows", cluster.len(), cluster.xr.nrows()));
    }
    if cluster.xg2.nrows() != cluster.len() {
        return Err(Error::shape("X^{G2} rows", cluster.len(), cluster.xg2.nrows()));
    }
    let c = subject_map(cluster);
    let p = r + g1 + g2;
    let n = cluster.len();

    let left = &cluster.xr * w * &c;
    let mut v = DMatrix::zeros(n, p);
    v.view_mut((0, 0), (n, r + g1)).copy_from(&left);
    v.view_mut((0, r + g1), (n, g2)).copy_from(&cluster.xg2);

    let mut w_tilde = DMatrix::zeros(r, p);
    let shifted = (DMatrix::identity(r, r) - w) * &c;
    w_tilde.view_mut((0, 0), (r, r + g1)).copy_from(&shifted);

    Ok(ClusterDesign { v, w_tilde, c })
}

/// Variational factor for one cluster plus its current tuning matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub mu_alpha: DVector<f64>,
    pub sigma_alpha: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w_tilde: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// All variational parameters: `q(beta) = N(mu_beta, Sigma_beta)`,
/// `q(D) = IW(nu_q, S_q)` and `q(alpha~_i) = N(mu_alpha_i, Sigma_alpha_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mu_beta: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub nu_q: f64,
    pub s_q: DMatrix<f64>,
    pub clusters: Vec<ClusterState>,
}

impl VariationalState {
    /// Replaces `W_i` and rebuilds `V_i`, `W~_i`.
    pub fn set_tuning(&mut self, i: usize, cluster: &ClusterData, w: DMatrix<f64>) -> Result<()> {
        let design = build_cluster_design(cluster, &w)?;
        let cs = &mut self.clusters[i];
        cs.w = w;
        cs.v = design.v;
        cs.w_tilde = design.w_tilde;
        cs.c = design.c;
        Ok(())
    }

    /// `E_q[u_i] = mu_alpha_i - W~_i mu_beta`.
    pub fn random_effect_mean(&self, i: usize) -> DVector<f64> {
        let cs = &self.clusters[i];
        &cs.mu_alpha - &cs.w_tilde * &self.mu_beta
    }

    /// `E_q[alpha_i] = E_q[C_i beta^{RG1} + u_i]`.
    pub fn alpha_mean(&self, i: usize) -> DVector<f64> {
        let cs = &self.clusters[i];
        let k = cs.c.ncols();
        &cs.mu_alpha + &cs.w * &cs.c * self.mu_beta.rows(0, k)
    }

    /// `mu_alpha` under a different tuning matrix that leaves `E_q[alpha_i]`
    /// unchanged.
    pub fn mu_alpha_for_tuning(&self, i: usize, w_new: &DMatrix<f64>) -> DVector<f64> {
        let cs = &self.clusters[i];
        let k = cs.c.ncols();
        &cs.mu_alpha + (&cs.w - w_new) * &cs.c * self.mu_beta.rows(0, k)
    }

    /// Verifies shapes, `nu_q = n + nu`, design consistency with each `W_i`,
    /// and positive definiteness of every covariance block.
    pub fn check_invariants(&self, ds: &Dataset, prior: &PriorSpec) -> Result<()> {
        let (p, r) = (ds.p(), ds.r);
        if self.mu_beta.len() != p || self.sigma_beta.shape() != (p, p) {
            return Err(Error::shape("q(beta)", p, self.mu_beta.len()));
        }
        if self.s_q.shape() != (r, r) {
            return Err(Error::shape("S_q", r, self.s_q.nrows()));
        }
        if self.clusters.len() != ds.n() {
            return Err(Error::shape("cluster states", ds.n(), self.clusters.len()));
        }
        let expected_nu = ds.n() as f64 + prior.nu;
        if (self.nu_q - expected_nu).abs() > 1e-12 * expected_nu {
            return Err(Error::Domain {
                func: "check_invariants",
                msg: format!("nu_q = {} but n + nu = {expected_nu}", self.nu_q),
            });
        }
        Spd::new(&self.sigma_beta, "Sigma_beta^q")?;
        Spd::new(&self.s_q, "S^q")?;
        for (cs, cluster) in self.clusters.iter().zip(&ds.clusters) {
            Spd::new(&cs.sigma_alpha, "Sigma_alpha^q")?;
            let design = build_cluster_design(cluster, &cs.w)?;
            let drift = (&design.v - &cs.v).abs().max().max((&design.w_tilde - &cs.w_tilde).abs().max());
            if drift > 1e-10 {
                return Err(Error::Domain {
                    func: "check_invariants",
                    msg: format!("V or W~ out of sync with W (max deviation {drift:e})"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub fixed: Vec<ParamSummary>,
    /// Random-effect standard deviations `sqrt(D_kk)`.
    pub random_sd: Vec<ParamSummary>,
    /// `E_q[D] = S_q / (nu_q - r - 1)`.
    pub d_mean: DMatrix<f64>,
    /// Elementwise posterior SD of `D` under `IW(nu_q, S_q)`.
    pub d_sd: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn from_state(state: &VariationalState, ds: &Dataset) -> Self {
        let fixed = ds
            .fixed_names
            .iter()
            .enumerate()
            .map(|(k, name)| ParamSummary {
                name: name.clone(),
                mean: state.mu_beta[k],
                sd: state.sigma_beta[(k, k)].max(0.0).sqrt(),
            })
            .collect();
        let (d_mean, d_sd) = inverse_wishart_moments(state.nu_q, &state.s_q);
        let r = ds.r;
        let random_sd = ds
            .random_names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let (mean, sd) = sqrt_diagonal_moments(state.nu_q, r, state.s_q[(k, k)]);
                ParamSummary {
                    name: format!("sigma[{name}]"),
                    mean,
                    sd,
                }
            })
            .collect();
        PosteriorSummary {
            fixed,
            random_sd,
            d_mean,
            d_sd,
        }
    }
}

/// Mean and elementwise SD of `D ~ IW(nu, S)`; entries are NaN where the
/// moment does not exist.
pub fn inverse_wishart_moments(nu: f64, s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = s.nrows() as f64;
    let mean_den = nu - r - 1.0;
    let mean = if mean_den > 0.0 { s / mean_den } else { DMatrix::from_element(s.nrows(), s.ncols(), f64::NAN) };
    let var_den = (nu - r) * (nu - r - 1.0).powi(2) * (nu - r - 3.0);
    let sd = DMatrix::from_fn(s.nrows(), s.ncols(), |a, b| {
        if var_den > 0.0 && nu - r - 3.0 > 0.0 {
            let num = (nu - r + 1.0) * s[(a, b)].powi(2) + (nu - r - 1.0) * s[(a, a)] * s[(b, b)];
            (num / var_den).sqrt()
        } else {
            f64::NAN
        }
    });
    (mean, sd)
}

/// Mean and SD of `sqrt(D_kk)` where `D_kk ~ InvGamma((nu - r + 1)/2, s_kk/2)`,
/// the diagonal marginal of `IW(nu, S)`.
pub fn sqrt_diagonal_moments(nu: f64, r: usize, s_kk: f64) -> (f64, f64) {
    let shape = (nu - r as f64 + 1.0) / 2.0;
    let scale = s_kk / 2.0;
    if shape <= 0.5 {
        return (f64::NAN, f64::NAN);
    }
    let mean = scale.sqrt() * (ln_gamma(shape - 0.5) - ln_gamma(shape)).exp();
    if shape <= 1.0 {
        return (mean, f64::NAN);
    }
    let second = scale / (shape - 1.0);
    (mean, (second - mean * mean).max(0.0).sqrt())
}

/// Output of one variational fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: VariationalState,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub summary: PosteriorSummary,
    pub parametrization: Parametrization,
    pub data_fingerprint: String,
    pub wall_time: Duration,
}

impl FitResult {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().unwrap_or(&f64::NAN)
    }
}
