//! Random-intercept simulation designs
//!
//! ```text
//! y_ij | u_i ~ F(g^{-1}(beta_0 + beta_1 x_ij + u_i)),   u_i ~ N(0, sigma^2)
//! ```
//!
//! Replicate `k` draws from a ChaCha8 stream seeded by `seed` with stream
//! number `k`, so replicates are reproducible individually and in parallel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterData, Dataset, Family};
use crate::special::logistic;

/// One covariate `x`, shared by every cluster, plus a random intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptDesign {
    pub family: Family,
    pub beta0: f64,
    pub beta1: f64,
    pub sigma: f64,
    pub clusters: usize,
    /// `x_i1, ..., x_in_i`.
    pub x: Vec<f64>,
}

impl RandomInterceptDesign {
    pub fn poisson_intercept() -> Self {
        RandomInterceptDesign {
            family: Family::Poisson,
            beta0: -0.5,
            beta1: -0.5,
            sigma: 0.1,
            clusters: 100,
            x: vec![0.0, 1.0],
        }
    }

    pub fn logistic_intercept() -> Self {
        RandomInterceptDesign {
            family: Family::Bernoulli,
            beta0: 0.0,
            beta1: 5.0,
            sigma: 1.5f64.sqrt(),
            clusters: 50,
            x: (1..=8).map(|j| j as f64 / 8.0).collect(),
        }
    }

    /// `(beta_0, beta_1, sigma)` in the order reported by a fit.
    pub fn truth(&self) -> [(String, f64); 3] {
        [
            ("(Intercept)".into(), self.beta0),
            ("x".into(), self.beta1),
            ("sigma[(Intercept)]".into(), self.sigma),
        ]
    }

    fn check(&self) -> Result<()> {
        if self.clusters == 0 || self.x.is_empty() {
            return Err(Error::Config("design needs at least one cluster and one observation per cluster".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be finite and nonnegative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Draws one dataset from `rng`.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<Dataset> {
        self.check()?;
        let u_dist = Normal::new(0.0, self.sigma).map_err(|e| Error::Config(e.to_string()))?;
        let m = self.x.len();
        let clusters = (0..self.clusters)
            .map(|_| {
                let u = u_dist.sample(rng);
                let y = DVector::from_iterator(
                    m,
                    self.x.iter().map(|&x| {
                        let eta = self.beta0 + self.beta1 * x + u;
                        match self.family {
                            Family::Poisson => {
                                let rate = eta.exp();
                                if rate > 0.0 {
                                    Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
                                } else {
                                    0.0
                                }
                            }
                            Family::Bernoulli => f64::from(u8::from(rng.gen::<f64>() < logistic(eta))),
                        }
                    }),
                );
                ClusterData::new(
                    y,
                    DMatrix::from_element(m, 1, 1.0),
                    DVector::zeros(0),
                    DMatrix::from_column_slice(m, 1, &self.x),
                )
            })
            .collect();
        let mut ds = Dataset::new(self.family, clusters)?;
        ds.fixed_names[1] = "x".into();
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimTag {
    /// `beta_0 = beta_1 = -0.5`, `sigma = 0.1`, `n = 100`, `n_i = 2`,
    /// `x_ij = j - 1`.
    PoissonIntercept,
    /// `beta_0 = 0`, `beta_1 = 5`, `sigma = sqrt(1.5)`, `n = 50`, `n_i = 8`,
    /// `x_ij = j / 8`.
    LogisticIntercept,
    Custom(RandomInterceptDesign),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub tag: SimTag,
    pub replicates: usize,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(tag: SimTag, replicates: usize, seed: u64) -> Self {
        SimDesign { tag, replicates, seed }
    }

    pub fn design(&self) -> RandomInterceptDesign {
        match &self.tag {
            SimTag::PoissonIntercept => RandomInterceptDesign::poisson_intercept(),
            SimTag::LogisticIntercept => RandomInterceptDesign::logistic_intercept(),
            SimTag::Custom(d) => d.clone(),
        }
    }

    pub fn replicate_rng(&self, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        rng
    }
}

/// All replicate datasets, in replicate order.
pub fn simulate_design(design: &SimDesign) -> Result<Vec<Dataset>> {
    let d = design.design();
    (0..design.replicates)
        .into_par_iter()
        .map(|k| d.draw(&mut design.replicate_rng(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preset_shapes() {
        let p = simulate_design(&SimDesign::new(SimTag::PoissonIntercept, 2, 1)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].n(), 100);
        assert!(p[0].clusters.iter().all(|c| c.len() == 2));
        assert_eq!(p[0].clusters[0].xg2.column(0).as_slice(), &[0.0, 1.0]);
        let l = simulate_design(&SimDesign::new(SimTag::LogisticIntercept, 1, 1)).unwrap();
        assert_eq!(l[0].n(), 50);
        assert!(l[0].clusters.iter().all(|c| c.len() == 8));
        assert_eq!(l[0].clusters[0].xg2[(7, 0)], 1.0);
        assert_eq!(l[0].fixed_names, vec!["(Intercept)".to_string(), "x".into()]);
    }

    #[test]
    fn seeded_replicates_repeat() {
        let d = SimDesign::new(SimTag::LogisticIntercept, 3, 99);
        let a = simulate_design(&d).unwrap();
        let b = simulate_design(&d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.response_fingerprint(), y.response_fingerprint());
        }
        assert_ne!(a[0].response_fingerprint(), a[1].response_fingerprint());
        // replicate k does not depend on how many replicates were asked for
        let single = SimDesign::new(SimTag::LogisticIntercept, 2, 99);
        assert_eq!(simulate_design(&single).unwrap()[1].response_fingerprint(), a[1].response_fingerprint());
    }

    #[test]
    fn logistic_margin_matches_integral() {
        // P(y = 1 | x = 1) = E_u expit(5 + u), u ~ N(0, 1.5)
        let design = RandomInterceptDesign {
            clusters: 100_000,
            x: vec![1.0],
            ..RandomInterceptDesign::logistic_intercept()
        };
        let ds = design.draw(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let freq = ds.clusters.iter().map(|c| c.y[0]).sum::<f64>() / 1e5;
        // midpoint rule on a wide grid
        let s = 1.5f64.sqrt();
        let h = 1e-3;
        let mut p = 0.0;
        let mut z = -10.0 + h / 2.0;
        while z < 10.0 {
            p += logistic(5.0 + s * z) * (-0.5 * z * z).exp() * h;
            z += h;
        }
        p /= (2.0 * std::f64::consts::PI).sqrt();
        let se = (p * (1.0 - p) / 1e5).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "{freq} vs {p}");
    }

    #[test]
    fn bad_designs_rejected() {
        let mut d = RandomInterceptDesign::poisson_intercept();
        d.sigma = -1.0;
        assert!(d.draw(&mut ChaCha8Rng::seed_from_u64(0)).is_err());
        d.sigma = 0.1;
        d.clusters = 0;
        assert!(d.draw(&mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn responses_respect_support(seed in 0u64..1000, beta0 in -3.0f64..3.0, sigma in 0.0f64..2.0) {
            for family in [Family::Poisson, Family::Bernoulli] {
                let d = RandomInterceptDesign { family, beta0, beta1: 1.0, sigma, clusters: 20, x: vec![0.0, 0.5, 1.0] };
                let ds = d.draw(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                for c in &ds.clusters {
                    for &y in c.y.iter() {
                        prop_assert!(y >= 0.0 && y.fract() == 0.0);
                        if family == Family::Bernoulli {
                            prop_assert!(y <= 1.0);
                        }
                    }
                }
            }
        }
    }
}
