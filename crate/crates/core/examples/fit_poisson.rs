//! Poisson counts with exposures, a random intercept and slope, one
//! subject-level and one within-subject covariate.
//!
//!     cargo run --example fit_poisson

use glmmvb::cli::summary_text;
use glmmvb::engine::FitOptions;
use glmmvb::init::{fit_model, PriorConfig};
use glmmvb::model::{ClusterData, Dataset, Family, Parametrization};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

fn main() -> glmmvb::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let u0 = Normal::new(0.0, 0.5).unwrap();
    let u1 = Normal::new(0.0, 0.3).unwrap();
    let visits = [-0.3, -0.1, 0.1, 0.3];
    let clusters = (0..59)
        .map(|_| {
            let base: f64 = rng.gen_range(0.5..2.5);
            let trt = f64::from(u8::from(rng.gen_bool(0.5)));
            let (a, b) = (u0.sample(&mut rng), u1.sample(&mut rng));
            let xr = DMatrix::from_fn(4, 2, |j, k| if k == 0 { 1.0 } else { visits[j] });
            let xg2 = DMatrix::from_fn(4, 1, |j, _| if j == 3 { 1.0 } else { 0.0 });
            let weeks = DVector::from_vec(vec![2.0, 2.0, 2.0, 2.0]);
            let y = DVector::from_fn(4, |j, _| {
                let eta = -0.5 + (0.9 + a) + (-0.3 + b) * visits[j] + 0.6 * base - 0.3 * trt - 0.1 * xg2[(j, 0)];
                Poisson::new(weeks[j] * f64::exp(eta)).unwrap().sample(&mut rng)
            });
            ClusterData::new(y, xr, DVector::from_vec(vec![base, trt]), xg2).with_offset(weeks)
        })
        .collect();
    let mut ds = Dataset::new(Family::Poisson, clusters)?;
    ds.fixed_names = ["(Intercept)", "visit", "base", "trt", "visit4"].map(String::from).to_vec();
    ds.random_names = ["(Intercept)", "visit"].map(String::from).to_vec();

    let fit = fit_model(&ds, &PriorConfig::default(), Parametrization::PartialFixed, &FitOptions::default())?;
    print!("{}", summary_text(&fit));
    println!("E[D] =\n{:.4}", fit.summary.d_mean);
    Ok(())
}
