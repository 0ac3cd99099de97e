//! Binary responses with a random intercept, fitted under every
//! parametrization.
//!
//!     cargo run --example fit_logistic

use glmmvb::engine::FitOptions;
use glmmvb::init::{fit_model, PriorConfig};
use glmmvb::model::Parametrization;
use glmmvb::simulate::RandomInterceptDesign;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> glmmvb::Result<()> {
    let ds = RandomInterceptDesign::logistic_intercept().draw(&mut ChaCha8Rng::seed_from_u64(8))?;
    println!("{:>18} {:>9} {:>9} {:>9} {:>11} {:>6}", "parametrization", "beta0", "beta1", "sigma", "L", "iter");
    for param in Parametrization::ALL {
        let fit = fit_model(&ds, &PriorConfig::default(), param, &FitOptions::default())?;
        let s = &fit.summary;
        println!(
            "{:>18} {:>9.4} {:>9.4} {:>9.4} {:>11.4} {:>6}",
            param.to_string(),
            s.fixed[0].mean,
            s.fixed[1].mean,
            s.random_sd[0].mean,
            fit.elbo(),
            fit.iterations
        );
    }
    Ok(())
}
