//! The pooled GLM start and the data-driven prior it implies.
//!
//!     cargo run --example glm_start

use glmmvb::init::{glm_irls, prepare, prior_scale_from_data, PriorConfig};
use glmmvb::model::Parametrization;
use glmmvb::simulate::RandomInterceptDesign;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> glmmvb::Result<()> {
    let ds = RandomInterceptDesign::poisson_intercept().draw(&mut ChaCha8Rng::seed_from_u64(3))?;
    let glm = glm_irls(&ds)?;
    println!("IRLS: {} iterations, converged {}", glm.deviance_trace.len(), glm.converged);
    for (name, b) in ds.fixed_names.iter().zip(glm.beta_hat.iter()) {
        println!("  {name:<12} {b:>8.4}");
    }
    let (nu, s) = prior_scale_from_data(&ds, &glm, 1.0)?;
    println!("prior on D: nu = {nu}, S = {:.4}", s[(0, 0)]);

    let start = prepare(&ds, &PriorConfig::default(), Parametrization::PartialFixed)?;
    let w: Vec<f64> = start.state.clusters.iter().take(5).map(|c| c.w[(0, 0)]).collect();
    println!("first tuning weights W_i: {w:.3?}");
    Ok(())
}
