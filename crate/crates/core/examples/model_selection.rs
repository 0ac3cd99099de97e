//! Lower-bound model comparison: posterior model probabilities for a pair
//! of nested models, then a drop-one tournament.
//!
//!     cargo run --example model_selection

use glmmvb::engine::FitOptions;
use glmmvb::init::{fit_model, PriorConfig};
use glmmvb::model::{Family, Parametrization};
use glmmvb::selection::{compare_models, drop_fixed_effect, drop_one_tournament};
use glmmvb::simulate::RandomInterceptDesign;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> glmmvb::Result<()> {
    let design = RandomInterceptDesign {
        family: Family::Bernoulli,
        beta0: 0.5,
        beta1: 1.0,
        sigma: 0.3,
        clusters: 50,
        x: vec![0.0, 1.0, 2.0, 3.0],
    };
    let ds = design.draw(&mut ChaCha8Rng::seed_from_u64(4))?;
    let (prior, options, param) = (PriorConfig::default(), FitOptions::default(), Parametrization::PartialFixed);

    let full = fit_model(&ds, &prior, param, &options)?;
    let reduced = fit_model(&drop_fixed_effect(&ds, "x")?, &prior, param, &options)?;
    println!("{}", compare_models(&["with x".into(), "intercept only".into()], &[full, reduced])?);

    let t = drop_one_tournament(&ds, &["x".into()], &prior, param, &options)?;
    for (k, stage) in t.stages.iter().enumerate() {
        println!("stage {}: {:?} -> dropped {:?}", k + 1, stage.current, stage.dropped);
    }
    println!("selected {:?}", t.selected_effects());
    Ok(())
}
