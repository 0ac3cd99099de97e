//! Repeated fits on simulated replicates with an RMSE table against the
//! design truth.
//!
//!     cargo run --release --example simulation_study [replicates]

use glmmvb::engine::FitOptions;
use glmmvb::init::{fit_model, PriorConfig};
use glmmvb::model::{FitResult, Parametrization};
use glmmvb::selection::{rmse_report, Reference};
use glmmvb::simulate::{simulate_design, SimDesign, SimTag};
use rayon::prelude::*;

fn main() -> glmmvb::Result<()> {
    let replicates = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let design = SimDesign::new(SimTag::PoissonIntercept, replicates, 1);
    let data = simulate_design(&design)?;
    let truth = Reference::Fixed(design.design().truth().to_vec());
    for param in Parametrization::ALL {
        let fits: Vec<FitResult> = data
            .par_iter()
            .map(|ds| fit_model(ds, &PriorConfig::default(), param, &FitOptions::default()))
            .collect::<Result<_, _>>()?;
        println!("== {param}");
        print!("{}", rmse_report(&fits, &truth)?);
    }
    Ok(())
}
