//! Gaussian expectations of the softplus and its derivatives, the
//! integrals behind every logistic update.
//!
//!     cargo run --example quadrature

use glmmvb::quadrature::{adaptive_ghq_b, gauss_hermite_rule, logistic_moments};

fn main() -> glmmvb::Result<()> {
    let rule = gauss_hermite_rule(10)?;
    println!("{:>6} {:>6} {:>12} {:>12} {:>12}", "mu", "sigma", "B0", "B1", "B2");
    for (mu, sigma) in [(0.0, 0.1), (0.0, 4.0), (-3.0, 1.0), (2.5, 0.5), (6.0, 5.0)] {
        let b: Vec<f64> = (0..3).map(|k| adaptive_ghq_b(k, mu, sigma, &rule)).collect::<Result<_, _>>()?;
        println!("{mu:>6.2} {sigma:>6.2} {:>12.8} {:>12.8} {:>12.8}", b[0], b[1], b[2]);
    }

    // a whole cluster at once, sharing work across the three orders
    let mu = [-1.0, 0.0, 0.7, 3.2];
    let sigma = [0.3, 1.2, 2.0, 0.05];
    let m = logistic_moments(&mu, &sigma, &rule, true)?;
    println!("\nexpected responses G = {:.6?}", m.b1);
    println!("curvature weights  F = {:.6?}", m.b2);
    Ok(())
}
