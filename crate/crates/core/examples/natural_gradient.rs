//! Duplication matrices and the natural-parameter form of a Gaussian
//! update. For a quadratic target the generic update `V^{-1} U g` and the
//! mean/covariance shortcut land on the same natural parameters.
//!
//!     cargo run --example natural_gradient

use glmmvb::natgrad::{duplication_matrix, generic_gaussian_update, vec, vech};
use nalgebra::{DMatrix, DVector};

fn main() -> glmmvb::Result<()> {
    let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
    let d = duplication_matrix(3);
    println!("D_3 is {}x{}; D vech(A) == vec(A): {}", d.nrows(), d.ncols(), (&d * vech(&a) - vec(&a)).amax() < 1e-15);

    // S(mu, Sigma) = E log N(x; m, P^{-1}) up to constants:
    // dS/dSigma = -P/2, dS/dmu = -P (mu - m)
    let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let m = DVector::from_vec(vec![1.0, -2.0]);
    let mu = DVector::from_vec(vec![0.0, 0.0]);
    let sigma = DMatrix::identity(2, 2);
    let g_sigma = vec(&(&p * -0.5));
    let g_mu = -(&p * (&mu - &m));
    let u = generic_gaussian_update(&mu, &sigma, &g_sigma, &g_mu)?;
    println!("new mean {:.6?}", u.mu.as_slice());
    println!("new covariance rows {:.6?}", (0..2).map(|i| u.sigma.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
    println!("max |generic - simplified| = {:.2e}", (&u.generic - &u.simplified).amax());
    Ok(())
}
