//! Cholesky-based helpers for symmetric positive-definite matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Spd {
    l: DMatrix<f64>,
}

impl Spd {
    /// Factorizes `a`. A failed attempt is retried once on `(a + a^T) / 2`
    /// before giving up; the error carries the failing pivot.
    pub fn new(a: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape(what, "square matrix", format!("{}x{}", a.nrows(), a.ncols())));
        }
        match cholesky(a) {
            Ok(l) => Ok(Spd { l }),
            Err(_) => {
                let sym = symmetrize(a);
                cholesky(&sym)
                    .map(|l| Spd { l })
                    .map_err(|pivot| Error::NotPositiveDefinite { what, pivot })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Returns `A^{-1} B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Explicit inverse, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        symmetrize(&self.solve(&DMatrix::identity(n, n)))
    }
}

/// Plain Cholesky; on failure returns the offending pivot.
fn cholesky(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, f64> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(if d.is_finite() { d } else { f64::NAN });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `A^{-1} B` for SPD `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(Spd::new(a, "spd_solve")?.solve(b))
}

pub fn spd_logdet(a: &DMatrix<f64>) -> Result<f64> {
    Ok(Spd::new(a, "spd_logdet")?.logdet())
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    Ok(Spd::new(a, what)?.inverse())
}

/// `diag(A M A^T)` without forming the product.
pub fn diag_quad_form(a: &DMatrix<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let am = a * m;
    DVector::from_iterator(
        a.nrows(),
        (0..a.nrows()).map(|i| am.row(i).dot(&a.row(i))),
    )
}

/// `A^T diag(w) A`.
pub fn weighted_gram(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    symmetrize(&(a.transpose() * scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_and_diagonal() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_relative_eq!(spd_logdet(&i3).unwrap(), 0.0);
        assert_relative_eq!(spd_solve(&i3, &b).unwrap(), b);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        assert_relative_eq!(spd_logdet(&d).unwrap(), 16f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_spd(4, &mut rng);
            let b = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0));
            let x = spd_solve(&a, &b).unwrap();
            assert!((&a * x - &b).abs().max() < 1e-10);
            let det = a.clone().determinant();
            assert_relative_eq!(spd_logdet(&a).unwrap(), det.ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match Spd::new(&a, "test") {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_relative_eq!(pivot, -3.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rounding_is_tolerated() {
        let mut a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        a[(0, 1)] += 1e-13;
        assert!(Spd::new(&a, "test").is_ok());
    }

    #[test]
    fn quad_form_and_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let m = random_spd(3, &mut rng);
        let full = &a * &m * a.transpose();
        assert_relative_eq!(diag_quad_form(&a, &m), full.diagonal(), epsilon = 1e-12);
        let w = DVector::from_fn(5, |_, _| rng.gen_range(0.1..2.0));
        let g = a.transpose() * DMatrix::from_diagonal(&w) * &a;
        assert_relative_eq!(weighted_gram(&a, &w), g, epsilon = 1e-12);
    }
}
