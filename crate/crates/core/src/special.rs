//! Scalar special functions used by the lower bound and the logistic
//! likelihood: digamma, the log multivariate gamma, and the softplus
//! function `b(x) = log(1 + e^x)` with its first two derivatives.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Below this the recurrence `psi(x) = psi(x + 1) - 1/x` is applied before
/// switching to the asymptotic series.
const DIGAMMA_SHIFT: f64 = 10.0;

/// Digamma function `psi(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain {
            func: "digamma",
            msg: format!("argument must be positive and finite, got {x}"),
        });
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number tail: B_2k / (2k x^2k), k = 1..7
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - tail)
}

/// `r(r-1)/4 log(pi) + sum_{l=1}^r log Gamma((nu + 1 - l) / 2)`.
///
/// This is the log normalising constant of the inverse-Wishart up to the
/// `2^{nu r / 2}` and `|S|` factors.
pub fn log_multigamma(nu: f64, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::Domain {
            func: "log_multigamma",
            msg: "dimension must be positive".into(),
        });
    }
    let mut total = (r * (r - 1)) as f64 / 4.0 * PI.ln();
    for l in 1..=r {
        let arg = (nu + 1.0 - l as f64) / 2.0;
        if !(arg > 0.0) {
            return Err(Error::Domain {
                func: "log_multigamma",
                msg: format!("gamma argument {arg} <= 0 (nu = {nu}, r = {r})"),
            });
        }
        total += ln_gamma(arg);
    }
    Ok(total)
}

/// `sum_{l=1}^r psi((nu + 1 - l) / 2)`, the digamma sum in `E log|D|`.
pub fn multi_digamma(nu: f64, r: usize) -> Result<f64> {
    (1..=r).map(|l| digamma((nu + 1.0 - l as f64) / 2.0)).sum()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `b^{(order)}(x)` for `b(x) = log(1 + e^x)`, `order` in {0, 1, 2}.
pub fn softplus_derivative(order: usize, x: f64) -> f64 {
    match order {
        0 => softplus(x),
        1 => logistic(x),
        2 => {
            let s = logistic(x);
            s * (1.0 - s)
        }
        _ => panic!("softplus derivative of order {order} is not supported"),
    }
}

/// `log b^{(order)}(x)` and its first two derivatives in `x`.
pub(crate) fn log_softplus_derivative(order: usize, x: f64) -> (f64, f64, f64) {
    match order {
        0 => {
            let b = softplus(x);
            let s = logistic(x);
            let ratio = s / b;
            // d/dx (b'/b) = b''/b - (b'/b)^2
            (b.ln(), ratio, s * (1.0 - s) / b - ratio * ratio)
        }
        1 => {
            // log sigma(x) = -softplus(-x)
            let s = logistic(x);
            (-softplus(-x), 1.0 - s, -s * (1.0 - s))
        }
        2 => {
            let s = logistic(x);
            (-softplus(-x) - softplus(x), 1.0 - 2.0 * s, -2.0 * s * (1.0 - s))
        }
        _ => panic!("softplus derivative of order {order} is not supported"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_values() {
        assert_relative_eq!(digamma(1.0).unwrap(), -EULER_GAMMA, epsilon = 1e-13);
        let d2 = digamma(2.0).unwrap();
        assert_relative_eq!(d2, digamma(1.0).unwrap() + 1.0, epsilon = 1e-13);
        assert_relative_eq!(
            digamma(0.5).unwrap(),
            -EULER_GAMMA - 2.0 * 2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn digamma_matches_log_gamma_derivative() {
        for &x in &[0.05f64, 0.3, 1.7, 4.2, 9.9, 10.1, 55.0, 1234.5] {
            let h = 1e-5 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert_relative_eq!(digamma(x).unwrap(), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn digamma_rejects_nonpositive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
    }

    #[test]
    fn multigamma_cases() {
        assert_relative_eq!(log_multigamma(2.0, 1).unwrap(), 0.0, epsilon = 1e-14);
        let expected = ln_gamma(1.5) + ln_gamma(1.0) + 0.5 * PI.ln();
        assert_relative_eq!(log_multigamma(3.0, 2).unwrap(), expected, epsilon = 1e-13);
        for r in 1..4 {
            let nu = r as f64 + 0.7;
            let shift: f64 = (1..=r).map(|l| ((nu + 1.0 - l as f64) / 2.0).ln()).sum();
            let diff = log_multigamma(nu + 2.0, r).unwrap() - log_multigamma(nu, r).unwrap();
            assert_relative_eq!(diff, shift, epsilon = 1e-12);
        }
        assert!(log_multigamma(0.5, 2).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_relative_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(softplus(800.0), 800.0, epsilon = 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        for &x in &[-30.0f64, -2.0, 0.3, 5.0, 40.0] {
            let (_, d1, d2) = log_softplus_derivative(0, x);
            let h = 1e-5;
            let f = |t: f64| softplus(t).ln();
            assert_relative_eq!(d1, (f(x + h) - f(x - h)) / (2.0 * h), max_relative = 1e-6);
            let g = |t: f64| log_softplus_derivative(0, t).1;
            assert_relative_eq!(d2, (g(x + h) - g(x - h)) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-9);
        }
    }
}
