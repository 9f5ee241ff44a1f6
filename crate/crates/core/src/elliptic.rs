//! Complete and incomplete elliptic integrals of the first and second kind.
//!
//! Everything here uses the *modulus* convention: the integrands are
//! `1/√(1−k² sin²u)` and `√(1−k² sin²u)`. Note that this differs from the
//! parameter convention `m = k²` used by many numerical libraries.
//!
//! The first-kind incomplete integral is called `G` rather than the usual `F`,
//! since `F` denotes the swirl function elsewhere in this crate.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::quadrature;

/// Relative stopping threshold of the AGM iteration.
pub const AGM_TOLERANCE: f64 = 1e-15;
/// Iteration cap of the AGM iteration (quadratic convergence needs < 8).
pub const AGM_MAX_ITER: usize = 32;
/// Absolute tolerance of the Gauss–Kronrod quadrature for incomplete integrals.
pub const QUADRATURE_TOLERANCE: f64 = 1e-13;

fn check_open(k: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&k) {
        return Err(Error::Domain(format!("{what} requires 0 <= k < 1, got k = {k}")));
    }
    Ok(())
}

fn check_closed(k: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Domain(format!("{what} requires 0 <= k <= 1, got k = {k}")));
    }
    Ok(())
}

/// Runs the AGM on `(1, k')` and returns `(K, E)`.
///
/// `E/K = 1 − Σ 2^(n−1) c_n²` with `c_0 = k`.
fn agm_pair(k: f64) -> (f64, f64) {
    let mut a = 1.0;
    let mut b = (1.0 - k * k).sqrt();
    let mut sum = 0.5 * k * k;
    let mut pow2 = 0.5;
    for _ in 0..AGM_MAX_ITER {
        let c = 0.5 * (a - b);
        let a_next = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = a_next;
        pow2 *= 2.0;
        sum += pow2 * c * c;
        if c.abs() <= AGM_TOLERANCE * a {
            break;
        }
    }
    let big_k = PI / (2.0 * a);
    (big_k, big_k * (1.0 - sum))
}

/// Complete elliptic integral of the first kind, `K(k)`.
pub fn complete_k(k: f64) -> Result<f64> {
    check_open(k, "K(k)")?;
    Ok(agm_pair(k).0)
}

/// Complete elliptic integral of the second kind, `E(k)`, with `E(1) = 1`.
pub fn complete_e(k: f64) -> Result<f64> {
    check_closed(k, "E(k)")?;
    if k == 1.0 {
        return Ok(1.0);
    }
    Ok(agm_pair(k).1)
}

/// Both complete integrals from a single AGM run.
pub fn complete_ke(k: f64) -> Result<(f64, f64)> {
    check_open(k, "K(k), E(k)")?;
    Ok(agm_pair(k))
}

fn delta(k: f64, u: f64) -> f64 {
    let s = u.sin();
    (1.0 - k * k * s * s).sqrt()
}

/// Splits `phi = j·π + r` with `r ∈ [−π/2, π/2]`.
fn reduce_amplitude(phi: f64) -> (f64, f64) {
    let j = (phi / PI).round();
    (j, phi - j * PI)
}

/// Incomplete elliptic integral of the first kind, `G(φ, k) = ∫₀^φ du/√(1−k² sin²u)`.
///
/// Defined for all real `φ` through `G(φ+π, k) = G(φ, k) + 2K(k)` and oddness.
pub fn incomplete_g(phi: f64, k: f64) -> Result<f64> {
    check_open(k, "G(phi, k)")?;
    if !phi.is_finite() {
        return Err(Error::Domain(format!("G(phi, k) requires finite phi, got {phi}")));
    }
    let (j, r) = reduce_amplitude(phi);
    let base = if k == 0.0 {
        r
    } else {
        r.signum() * quadrature::integrate(|u| 1.0 / delta(k, u), 0.0, r.abs(), QUADRATURE_TOLERANCE)?
    };
    if j == 0.0 {
        Ok(base)
    } else {
        Ok(base + 2.0 * j * complete_k(k)?)
    }
}

/// Incomplete elliptic integral of the second kind, `E(φ, k) = ∫₀^φ √(1−k² sin²u) du`.
///
/// Defined for all real `φ` through `E(φ+π, k) = E(φ, k) + 2E(k)` and oddness.
pub fn incomplete_e(phi: f64, k: f64) -> Result<f64> {
    check_closed(k, "E(phi, k)")?;
    if !phi.is_finite() {
        return Err(Error::Domain(format!("E(phi, k) requires finite phi, got {phi}")));
    }
    let (j, r) = reduce_amplitude(phi);
    let base = if k == 0.0 {
        r
    } else {
        r.signum() * quadrature::integrate(|u| delta(k, u), 0.0, r.abs(), QUADRATURE_TOLERANCE)?
    };
    if j == 0.0 {
        Ok(base)
    } else {
        Ok(base + 2.0 * j * complete_e(k)?)
    }
}

fn check_derivative(k: f64, what: &str) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Domain(format!("{what} requires 0 < k < 1, got k = {k}")));
    }
    Ok(())
}

/// `dK/dk = E/(k(1−k²)) − K/k`. The removable point `k = 0` is rejected.
pub fn dk_dk(k: f64) -> Result<f64> {
    check_derivative(k, "dK/dk")?;
    let (big_k, big_e) = agm_pair(k);
    Ok(big_e / (k * (1.0 - k * k)) - big_k / k)
}

/// `dE/dk = (E − K)/k`. The removable point `k = 0` is rejected.
pub fn de_dk(k: f64) -> Result<f64> {
    check_derivative(k, "dE/dk")?;
    let (big_k, big_e) = agm_pair(k);
    Ok((big_e - big_k) / k)
}

/// k-derivative of `G(φ, k)` at fixed amplitude, for `φ ∈ [0, π/2]`.
///
/// `∂ₖG = E(φ)/(k k'²) − G(φ)/k − k sinφ cosφ / (k'² Δ(φ))`.
pub(crate) fn incomplete_g_dk(phi: f64, k: f64, g: f64, e: f64) -> f64 {
    let kp2 = 1.0 - k * k;
    e / (k * kp2) - g / k - k * phi.sin() * phi.cos() / (kp2 * delta(k, phi))
}

/// k-derivative of `E(φ, k)` at fixed amplitude: `(E(φ) − G(φ))/k`.
pub(crate) fn incomplete_e_dk(k: f64, g: f64, e: f64) -> f64 {
    (e - g) / k
}

fn series_check(k: f64, n_terms: usize) -> Result<()> {
    check_open(k, "series")?;
    if n_terms == 0 {
        return Err(Error::Domain("series needs at least one term".into()));
    }
    Ok(())
}

/// Squared central-binomial coefficients `((2n)!/(2^{2n}(n!)²))²`, n = 0, 1, ...
fn binomial_squares(n_terms: usize) -> impl Iterator<Item = (usize, f64)> {
    (0..n_terms).scan(1.0f64, |c, n| {
        if n > 0 {
            *c *= (2 * n - 1) as f64 / (2 * n) as f64;
        }
        Some((n, *c * *c))
    })
}

/// Truncated power series `K(k) ≈ π/2 Σ_{n<N} c_n² k^{2n}`.
pub fn series_k(k: f64, n_terms: usize) -> Result<f64> {
    series_check(k, n_terms)?;
    let k2 = k * k;
    let mut pow = 1.0;
    let mut sum = 0.0;
    for (_, c2) in binomial_squares(n_terms) {
        sum += c2 * pow;
        pow *= k2;
    }
    Ok(FRAC_PI_2 * sum)
}

/// Truncated power series `E(k) ≈ π/2 Σ_{n<N} c_n² k^{2n}/(1−2n)`.
pub fn series_e(k: f64, n_terms: usize) -> Result<f64> {
    series_check(k, n_terms)?;
    let k2 = k * k;
    let mut pow = 1.0;
    let mut sum = 0.0;
    for (n, c2) in binomial_squares(n_terms) {
        sum += c2 * pow / (1.0 - 2.0 * n as f64);
        pow *= k2;
    }
    Ok(FRAC_PI_2 * sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson on many panels; independent of the AGM and GK routes.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut s = f(a) + f(b);
        for i in 1..panels {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn frozen_values_from_simpson_oracle() {
        // The oracle values below were reproduced with 20000-panel Simpson.
        let kq = |k: f64| simpson(|u| 1.0 / delta(k, u), 0.0, FRAC_PI_2, 20_000);
        let eq = |k: f64| simpson(|u| delta(k, u), 0.0, FRAC_PI_2, 20_000);
        assert!((kq(0.5) - 1.685_750_354_8).abs() < 1e-10);
        assert!((kq(0.9) - 2.280_549_138_4).abs() < 1e-10);
        assert!((eq(0.5) - 1.467_462_209_3).abs() < 1e-10);

        assert!((complete_k(0.5).unwrap() - 1.685_750_354_8).abs() < 1e-10);
        assert!((complete_k(0.9).unwrap() - 2.280_549_138_4).abs() < 1e-10);
        assert!((complete_e(0.5).unwrap() - 1.467_462_209_3).abs() < 1e-10);
        for k in [0.1, 0.37, 0.72, 0.95] {
            assert!((complete_k(k).unwrap() - kq(k)).abs() < 1e-12);
            assert!((complete_e(k).unwrap() - eq(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints() {
        assert_eq!(complete_k(0.0).unwrap(), FRAC_PI_2);
        assert_eq!(complete_e(0.0).unwrap(), FRAC_PI_2);
        assert_eq!(complete_e(1.0).unwrap(), 1.0);
        assert!(complete_k(1.0).is_err());
        assert!(complete_k(-0.1).is_err());
        assert!(complete_e(1.0001).is_err());
        assert!(incomplete_g(0.3, 1.0).is_err());
        assert!(incomplete_e(0.3, f64::NAN).is_err());
        assert!(incomplete_g(f64::INFINITY, 0.3).is_err());
    }

    #[test]
    fn incomplete_special_values() {
        for k in [0.0, 0.3, 0.8, 0.99] {
            assert_eq!(incomplete_g(0.0, k).unwrap(), 0.0);
            assert_eq!(incomplete_e(0.0, k).unwrap(), 0.0);
            let g = incomplete_g(FRAC_PI_2, k).unwrap();
            assert!((g - complete_k(k).unwrap()).abs() < 1e-12, "k={k}");
            let e = incomplete_e(FRAC_PI_2, k).unwrap();
            assert!((e - complete_e(k).unwrap()).abs() < 1e-12, "k={k}");
        }
        assert_eq!(incomplete_g(0.7, 0.0).unwrap(), 0.7);
        assert_eq!(incomplete_e(1.2, 0.0).unwrap(), 1.2);
        assert!((incomplete_e(1.0, 1.0).unwrap() - 1f64.sin()).abs() < 1e-13);
    }

    #[test]
    fn derivative_values() {
        // Frozen from central differences of the Simpson oracle at h = 1e-5.
        assert!((de_dk(0.5).unwrap() + 0.436_576_291_0).abs() < 1e-9);
        assert!((dk_dk(0.5).unwrap() - 0.541_731_848_6).abs() < 1e-9);
        assert!(dk_dk(0.0).is_err());
        assert!(de_dk(0.0).is_err());
        assert!(dk_dk(1.0).is_err());
        // K is even in k, so dK/dk -> 0 at the origin.
        assert!(dk_dk(1e-6).unwrap().abs() < 1e-5);
    }

    #[test]
    fn incomplete_k_derivatives_match_quadrature() {
        for &(phi, k) in &[(0.4, 0.3), (1.1, 0.7), (FRAC_PI_2, 0.5), (1.5, 0.95)] {
            let g = incomplete_g(phi, k).unwrap();
            let e = incomplete_e(phi, k).unwrap();
            let dg = simpson(|u| k * u.sin().powi(2) / delta(k, u).powi(3), 0.0, phi, 20_000);
            let de = -simpson(|u| k * u.sin().powi(2) / delta(k, u), 0.0, phi, 20_000);
            assert!((incomplete_g_dk(phi, k, g, e) - dg).abs() < 1e-11);
            assert!((incomplete_e_dk(k, g, e) - de).abs() < 1e-11);
        }
    }

    #[test]
    fn series_oracles() {
        assert_eq!(series_k(0.0, 1).unwrap(), FRAC_PI_2);
        assert_eq!(series_e(0.0, 1).unwrap(), FRAC_PI_2);
        assert!((series_k(0.3, 30).unwrap() - complete_k(0.3).unwrap()).abs() < 1e-12);
        assert!((series_e(0.3, 30).unwrap() - complete_e(0.3).unwrap()).abs() < 1e-12);
        assert!(series_k(0.3, 0).is_err());
    }

    #[test]
    fn quasi_periodicity_and_oddness() {
        for &k in &[0.2, 0.6, 0.9] {
            let (big_k, big_e) = complete_ke(k).unwrap();
            for &phi in &[-2.0, -0.3, 0.0, 0.9, 1.4, 4.0] {
                let g0 = incomplete_g(phi, k).unwrap();
                let g1 = incomplete_g(phi + PI, k).unwrap();
                let e0 = incomplete_e(phi, k).unwrap();
                let e1 = incomplete_e(phi + PI, k).unwrap();
                assert!((g1 - g0 - 2.0 * big_k).abs() < 1e-11);
                assert!((e1 - e0 - 2.0 * big_e).abs() < 1e-11);
                assert!((incomplete_g(-phi, k).unwrap() + g0).abs() < 1e-14);
            }
        }
    }
}
