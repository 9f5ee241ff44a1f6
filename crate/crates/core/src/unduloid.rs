//! Unduloids: periodic surfaces of revolution with constant mean curvature.
//!
//! Two parametrizations are supported. [`AxisParams`] uses the minimal and
//! maximal radii `a < c` of the generating curve
//!
//! ```text
//! r(t) = √(p sin(μt) + q),   z(t) = a G(μt/2 − π/4, k) + c E(μt/2 − π/4, k),
//! ```
//!
//! while [`ShapeParams`] separates size `b` (period `2πb`) from shape `k`.
//! Profiles are evaluated in graph form `r = η(z)` with the bulge at `z = 0`.
//!
//! Internally the profile is parametrized by the amplitude `θ = μt/2 − π/4`,
//! in which `η = c√(1 − k² sin²θ)` and `z(θ) = a G(θ, k) + c E(θ, k)`; the
//! half period `z ∈ [0, πb]` corresponds to `θ ∈ [0, π/2]`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::elliptic;
use crate::error::{Error, Result};

/// Stopping threshold of the graph-form inversion, in the amplitude variable.
pub const INVERSION_TOLERANCE: f64 = 1e-14;
const INVERSION_MAX_ITER: usize = 80;
/// Relative k-step of the finite-difference k-derivative of the profile.
pub const K_STEP_FACTOR: f64 = 1e-4;

/// Generating-curve radii `a` (neck) and `c` (bulge), `c > a > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisParams {
    pub a: f64,
    pub c: f64,
}

/// Size `b > 0` and shape `k ∈ (0, 1)`; `k = 0` is the cylinder of radius `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub b: f64,
    pub k: f64,
}

/// The constants `μ, p, q, k` entering the parametric curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    pub mu: f64,
    pub p: f64,
    pub q: f64,
    pub k: f64,
}

/// Profile value and first two z-derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSample {
    pub eta: f64,
    pub eta_z: f64,
    pub eta_zz: f64,
}

/// Mean curvature of the surface of revolution generated by `r = η(z)`,
/// in the convention where a cylinder of radius `R` has curvature `−1/R`.
pub fn curvature(eta: f64, eta_z: f64, eta_zz: f64) -> f64 {
    let w = 1.0 + eta_z * eta_z;
    eta_zz / w.powf(1.5) - 1.0 / (eta * w.sqrt())
}

impl ProfileSample {
    pub fn curvature(&self) -> f64 {
        curvature(self.eta, self.eta_z, self.eta_zz)
    }
}

/// `g(k) = π / (E(k) + √(1−k²) K(k))`, increasing from `g(0) = 1` to `π`.
pub fn g_of_k(k: f64) -> Result<f64> {
    let (big_k, big_e) = elliptic::complete_ke(k)?;
    Ok(PI / (big_e + (1.0 - k * k).sqrt() * big_k))
}

/// Period of any unduloid of size `b`.
pub fn period_shape(b: f64) -> f64 {
    2.0 * PI * b
}

impl AxisParams {
    pub fn new(a: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && c > a && c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "unduloid radii need c > a > 0, got a = {a}, c = {c}"
            )));
        }
        Ok(Self { a, c })
    }

    pub fn derived_constants(&self) -> DerivedConstants {
        let (a, c) = (self.a, self.c);
        DerivedConstants {
            mu: 2.0 / (a + c),
            p: 0.5 * (c * c - a * a),
            q: 0.5 * (c * c + a * a),
            k: (c * c - a * a).sqrt() / c,
        }
    }

    pub fn to_shape(&self) -> Result<ShapeParams> {
        let k = self.derived_constants().k;
        ShapeParams::new(self.c / g_of_k(k)?, k)
    }

    /// Point `(r, z)` of the generating curve at parameter `t`.
    pub fn param_point(&self, t: f64) -> Result<(f64, f64)> {
        let dc = self.derived_constants();
        let r = (dc.p * (dc.mu * t).sin() + dc.q).sqrt();
        let amp = 0.5 * dc.mu * t - FRAC_PI_4;
        let z = self.a * elliptic::incomplete_g(amp, dc.k)? + self.c * elliptic::incomplete_e(amp, dc.k)?;
        Ok((r, z))
    }

    /// `P = 2cE(k) + 2aK(k)`.
    pub fn period(&self) -> Result<f64> {
        let (big_k, big_e) = elliptic::complete_ke(self.derived_constants().k)?;
        Ok(2.0 * self.c * big_e + 2.0 * self.a * big_k)
    }

    /// `κ = −2/(a + c)`.
    pub fn mean_curvature(&self) -> f64 {
        -2.0 / (self.a + self.c)
    }
}

impl ShapeParams {
    /// Non-degenerate unduloid: `b > 0`, `0 < k < 1`.
    pub fn new(b: f64, k: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite() && k > 0.0 && k < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "shape parameters need b > 0 and 0 < k < 1, got b = {b}, k = {k}"
            )));
        }
        Ok(Self { b, k })
    }

    /// Like [`ShapeParams::new`] but also admits the flat cylinder `k = 0`.
    pub fn new_allow_flat(b: f64, k: f64) -> Result<Self> {
        if k == 0.0 && b > 0.0 && b.is_finite() {
            return Ok(Self { b, k });
        }
        Self::new(b, k)
    }

    pub fn is_flat(&self) -> bool {
        self.k == 0.0
    }

    /// `c = b g(k)`, `a = c √(1−k²)`. Fails for the flat cylinder.
    pub fn to_axis(&self) -> Result<AxisParams> {
        let c = self.b * g_of_k(self.k)?;
        AxisParams::new(c * (1.0 - self.k * self.k).sqrt(), c)
    }

    pub fn period(&self) -> f64 {
        period_shape(self.b)
    }

    /// `κ^{b,k} = −2 (E + k'K) / (π b (1 + k'))`, valid on `[0, 1)`.
    pub fn mean_curvature(&self) -> Result<f64> {
        let (big_k, big_e) = elliptic::complete_ke(self.k)?;
        let kp = (1.0 - self.k * self.k).sqrt();
        Ok(-2.0 * (big_e + kp * big_k) / (PI * self.b * (1.0 + kp)))
    }

    /// `κ^{b,k} + 1/b`, the offset from the cylinder value, evaluated without
    /// the cancellation of the direct formula near `k = 0`. For `k ≤ 1/2` it
    /// sums `E + k'K − π(1 + k')/2` as one power series in `k²`, whose first
    /// two coefficients vanish identically.
    pub fn curvature_offset(&self) -> Result<f64> {
        let k = self.k;
        if !(0.0..1.0).contains(&k) {
            return Err(Error::Domain(format!("curvature offset requires 0 <= k < 1, got {k}")));
        }
        let kp = (1.0 - k * k).sqrt();
        if k > 0.5 {
            return Ok(self.mean_curvature()? + 1.0 / self.b);
        }
        let x = k * k;
        // Coefficients of K, E and k' in powers of x.
        let n_terms = 80;
        let mut a2 = Vec::with_capacity(n_terms);
        let mut root = Vec::with_capacity(n_terms);
        let (mut a, mut c) = (1.0f64, 1.0f64);
        for n in 0..n_terms {
            if n > 0 {
                a *= (2 * n - 1) as f64 / (2 * n) as f64;
                c *= (n as f64 - 1.5) / n as f64;
            }
            a2.push(a * a);
            root.push(c);
        }
        let mut sum = 0.0;
        let mut pow = x * x;
        for n in 2..n_terms {
            let e_n = a2[n] / (1.0 - 2.0 * n as f64);
            let cauchy: f64 = (0..=n).map(|i| root[i] * a2[n - i]).sum();
            let term = (e_n + cauchy - root[n]) * pow;
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
            pow *= x;
        }
        Ok(-sum / (self.b * (1.0 + kp)))
    }

    /// Closed-form `∂ₖκ^{b,k} = −2 (2(E−K) + k²K) / (π b k k' (1 + k'))`.
    ///
    /// The bracket `2(E−K) + k²K` is strictly negative on `(0, 1)`, so the
    /// derivative never vanishes there (it is positive).
    pub fn dkappa_dk(&self) -> Result<f64> {
        let k = self.k;
        if !(k > 0.0 && k < 1.0) {
            return Err(Error::Domain(format!("dkappa/dk requires 0 < k < 1, got {k}")));
        }
        let (big_k, big_e) = elliptic::complete_ke(k)?;
        let kp = (1.0 - k * k).sqrt();
        let num = 2.0 * (big_e - big_k) + k * k * big_k;
        Ok(-2.0 * num / (PI * self.b * k * kp * (1.0 + kp)))
    }

    /// `∂_bκ^{b,k} = −κ^{b,k}/b`.
    pub fn dkappa_db(&self) -> Result<f64> {
        Ok(-self.mean_curvature()? / self.b)
    }

    pub fn profile(&self) -> Result<Unduloid> {
        Unduloid::new(*self)
    }

    pub fn profile_eval(&self, z: f64) -> Result<ProfileSample> {
        self.profile()?.eval(z)
    }
}

/// An unduloid profile with its elliptic constants precomputed.
#[derive(Debug, Clone)]
pub struct Unduloid {
    shape: ShapeParams,
    a: f64,
    c: f64,
    big_k: f64,
    big_e: f64,
}

impl Unduloid {
    pub fn new(shape: ShapeParams) -> Result<Self> {
        let k = shape.k;
        let (big_k, big_e) = elliptic::complete_ke(k)?;
        let c = shape.b * PI / (big_e + (1.0 - k * k).sqrt() * big_k);
        let a = c * (1.0 - k * k).sqrt();
        Ok(Self { shape, a, c, big_k, big_e })
    }

    pub fn shape(&self) -> ShapeParams {
        self.shape
    }

    /// Neck radius `a`.
    pub fn min_radius(&self) -> f64 {
        self.a
    }

    /// Bulge radius `c`.
    pub fn max_radius(&self) -> f64 {
        self.c
    }

    pub fn mean_curvature(&self) -> f64 {
        -2.0 / (self.a + self.c)
    }

    fn half_period(&self) -> f64 {
        PI * self.shape.b
    }

    /// Reduces `z` to `[0, πb]`; the sign records the reflection.
    fn reduce(&self, z: f64) -> (f64, f64) {
        let period = period_shape(self.shape.b);
        let zr = z - period * (z / period).round();
        let sign = if zr < 0.0 { -1.0 } else { 1.0 };
        (zr.abs().min(self.half_period()), sign)
    }

    fn z_of_theta(&self, theta: f64) -> Result<f64> {
        let k = self.shape.k;
        if theta >= FRAC_PI_2 {
            return Ok(self.a * self.big_k + self.c * self.big_e);
        }
        Ok(self.a * elliptic::incomplete_g(theta, k)? + self.c * elliptic::incomplete_e(theta, k)?)
    }

    /// Solves `z(θ) = target` for `θ ∈ [0, π/2]` by safeguarded Newton.
    fn invert(&self, target: f64) -> Result<f64> {
        let k = self.shape.k;
        if k == 0.0 {
            return Ok(target / (self.a + self.c));
        }
        let z_max = self.z_of_theta(FRAC_PI_2)?;
        if target <= 0.0 {
            return Ok(0.0);
        }
        if target >= z_max {
            return Ok(FRAC_PI_2);
        }
        let (mut lo, mut hi) = (0.0, FRAC_PI_2);
        let mut theta = FRAC_PI_2 * target / z_max;
        for _ in 0..INVERSION_MAX_ITER {
            let resid = self.z_of_theta(theta)? - target;
            if resid > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let s = theta.sin();
            let delta = (1.0 - k * k * s * s).sqrt();
            let slope = self.a / delta + self.c * delta;
            let mut next = theta - resid / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - theta).abs();
            theta = next;
            if step <= INVERSION_TOLERANCE || hi - lo <= INVERSION_TOLERANCE {
                return Ok(theta);
            }
        }
        Err(Error::Convergence(format!(
            "graph-form inversion did not converge for z = {target}, k = {k}"
        )))
    }

    fn sample_at_theta(&self, theta: f64) -> ProfileSample {
        let k2 = self.shape.k * self.shape.k;
        let c = self.c;
        let (s, co) = theta.sin_cos();
        let delta2 = 1.0 - k2 * s * s;
        let delta = delta2.sqrt();
        // z'(θ) = den/Δ and r'(θ) = num/Δ.
        let den = self.a + c * delta2;
        let num = -c * k2 * s * co;
        let dnum = -c * k2 * (2.0 * theta).cos();
        let dden = -2.0 * c * k2 * s * co;
        ProfileSample {
            eta: c * delta,
            eta_z: num / den,
            eta_zz: (dnum * den - num * dden) * delta / (den * den * den),
        }
    }

    /// `η(z)`, `η_z(z)`, `η_zz(z)` for any real `z`.
    pub fn eval(&self, z: f64) -> Result<ProfileSample> {
        if !z.is_finite() {
            return Err(Error::Domain(format!("profile evaluation needs finite z, got {z}")));
        }
        let (zr, sign) = self.reduce(z);
        let theta = self.invert(zr)?;
        let mut sample = self.sample_at_theta(theta);
        sample.eta_z *= sign;
        Ok(sample)
    }

    /// `∂_bη(z) = (η(z) − z η_z(z))/b`.
    pub fn d_b_eta(&self, z: f64) -> Result<f64> {
        let s = self.eval(z)?;
        Ok((s.eta - z * s.eta_z) / self.shape.b)
    }

    /// `∂ₖη(z)` at fixed `b` by implicit differentiation of `z(θ, k) = z`.
    pub fn d_k_eta_exact(&self, z: f64) -> Result<f64> {
        let ShapeParams { b, k } = self.shape;
        if !(k > 0.0 && k < 1.0) {
            return Err(Error::Domain(format!("d_k eta requires 0 < k < 1, got {k}")));
        }
        let (zr, _) = self.reduce(z);
        let theta = self.invert(zr)?;
        let kp = (1.0 - k * k).sqrt();
        let h = self.big_e + kp * self.big_k;
        let dh = elliptic::de_dk(k)? + kp * elliptic::dk_dk(k)? - k / kp * self.big_k;
        let dc = -b * PI * dh / (h * h);
        let da = dc * kp - self.c * k / kp;

        let g = elliptic::incomplete_g(theta, k)?;
        let e = elliptic::incomplete_e(theta, k)?;
        let dg = elliptic::incomplete_g_dk(theta, k, g, e);
        let de = elliptic::incomplete_e_dk(k, g, e);

        let (s, co) = theta.sin_cos();
        let delta = (1.0 - k * k * s * s).sqrt();
        let dz_dk = da * g + self.a * dg + dc * e + self.c * de;
        let dz_dtheta = self.a / delta + self.c * delta;
        let dtheta_dk = -dz_dk / dz_dtheta;
        let dr_dtheta = -self.c * k * k * s * co / delta;
        Ok(dc * delta - self.c * k * s * s / delta + dr_dtheta * dtheta_dk)
    }
}

/// Parameter derivatives of the profile at fixed `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDerivs {
    pub d_b_eta: f64,
    pub d_k_eta: f64,
}

/// `∂_bη` analytically and `∂ₖη` by a Richardson-extrapolated central
/// difference with step `1e-4·min(k, 1−k)`.
pub fn profile_param_derivs(shape: ShapeParams, z: f64) -> Result<ParamDerivs> {
    let ShapeParams { b, k } = shape;
    let h = K_STEP_FACTOR * k.min(1.0 - k);
    if !(k - h > 0.0 && k + h < 1.0) {
        return Err(Error::Domain(format!("k-stencil around k = {k} leaves (0, 1)")));
    }
    let eta_at = |kk: f64| -> Result<f64> { Ok(Unduloid::new(ShapeParams::new(b, kk)?)?.eval(z)?.eta) };
    let central = |step: f64| -> Result<f64> { Ok((eta_at(k + step)? - eta_at(k - step)?) / (2.0 * step)) };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    Ok(ParamDerivs {
        d_b_eta: Unduloid::new(shape)?.d_b_eta(z)?,
        d_k_eta: (4.0 * fine - coarse) / 3.0,
    })
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn axis_shape_round_trip(b in 0.1f64..10.0, k in 0.01f64..0.99) {
            let shape = ShapeParams::new(b, k).unwrap();
            let back = shape.to_axis().unwrap().to_shape().unwrap();
            prop_assert!((back.b - b).abs() < 1e-13 * b && (back.k - k).abs() < 1e-13);
        }

        #[test]
        fn profile_even_periodic_and_bounded(b in 0.2f64..5.0, k in 0.01f64..0.99, z in -20.0f64..20.0) {
            let und = ShapeParams::new(b, k).unwrap().profile().unwrap();
            let p = und.eval(z).unwrap();
            let mirrored = und.eval(-z).unwrap();
            let shifted = und.eval(z + 2.0 * PI * b).unwrap();
            let tol = 1e-11 * (1.0 + z.abs() / b);
            prop_assert!((p.eta - mirrored.eta).abs() < tol && (p.eta_z + mirrored.eta_z).abs() < tol);
            prop_assert!((p.eta - shifted.eta).abs() < tol && (p.eta_z - shifted.eta_z).abs() < tol);
            prop_assert!(und.min_radius() - 1e-12 <= p.eta && p.eta <= und.max_radius() + 1e-12);
            prop_assert!((p.curvature() - und.mean_curvature()).abs() < 1e-8);
        }

        #[test]
        fn curvature_between_cylinder_and_sphere_limits(b in 0.2f64..5.0, k in 0.01f64..0.99) {
            let shape = ShapeParams::new(b, k).unwrap();
            let kappa = shape.mean_curvature().unwrap();
            prop_assert!(-1.0 / b < kappa && kappa < -2.0 / (PI * b));
            prop_assert!((shape.curvature_offset().unwrap() - (kappa + 1.0 / b)).abs() < 1e-13 / b);
        }
    }
}
