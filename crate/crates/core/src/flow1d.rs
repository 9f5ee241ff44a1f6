//! The z-independent base flow in a cylinder and its boundary constant `m`.
//!
//! With `Ψ = r²ψ` the base flow solves the regular radial problem
//!
//! ```text
//! ψ_rr + (3/r) ψ_r = −γ(r²ψ) − (FF′)(r²ψ)/r²,   ψ(0) = λ,  ψ_r(0) = 0,
//! ```
//!
//! on `(0, d]`, and is reported in the rescaled variable `s = r/d`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Absolute tolerance of the embedded Runge–Kutta integrator.
pub const ODE_ATOL: f64 = 1e-11;
/// Relative tolerance of the embedded Runge–Kutta integrator.
pub const ODE_RTOL: f64 = 1e-11;
const ODE_MAX_STEPS: usize = 1_000_000;
/// Start of the numerical integration relative to `d`; `[0, r₀]` is bridged by a Taylor step.
const STARTUP_FRACTION: f64 = 1e-4;

/// Vorticity function `γ` and swirl `F` together with the derived closures
/// used by the solvers. Closures must be safe to call from several threads.
#[derive(Clone)]
pub struct VorticityModel {
    gamma: ScalarFn,
    gamma_prime: ScalarFn,
    swirl: ScalarFn,
    swirl_prime: ScalarFn,
    ff_prime: ScalarFn,
    ff_prime_deriv_at_0: f64,
}

impl fmt::Debug for VorticityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VorticityModel")
            .field("gamma_prime(0)", &(self.gamma_prime)(0.0))
            .field("F_prime(0)", &(self.swirl_prime)(0.0))
            .field("(FF')'(0)", &self.ff_prime_deriv_at_0)
            .finish()
    }
}

const CONSISTENCY_POINTS: [f64; 6] = [-2.0, -1.0, -0.25, 0.25, 1.0, 2.0];

impl VorticityModel {
    /// Builds a model, checking `γ(0) = F(0) = 0` and `FF′ = F·F′` on sample points.
    pub fn new(
        gamma: ScalarFn,
        gamma_prime: ScalarFn,
        swirl: ScalarFn,
        swirl_prime: ScalarFn,
        ff_prime: ScalarFn,
        ff_prime_deriv_at_0: f64,
    ) -> Result<Self> {
        if gamma(0.0) != 0.0 || swirl(0.0) != 0.0 {
            return Err(Error::InvalidParameter(
                "vorticity model must satisfy gamma(0) = F(0) = 0".into(),
            ));
        }
        for x in CONSISTENCY_POINTS {
            let direct = swirl(x) * swirl_prime(x);
            let given = ff_prime(x);
            if (direct - given).abs() > 1e-12 * (1.0 + direct.abs()) {
                return Err(Error::InvalidParameter(format!(
                    "FF' closure disagrees with F*F' at x = {x}: {given} vs {direct}"
                )));
            }
        }
        if !ff_prime_deriv_at_0.is_finite() {
            return Err(Error::InvalidParameter("(FF')'(0) must be finite".into()));
        }
        Ok(Self { gamma, gamma_prime, swirl, swirl_prime, ff_prime, ff_prime_deriv_at_0 })
    }

    /// Irrotational and swirl-free: `γ = F ≡ 0`.
    pub fn zero() -> Self {
        Self::linear(0.0, 0.0)
    }

    /// `γ(x) = slope·x`, `F(x) = omega·x`.
    pub fn linear(slope: f64, omega: f64) -> Self {
        let w2 = omega * omega;
        Self {
            gamma: Arc::new(move |x| slope * x),
            gamma_prime: Arc::new(move |_| slope),
            swirl: Arc::new(move |x| omega * x),
            swirl_prime: Arc::new(move |_| omega),
            ff_prime: Arc::new(move |x| w2 * x),
            ff_prime_deriv_at_0: w2,
        }
    }

    pub fn gamma(&self, x: f64) -> f64 {
        (self.gamma)(x)
    }

    pub fn gamma_prime(&self, x: f64) -> f64 {
        (self.gamma_prime)(x)
    }

    pub fn swirl(&self, x: f64) -> f64 {
        (self.swirl)(x)
    }

    pub fn swirl_prime(&self, x: f64) -> f64 {
        (self.swirl_prime)(x)
    }

    pub fn ff_prime(&self, x: f64) -> f64 {
        (self.ff_prime)(x)
    }

    /// `(FF′)′(0) = F′(0)²`.
    pub fn ff_prime_deriv_at_0(&self) -> f64 {
        self.ff_prime_deriv_at_0
    }

    /// `(FF′)(ρ²u)/ρ²`, with the removable limit `(FF′)′(0)·u` at `ρ = 0`.
    pub fn ff_prime_over_square(&self, rho2: f64, u: f64) -> f64 {
        if rho2 == 0.0 {
            self.ff_prime_deriv_at_0 * u
        } else {
            self.ff_prime(rho2 * u) / rho2
        }
    }
}

/// Base flow sampled on the uniform grid `s_i = i/(n−1)`.
#[derive(Debug, Clone, Serialize)]
pub struct TrivialFlow {
    pub lambda: f64,
    pub d: f64,
    pub psi: Vec<f64>,
    /// `ψ_s` taken from the integrator state, not from differencing.
    pub psi_s: Vec<f64>,
    /// `m(λ, d) = d² ψ^{λ,d}(1)`.
    pub m: f64,
}

type State = [f64; 2];

struct Rhs<'a> {
    model: &'a VorticityModel,
}

impl Rhs<'_> {
    fn eval(&self, r: f64, y: &State) -> State {
        let (psi, dpsi) = (y[0], y[1]);
        let r2 = r * r;
        let source = -self.model.gamma(r2 * psi) - self.model.ff_prime_over_square(r2, psi);
        [dpsi, -3.0 * dpsi / r + source]
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Advances `y` from `r` to `r_end` adaptively; `h` carries the step between calls.
fn integrate_to(rhs: &Rhs<'_>, r: &mut f64, y: &mut State, r_end: f64, h: &mut f64, steps: &mut usize) -> Result<()> {
    while *r < r_end {
        if *steps >= ODE_MAX_STEPS {
            return Err(Error::StepFailure(format!("step budget exhausted at r = {}", *r)));
        }
        let last = *r + *h >= r_end;
        let step = if last { r_end - *r } else { *h };
        let mut k = [[0.0; 2]; 7];
        for stage in 0..7 {
            let mut ys = *y;
            for (j, kj) in k.iter().enumerate().take(stage) {
                for c in 0..2 {
                    ys[c] += step * A[stage][j] * kj[c];
                }
            }
            k[stage] = rhs.eval(*r + C[stage] * step, &ys);
        }
        let mut y5 = *y;
        let mut err: f64 = 0.0;
        for c in 0..2 {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for stage in 0..7 {
                d5 += B5[stage] * k[stage][c];
                d4 += B4[stage] * k[stage][c];
            }
            y5[c] += step * d5;
            let scale = ODE_ATOL + ODE_RTOL * y[c].abs().max(y5[c].abs());
            err = err.max((step * (d5 - d4)).abs() / scale);
        }
        *steps += 1;
        if !y5.iter().all(|v| v.is_finite()) {
            err = f64::INFINITY;
        }
        if err <= 1.0 {
            *r = if last { r_end } else { *r + step };
            *y = y5;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        let proposal = step * factor;
        if !last || err > 1.0 {
            *h = proposal;
        }
        if *h <= 1e-14 * r_end.max(1.0) {
            return Err(Error::StepFailure(format!(
                "adaptive step underflow at r = {} (pathological gamma or F?)",
                *r
            )));
        }
    }
    Ok(())
}

fn validate(d: f64, n: usize) -> Result<()> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidParameter(format!("cylinder radius must be positive, got {d}")));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(format!("trivial-flow grid needs n >= 2, got {n}")));
    }
    Ok(())
}

/// Integrates the base-flow ODE on `[0, d]` and samples it on `n` uniform `s`-nodes.
pub fn solve_trivial_flow(lambda: f64, d: f64, model: &VorticityModel, n: usize) -> Result<TrivialFlow> {
    validate(d, n)?;
    let rhs = Rhs { model };
    let mut psi = vec![0.0; n];
    let mut psi_s = vec![0.0; n];
    psi[0] = lambda;
    let ds = 1.0 / (n - 1) as f64;
    let r0 = (STARTUP_FRACTION * d).min(0.5 * ds * d);
    // ψ = λ + c₂ r² near the axis with 8c₂ = −(FF′)′(0) λ (γ(0) = 0).
    let c2 = -model.ff_prime_deriv_at_0() * lambda / 8.0;
    let mut y = [lambda + c2 * r0 * r0, 2.0 * c2 * r0];
    let mut r = r0;
    let mut h = r0;
    let mut steps = 0;
    for i in 1..n {
        let r_node = if i == n - 1 { d } else { i as f64 * ds * d };
        integrate_to(&rhs, &mut r, &mut y, r_node, &mut h, &mut steps)?;
        psi[i] = y[0];
        psi_s[i] = d * y[1];
    }
    let m = d * d * psi[n - 1];
    Ok(TrivialFlow { lambda, d, psi, psi_s, m })
}

/// Same base flow obtained by integrating the rescaled equation
/// `ψ_ss + (3/s)ψ_s = −d²γ(d²s²ψ) − (FF′)(d²s²ψ)/s²` directly in `s`.
pub fn solve_trivial_flow_rescaled(lambda: f64, d: f64, model: &VorticityModel, n: usize) -> Result<TrivialFlow> {
    validate(d, n)?;
    let d2 = d * d;
    let scaled = VorticityModel {
        gamma: {
            let g = model.gamma.clone();
            Arc::new(move |x| d2 * g(d2 * x))
        },
        gamma_prime: model.gamma_prime.clone(),
        swirl: model.swirl.clone(),
        swirl_prime: model.swirl_prime.clone(),
        ff_prime: {
            let f = model.ff_prime.clone();
            Arc::new(move |x| f(d2 * x))
        },
        ff_prime_deriv_at_0: d2 * model.ff_prime_deriv_at_0,
    };
    let unit = solve_trivial_flow(lambda, 1.0, &scaled, n)?;
    let m = d2 * unit.psi[n - 1];
    Ok(TrivialFlow { lambda, d, psi: unit.psi, psi_s: unit.psi_s, m })
}

/// `m(λ, d) = d² ψ^{λ,d}(1)`.
pub fn m_of(lambda: f64, d: f64, model: &VorticityModel) -> Result<f64> {
    Ok(solve_trivial_flow(lambda, d, model, 2)?.m)
}
