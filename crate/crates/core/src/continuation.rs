//! Steady waves as zeros of `F(λ, η, φ) = (η, φ) − M(λ, η, φ)`, Newton's
//! method at fixed `λ`, and natural-parameter continuation in `λ` from a
//! static unduloid.
//!
//! The surface component of `M` is the smoothed Bernoulli update
//!
//! ```text
//! M¹ = (1 − ∂_z²)⁻¹ ( η − σ⁻¹(1 + η_z²)^{3/2} ( σ/(η√(1 + η_z²)) + B − Q ) )
//! ```
//!
//! where `B` collects the kinetic and swirl terms on `s = 1`, and the
//! stream component is `M² = A(λ, η, φ)` from [`crate::pde`].

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::banded::BandLu;
use crate::error::{Error, Result};
use crate::flow1d::{TrivialFlow, VorticityModel};
use crate::linops::{helmholtz_inverse, GridFunction, PeriodicEvenGrid};
use crate::pde::{base_flow_part, solve_a_given_base, MeridianFunction, MeridianGrid, MeridianOperator, SurfaceProfile};
use crate::unduloid::ShapeParams;

/// Relative step of the forward-difference Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// A point `(λ, η, φ)` with its fixed constants `σ, Q` and the derived `m, ⟨η⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub lambda: f64,
    pub eta: GridFunction,
    pub phi: MeridianFunction,
    pub sigma: f64,
    pub q: f64,
    pub m: f64,
    pub mean_eta: f64,
}

impl FlowState {
    pub fn grid(&self) -> MeridianGrid {
        self.phi.grid
    }

    pub fn min_eta(&self) -> f64 {
        self.eta.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Unknown vector `[η_0..η_{n_z−1}, φ(s_i, z_j) for s_i < 1]`.
    pub fn pack(&self) -> Vec<f64> {
        let g = self.grid();
        let mut u = self.eta.values.clone();
        for j in 0..g.z.n {
            for i in 0..g.n_s - 1 {
                u.push(self.phi.at(i, j));
            }
        }
        u
    }

    fn unpack(&self, lambda: f64, u: &[f64], model: &VorticityModel) -> Result<FlowState> {
        let g = self.grid();
        let eta = GridFunction::new(g.z, u[..g.z.n].to_vec())?;
        let phi = unpack_phi(g, &u[g.z.n..]);
        FlowState::from_parts(lambda, eta, phi, self.sigma, self.q, model)
    }

    /// Builds a state and fills in `m(λ, ⟨η⟩)` and `⟨η⟩`.
    pub fn from_parts(
        lambda: f64,
        eta: GridFunction,
        phi: MeridianFunction,
        sigma: f64,
        q: f64,
        model: &VorticityModel,
    ) -> Result<FlowState> {
        if eta.grid != phi.grid.z {
            return Err(Error::InvalidParameter("eta and phi grids differ".into()));
        }
        let mean_eta = eta.grid.mean(&eta.values);
        if !(mean_eta > 0.0) {
            return Err(Error::Inadmissible(format!("mean eta = {mean_eta}")));
        }
        let m = crate::flow1d::m_of(lambda, mean_eta, model)?;
        Ok(FlowState { lambda, eta, phi, sigma, q, m, mean_eta })
    }
}

fn unpack_phi(g: MeridianGrid, tail: &[f64]) -> MeridianFunction {
    let mut phi = MeridianFunction::zeros(g);
    for j in 0..g.z.n {
        for i in 0..g.n_s - 1 {
            phi.values[g.index(i, j)] = tail[j * (g.n_s - 1) + i];
        }
    }
    phi
}

/// The static solution `(0, η^{b₀,k₀}, 0)` with `Q = −σκ^{b₀,k₀}`. The
/// cylinder `k₀ = 0` is accepted for degenerate-case studies.
pub fn static_state(base: ShapeParams, sigma: f64, n_z: usize, n_s: usize) -> Result<FlowState> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let base = ShapeParams::new_allow_flat(base.b, base.k)?;
    let zgrid = PeriodicEvenGrid::new(base.b, n_z)?;
    let grid = MeridianGrid::new(n_s, zgrid)?;
    let profile = base.profile()?;
    let mut eta = Vec::with_capacity(n_z);
    for z in zgrid.nodes() {
        eta.push(profile.eval(z)?.eta);
    }
    let eta = GridFunction::new(zgrid, eta)?;
    let q = -sigma * base.mean_curvature()?;
    let mean_eta = zgrid.mean(&eta.values);
    Ok(FlowState { lambda: 0.0, eta, phi: MeridianFunction::zeros(grid), sigma, q, m: 0.0, mean_eta })
}

/// Everything in the residual that depends on `η` only.
struct EtaContext {
    op: MeridianOperator,
    lu: BandLu,
    w: MeridianFunction,
    lw: MeridianFunction,
    flow: TrivialFlow,
}

impl EtaContext {
    fn new(lambda: f64, eta: &[f64], grid: MeridianGrid, model: &VorticityModel, floor: f64) -> Result<Self> {
        let min = eta.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > floor) {
            return Err(Error::Inadmissible(format!("min eta = {min} is not above {floor}")));
        }
        let profile = SurfaceProfile::from_samples(grid.z, eta.to_vec())?;
        let op = MeridianOperator::new(grid, profile)?;
        let lu = op.factorize()?;
        let (w, flow) = base_flow_part(lambda, op.profile(), grid, model)?;
        let lw = op.apply(&w)?;
        Ok(Self { op, lu, w, lw, flow })
    }

    /// Residual components for the stream function `phi` (with zero trace).
    fn residual(&self, phi: &MeridianFunction, sigma: f64, q: f64, model: &VorticityModel) -> Result<(Vec<f64>, MeridianFunction)> {
        let profile = self.op.profile();
        let grid = self.op.grid();
        let a = solve_a_given_base(&self.op, &self.lu, phi, &self.w, &self.lw, model)?;
        let a_s = a.surface_s_derivative();
        let mean = profile.mean();
        let psi_s1 = *self.flow.psi_s.last().expect("trivial flow has nodes");
        let m = self.flow.m;
        let swirl_m = model.swirl(m);
        let mut update = Vec::with_capacity(grid.z.n);
        for j in 0..grid.z.n {
            let eta = profile.eta[j];
            let ez = profile.eta_z[j];
            let e2 = eta * eta;
            let tangential = a_s[j] + mean * mean / e2 * psi_s1;
            let normal = a_s[j] + (2.0 * m + mean * mean * psi_s1) / e2;
            let kinetic = 0.5 * (tangential * tangential + ez * ez * normal * normal)
                + swirl_m * swirl_m / (2.0 * e2)
                + 2.0 * m * tangential / e2
                + 2.0 * m * m / (e2 * e2);
            let slope2 = 1.0 + ez * ez;
            let bracket = sigma / (eta * slope2.sqrt()) + kinetic - q;
            update.push(eta - slope2.powf(1.5) * bracket / sigma);
        }
        let smoothed = helmholtz_inverse(&GridFunction { grid: grid.z, values: update });
        let r_eta: Vec<f64> = profile.eta.iter().zip(&smoothed.values).map(|(e, m1)| e - m1).collect();
        let r_phi = MeridianFunction::new(grid, phi.values.iter().zip(&a.values).map(|(p, a)| p - a).collect())?;
        Ok((r_eta, r_phi))
    }
}

/// The two components of `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub eta: GridFunction,
    pub phi: MeridianFunction,
}

impl Residual {
    pub fn max_abs(&self) -> f64 {
        self.eta.max_abs().max(self.phi.max_abs())
    }
}

/// `F(λ, η, φ)` at a state.
pub fn residual_f(state: &FlowState, model: &VorticityModel) -> Result<Residual> {
    let grid = state.grid();
    if state.phi.boundary_max_abs() != 0.0 {
        return Err(Error::Inadmissible("phi must vanish on s = 1".into()));
    }
    let ctx = EtaContext::new(state.lambda, &state.eta.values, grid, model, 0.0)?;
    let (r_eta, r_phi) = ctx.residual(&state.phi, state.sigma, state.q, model)?;
    Ok(Residual { eta: GridFunction::new(grid.z, r_eta)?, phi: r_phi })
}

fn pack_residual(grid: MeridianGrid, r_eta: &[f64], r_phi: &MeridianFunction) -> Vec<f64> {
    let mut out = r_eta.to_vec();
    for j in 0..grid.z.n {
        for i in 0..grid.n_s - 1 {
            out.push(r_phi.at(i, j));
        }
    }
    out
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Packed residual and its forward-difference Jacobian at fixed `λ`.
fn residual_and_jacobian(
    state: &FlowState,
    model: &VorticityModel,
    floor: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let grid = state.grid();
    let nz = grid.z.n;
    let u = state.pack();
    let n = u.len();
    let eps = JACOBIAN_STEP * (1.0 + max_abs(&u));
    let ctx = EtaContext::new(state.lambda, &u[..nz], grid, model, floor)?;
    let (re, rp) = ctx.residual(&state.phi, state.sigma, state.q, model)?;
    let r0 = pack_residual(grid, &re, &rp);
    let mut jac = DMatrix::zeros(n, n);
    for c in 0..n {
        let col = if c < nz {
            let mut eta = u[..nz].to_vec();
            eta[c] += eps;
            let ctx_c = EtaContext::new(state.lambda, &eta, grid, model, floor)?;
            let (re, rp) = ctx_c.residual(&state.phi, state.sigma, state.q, model)?;
            pack_residual(grid, &re, &rp)
        } else {
            let mut phi = state.phi.clone();
            let k = c - nz;
            let (j, i) = (k / (grid.n_s - 1), k % (grid.n_s - 1));
            phi.values[grid.index(i, j)] += eps;
            let (re, rp) = ctx.residual(&phi, state.sigma, state.q, model)?;
            pack_residual(grid, &re, &rp)
        };
        for (r, (a, b)) in col.iter().zip(&r0).enumerate() {
            jac[(r, c)] = (a - b) / eps;
        }
    }
    Ok((r0, jac))
}

/// Forward-difference Jacobian of the packed residual at `state`.
pub fn jacobian(state: &FlowState, model: &VorticityModel) -> Result<DMatrix<f64>> {
    Ok(residual_and_jacobian(state, model, 0.0)?.1)
}

/// Newton iteration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Iterates with `min η` at or below this value are rejected.
    pub eta_floor: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 12, eta_floor: 0.0 }
    }
}

/// A converged state with its iteration count and final residual.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub state: FlowState,
    pub iterations: usize,
    pub residual: f64,
}

/// Newton's method at fixed `λ` from `state`.
pub fn newton_correct(state: &FlowState, model: &VorticityModel, opts: &NewtonOptions) -> Result<NewtonResult> {
    let mut current = state.clone();
    let mut last = f64::NAN;
    for iter in 0..=opts.max_iter {
        let (r, jac) = if iter < opts.max_iter {
            residual_and_jacobian(&current, model, opts.eta_floor)?
        } else {
            let res = residual_f(&current, model)?;
            (pack_residual(current.grid(), &res.eta.values, &res.phi), DMatrix::zeros(0, 0))
        };
        last = max_abs(&r);
        if !last.is_finite() {
            return Err(Error::NewtonFailure(format!("non-finite residual at iteration {iter}")));
        }
        if last <= opts.tol {
            return Ok(NewtonResult { state: current, iterations: iter, residual: last });
        }
        if iter == opts.max_iter {
            break;
        }
        let lu = jac.lu();
        let delta = lu
            .solve(&DVector::from_vec(r))
            .ok_or_else(|| Error::NewtonFailure(format!("singular Jacobian at iteration {iter}")))?;
        let u: Vec<f64> = current.pack().iter().zip(delta.iter()).map(|(a, d)| a - d).collect();
        if u[..current.grid().z.n].iter().any(|&e| !(e > opts.eta_floor)) {
            return Err(Error::Inadmissible(format!("Newton iterate {iter} reached the eta floor {}", opts.eta_floor)));
        }
        current = current.unpack(current.lambda, &u, model)?;
    }
    Err(Error::NewtonFailure(format!(
        "no convergence in {} iterations, residual {last:e}",
        opts.max_iter
    )))
}

/// Why a branch trace stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    LambdaRangeExhausted,
    NormBlowup,
    VorticityNormBlowup,
    AxisApproach,
    NewtonFailure,
    StepBudgetExhausted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::LambdaRangeExhausted => "lambda-range-exhausted",
            Termination::NormBlowup => "norm-blowup",
            Termination::VorticityNormBlowup => "vorticity-norm-blowup",
            Termination::AxisApproach => "axis-approach",
            Termination::NewtonFailure => "newton-failure",
            Termination::StepBudgetExhausted => "step-budget-exhausted",
        }
    }
}

/// Stopping limits of a branch trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationLimits {
    pub max_abs_lambda: f64,
    pub max_norm: f64,
    pub eta_floor: f64,
    pub max_vorticity_norm: f64,
    pub max_steps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Hölder exponent of the norm surrogates.
    pub alpha: f64,
}

impl ContinuationLimits {
    /// Defaults for a base of size `b0`; the axis floor is `1e−3·b0`.
    pub fn defaults_for(b0: f64) -> Self {
        Self {
            max_abs_lambda: 0.05,
            max_norm: 1e3,
            eta_floor: 1e-3 * b0,
            max_vorticity_norm: 1e6,
            max_steps: 200,
            newton_tol: 1e-10,
            newton_max_iter: 12,
            alpha: 0.5,
        }
    }

    fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.newton_tol, max_iter: self.newton_max_iter, eta_floor: self.eta_floor }
    }
}

/// Per-state diagnostics recorded along a branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDiagnostics {
    pub lambda: f64,
    /// `C^{2,α}` surrogate of `η` plus `C^{0,α}` surrogate of `φ`.
    pub norm: f64,
    pub min_eta: f64,
    pub vorticity_norm: f64,
    pub newton_iterations: usize,
    pub residual: f64,
    /// `max(‖η − η_start‖∞, ‖φ − φ_start‖∞)`.
    pub distance_from_start: f64,
}

/// States traced from a converged start in one `λ` direction.
#[derive(Debug, Clone)]
pub struct Branch {
    pub states: Vec<FlowState>,
    pub diagnostics: Vec<StateDiagnostics>,
    pub termination: Termination,
    pub dlambda: f64,
    pub loop_back_suspected: bool,
}

fn holder_seminorm(points: impl Fn(usize) -> ([f64; 2], f64), n: usize, alpha: f64) -> f64 {
    let mut best = 0.0f64;
    for a in 0..n {
        let (pa, va) = points(a);
        for b in a + 1..n {
            let (pb, vb) = points(b);
            let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            if d > 0.0 {
                best = best.max((va - vb).abs() / d.powf(alpha));
            }
        }
    }
    best
}

/// `‖η‖_{C^{2,α}} + ‖φ‖_{C^{0,α}}` evaluated on the grid (sup norms of the
/// difference derivatives plus discrete Hölder quotients over node pairs).
pub fn state_norm(state: &FlowState, alpha: f64) -> f64 {
    let g = state.grid();
    let eta = &state.eta.values;
    let ez = g.z.d1(eta);
    let ezz = g.z.d2(eta);
    let z = g.z.nodes();
    let eta_part = max_abs(eta)
        + max_abs(&ez)
        + max_abs(&ezz)
        + holder_seminorm(|a| ([z[a], 0.0], ezz[a]), g.z.n, alpha);
    let phi_part = state.phi.max_abs()
        + holder_seminorm(
            |a| {
                let (j, i) = (a / g.n_s, a % g.n_s);
                ([g.s(i), z[j]], state.phi.values[a])
            },
            g.len(),
            alpha,
        );
    eta_part + phi_part
}

/// `‖r^{−(2α+1)/5} ω^θ‖_{L^{5/(2−α)}}` over one period cell, with
/// `ω^θ = −rγ(Ψ) − (FF′)(Ψ)/r`, `Ψ = r²(φ + w)`, `r = sη`, and measure `2πr dr dz`.
pub fn vorticity_norm(state: &FlowState, model: &VorticityModel, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(state.min_eta() > 0.0) {
        return Err(Error::Inadmissible(format!("min eta = {}", state.min_eta())));
    }
    let g = state.grid();
    let profile = SurfaceProfile::from_samples(g.z, state.eta.values.clone())?;
    let (w, _) = base_flow_part(state.lambda, &profile, g, model)?;
    let beta = (2.0 * alpha + 1.0) / 5.0;
    let p = 5.0 / (2.0 - alpha);
    let (hs, hz) = (g.h_s(), g.z.h());
    let mut total = 0.0;
    for j in 0..g.z.n {
        let wz = if j == 0 || j == g.z.n - 1 { 0.5 } else { 1.0 };
        let eta = profile.eta[j];
        for i in 1..g.n_s {
            let ws = if i == g.n_s - 1 { 0.5 } else { 1.0 };
            let r = g.s(i) * eta;
            let k = g.index(i, j);
            let big_psi = r * r * (state.phi.values[k] + w.values[k]);
            let omega = -r * model.gamma(big_psi) - model.ff_prime(big_psi) / r;
            let integrand = (r.powf(-beta) * omega).abs().powf(p) * 2.0 * PI * r * eta;
            total += wz * ws * integrand;
        }
    }
    // The half period covers half of the periodic cell.
    Ok((2.0 * total * hs * hz).powf(1.0 / p))
}

fn diagnostics(state: &FlowState, start: &FlowState, model: &VorticityModel, alpha: f64, iterations: usize, residual: f64) -> Result<StateDiagnostics> {
    let d_eta = state.eta.values.iter().zip(&start.eta.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let d_phi = state.phi.values.iter().zip(&start.phi.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(StateDiagnostics {
        lambda: state.lambda,
        norm: state_norm(state, alpha),
        min_eta: state.min_eta(),
        vorticity_norm: vorticity_norm(state, model, alpha)?,
        newton_iterations: iterations,
        residual,
        distance_from_start: d_eta.max(d_phi),
    })
}

/// Natural-parameter continuation from `start` in steps of `dlambda`.
///
/// `start` is Newton-corrected first and becomes the first stored state.
/// Each step uses a secant predictor and halves on Newton failure down to
/// `1e−6·|dlambda|`; after a success the step grows back towards `dlambda`.
pub fn continue_branch(start: &FlowState, model: &VorticityModel, dlambda: f64, limits: &ContinuationLimits) -> Result<Branch> {
    if !(dlambda != 0.0 && dlambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("dlambda must be nonzero, got {dlambda}")));
    }
    let opts = limits.newton();
    let first = newton_correct(start, model, &opts)?;
    let origin = first.state.clone();
    let mut states = vec![first.state.clone()];
    let mut diags = vec![diagnostics(&origin, &origin, model, limits.alpha, first.iterations, first.residual)?];
    let min_step = 1e-6 * dlambda.abs();
    let mut step = dlambda;
    let mut prev_step = dlambda;
    let mut loop_back = false;

    let termination = loop {
        let last = states.last().expect("branch has a state");
        if last.lambda.abs() >= limits.max_abs_lambda {
            break Termination::LambdaRangeExhausted;
        }
        if states.len() > limits.max_steps {
            break Termination::StepBudgetExhausted;
        }
        let mut target = last.lambda + step;
        if target.abs() > limits.max_abs_lambda {
            target = limits.max_abs_lambda.copysign(target);
        }
        let this_step = target - last.lambda;
        let u_last = last.pack();
        let guess_u: Vec<f64> = if states.len() >= 2 {
            let u_prev = states[states.len() - 2].pack();
            let ratio = this_step / prev_step;
            u_last.iter().zip(&u_prev).map(|(a, b)| a + ratio * (a - b)).collect()
        } else {
            u_last.clone()
        };
        let outcome = last
            .unpack(target, &guess_u, model)
            .and_then(|guess| newton_correct(&guess, model, &opts));
        match outcome {
            Ok(res) => {
                let diag = diagnostics(&res.state, &origin, model, limits.alpha, res.iterations, res.residual)?;
                if diag.min_eta <= limits.eta_floor {
                    break Termination::AxisApproach;
                }
                if res.state.lambda.abs() <= 0.5 * dlambda.abs() && diag.distance_from_start > 1e3 * limits.newton_tol {
                    loop_back = true;
                }
                states.push(res.state);
                diags.push(diag);
                prev_step = this_step;
                if diag.norm > limits.max_norm {
                    break Termination::NormBlowup;
                }
                if diag.vorticity_norm > limits.max_vorticity_norm {
                    break Termination::VorticityNormBlowup;
                }
                if step.abs() < dlambda.abs() {
                    step = (2.0 * step).abs().min(dlambda.abs()).copysign(dlambda);
                }
            }
            Err(Error::Inadmissible(_)) if step.abs() / 2.0 < min_step => break Termination::AxisApproach,
            Err(_) if step.abs() / 2.0 < min_step => break Termination::NewtonFailure,
            Err(_) => step /= 2.0,
        }
    };
    Ok(Branch { states, diagnostics: diags, termination, dlambda, loop_back_suspected: loop_back })
}

/// First line of a serialized branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchHeader {
    pub b0: f64,
    pub n_z: usize,
    pub n_s: usize,
    pub sigma: f64,
    pub q: f64,
    pub dlambda: f64,
    pub newton_tol: f64,
    pub termination: Termination,
    pub loop_back_suspected: bool,
    pub states: usize,
    /// Caller-provided description of the vorticity model.
    pub model: serde_json::Value,
}

/// One serialized state: raw samples, `φ` including its zero trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub lambda: f64,
    pub eta: Vec<f64>,
    pub phi: Vec<f64>,
    pub m: f64,
    pub mean_eta: f64,
    pub diagnostics: StateDiagnostics,
}

/// Writes the branch as JSON lines: a header, then one state per line.
pub fn write_branch(branch: &Branch, model: serde_json::Value, limits: &ContinuationLimits, out: &mut impl Write) -> Result<()> {
    let first = &branch.states[0];
    let g = first.grid();
    let header = BranchHeader {
        b0: g.z.b0,
        n_z: g.z.n,
        n_s: g.n_s,
        sigma: first.sigma,
        q: first.q,
        dlambda: branch.dlambda,
        newton_tol: limits.newton_tol,
        termination: branch.termination,
        loop_back_suspected: branch.loop_back_suspected,
        states: branch.states.len(),
        model,
    };
    serde_json::to_writer(&mut *out, &header)?;
    writeln!(out)?;
    for (s, d) in branch.states.iter().zip(&branch.diagnostics) {
        let rec = StateRecord {
            lambda: s.lambda,
            eta: s.eta.values.clone(),
            phi: s.phi.values.clone(),
            m: s.m,
            mean_eta: s.mean_eta,
            diagnostics: *d,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Reads a branch written by [`write_branch`].
pub fn read_branch(input: impl BufRead) -> Result<(BranchHeader, Vec<StateRecord>)> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or_else(|| Error::Config("empty branch file".into()))??;
    let header: BranchHeader = serde_json::from_str(&header_line)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    if records.len() != header.states {
        return Err(Error::Config(format!("header announces {} states, file has {}", header.states, records.len())));
    }
    Ok((header, records))
}

/// Rebuilds a state from its record, keeping the stored derived values.
pub fn state_from_record(header: &BranchHeader, rec: &StateRecord) -> Result<FlowState> {
    let zgrid = PeriodicEvenGrid::new(header.b0, header.n_z)?;
    let grid = MeridianGrid::new(header.n_s, zgrid)?;
    Ok(FlowState {
        lambda: rec.lambda,
        eta: GridFunction::new(zgrid, rec.eta.clone())?,
        phi: MeridianFunction::new(grid, rec.phi.clone())?,
        sigma: header.sigma,
        q: header.q,
        m: rec.m,
        mean_eta: rec.mean_eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::t_apply;
    use rand::{Rng, SeedableRng};

    fn base(k: f64) -> ShapeParams {
        ShapeParams::new_allow_flat(1.0, k).unwrap()
    }

    #[test]
    fn static_state_constants() {
        let s = static_state(base(0.5), 1.0, 17, 16).unwrap();
        assert_eq!(s.m, 0.0);
        assert_eq!(s.lambda, 0.0);
        assert_eq!(s.phi.max_abs(), 0.0);
        let near_flat = static_state(ShapeParams::new(1.0, 1e-6).unwrap(), 1.0, 17, 16).unwrap();
        assert!((near_flat.q - 1.0).abs() < 1e-9, "{}", near_flat.q);
        assert!(static_state(base(0.5), 0.0, 17, 16).is_err());
    }

    #[test]
    fn static_residual_is_second_order() {
        let mut prev = f64::NAN;
        for &n in &[17, 33, 65] {
            let s = static_state(base(0.3), 0.5, n, 16).unwrap();
            let r = residual_f(&s, &VorticityModel::linear(0.5, 0.5)).unwrap();
            assert_eq!(r.phi.max_abs(), 0.0);
            let e = r.max_abs();
            if prev.is_finite() {
                assert!((prev / e).log2() > 1.9, "{prev} -> {e}");
            }
            prev = e;
        }
    }

    #[test]
    fn odd_symmetry_of_residual() {
        let model = VorticityModel::zero();
        let s = static_state(base(0.5), 1.0, 17, 16).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let g = s.grid();
        let mut phi = MeridianFunction::zeros(g);
        for j in 0..g.z.n {
            for i in 0..g.n_s - 1 {
                phi.values[g.index(i, j)] = 1e-2 * rng.random_range(-1.0..1.0);
            }
        }
        let eta = GridFunction::new(g.z, s.eta.values.iter().map(|e| e * (1.0 + 1e-3 * rng.random_range(-1.0..1.0))).collect()).unwrap();
        let neg_phi = MeridianFunction::new(g, phi.values.iter().map(|v| -v).collect()).unwrap();
        let plus = FlowState::from_parts(0.03, eta.clone(), phi, s.sigma, s.q, &model).unwrap();
        let minus = FlowState::from_parts(-0.03, eta, neg_phi, s.sigma, s.q, &model).unwrap();
        let rp = residual_f(&plus, &model).unwrap();
        let rm = residual_f(&minus, &model).unwrap();
        for (a, b) in rp.eta.values.iter().zip(&rm.eta.values) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in rp.phi.values.iter().zip(&rm.phi.values) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_directional_derivative_matches_linearized_operator() {
        let shape = base(0.5);
        let model = VorticityModel::zero();
        let mut errs = Vec::new();
        for &n in &[17, 33, 65] {
            let s = static_state(shape, 1.0, n, 16).unwrap();
            let g = s.grid();
            let v = GridFunction::from_fn(g.z, |z| (z / shape.b).cos() + 0.3 * (2.0 * z / shape.b).cos());
            let eps = 1e-6;
            let shifted = |sign: f64| {
                let eta = GridFunction::new(g.z, s.eta.values.iter().zip(&v.values).map(|(e, d)| e + sign * eps * d).collect()).unwrap();
                let st = FlowState::from_parts(0.0, eta, s.phi.clone(), s.sigma, s.q, &model).unwrap();
                residual_f(&st, &model).unwrap()
            };
            let (rp, rm) = (shifted(1.0), shifted(-1.0));
            let deriv = GridFunction::new(g.z, rp.eta.values.iter().zip(&rm.eta.values).map(|(a, b)| (a - b) / (2.0 * eps)).collect()).unwrap();
            let lifted = crate::linops::helmholtz_apply(&deriv);
            let tv = t_apply(&v, shape).unwrap();
            // (1 − ∂²) F¹_η v = −T v.
            let err = lifted.values.iter().zip(&tv.values).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
            errs.push(err);
            assert!(rp.phi.max_abs() < 1e-12);
        }
        assert!(errs[0] / errs[1] > 3.0 && errs[1] / errs[2] > 3.0, "{errs:?}");
        assert!(errs[2] < 1e-2, "{errs:?}");
    }

    #[test]
    fn perturbation_residual_grows_linearly() {
        let shape = base(0.5);
        let model = VorticityModel::zero();
        let s = static_state(shape, 1.0, 33, 16).unwrap();
        let r0 = residual_f(&s, &model).unwrap().eta;
        let g = s.grid();
        let growth = |eps: f64| {
            let eta = GridFunction::new(g.z, s.eta.values.iter().zip(g.z.nodes()).map(|(e, z)| e + eps * (z / shape.b).cos()).collect()).unwrap();
            let st = FlowState::from_parts(0.0, eta, s.phi.clone(), s.sigma, s.q, &model).unwrap();
            let r = residual_f(&st, &model).unwrap().eta;
            r.values.iter().zip(&r0.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        };
        let (g1, g2) = (growth(1e-4), growth(2e-4));
        assert!(g1 > 1e-7, "{g1}");
        assert!((g2 / g1 - 2.0).abs() < 1e-2, "{g1} {g2}");
    }

    #[test]
    fn newton_from_static_and_perturbed() {
        let model = VorticityModel::zero();
        let opts = NewtonOptions { tol: 1e-10, max_iter: 10, eta_floor: 1e-3 };
        let s = static_state(base(0.5), 1.0, 17, 16).unwrap();
        // The sampled unduloid solves the discrete system only to O(h²);
        // once corrected it is a fixed point of the iteration.
        let fixed = newton_correct(&s, &model, &opts).unwrap();
        let again = newton_correct(&fixed.state, &model, &opts).unwrap();
        assert!(again.iterations <= 2, "{}", again.iterations);
        assert_eq!(again.state, fixed.state);
        let g = s.grid();
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let coeffs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta = GridFunction::new(
            g.z,
            s.eta
                .values
                .iter()
                .zip(g.z.nodes())
                .map(|(e, z)| e + 1e-3 * coeffs.iter().enumerate().map(|(n, c)| c * (n as f64 * z).cos()).sum::<f64>())
                .collect(),
        )
        .unwrap();
        let perturbed = FlowState::from_parts(0.0, eta, s.phi.clone(), s.sigma, s.q, &model).unwrap();
        let back = newton_correct(&perturbed, &model, &opts).unwrap();
        let dist = back.state.eta.values.iter().zip(&fixed.state.eta.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        // Residual tolerance 1e-10 times the inverse of the weakest singular value.
        assert!(dist < 1e-6, "{dist}");
    }

    #[test]
    fn zero_range_branch_is_static() {
        let model = VorticityModel::zero();
        let s = static_state(base(0.5), 1.0, 17, 16).unwrap();
        let mut limits = ContinuationLimits::defaults_for(1.0);
        limits.max_abs_lambda = 0.0;
        let b = continue_branch(&s, &model, 0.01, &limits).unwrap();
        assert_eq!(b.states.len(), 1);
        assert_eq!(b.termination, Termination::LambdaRangeExhausted);
        assert!(!b.loop_back_suspected);
    }

    #[test]
    fn vorticity_norm_vanishes_without_vorticity() {
        let s = static_state(base(0.5), 1.0, 17, 16).unwrap();
        assert_eq!(vorticity_norm(&s, &VorticityModel::linear(1.0, 1.0), 0.5).unwrap(), 0.0);
        let g = s.grid();
        let phi = MeridianFunction::from_fn(g, |x, _| 1.0 - x * x);
        let st = FlowState::from_parts(0.02, s.eta.clone(), phi, s.sigma, s.q, &VorticityModel::zero()).unwrap();
        assert_eq!(vorticity_norm(&st, &VorticityModel::zero(), 0.5).unwrap(), 0.0);
    }

    /// Gauss–Legendre nodes and weights on [−1, 1] by Newton on P_n.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (1..=n)
            .map(|i| {
                let mut x = (PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
                loop {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-15 {
                        let (mut q0, mut q1) = (1.0, x);
                        for k in 2..=n {
                            let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                            q0 = q1;
                            q1 = q2;
                        }
                        let dq = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                        return (x, 2.0 / ((1.0 - x * x) * dq * dq));
                    }
                }
            })
            .collect()
    }

    #[test]
    fn vorticity_norm_matches_quadrature_oracle() {
        let shape = base(0.5);
        let alpha = 0.5;
        let model = VorticityModel::linear(1.0, 0.0);
        let beta = (2.0 * alpha + 1.0) / 5.0;
        let p = 5.0 / (2.0 - alpha);
        let profile = shape.profile().unwrap();
        let gl = gauss_legendre(40);
        let panels = 64;
        let period = 2.0 * PI * shape.b;
        let mut oracle = 0.0;
        for panel in 0..panels {
            let (z0, z1) = (panel as f64 * period / panels as f64, (panel + 1) as f64 * period / panels as f64);
            for &(xz, wz) in &gl {
                let z = 0.5 * (z0 + z1) + 0.5 * (z1 - z0) * xz;
                let eta = profile.eval(z).unwrap().eta;
                let mut inner = 0.0;
                for &(xr, wr) in &gl {
                    let r = 0.5 * eta * (1.0 + xr);
                    let big_psi = r * r * (1.0 - r * r / (eta * eta));
                    let omega = -r * big_psi;
                    inner += 0.5 * eta * wr * (r.powf(-beta) * omega).abs().powf(p) * 2.0 * PI * r;
                }
                oracle += 0.5 * (z1 - z0) * wz * inner;
            }
        }
        let oracle = oracle.powf(1.0 / p);
        let mut errs = Vec::new();
        for &n in &[17, 33, 65] {
            let s = static_state(shape, 1.0, n, n).unwrap();
            let phi = MeridianFunction::from_fn(s.grid(), |x, _| 1.0 - x * x);
            let st = FlowState::from_parts(0.0, s.eta.clone(), phi, s.sigma, s.q, &model).unwrap();
            errs.push((vorticity_norm(&st, &model, alpha).unwrap() - oracle).abs() / oracle);
        }
        assert!(errs[2] < 1e-3 && errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn branch_roundtrip_is_bit_exact() {
        let model = VorticityModel::zero();
        let s = static_state(base(0.5), 1.0, 17, 16).unwrap();
        let mut limits = ContinuationLimits::defaults_for(1.0);
        limits.max_abs_lambda = 0.02;
        let b = continue_branch(&s, &model, 0.01, &limits).unwrap();
        assert_eq!(b.termination, Termination::LambdaRangeExhausted);
        assert_eq!(b.states.len(), 3);
        let mut buf = Vec::new();
        write_branch(&b, serde_json::json!({"preset": "zero"}), &limits, &mut buf).unwrap();
        let (header, recs) = read_branch(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(header.q.to_bits(), s.q.to_bits());
        for (orig, rec) in b.states.iter().zip(&recs) {
            let back = state_from_record(&header, rec).unwrap();
            assert_eq!(&back, orig);
            let r = residual_f(&back, &model).unwrap().max_abs();
            assert_eq!(r.to_bits(), rec.diagnostics.residual.to_bits());
            assert!(r <= limits.newton_tol);
        }
    }
}
