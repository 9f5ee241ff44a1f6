//! Even, `2πb₀`-periodic grid functions and the linearized surface operator
//!
//! ```text
//! T = ∂_z² + (η̄_z/η̄ − 3 η̄_zz η̄_z/(1 + η̄_z²)) ∂_z + (1 + η̄_z²)/η̄²
//! ```
//!
//! at an unduloid `η̄ = η^{b₀,k₀}`, together with the smoothing inverse of
//! `1 − ∂_z²` and a numerical certificate that `T` is injective on even
//! periodic functions (and is not when `k₀ = 0`).
//!
//! Functions live on the half period `[0, πb₀]` and are extended by even
//! reflection about both endpoints, which is the same as even periodic
//! extension with period `2πb₀`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::unduloid::{profile_param_derivs, ShapeParams, Unduloid};

/// Minimum half-period node count.
pub const MIN_NODES: usize = 16;
/// Observed convergence order required of the kernel residuals.
pub const MIN_RESIDUAL_ORDER: f64 = 1.9;

/// Uniform nodes `z_j = j h`, `j = 0..n`, `h = πb₀/(n−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodicEvenGrid {
    pub b0: f64,
    pub n: usize,
}

impl PeriodicEvenGrid {
    pub fn new(b0: f64, n: usize) -> Result<Self> {
        if !(b0 > 0.0 && b0.is_finite()) {
            return Err(Error::InvalidParameter(format!("grid needs b0 > 0, got {b0}")));
        }
        if n < MIN_NODES {
            return Err(Error::InvalidParameter(format!("grid needs n >= {MIN_NODES}, got {n}")));
        }
        Ok(Self { b0, n })
    }

    pub fn h(&self) -> f64 {
        PI * self.b0 / (self.n - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.n - 1 {
            PI * self.b0
        } else {
            j as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Trapezoid weights on the half period, normalized to sum to one.
    /// Exact mean of the even periodic extension at second order.
    pub fn mean(&self, values: &[f64]) -> f64 {
        let n = self.n;
        let inner: f64 = values[1..n - 1].iter().sum();
        (inner + 0.5 * (values[0] + values[n - 1])) / (n - 1) as f64
    }

    /// Index of the reflected neighbour `j + offset`, `offset ∈ {−1, +1}`.
    pub(crate) fn neighbour(&self, j: usize, offset: isize) -> usize {
        let n = self.n as isize;
        let mut i = j as isize + offset;
        if i < 0 {
            i = -i;
        }
        if i > n - 1 {
            i = 2 * (n - 1) - i;
        }
        i as usize
    }

    /// Centered first difference with even reflection (vanishes at both ends).
    pub fn d1(&self, u: &[f64]) -> Vec<f64> {
        let inv = 0.5 / self.h();
        (0..self.n)
            .map(|j| (u[self.neighbour(j, 1)] - u[self.neighbour(j, -1)]) * inv)
            .collect()
    }

    /// Centered second difference with even reflection.
    pub fn d2(&self, u: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (self.h() * self.h());
        (0..self.n)
            .map(|j| (u[self.neighbour(j, 1)] - 2.0 * u[j] + u[self.neighbour(j, -1)]) * inv)
            .collect()
    }
}

/// Samples of an even periodic function on a [`PeriodicEvenGrid`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub grid: PeriodicEvenGrid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: PeriodicEvenGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n {
            return Err(Error::InvalidParameter(format!(
                "grid function has {} values for {} nodes",
                values.len(),
                grid.n
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("grid function has non-finite entries".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: PeriodicEvenGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().into_iter().map(f).collect();
        Self { grid, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Applies `1 − ∂_z²` (second-order, even reflection).
pub fn helmholtz_apply(u: &GridFunction) -> GridFunction {
    let d2 = u.grid.d2(&u.values);
    let values = u.values.iter().zip(d2).map(|(v, w)| v - w).collect();
    GridFunction { grid: u.grid, values }
}

/// Solves `u − u_zz = f` on the even periodic space (tridiagonal Thomas sweep).
pub fn helmholtz_inverse(f: &GridFunction) -> GridFunction {
    let grid = f.grid;
    let n = grid.n;
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let diag = 1.0 + 2.0 * inv_h2;
    let lower = |j: usize| if j == n - 1 { -2.0 * inv_h2 } else { -inv_h2 };
    let upper = |j: usize| if j == 0 { -2.0 * inv_h2 } else { -inv_h2 };
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    c_prime[0] = upper(0) / diag;
    d_prime[0] = f.values[0] / diag;
    for j in 1..n {
        let m = diag - lower(j) * c_prime[j - 1];
        if j < n - 1 {
            c_prime[j] = upper(j) / m;
        }
        d_prime[j] = (f.values[j] - lower(j) * d_prime[j - 1]) / m;
    }
    let mut u = vec![0.0; n];
    u[n - 1] = d_prime[n - 1];
    for j in (0..n - 1).rev() {
        u[j] = d_prime[j] - c_prime[j] * u[j + 1];
    }
    GridFunction { grid, values: u }
}

/// Drift and potential of `T` at a single point of the base profile.
fn t_coefficients(und: &Unduloid, z: f64) -> Result<(f64, f64)> {
    let s = und.eval(z)?;
    let w = 1.0 + s.eta_z * s.eta_z;
    let drift = s.eta_z / s.eta - 3.0 * s.eta_zz * s.eta_z / w;
    let potential = w / (s.eta * s.eta);
    Ok((drift, potential))
}

/// Coefficients of `T` sampled on the nodes of a grid.
#[derive(Debug, Clone)]
pub struct TOperator {
    grid: PeriodicEvenGrid,
    drift: Vec<f64>,
    potential: Vec<f64>,
}

impl TOperator {
    pub fn new(base: ShapeParams, grid: PeriodicEvenGrid) -> Result<Self> {
        let und = base.profile()?;
        let mut drift = Vec::with_capacity(grid.n);
        let mut potential = Vec::with_capacity(grid.n);
        for z in grid.nodes() {
            let (d, p) = t_coefficients(&und, z)?;
            drift.push(d);
            potential.push(p);
        }
        Ok(Self { grid, drift, potential })
    }

    pub fn apply(&self, v: &GridFunction) -> GridFunction {
        let d1 = self.grid.d1(&v.values);
        let d2 = self.grid.d2(&v.values);
        let values = (0..self.grid.n)
            .map(|j| d2[j] + self.drift[j] * d1[j] + self.potential[j] * v.values[j])
            .collect();
        GridFunction { grid: self.grid, values }
    }

    /// Dense matrix of the discrete operator on the even periodic space.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.grid.n;
        let h = self.grid.h();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let up = self.grid.neighbour(j, 1);
            let down = self.grid.neighbour(j, -1);
            m[(j, j)] += -2.0 / (h * h) + self.potential[j];
            m[(j, up)] += 1.0 / (h * h) + self.drift[j] / (2.0 * h);
            m[(j, down)] += 1.0 / (h * h) - self.drift[j] / (2.0 * h);
        }
        m
    }
}

/// `T v` on the even periodic space of the given base profile.
pub fn t_apply(v: &GridFunction, base: ShapeParams) -> Result<GridFunction> {
    Ok(TOperator::new(base, v.grid)?.apply(v))
}

/// Applies `T` to samples on the full period, nodes `z_j = 2πb₀ j/n`, with
/// periodic wrap-around. Used for functions outside the even subspace.
pub fn t_apply_full_period(values: &[f64], base: ShapeParams) -> Result<Vec<f64>> {
    let n = values.len();
    let period = 2.0 * PI * base.b;
    let h = period / n as f64;
    let und = base.profile()?;
    (0..n)
        .map(|j| {
            let (drift, potential) = t_coefficients(&und, j as f64 * h)?;
            let up = values[(j + 1) % n];
            let down = values[(j + n - 1) % n];
            let d1 = (up - down) / (2.0 * h);
            let d2 = (up - 2.0 * values[j] + down) / (h * h);
            Ok(d2 + drift * d1 + potential * values[j])
        })
        .collect()
}

/// Applies the discrete `T` at the half-period nodes to a smooth function
/// given in closed form, sampling it at `z_j` and `z_j ± h` without any
/// reflection. Used for the even but non-periodic kernel element.
pub fn t_apply_to_function(
    f: &dyn Fn(f64) -> Result<f64>,
    base: ShapeParams,
    grid: PeriodicEvenGrid,
) -> Result<Vec<f64>> {
    let und = base.profile()?;
    let h = grid.h();
    grid.nodes()
        .into_iter()
        .map(|z| {
            let (drift, potential) = t_coefficients(&und, z)?;
            let (fm, f0, fp) = (f(z - h)?, f(z)?, f(z + h)?);
            Ok((fp - 2.0 * f0 + fm) / (h * h) + drift * (fp - fm) / (2.0 * h) + potential * f0)
        })
        .collect()
}

/// One refinement level of a [`KernelCertificate`].
#[derive(Debug, Clone, Serialize)]
pub struct KernelLevel {
    pub n: usize,
    pub h: f64,
    /// `‖T η̄_z‖∞` on the full period.
    pub eta_z_residual: f64,
    /// `‖T v‖∞` with the implicit-differentiation `∂ₖη`; `None` at `k₀ = 0`.
    pub v_residual: Option<f64>,
    /// `‖T v‖∞` with the finite-difference `∂ₖη`.
    pub v_residual_fd: Option<f64>,
    /// `max |v(z+2πb₀) − v(z) + 2π η̄_z(z)|` over the nodes.
    pub nonperiodicity_defect: Option<f64>,
    /// Same defect when `∂ₖη` comes from the finite-difference route.
    pub nonperiodicity_defect_fd: Option<f64>,
    /// `max |v(z+2πb₀) − v(z)|`, the size of the non-periodicity itself.
    pub nonperiodicity_jump: Option<f64>,
    /// `max |∂ₖη_fd − ∂ₖη_exact|`, the finite-difference error floor.
    pub fd_k_derivative_error: Option<f64>,
    pub smallest_singular_value: f64,
    /// `|cos∠(v_min, cos(z/b₀))|` for the smallest right singular vector.
    pub cosine_alignment: f64,
}

/// Numerical evidence that `T` has trivial kernel on even periodic functions.
#[derive(Debug, Clone, Serialize)]
pub struct KernelCertificate {
    pub base: ShapeParams,
    pub dkappa_dk: Option<f64>,
    pub dkappa_db: f64,
    pub levels: Vec<KernelLevel>,
    pub eta_z_orders: Vec<f64>,
    pub v_orders: Vec<f64>,
    pub v_fd_orders: Vec<f64>,
    /// Ratios `σ_min(n_{i+1}) / σ_min(n_i)`.
    pub singular_value_ratios: Vec<f64>,
}

fn observed_orders(errors: &[f64], hs: &[f64]) -> Vec<f64> {
    errors
        .windows(2)
        .zip(hs.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

/// Smallest singular value of `m` and the alignment of its right singular
/// vector with `reference`.
pub fn smallest_singular_pair(m: &DMatrix<f64>, reference: &[f64]) -> Result<(f64, f64)> {
    let svd = m.clone().svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::CertificateFailure("SVD produced no right singular vectors".into()))?;
    let (idx, &sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::CertificateFailure("empty matrix".into()))?;
    let row = v_t.row(idx);
    let dot: f64 = row.iter().zip(reference).map(|(a, b)| a * b).sum();
    let norm_ref: f64 = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_row: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((sigma, (dot / (norm_ref * norm_row)).abs()))
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Runs the kernel diagnostics on a ladder of increasing half-period grids.
///
/// For `k₀ ∈ (0, 1)` fails with [`Error::CertificateFailure`] when either
/// kernel residual converges at an observed order below
/// [`MIN_RESIDUAL_ORDER`]. For `k₀ = 0` only the singular values are
/// examined, since the non-periodic kernel element does not exist.
pub fn kernel_certificate(base: ShapeParams, grids: &[usize]) -> Result<KernelCertificate> {
    if grids.len() < 2 || grids.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("kernel certificate needs an increasing grid ladder".into()));
    }
    let und = base.profile()?;
    let b0 = base.b;
    let flat = base.is_flat();
    let dkappa_db = base.dkappa_db()?;
    let dkappa_dk = if flat { None } else { Some(base.dkappa_dk()?) };
    let ratio = match dkappa_dk {
        Some(d) => {
            assert!(d != 0.0, "dkappa/dk vanished at k = {}", base.k);
            Some(dkappa_db / d)
        }
        None => None,
    };
    let period = 2.0 * PI * b0;

    let mut levels = Vec::with_capacity(grids.len());
    for &n in grids {
        let grid = PeriodicEvenGrid::new(b0, n)?;
        let h = grid.h();

        let full_n = 2 * (n - 1);
        let eta_z: Vec<f64> = (0..full_n)
            .map(|j| Ok(und.eval(j as f64 * period / full_n as f64)?.eta_z))
            .collect::<Result<_>>()?;
        let eta_z_residual = max_abs(&t_apply_full_period(&eta_z, base)?);

        let (mut v_residual, mut v_residual_fd) = (None, None);
        let (mut defect, mut defect_fd, mut jump, mut fd_error) = (None, None, None, None);
        if let Some(ratio) = ratio {
            let v_exact = |z: f64| -> Result<f64> { Ok(und.d_b_eta(z)? - ratio * und.d_k_eta_exact(z)?) };
            let v_fd = |z: f64| -> Result<f64> {
                let d = profile_param_derivs(base, z)?;
                Ok(d.d_b_eta - ratio * d.d_k_eta)
            };
            v_residual = Some(max_abs(&t_apply_to_function(&v_exact, base, grid)?));
            v_residual_fd = Some(max_abs(&t_apply_to_function(&v_fd, base, grid)?));

            let (mut dmax, mut dmax_fd, mut jmax, mut emax) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for z in grid.nodes() {
                let ez = und.eval(z)?.eta_z;
                let here = v_exact(z)?;
                let there = v_exact(z + period)?;
                dmax = dmax.max((there - here + 2.0 * PI * ez).abs());
                jmax = jmax.max((there - here).abs());
                let here_fd = v_fd(z)?;
                let there_fd = v_fd(z + period)?;
                dmax_fd = dmax_fd.max((there_fd - here_fd + 2.0 * PI * ez).abs());
                let exact_k = und.d_k_eta_exact(z)?;
                emax = emax.max((profile_param_derivs(base, z)?.d_k_eta - exact_k).abs());
            }
            defect = Some(dmax);
            defect_fd = Some(dmax_fd);
            jump = Some(jmax);
            fd_error = Some(emax);
        }

        let t = TOperator::new(base, grid)?;
        let cosine: Vec<f64> = grid.nodes().iter().map(|z| (z / b0).cos()).collect();
        let (sigma, alignment) = smallest_singular_pair(&t.matrix(), &cosine)?;

        levels.push(KernelLevel {
            n,
            h,
            eta_z_residual,
            v_residual,
            v_residual_fd,
            nonperiodicity_defect: defect,
            nonperiodicity_defect_fd: defect_fd,
            nonperiodicity_jump: jump,
            fd_k_derivative_error: fd_error,
            smallest_singular_value: sigma,
            cosine_alignment: alignment,
        });
    }

    let hs: Vec<f64> = levels.iter().map(|l| l.h).collect();
    let collect = |f: &dyn Fn(&KernelLevel) -> Option<f64>| -> Option<Vec<f64>> { levels.iter().map(f).collect() };
    let (eta_z_orders, v_orders, v_fd_orders) = if flat {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        (
            observed_orders(&collect(&|l| Some(l.eta_z_residual)).unwrap_or_default(), &hs),
            observed_orders(&collect(&|l| l.v_residual).unwrap_or_default(), &hs),
            observed_orders(&collect(&|l| l.v_residual_fd).unwrap_or_default(), &hs),
        )
    };
    let singular_value_ratios = levels
        .windows(2)
        .map(|w| w[1].smallest_singular_value / w[0].smallest_singular_value)
        .collect();

    let cert = KernelCertificate { base, dkappa_dk, dkappa_db, levels, eta_z_orders, v_orders, v_fd_orders, singular_value_ratios };
    if let Some(bad) = cert.eta_z_orders.iter().chain(&cert.v_orders).find(|&&o| !(o >= MIN_RESIDUAL_ORDER)) {
        return Err(Error::CertificateFailure(format!(
            "kernel residual converges at observed order {bad:.3} < {MIN_RESIDUAL_ORDER}"
        )));
    }
    Ok(cert)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn helmholtz_round_trip(coeffs in proptest::collection::vec(-1.0f64..1.0, 1..6), b0 in 0.5f64..2.0) {
            let grid = PeriodicEvenGrid::new(b0, 33).unwrap();
            let u = GridFunction::from_fn(grid, |z| {
                coeffs.iter().enumerate().map(|(n, c)| c * (n as f64 * z / b0).cos()).sum()
            });
            let back = helmholtz_inverse(&helmholtz_apply(&u));
            for (a, b) in back.values.iter().zip(&u.values) {
                prop_assert!((a - b).abs() < 1e-11);
            }
        }
    }
}
