//! The flattened elliptic problem on the meridian strip `[0, 1] × [0, πb₀]`.
//!
//! For functions radial in the four-dimensional flattened variable the
//! operator reduces to
//!
//! ```text
//! Lφ = φ_zz + η⁻² [ (1 + η_z² s²) φ_ss + (3/s) φ_s − 2ηη_z s φ_sz − (ηη_zz − 2η_z²) s φ_s ]
//! ```
//!
//! which becomes `φ_zz + 4φ_ss/η²` on the axis. It is discretized with
//! centered differences, a reflected ghost node at `s = 0` and even
//! reflection in `z`. Unknowns exclude the Dirichlet row `s = 1` and are
//! ordered with `s` fastest, which gives a band of half-width `n_s`.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::banded::{BandLu, BandMatrix};
use crate::error::{Error, Result};
use crate::flow1d::{solve_trivial_flow, TrivialFlow, VorticityModel};
use crate::linops::PeriodicEvenGrid;
use crate::unduloid::ShapeParams;

/// Minimum node count in `s`.
pub const MIN_S_NODES: usize = 16;
const SCHUR_EPS: f64 = 1e-13;
const SCHUR_MAX_ITER: usize = 10_000;

/// Tensor grid: `s_i = i/(n_s − 1)` times the half-period grid in `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeridianGrid {
    pub n_s: usize,
    pub z: PeriodicEvenGrid,
}

impl MeridianGrid {
    pub fn new(n_s: usize, z: PeriodicEvenGrid) -> Result<Self> {
        if n_s < MIN_S_NODES {
            return Err(Error::InvalidParameter(format!("meridian grid needs n_s >= {MIN_S_NODES}, got {n_s}")));
        }
        Ok(Self { n_s, z })
    }

    pub fn h_s(&self) -> f64 {
        1.0 / (self.n_s - 1) as f64
    }

    pub fn s(&self, i: usize) -> f64 {
        if i == self.n_s - 1 {
            1.0
        } else {
            i as f64 * self.h_s()
        }
    }

    pub fn len(&self) -> usize {
        self.n_s * self.z.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n_s + i
    }

    /// Number of unknowns once the Dirichlet row is removed.
    pub fn interior_len(&self) -> usize {
        (self.n_s - 1) * self.z.n
    }

    #[inline]
    fn unknown(&self, i: usize, j: usize) -> usize {
        j * (self.n_s - 1) + i
    }
}

/// Samples on a [`MeridianGrid`], stored with `s` fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeridianFunction {
    pub grid: MeridianGrid,
    pub values: Vec<f64>,
}

impl MeridianFunction {
    pub fn zeros(grid: MeridianGrid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn new(grid: MeridianGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "meridian function has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: MeridianGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = vec![0.0; grid.len()];
        for j in 0..grid.z.n {
            let z = grid.z.node(j);
            for i in 0..grid.n_s {
                values[grid.index(i, j)] = f(grid.s(i), z);
            }
        }
        Self { grid, values }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|φ|` on the row `s = 1`.
    pub fn boundary_max_abs(&self) -> f64 {
        (0..self.grid.z.n).fold(0.0, |m, j| m.max(self.at(self.grid.n_s - 1, j).abs()))
    }

    /// One-sided second-order `φ_s` at `s = 1`, one value per `z` node.
    pub fn surface_s_derivative(&self) -> Vec<f64> {
        let n = self.grid.n_s;
        let inv = 1.0 / (2.0 * self.grid.h_s());
        (0..self.grid.z.n)
            .map(|j| (3.0 * self.at(n - 1, j) - 4.0 * self.at(n - 2, j) + self.at(n - 3, j)) * inv)
            .collect()
    }

    /// One-sided second-order `φ_s` at `s = 0`, one value per `z` node.
    pub fn axis_s_derivative(&self) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.grid.h_s());
        (0..self.grid.z.n)
            .map(|j| (-3.0 * self.at(0, j) + 4.0 * self.at(1, j) - self.at(2, j)) * inv)
            .collect()
    }
}

/// Surface profile `η` with its first two `z`-derivatives on a half-period grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceProfile {
    pub grid: PeriodicEvenGrid,
    pub eta: Vec<f64>,
    pub eta_z: Vec<f64>,
    pub eta_zz: Vec<f64>,
}

impl SurfaceProfile {
    pub fn new(grid: PeriodicEvenGrid, eta: Vec<f64>, eta_z: Vec<f64>, eta_zz: Vec<f64>) -> Result<Self> {
        if eta.len() != grid.n || eta_z.len() != grid.n || eta_zz.len() != grid.n {
            return Err(Error::InvalidParameter("surface profile length does not match grid".into()));
        }
        let min = eta.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::InvalidProfile(format!("profile must be positive, min eta = {min}")));
        }
        Ok(Self { grid, eta, eta_z, eta_zz })
    }

    /// Exact unduloid samples.
    pub fn from_shape(shape: ShapeParams, grid: PeriodicEvenGrid) -> Result<Self> {
        let profile = shape.profile()?;
        let mut eta = Vec::with_capacity(grid.n);
        let mut eta_z = Vec::with_capacity(grid.n);
        let mut eta_zz = Vec::with_capacity(grid.n);
        for z in grid.nodes() {
            let p = profile.eval(z)?;
            eta.push(p.eta);
            eta_z.push(p.eta_z);
            eta_zz.push(p.eta_zz);
        }
        Self::new(grid, eta, eta_z, eta_zz)
    }

    /// Derivatives by centered differences with even reflection.
    pub fn from_samples(grid: PeriodicEvenGrid, eta: Vec<f64>) -> Result<Self> {
        if eta.len() != grid.n {
            return Err(Error::InvalidParameter("surface profile length does not match grid".into()));
        }
        let eta_z = grid.d1(&eta);
        let eta_zz = grid.d2(&eta);
        Self::new(grid, eta, eta_z, eta_zz)
    }

    pub fn mean(&self) -> f64 {
        self.grid.mean(&self.eta)
    }

    pub fn min(&self) -> f64 {
        self.eta.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Discrete flattened operator for a fixed profile.
#[derive(Debug, Clone)]
pub struct MeridianOperator {
    grid: MeridianGrid,
    profile: SurfaceProfile,
}

/// One stencil entry: offsets in `s` and `z`, and the weight.
type Tap = (isize, isize, f64);

impl MeridianOperator {
    pub fn new(grid: MeridianGrid, profile: SurfaceProfile) -> Result<Self> {
        if profile.grid != grid.z {
            return Err(Error::InvalidParameter("profile grid differs from the meridian z grid".into()));
        }
        Ok(Self { grid, profile })
    }

    pub fn grid(&self) -> MeridianGrid {
        self.grid
    }

    pub fn profile(&self) -> &SurfaceProfile {
        &self.profile
    }

    fn taps(&self, i: usize, j: usize) -> Vec<Tap> {
        let g = &self.grid;
        let hs = g.h_s();
        let hz = g.z.h();
        let eta = self.profile.eta[j];
        let ez = self.profile.eta_z[j];
        let ezz = self.profile.eta_zz[j];
        let zz = 1.0 / (hz * hz);
        let mut taps = vec![(0, 1, zz), (0, -1, zz), (0, 0, -2.0 * zz)];
        if i == 0 {
            let a = 4.0 / (eta * eta * hs * hs);
            taps.extend([(1, 0, a), (-1, 0, a), (0, 0, -2.0 * a)]);
            return taps;
        }
        let s = g.s(i);
        let inv2 = 1.0 / (eta * eta);
        let a = (1.0 + ez * ez * s * s) * inv2 / (hs * hs);
        let b = (3.0 / s - (eta * ezz - 2.0 * ez * ez) * s) * inv2 / (2.0 * hs);
        let c = -2.0 * ez * s / eta / (4.0 * hs * hz);
        taps.extend([
            (1, 0, a + b),
            (-1, 0, a - b),
            (0, 0, -2.0 * a),
            (1, 1, c),
            (1, -1, -c),
            (-1, 1, -c),
            (-1, -1, c),
        ]);
        taps
    }

    fn z_index(&self, j: usize, dj: isize) -> usize {
        if dj == 0 {
            j
        } else {
            self.grid.z.neighbour(j, dj)
        }
    }

    /// Applies the operator at every node. Rows `s < 1` use the interior
    /// stencil; the row `s = 1` uses a quadratically extrapolated ghost.
    pub fn apply(&self, phi: &MeridianFunction) -> Result<MeridianFunction> {
        if phi.grid != self.grid {
            return Err(Error::InvalidParameter("function grid differs from operator grid".into()));
        }
        let g = self.grid;
        let n = g.n_s;
        let value = |i: isize, j: usize| -> f64 {
            let i = i.unsigned_abs();
            if i < n {
                phi.at(i, j)
            } else {
                3.0 * phi.at(n - 1, j) - 3.0 * phi.at(n - 2, j) + phi.at(n - 3, j)
            }
        };
        let mut out = vec![0.0; g.len()];
        for j in 0..g.z.n {
            for i in 0..n {
                out[g.index(i, j)] = self
                    .taps(i, j)
                    .into_iter()
                    .map(|(di, dj, w)| w * value(i as isize + di, self.z_index(j, dj)))
                    .sum();
            }
        }
        MeridianFunction::new(g, out)
    }

    /// Banded matrix on the unknowns `s < 1` (Dirichlet row eliminated).
    pub fn assemble(&self) -> BandMatrix {
        self.assemble_with_potential(|_, _| 0.0)
    }

    fn assemble_with_potential(&self, potential: impl Fn(usize, usize) -> f64) -> BandMatrix {
        let g = self.grid;
        let n = g.n_s;
        let bw = n;
        let mut m = BandMatrix::zeros(g.interior_len(), bw, bw);
        for j in 0..g.z.n {
            for i in 0..n - 1 {
                let row = g.unknown(i, j);
                m.add(row, row, potential(i, j));
                for (di, dj, w) in self.taps(i, j) {
                    let ii = (i as isize + di).unsigned_abs();
                    if ii == n - 1 {
                        continue;
                    }
                    m.add(row, g.unknown(ii, self.z_index(j, dj)), w);
                }
            }
        }
        m
    }

    /// LU factors for repeated Dirichlet solves.
    pub fn factorize(&self) -> Result<BandLu> {
        self.assemble().factorize()
    }

    /// Solves `Lφ = f` on nodes `s < 1` with `φ = 0` on `s = 1`.
    pub fn solve_dirichlet(&self, rhs: &MeridianFunction) -> Result<MeridianFunction> {
        let lu = self.factorize()?;
        self.solve_with(&lu, rhs)
    }

    pub fn solve_with(&self, lu: &BandLu, rhs: &MeridianFunction) -> Result<MeridianFunction> {
        let g = self.grid;
        let mut b = vec![0.0; g.interior_len()];
        for j in 0..g.z.n {
            for i in 0..g.n_s - 1 {
                b[g.unknown(i, j)] = rhs.at(i, j);
            }
        }
        let x = lu.solve(&b);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularSolve("Dirichlet solve produced non-finite values".into()));
        }
        let mut out = MeridianFunction::zeros(g);
        for j in 0..g.z.n {
            for i in 0..g.n_s - 1 {
                out.values[g.index(i, j)] = x[g.unknown(i, j)];
            }
        }
        Ok(out)
    }
}

/// The base flow part `w = ⟨η⟩² ψ^{λ,⟨η⟩}(s)/η²` of the stream function,
/// together with the trivial flow it was built from.
pub fn base_flow_part(
    lambda: f64,
    profile: &SurfaceProfile,
    grid: MeridianGrid,
    model: &VorticityModel,
) -> Result<(MeridianFunction, TrivialFlow)> {
    let mean = profile.mean();
    let flow = solve_trivial_flow(lambda, mean, model, grid.n_s)?;
    let mut values = vec![0.0; grid.len()];
    for j in 0..grid.z.n {
        let scale = mean * mean / (profile.eta[j] * profile.eta[j]);
        for i in 0..grid.n_s {
            values[grid.index(i, j)] = scale * flow.psi[i];
        }
    }
    Ok((MeridianFunction { grid, values }, flow))
}

/// The stream-function update with zero data on `s = 1`: the solution of
///
/// ```text
/// Lφ̃ = −L w − γ(η²s²(φ + w)) − (FF′)(η²s²(φ + w))/(η²s²),   w = ⟨η⟩²ψ^{λ,⟨η⟩}/η²,
/// ```
///
/// with the removable limit `F′(0)²(φ + w)` on the axis.
pub fn solve_a(
    lambda: f64,
    profile: &SurfaceProfile,
    phi: &MeridianFunction,
    model: &VorticityModel,
) -> Result<MeridianFunction> {
    let grid = phi.grid;
    let op = MeridianOperator::new(grid, profile.clone())?;
    let lu = op.factorize()?;
    solve_a_with(lambda, &op, &lu, phi, model)
}

/// [`solve_a`] with a prefactorized operator.
pub fn solve_a_with(
    lambda: f64,
    op: &MeridianOperator,
    lu: &BandLu,
    phi: &MeridianFunction,
    model: &VorticityModel,
) -> Result<MeridianFunction> {
    let (w, _) = base_flow_part(lambda, op.profile(), op.grid(), model)?;
    let lw = op.apply(&w)?;
    solve_a_given_base(op, lu, phi, &w, &lw, model)
}

/// [`solve_a`] with the base flow part `w` and `L w` already computed.
pub fn solve_a_given_base(
    op: &MeridianOperator,
    lu: &BandLu,
    phi: &MeridianFunction,
    w: &MeridianFunction,
    lw: &MeridianFunction,
    model: &VorticityModel,
) -> Result<MeridianFunction> {
    let grid = op.grid();
    let profile = op.profile();
    let mut rhs = MeridianFunction::zeros(grid);
    for j in 0..grid.z.n {
        let eta = profile.eta[j];
        for i in 0..grid.n_s {
            let k = grid.index(i, j);
            let rho = eta * grid.s(i);
            let rho2 = rho * rho;
            let u = phi.values[k] + w.values[k];
            rhs.values[k] = -lw.values[k] - model.gamma(rho2 * u) - model.ff_prime_over_square(rho2, u);
        }
    }
    op.solve_with(lu, &rhs)
}

/// Smallest-magnitude eigenvalue of the linearized stream-function operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenReport {
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
    /// Number of eigenvalues (the interior unknown count).
    pub count: usize,
}

/// Eigenvalue of `L + γ′(0)η²s² + F′(0)²` of smallest modulus, taken at
/// the unduloid with parameters `base`, on radial functions vanishing on `s = 1`.
pub fn eigenvalue_check(base: ShapeParams, gamma_prime_0: f64, f_prime_0: f64, grid: MeridianGrid) -> Result<EigenReport> {
    let profile = SurfaceProfile::from_shape(base, grid.z)?;
    let op = MeridianOperator::new(grid, profile)?;
    let eta = op.profile().eta.clone();
    let shift = f_prime_0 * f_prime_0;
    let band = op.assemble_with_potential(|i, j| {
        let rho = eta[j] * grid.s(i);
        gamma_prime_0 * rho * rho + shift
    });
    let dense: DMatrix<f64> = band.to_dense();
    let count = dense.nrows();
    let schur = nalgebra::linalg::Schur::try_new(dense, SCHUR_EPS, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::EigenSolver("Schur iteration did not converge".into()))?;
    let eig: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().cloned().collect();
    let best = eig
        .iter()
        .min_by(|a, b| a.norm().total_cmp(&b.norm()))
        .ok_or_else(|| Error::EigenSolver("empty spectrum".into()))?;
    Ok(EigenReport { re: best.re, im: best.im, magnitude: best.norm(), count })
}
