//! Command-line driver: run configuration, subcommands and output files.
//!
//! Every command first writes `config.json` with all defaults resolved,
//! then its results into the output directory. CSV files start with
//! `#`-prefixed metadata lines.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::continuation::{
    continue_branch, read_branch, residual_f, state_from_record, static_state, write_branch,
    Branch, ContinuationLimits, FlowState,
};
use crate::error::{Error, Result};
use crate::flow1d::VorticityModel;
use crate::linops::{kernel_certificate, GridFunction, PeriodicEvenGrid};
use crate::pde::{eigenvalue_check, MeridianGrid};
use crate::unduloid::ShapeParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "unduloid", version, about = "Unduloids and steady capillary waves with vorticity and swirl")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Seed for random perturbations.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Profile samples z, η, η_z, η_zz, κ over one period.
    UnduloidTable,
    /// Mean curvature and its k-derivative over a k grid.
    CurvatureSweep,
    /// Kernel certificate of the linearized surface operator.
    KernelCert,
    /// Smallest eigenvalue of the linearized stream-function operator.
    EigCheck,
    /// Trace branches in both λ directions from the static state.
    Continue,
    /// Recompute residuals of stored branch files.
    VerifyBranch,
}

/// Vorticity/swirl presets, `γ(x) = slope·x`, `F(x) = omega·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Zero,
    LinearGamma { slope: f64 },
    LinearSwirl { omega: f64 },
    LinearBoth { slope: f64, omega: f64 },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Zero
    }
}

impl ModelSpec {
    pub fn slope(&self) -> f64 {
        match *self {
            ModelSpec::LinearGamma { slope } | ModelSpec::LinearBoth { slope, .. } => slope,
            _ => 0.0,
        }
    }

    pub fn omega(&self) -> f64 {
        match *self {
            ModelSpec::LinearSwirl { omega } | ModelSpec::LinearBoth { omega, .. } => omega,
            _ => 0.0,
        }
    }

    pub fn build(&self) -> Result<VorticityModel> {
        let (slope, omega) = (self.slope(), self.omega());
        if !(slope.is_finite() && omega.is_finite()) {
            return Err(Error::Config("model coefficients must be finite".into()));
        }
        Ok(if *self == ModelSpec::Zero { VorticityModel::zero() } else { VorticityModel::linear(slope, omega) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub b0: f64,
    pub k0: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self { b0: 1.0, k0: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_z: usize,
    pub n_s: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n_z: 33, n_s: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableConfig {
    /// Samples over one period `[0, 2πb)`.
    pub points: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self { points: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k_min: f64,
    pub k_max: f64,
    pub k_count: usize,
    /// Step of the five-point central difference in k.
    pub fd_step: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { k_min: 0.01, k_max: 0.99, k_count: 99, fd_step: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    pub grids: Vec<usize>,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self { grids: vec![129, 257, 513] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    pub dlambda: f64,
    pub max_lambda: f64,
    pub max_norm: f64,
    /// Axis floor; `None` resolves to `1e−3·b0`.
    pub eta_floor: Option<f64>,
    pub max_vorticity_norm: f64,
    pub max_steps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Amplitude of a seeded random even perturbation of the start state.
    pub perturbation: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        let d = ContinuationLimits::defaults_for(1.0);
        Self {
            dlambda: 0.0025,
            max_lambda: d.max_abs_lambda,
            max_norm: d.max_norm,
            eta_floor: None,
            max_vorticity_norm: d.max_vorticity_norm,
            max_steps: d.max_steps,
            newton_tol: d.newton_tol,
            newton_max_iter: d.newton_max_iter,
            perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Branch files to check; empty means the two files written by `continue` in `--out`.
    pub branches: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub shape: ShapeConfig,
    pub sigma: f64,
    /// Hölder exponent of the norm surrogates and the vorticity norm.
    pub alpha: f64,
    pub grid: GridConfig,
    pub model: ModelSpec,
    pub table: TableConfig,
    pub sweep: SweepConfig,
    pub certificate: CertificateConfig,
    pub continuation: ContinuationConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape: ShapeConfig::default(),
            sigma: 1.0,
            alpha: 0.5,
            grid: GridConfig::default(),
            model: ModelSpec::default(),
            table: TableConfig::default(),
            sweep: SweepConfig::default(),
            certificate: CertificateConfig::default(),
            continuation: ContinuationConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills in derived defaults.
    pub fn resolve(mut self) -> Self {
        if self.continuation.eta_floor.is_none() {
            self.continuation.eta_floor = Some(1e-3 * self.shape.b0);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        check(s.b0 > 0.0 && s.b0.is_finite(), format!("shape.b0 must be positive, got {}", s.b0))?;
        check((0.0..1.0).contains(&s.k0), format!("shape.k0 must lie in [0, 1), got {}", s.k0))?;
        check(self.sigma > 0.0 && self.sigma.is_finite(), format!("sigma must be positive, got {}", self.sigma))?;
        check(self.alpha > 0.0 && self.alpha < 1.0, format!("alpha must lie in (0, 1), got {}", self.alpha))?;
        check(self.grid.n_z >= crate::linops::MIN_NODES, format!("grid.n_z must be >= {}", crate::linops::MIN_NODES))?;
        check(self.grid.n_s >= crate::pde::MIN_S_NODES, format!("grid.n_s must be >= {}", crate::pde::MIN_S_NODES))?;
        check(self.table.points >= 2, "table.points must be >= 2")?;
        let w = &self.sweep;
        check(
            w.k_min > 0.0 && w.k_max < 1.0 && w.k_min <= w.k_max && w.k_count >= 1,
            "sweep needs 0 < k_min <= k_max < 1 and k_count >= 1",
        )?;
        check(
            w.fd_step > 0.0 && w.k_min - 2.0 * w.fd_step > 0.0 && w.k_max + 2.0 * w.fd_step < 1.0,
            "sweep.fd_step must be positive and keep k ± 2·fd_step inside (0, 1)",
        )?;
        check(self.certificate.grids.len() >= 2, "certificate.grids needs at least two sizes")?;
        let c = &self.continuation;
        check(c.dlambda != 0.0 && c.dlambda.is_finite(), "continuation.dlambda must be nonzero")?;
        check(c.max_lambda >= 0.0, "continuation.max_lambda must be >= 0")?;
        check(c.newton_tol > 0.0, "continuation.newton_tol must be positive")?;
        check(c.newton_max_iter >= 1, "continuation.newton_max_iter must be >= 1")?;
        check(c.eta_floor.is_none_or(|f| f >= 0.0), "continuation.eta_floor must be >= 0")?;
        check(c.perturbation >= 0.0, "continuation.perturbation must be >= 0")?;
        self.model.build().map(|_| ())
    }

    fn limits(&self) -> ContinuationLimits {
        let c = &self.continuation;
        ContinuationLimits {
            max_abs_lambda: c.max_lambda,
            max_norm: c.max_norm,
            eta_floor: c.eta_floor.unwrap_or(1e-3 * self.shape.b0),
            max_vorticity_norm: c.max_vorticity_norm,
            max_steps: c.max_steps,
            newton_tol: c.newton_tol,
            newton_max_iter: c.newton_max_iter,
            alpha: self.alpha,
        }
    }

    fn shape_params(&self) -> Result<ShapeParams> {
        ShapeParams::new_allow_flat(self.shape.b0, self.shape.k0)
    }
}

/// Maps an error to its process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_SOLVER,
    }
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    command: Command,
    seed: u64,
    out: &'a Path,
    config: &'a RunConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Parses arguments and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command. `Ok` carries the exit code for outcomes that are
/// results rather than errors (a failed re-verification).
pub fn run(cli: &Cli) -> Result<i32> {
    let config = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    }
    .resolve();
    config.validate()?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("config.json"), &ConfigEcho { command: cli.command, seed: cli.seed, out: &cli.out, config: &config })?;
    match cli.command {
        Command::UnduloidTable => unduloid_table(&config, &cli.out).map(|_| EXIT_OK),
        Command::CurvatureSweep => curvature_sweep(&config, &cli.out).map(|_| EXIT_OK),
        Command::KernelCert => kernel_cert(&config, &cli.out).map(|_| EXIT_OK),
        Command::EigCheck => eig_check(&config, &cli.out).map(|_| EXIT_OK),
        Command::Continue => continue_both(&config, &cli.out, cli.seed).map(|_| EXIT_OK),
        Command::VerifyBranch => verify_branches(&config, &cli.out),
    }
}

fn unduloid_table(config: &RunConfig, out: &Path) -> Result<()> {
    let shape = config.shape_params()?;
    let profile = shape.profile()?;
    let kappa = shape.mean_curvature()?;
    let period = shape.period();
    let mut w = BufWriter::new(File::create(out.join("unduloid_table.csv"))?);
    writeln!(w, "# command = unduloid-table")?;
    writeln!(w, "# b = {}", shape.b)?;
    writeln!(w, "# k = {}", shape.k)?;
    writeln!(w, "# period = {period}")?;
    writeln!(w, "# kappa = {kappa}")?;
    writeln!(w, "# min_radius = {}", profile.min_radius())?;
    writeln!(w, "# max_radius = {}", profile.max_radius())?;
    writeln!(w, "z,eta,eta_z,eta_zz,kappa")?;
    let n = config.table.points;
    for j in 0..n {
        let z = period * j as f64 / n as f64;
        let p = profile.eval(z)?;
        writeln!(w, "{z},{},{},{},{}", p.eta, p.eta_z, p.eta_zz, p.curvature())?;
    }
    w.flush()?;
    Ok(())
}

fn curvature_sweep(config: &RunConfig, out: &Path) -> Result<()> {
    let b = config.shape.b0;
    let sw = &config.sweep;
    let mut w = BufWriter::new(File::create(out.join("curvature_sweep.csv"))?);
    writeln!(w, "# command = curvature-sweep")?;
    writeln!(w, "# b = {b}")?;
    writeln!(w, "# fd_step = {}", sw.fd_step)?;
    writeln!(w, "# kappa_limit_k0 = {}", -1.0 / b)?;
    writeln!(w, "# kappa_limit_k1 = {}", -2.0 / (PI * b))?;
    writeln!(w, "k,kappa,dkappa_dk,dkappa_dk_fd,relative_difference")?;
    for i in 0..sw.k_count {
        let k = if sw.k_count == 1 {
            sw.k_min
        } else {
            (sw.k_min * (sw.k_count - 1 - i) as f64 + sw.k_max * i as f64) / (sw.k_count - 1) as f64
        };
        let shape = ShapeParams::new(b, k)?;
        let kappa = shape.mean_curvature()?;
        let closed = shape.dkappa_dk()?;
        let fd = dkappa_dk_central(b, k, sw.fd_step)?;
        let rel = (closed - fd).abs() / closed.abs();
        writeln!(w, "{k},{kappa},{closed},{fd},{rel}")?;
    }
    w.flush()?;
    Ok(())
}

/// Five-point central difference of `κ^{b,k}` in `k`, taken on the
/// cancellation-free offset `κ + 1/b`.
pub fn dkappa_dk_central(b: f64, k: f64, h: f64) -> Result<f64> {
    let f = |kk: f64| ShapeParams::new(b, kk)?.curvature_offset();
    Ok((8.0 * (f(k + h)? - f(k - h)?) - (f(k + 2.0 * h)? - f(k - 2.0 * h)?)) / (12.0 * h))
}

fn kernel_cert(config: &RunConfig, out: &Path) -> Result<()> {
    let cert = kernel_certificate(config.shape_params()?, &config.certificate.grids)?;
    write_json(&out.join("kernel_certificate.json"), &cert)
}

#[derive(Serialize)]
struct EigOutput {
    b0: f64,
    k0: f64,
    gamma_prime_0: f64,
    f_prime_0: f64,
    n_z: usize,
    n_s: usize,
    eigenvalue_re: f64,
    eigenvalue_im: f64,
    magnitude: f64,
    count: usize,
}

fn eig_check(config: &RunConfig, out: &Path) -> Result<()> {
    let base = config.shape_params()?;
    let grid = MeridianGrid::new(config.grid.n_s, PeriodicEvenGrid::new(base.b, config.grid.n_z)?)?;
    let (gp, fp) = (config.model.slope(), config.model.omega());
    let rep = eigenvalue_check(base, gp, fp, grid)?;
    write_json(
        &out.join("eig_check.json"),
        &EigOutput {
            b0: base.b,
            k0: base.k,
            gamma_prime_0: gp,
            f_prime_0: fp,
            n_z: grid.z.n,
            n_s: grid.n_s,
            eigenvalue_re: rep.re,
            eigenvalue_im: rep.im,
            magnitude: rep.magnitude,
            count: rep.count,
        },
    )
}

/// Static state, optionally displaced by a seeded even perturbation of `η`.
pub fn start_state(config: &RunConfig, model: &VorticityModel, seed: u64) -> Result<FlowState> {
    let base = config.shape_params()?;
    let s = static_state(base, config.sigma, config.grid.n_z, config.grid.n_s)?;
    let amp = config.continuation.perturbation;
    if amp == 0.0 {
        return Ok(s);
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let coeffs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = s.eta.grid.nodes();
    let eta = s
        .eta
        .values
        .iter()
        .zip(&z)
        .map(|(e, z)| e + amp * coeffs.iter().enumerate().map(|(n, c)| c * (n as f64 * z / base.b).cos()).sum::<f64>())
        .collect();
    FlowState::from_parts(0.0, GridFunction::new(s.eta.grid, eta)?, s.phi, s.sigma, s.q, model)
}

pub const BRANCH_FILES: [&str; 2] = ["branch_plus.jsonl", "branch_minus.jsonl"];

fn continue_both(config: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let model = config.model.build()?;
    let limits = config.limits();
    let start = start_state(config, &model, seed)?;
    let model_json = serde_json::to_value(config.model)?;
    let dl = config.continuation.dlambda.abs();
    let mut summary = BufWriter::new(File::create(out.join("continuation_summary.csv"))?);
    writeln!(summary, "# command = continue")?;
    writeln!(summary, "# b0 = {}", config.shape.b0)?;
    writeln!(summary, "# k0 = {}", config.shape.k0)?;
    writeln!(summary, "# sigma = {}", config.sigma)?;
    writeln!(summary, "# q = {}", start.q)?;
    writeln!(summary, "# n_z = {}", config.grid.n_z)?;
    writeln!(summary, "# n_s = {}", config.grid.n_s)?;
    writeln!(summary, "direction,index,lambda,norm,min_eta,vorticity_norm,newton_iterations,residual,distance_from_start,termination")?;
    for (file, sign) in BRANCH_FILES.iter().zip([1.0, -1.0]) {
        let branch = match continue_branch(&start, &model, sign * dl, &limits) {
            Ok(b) => b,
            Err(e @ (Error::Io(_) | Error::Config(_) | Error::InvalidParameter(_))) => return Err(e),
            Err(e) => {
                // The start itself did not converge: record it as an empty branch.
                eprintln!("warning: start state failed to converge: {e}");
                writeln!(summary, "{},0,0,,,,,,,newton-failure", if sign > 0.0 { "plus" } else { "minus" })?;
                continue;
            }
        };
        write_branch_file(&branch, model_json.clone(), &limits, &out.join(file))?;
        for (i, d) in branch.diagnostics.iter().enumerate() {
            writeln!(
                summary,
                "{},{i},{},{},{},{},{},{},{},{}",
                if sign > 0.0 { "plus" } else { "minus" },
                d.lambda,
                d.norm,
                d.min_eta,
                d.vorticity_norm,
                d.newton_iterations,
                d.residual,
                d.distance_from_start,
                branch.termination.as_str()
            )?;
        }
    }
    summary.flush()?;
    Ok(())
}

fn write_branch_file(branch: &Branch, model: serde_json::Value, limits: &ContinuationLimits, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_branch(branch, model, limits, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Re-verification of one stored state.
#[derive(Debug, Clone, Serialize)]
pub struct VerifiedState {
    pub lambda: f64,
    pub stored_residual: f64,
    pub recomputed_residual: f64,
    pub bit_identical: bool,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifiedBranch {
    pub file: PathBuf,
    pub tolerance: f64,
    pub states: Vec<VerifiedState>,
    pub ok: bool,
}

/// Recomputes residuals of every state in a stored branch.
pub fn verify_branch_file(path: &Path) -> Result<VerifiedBranch> {
    let (header, records) = read_branch(BufReader::new(File::open(path)?))?;
    let spec: ModelSpec = serde_json::from_value(header.model.clone()).map_err(|e| Error::Config(format!("model in {}: {e}", path.display())))?;
    let model = spec.build()?;
    let mut states = Vec::with_capacity(records.len());
    for rec in &records {
        let state = state_from_record(&header, rec)?;
        let r = residual_f(&state, &model)?.max_abs();
        states.push(VerifiedState {
            lambda: rec.lambda,
            stored_residual: rec.diagnostics.residual,
            recomputed_residual: r,
            bit_identical: r.to_bits() == rec.diagnostics.residual.to_bits(),
            within_tolerance: r <= header.newton_tol,
        });
    }
    let ok = states.iter().all(|s| s.bit_identical && s.within_tolerance);
    Ok(VerifiedBranch { file: path.to_path_buf(), tolerance: header.newton_tol, states, ok })
}

fn verify_branches(config: &RunConfig, out: &Path) -> Result<i32> {
    let files: Vec<PathBuf> = if config.verify.branches.is_empty() {
        BRANCH_FILES.iter().map(|f| out.join(f)).collect()
    } else {
        config.verify.branches.clone()
    };
    let mut reports = Vec::new();
    for f in &files {
        reports.push(verify_branch_file(f)?);
    }
    write_json(&out.join("verify_branch.json"), &reports)?;
    Ok(if reports.iter().all(|r| r.ok) { EXIT_OK } else { EXIT_SOLVER })
}
