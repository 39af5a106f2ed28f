//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE`, a JSON object whose keys are long
//! flag names. Keys may sit at the top level or under a section named after
//! the subcommand; flags given on the command line win. `MAHI_THREADS` sets
//! the worker count.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mahi::dynamics::{
    run_replicas, symmetric_toy_system, write_trajectory_csv, write_transitions_csv, BiasPotential, DynamicsError, Langevin,
    TrajectoryConfig,
};
use mahi::fmm::{Boundary, FmmConfig, FmmError, LatticeMode, Precision};
use mahi::mahi::{intra_site_coupling, Mahi, MahiError, Mode};
use mahi::oracle::k_factor;
use mahi::system::{System, SystemError};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::generate::{generate_random_system, Distribution, SiteSpec};
use crate::scaling::{scaling_bench, ScalingKind, ScalingSpec};
use crate::sweep::{accuracy_sweep, SweepError, SweepSpec};

pub const THREADS_ENV: &str = "MAHI_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(io::Error::other(e))
    }
}

fn is_numerical_fmm(e: &FmmError) -> bool {
    matches!(e, FmmError::LatticeNotConverged { .. })
}

impl From<MahiError> for CliError {
    fn from(e: MahiError) -> Self {
        match &e {
            MahiError::Fmm(f) if is_numerical_fmm(f) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::NonFiniteForce { .. } => CliError::Numerical(e.to_string()),
            DynamicsError::Mahi(m) => m.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            SweepError::Mahi(m) => m.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mahi", version, about = "Periodic FMM electrostatics with Hamiltonian-interpolated λ-forces")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON file of default flag values; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random system file.
    Gen(GenArgs),
    /// Energy of a system at given λ.
    Energy(EvalArgs),
    /// Per-branch λ-derivatives and forces as CSV.
    LambdaForces(ForcesArgs),
    /// HI and QI λ-derivatives side by side with the predicted difference.
    CompareHiQi(CompareArgs),
    /// Relative deviation of λ-forces from end-state references over p and d.
    AccuracySweep(SweepArgs),
    /// Wall-clock scaling of the correction phase.
    Bench(BenchArgs),
    /// Langevin λ-dynamics replicas in HI and/or QI mode.
    Dynamics(DynamicsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BoundaryArg {
    /// Periodic with the converged lattice operator.
    Periodic,
    /// Isolated cell.
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hi,
    Qi,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hi => Mode::Hi,
            ModeArg::Qi => Mode::Qi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DynamicsModeArg {
    Hi,
    Qi,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Double,
    Single,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Double => Precision::Double,
            PrecisionArg::Single => Precision::Single,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CaseArg {
    /// Site atoms clustered in a 0.5 nm sphere.
    Typical,
    /// Site atoms spread over the whole box.
    Worst,
}

impl From<CaseArg> for Distribution {
    fn from(c: CaseArg) -> Self {
        match c {
            CaseArg::Typical => Distribution::Typical,
            CaseArg::Worst => Distribution::WorstCase,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output system file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Background particles.
    #[arg(long, default_value_t = 1000)]
    pub background: usize,
    /// Titratable sites.
    #[arg(long, default_value_t = 1)]
    pub sites: usize,
    /// Atoms per site.
    #[arg(long, default_value_t = 10)]
    pub atoms: usize,
    /// Forms per site (a power of two up to 16).
    #[arg(long, default_value_t = 2)]
    pub forms: usize,
    /// Placement of site atoms.
    #[arg(long, value_enum, default_value_t = CaseArg::Typical)]
    pub case: CaseArg,
    /// Box edge in nm; default keeps 100 particles per nm³.
    #[arg(long = "box", value_name = "NM")]
    pub box_length: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// System file.
    #[arg(long, value_name = "FILE")]
    pub system: PathBuf,
    /// Multipole order, 0..=30.
    #[arg(long = "p", default_value_t = 8)]
    pub order: usize,
    /// Tree depth, 0..=5.
    #[arg(long = "d", default_value_t = 2)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Periodic)]
    pub boundary: BoundaryArg,
    /// Drop the surface dipole term (periodic only).
    #[arg(long)]
    pub no_dipole: bool,
    /// Sum image shells explicitly up to this Chebyshev radius instead of the converged lattice; 1 disables the lattice.
    #[arg(long, value_name = "N")]
    pub shells: Option<usize>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    /// λ values: one value for every λ, or one per λ in site order. Defaults to the file's λ.
    #[arg(long, value_name = "LIST")]
    pub lambda: Option<String>,
}

impl SolverArgs {
    pub fn config(&self) -> FmmConfig {
        let boundary = match self.boundary {
            BoundaryArg::Open => Boundary::Open,
            BoundaryArg::Periodic => {
                let lattice = match self.shells {
                    None => LatticeMode::Converged,
                    Some(0 | 1) => LatticeMode::Off,
                    Some(n) => LatticeMode::Shells(n),
                };
                Boundary::Periodic { lattice, dipole: !self.no_dipole }
            }
        };
        FmmConfig::new(self.order, self.depth).with_boundary(boundary).with_precision(self.precision.into())
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Hi)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct ForcesArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Hi)]
    pub mode: ModeArg,
    /// CSV output; the table goes to stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Extra λ grid; each value is applied to every λ. Adds rows after `--lambda`.
    #[arg(long, value_name = "LIST")]
    pub grid: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Orders: `a..b` (inclusive), `a,b,c` or a single value.
    #[arg(long = "p", default_value = "1..30")]
    pub orders: String,
    /// Depths, same syntax as `--p`.
    #[arg(long = "d", default_value = "0..3")]
    pub depths: String,
    #[arg(long, value_enum, default_value_t = CaseArg::Typical)]
    pub case: CaseArg,
    /// Forms of the single site: 2 or 4.
    #[arg(long, default_value_t = 2)]
    pub forms: usize,
    #[arg(long, default_value_t = 1000)]
    pub background: usize,
    #[arg(long, default_value_t = 10)]
    pub atoms: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// What to vary: sites, forms (per site) or particles.
    #[arg(long, default_value = "forms")]
    pub kind: String,
    /// Values of the varied quantity.
    #[arg(long, default_value = "2,4,8,16")]
    pub sizes: String,
    /// Total particles for site and form sweeps.
    #[arg(long, default_value_t = 20_000)]
    pub particles: usize,
    /// Sites for form sweeps.
    #[arg(long, default_value_t = 8)]
    pub sites: usize,
    /// Forms per site for site and particle sweeps.
    #[arg(long, default_value_t = 2)]
    pub forms: usize,
    #[arg(long = "p", default_value_t = 8)]
    pub order: usize,
    /// Fixed depth; the fastest depth is measured per size when omitted.
    #[arg(long = "d")]
    pub depth: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DynamicsArgs {
    /// System file; the mirror-symmetric toy site is used when omitted.
    #[arg(long, value_name = "FILE")]
    pub system: Option<PathBuf>,
    /// Charge-interpolation barrier `|k|/8` of the toy site in kT.
    #[arg(long, default_value_t = 1.0)]
    pub gap_kt: f64,
    #[arg(long, value_enum, default_value_t = DynamicsModeArg::Both)]
    pub mode: DynamicsModeArg,
    #[arg(long = "p", default_value_t = 8)]
    pub order: usize,
    #[arg(long = "d", default_value_t = 0)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Open)]
    pub boundary: BoundaryArg,
    #[arg(long, default_value_t = 100_000)]
    pub steps: usize,
    /// Time step in ps.
    #[arg(long, default_value_t = 0.002)]
    pub dt: f64,
    /// Temperature in K.
    #[arg(long, default_value_t = 300.0)]
    pub temperature: f64,
    /// Friction in 1/ps.
    #[arg(long, default_value_t = 5.0)]
    pub friction: f64,
    /// Double-well barrier height in kJ/mol.
    #[arg(long, default_value_t = 5.0)]
    pub barrier: f64,
    #[arg(long, default_value_t = 20)]
    pub replicas: usize,
    /// Master seed; replica seeds derive from it.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Store one frame every this many steps.
    #[arg(long, default_value_t = 100)]
    pub stride: usize,
    /// Lower hysteresis threshold.
    #[arg(long, default_value_t = 0.2)]
    pub low: f64,
    /// Upper hysteresis threshold.
    #[arg(long, default_value_t = 0.8)]
    pub high: f64,
    /// Transition summary CSV; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Directory for per-replica trajectory CSVs.
    #[arg(long, value_name = "DIR")]
    pub trajectories: Option<PathBuf>,
}

/// Inclusive list: `a..b`, `a..=b`, `a,b,c` or `a`.
pub fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    let s = s.trim();
    let num = |t: &str| usize::from_str(t.trim()).map_err(|_| format!("'{t}' is not a non-negative integer"));
    if let Some((a, b)) = s.split_once("..") {
        let a = num(a)?;
        let b = num(b.strip_prefix('=').unwrap_or(b))?;
        if a > b {
            return Err(format!("empty range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            let v = f64::from_str(t.trim()).map_err(|_| format!("'{t}' is not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("'{t}' is not finite"))
            }
        })
        .collect()
}

/// λ per site from a broadcast value or a flat list in site order.
pub fn lambda_from_list(system: &System, values: &[f64]) -> Result<Vec<Vec<f64>>, String> {
    let counts: Vec<usize> = system.sites.iter().map(|s| s.num_lambda()).collect();
    let total: usize = counts.iter().sum();
    if values.len() == 1 {
        return Ok(counts.iter().map(|&c| vec![values[0]; c]).collect());
    }
    if values.len() != total {
        return Err(format!("{} λ values given, system has {total}", values.len()));
    }
    let mut it = values.iter().copied();
    Ok(counts.iter().map(|&c| it.by_ref().take(c).collect()).collect())
}

fn load_system(path: &Path) -> Result<System, CliError> {
    System::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn lambda_for(system: &System, arg: Option<&str>) -> Result<Vec<Vec<f64>>, CliError> {
    match arg {
        None => Ok(system.lambda.values()),
        Some(s) => parse_f64_list(s).and_then(|v| lambda_from_list(system, &v)).map_err(CliError::Usage),
    }
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_rows<T: Serialize>(out: Option<&Path>, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer(out)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn finite(x: f64, what: &str) -> Result<f64, CliError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(CliError::Numerical(format!("{what} is not finite")))
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    if let Some(l) = a.box_length {
        if !(l.is_finite() && l > 0.0) {
            return Err(CliError::Usage(format!("box length must be positive, got {l}")));
        }
    }
    let s = generate_random_system(a.background, SiteSpec { count: a.sites, atoms: a.atoms, forms: a.forms }, a.case.into(), a.box_length, a.seed);
    if let Some(v) = s.validate().into_iter().next() {
        return Err(CliError::Usage(format!("generated system is invalid: {v}")));
    }
    s.save(&a.out)?;
    Ok(())
}

fn cmd_energy(a: &EvalArgs) -> Result<(), CliError> {
    let system = load_system(&a.solver.system)?;
    let lambda = lambda_for(&system, a.solver.lambda.as_deref())?;
    let m = Mahi::new(&system, a.solver.config(), a.mode.into())?;
    let r = m.evaluate(&lambda, false)?;
    println!("energy {}", finite(r.energy, "energy")?);
    println!("scaled_energy {}", r.scaled_energy);
    Ok(())
}

/// Row of `lambda-forces` output.
#[derive(Debug, Serialize)]
pub struct ForceRow {
    pub site: usize,
    pub branch: usize,
    pub lambda: f64,
    pub dh_dlambda: f64,
    pub force: f64,
}

fn cmd_forces(a: &ForcesArgs) -> Result<(), CliError> {
    let system = load_system(&a.solver.system)?;
    let lambda = lambda_for(&system, a.solver.lambda.as_deref())?;
    let m = Mahi::new(&system, a.solver.config(), a.mode.into())?;
    let r = m.evaluate(&lambda, false)?;
    let mut rows = Vec::new();
    for (s, (d, l)) in r.lambda_forces.derivatives.iter().zip(&lambda).enumerate() {
        for (b, (&d, &l)) in d.iter().zip(l).enumerate() {
            finite(d, "λ-derivative")?;
            rows.push(ForceRow { site: s, branch: b, lambda: l, dh_dlambda: d, force: -d });
        }
    }
    if let Some(out) = &a.out {
        for r in &rows {
            println!("site {} branch {} lambda {} force {}", r.site, r.branch, r.lambda, r.force);
        }
        write_rows(Some(out), &rows)
    } else {
        write_rows(None, &rows)
    }
}

/// Row of `compare-hi-qi` output. `k` is `Δqᵀ A' Δq` with the solver's own
/// intra-site operator and `k_min_image` the minimum-image pair sum; both are
/// empty for sites without exactly two forms.
#[derive(Debug, Serialize)]
pub struct CompareRow {
    pub site: usize,
    pub branch: usize,
    pub lambda: f64,
    pub dh_hi: f64,
    pub dh_qi: f64,
    pub qi_minus_hi: f64,
    pub k: Option<f64>,
    pub k_min_image: Option<f64>,
    pub predicted: Option<f64>,
    pub energy_gap: f64,
}

fn cmd_compare(a: &CompareArgs) -> Result<(), CliError> {
    let system = load_system(&a.solver.system)?;
    let mut lambdas = vec![lambda_for(&system, a.solver.lambda.as_deref())?];
    if let Some(g) = &a.grid {
        for v in parse_f64_list(g).map_err(CliError::Usage)? {
            lambdas.push(lambda_from_list(&system, &[v]).map_err(CliError::Usage)?);
        }
    }
    let cfg = a.solver.config();
    let hi = Mahi::new(&system, cfg, Mode::Hi)?;
    let qi = Mahi::new(&system, cfg, Mode::Qi)?;
    let periodic_l = cfg.boundary.is_periodic().then_some(system.particles.box_length);
    let ks: Vec<(Option<f64>, Option<f64>)> = system
        .sites
        .iter()
        .map(|site| {
            if site.num_forms() != 2 {
                return (None, None);
            }
            let dq: Vec<f64> = site.forms[0].iter().zip(&site.forms[1]).map(|(a, b)| a - b).collect();
            let k = intra_site_coupling(hi.fmm(), site, &dq, &dq);
            (Some(k), k_factor(site, &system.particles.positions, periodic_l).ok())
        })
        .collect();
    let mut rows = Vec::new();
    for lambda in &lambdas {
        let h = hi.evaluate(lambda, false)?;
        let q = qi.evaluate(lambda, false)?;
        let gap = finite(q.energy - h.energy, "energy gap")?;
        for (s, l) in lambda.iter().enumerate() {
            for (b, &lv) in l.iter().enumerate() {
                let dh = finite(h.lambda_forces.derivatives[s][b], "HI derivative")?;
                let dq = finite(q.lambda_forces.derivatives[s][b], "QI derivative")?;
                let (k, kmi) = ks[s];
                rows.push(CompareRow {
                    site: s,
                    branch: b,
                    lambda: lv,
                    dh_hi: dh,
                    dh_qi: dq,
                    qi_minus_hi: dq - dh,
                    k,
                    k_min_image: kmi,
                    predicted: k.map(|k| (lv - 0.5) * k),
                    energy_gap: gap,
                });
            }
        }
    }
    write_rows(a.out.as_deref(), &rows)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let spec = SweepSpec {
        orders: parse_usize_list(&a.orders).map_err(CliError::Usage)?,
        depths: parse_usize_list(&a.depths).map_err(CliError::Usage)?,
        precision: a.precision.into(),
        boundary: Boundary::periodic(),
        case: a.case.into(),
        forms: a.forms,
        n_background: a.background,
        site_atoms: a.atoms,
        repetitions: a.repetitions,
        seed: a.seed,
    };
    let rows = accuracy_sweep(&spec)?;
    write_rows(a.out.as_deref(), &rows)
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let spec = ScalingSpec {
        kind: ScalingKind::from_str(&a.kind).map_err(CliError::Usage)?,
        sizes: parse_usize_list(&a.sizes).map_err(CliError::Usage)?,
        particles: a.particles,
        sites: a.sites,
        forms: a.forms,
        order: a.order,
        depth: a.depth,
        warmup: a.warmup,
        repetitions: a.repetitions.max(1),
        seed: a.seed,
    };
    let rows = scaling_bench(&spec)?;
    write_rows(a.out.as_deref(), &rows)
}

fn cmd_dynamics(a: &DynamicsArgs) -> Result<(), CliError> {
    let system = match &a.system {
        Some(p) => load_system(p)?,
        None => symmetric_toy_system(a.gap_kt, a.temperature),
    };
    let boundary = match a.boundary {
        BoundaryArg::Open => Boundary::Open,
        BoundaryArg::Periodic => Boundary::periodic(),
    };
    let m = Mahi::new(&system, FmmConfig::new(a.order, a.depth).with_boundary(boundary), Mode::Hi)?;
    let modes: &[Mode] = match a.mode {
        DynamicsModeArg::Hi => &[Mode::Hi],
        DynamicsModeArg::Qi => &[Mode::Qi],
        DynamicsModeArg::Both => &[Mode::Hi, Mode::Qi],
    };
    let base = TrajectoryConfig {
        mode: Mode::Hi,
        steps: a.steps,
        langevin: Langevin { dt: a.dt, temperature: a.temperature, friction: a.friction },
        bias: BiasPotential { barrier: a.barrier, ..BiasPotential::default() },
        seed: a.seed,
        stride: a.stride,
        low: a.low,
        high: a.high,
    };
    if let Some(dir) = &a.trajectories {
        std::fs::create_dir_all(dir)?;
    }
    let mut runs = Vec::new();
    for &mode in modes {
        let trajs = run_replicas(&m, &system.lambda, &TrajectoryConfig { mode, ..base }, a.replicas, a.seed)?;
        runs.push((mode, trajs));
    }
    let label = |mode: Mode| if mode == Mode::Hi { "hi" } else { "qi" };
    if let Some(dir) = &a.trajectories {
        for (mode, trajs) in &runs {
            for (i, t) in trajs.iter().enumerate() {
                let f = File::create(dir.join(format!("{}_{i:03}.csv", label(*mode))))?;
                write_trajectory_csv(io::BufWriter::new(f), t)?;
            }
        }
    }
    let named: Vec<(String, &mahi::dynamics::Trajectory)> = runs
        .iter()
        .flat_map(|(mode, trajs)| trajs.iter().enumerate().map(move |(i, t)| (format!("{}_{i:03}", label(*mode)), t)))
        .collect();
    let mut w = writer(a.out.as_deref())?;
    write_transitions_csv(&mut w, &named)?;
    w.flush()?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Energy(a) => cmd_energy(a),
        Command::LambdaForces(a) => cmd_forces(a),
        Command::CompareHiQi(a) => cmd_compare(a),
        Command::AccuracySweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Dynamics(a) => cmd_dynamics(a),
    }
}

const SUBCOMMANDS: [&str; 7] = ["gen", "energy", "lambda-forces", "compare-hi-qi", "accuracy-sweep", "bench", "dynamics"];

fn config_value(v: &Value) -> Result<Option<String>, String> {
    Ok(match v {
        Value::Bool(_) | Value::Null => None,
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => {
            let parts: Result<Vec<String>, String> =
                items.iter().map(|i| config_value(i)?.ok_or_else(|| "nested flags must be values".to_string())).collect();
            Some(parts?.join(","))
        }
        Value::Object(_) => return Err("nested objects are only allowed as subcommand sections".into()),
    })
}

/// Flags from a config object for `subcommand`, top-level keys first.
pub fn config_flags(text: &str, subcommand: &str) -> Result<Vec<String>, String> {
    let root: Value = serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
    let Value::Object(map) = root else {
        return Err("config must be a JSON object".into());
    };
    let mut out = Vec::new();
    let mut push = |key: &str, v: &Value| -> Result<(), String> {
        match v {
            Value::Bool(false) | Value::Null => {}
            Value::Bool(true) => out.push(format!("--{key}")),
            _ => {
                out.push(format!("--{key}"));
                out.push(config_value(v)?.expect("scalar"));
            }
        }
        Ok(())
    };
    for (k, v) in &map {
        if !SUBCOMMANDS.contains(&k.as_str()) {
            push(k, v)?;
        }
    }
    if let Some(Value::Object(section)) = map.get(subcommand) {
        for (k, v) in section {
            push(k, v)?;
        }
    }
    Ok(out)
}

/// Splices `--config` contents in front of the user's own flags so that the
/// latter win.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut args: Vec<String> = Vec::with_capacity(argv.len());
    for a in argv {
        args.push(a.into_string().map_err(|a| format!("argument {a:?} is not valid UTF-8"))?);
    }
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest.into_iter().map(OsString::from).collect());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let Some(pos) = rest.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(rest.into_iter().map(OsString::from).collect());
    };
    let flags = config_flags(&text, &rest[pos])?;
    let mut out: Vec<String> = rest[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&rest[pos + 1..]);
    Ok(out.into_iter().map(OsString::from).collect())
}

fn init_threads() -> Result<(), String> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| format!("{THREADS_ENV}={v} is not a thread count"))?;
        if n == 0 {
            return Err(format!("{THREADS_ENV} must be at least 1"));
        }
        // a pool set up earlier in the process stays in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn lists() {
        assert_eq!(parse_usize_list("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_usize_list("0..=2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_usize_list("3,5").unwrap(), vec![3, 5]);
        assert_eq!(parse_usize_list("7").unwrap(), vec![7]);
        assert!(parse_usize_list("4..1").is_err());
        assert!(parse_usize_list("x").is_err());
        assert_eq!(parse_f64_list("0.5, 0.25").unwrap(), vec![0.5, 0.25]);
        assert!(parse_f64_list("nan").is_err());
    }

    #[test]
    fn config_sections_and_override_order() {
        let text = r#"{"p": 4, "lambda-forces": {"d": 1, "no-dipole": true, "lambda": [0.2, 0.3]}, "bench": {"d": 3}}"#;
        assert_eq!(config_flags(text, "lambda-forces").unwrap(), ["--p", "4", "--d", "1", "--lambda", "0.2,0.3", "--no-dipole"]);
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"lambda-forces": {"p": 4, "d": 1}}"#).unwrap();
        let argv = ["mahi", "lambda-forces", "--config", cfg.to_str().unwrap(), "--system", "s.json", "--p", "9"];
        let expanded = expand_config(argv.iter().map(OsString::from).collect()).unwrap();
        let cli = Cli::try_parse_from(expanded).unwrap();
        let Command::LambdaForces(a) = cli.command else { panic!() };
        assert_eq!((a.solver.order, a.solver.depth), (9, 1));
    }

    #[test]
    fn broadcast_and_flat_lambda() {
        let s = generate_random_system(10, SiteSpec { count: 2, atoms: 3, forms: 4 }, Distribution::Typical, None, 1);
        assert_eq!(lambda_from_list(&s, &[0.3]).unwrap(), vec![vec![0.3, 0.3], vec![0.3, 0.3]]);
        assert_eq!(lambda_from_list(&s, &[0.1, 0.2, 0.3, 0.4]).unwrap(), vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
        assert!(lambda_from_list(&s, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn numerical_failures_exit_two() {
        let e: CliError = MahiError::Fmm(FmmError::LatticeNotConverged { residual: 1.0 }).into();
        assert_eq!(e.exit_code(), EXIT_NUMERICAL);
        let e: CliError = DynamicsError::NonFiniteForce { site: 0, branch: 0 }.into();
        assert_eq!(e.exit_code(), EXIT_NUMERICAL);
        let e: CliError = MahiError::Fmm(FmmError::OrderTooLarge(40)).into();
        assert_eq!(e.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mahi", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mahi", "energy", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["mahi", "energy", "--system", "/nonexistent/s.json"]), EXIT_USAGE);
        assert_eq!(run(["mahi", "--help"]), EXIT_OK);
    }
}
