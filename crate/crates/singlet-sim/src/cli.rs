//! Command-line interface: evolve/steady/sweep pipelines, bundled figure
//! experiments, lattice abundance sampling, and result serialization.
//!
//! Exit codes: 0 success, 2 configuration or usage errors, 3 numerical
//! failures. Every command echoes the fully resolved SI configuration in
//! its JSON output so a run can be reproduced from its own record.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{
    load_config, parse_config, resolve, Backend, ConfigFile, NoiseSection, Resolved,
};
use crate::dynamics::{
    build_liouvillian, convergence_time, reduced_pair_state, simulate_effective, simulate_full,
    spectral_gap, steady_state, zero_mode_count, Trajectory, DEFAULT_ZERO_MODE_RTOL,
};
use crate::entanglement::{
    analytic_ln, analytic_steady_state, optimal_detuning_ratio, pair_populations, PairObservables,
};
use crate::error::SimError;
use crate::geometry::{dimer_abundance_with_rules, DimerRules, LatticeSpec, MIN_ABUNDANCE_TRIALS};
use crate::linalg::{cr, identity, trace_distance, CMatrix};
use crate::model::{
    alpha_coefficient, build_jump_operators, build_local_hamiltonian, nuclear_detunings,
    DetuningSchedule,
};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

const FIG2A_JSON: &str = include_str!("../configs/fig2a.json");
const FIG2A_RAMP_JSON: &str = include_str!("../configs/fig2a_ramp.json");
const FIG2B_JSON: &str = include_str!("../configs/fig2b.json");
const FIG2C_JSON: &str = include_str!("../configs/fig2c.json");
const FIG2D_JSON: &str = include_str!("../configs/fig2d.json");
const FIG2D_BATH_JSON: &str = include_str!("../configs/fig2d_bath.json");
const FIG2E_JSON: &str = include_str!("../configs/fig2e.json");
const FIG3_JSON: &str = include_str!("../configs/fig3.json");
const FIG3_BATH_JSON: &str = include_str!("../configs/fig3_bath.json");
const FIG3_INSET_JSON: &str = include_str!("../configs/fig3_inset.json");

pub const FIGURE_NAMES: [&str; 10] = [
    "fig2a",
    "fig2a-ramp",
    "fig2b",
    "fig2c",
    "fig2d",
    "fig2d-bath",
    "fig2e",
    "fig3",
    "fig3-bath",
    "fig3-inset",
];

/// Bundled configuration text for a figure pipeline, if the name is known.
pub fn figure_config(name: &str) -> Option<&'static str> {
    match name {
        "fig2a" => Some(FIG2A_JSON),
        "fig2a-ramp" => Some(FIG2A_RAMP_JSON),
        "fig2b" => Some(FIG2B_JSON),
        "fig2c" => Some(FIG2C_JSON),
        "fig2d" => Some(FIG2D_JSON),
        "fig2d-bath" => Some(FIG2D_BATH_JSON),
        "fig2e" => Some(FIG2E_JSON),
        "fig3" => Some(FIG3_JSON),
        "fig3-bath" => Some(FIG3_BATH_JSON),
        "fig3-inset" => Some(FIG3_INSET_JSON),
        _ => None,
    }
}

#[derive(Parser)]
#[command(
    name = "singlet-sim",
    version,
    about = "Dissipative preparation of nuclear-spin singlet pairs near an NV center"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the time evolution of a configured system.
    Evolve(EvolveArgs),
    /// Solve for the steady state of the effective model.
    Steady(SteadyArgs),
    /// Sweep one or two numeric config fields over a grid.
    Sweep(SweepArgs),
    /// Run a bundled experiment pipeline.
    Figure(FigureArgs),
    /// Estimate the nearest-neighbor dimer probability on the lattice.
    Abundance(AbundanceArgs),
}

fn parse_backend_arg(s: &str) -> Result<Backend, String> {
    s.parse::<Backend>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct EvolveArgs {
    /// Path to a JSON experiment configuration.
    config: PathBuf,
    /// Override the configured backend (full, effective, or both).
    #[arg(long, value_parser = parse_backend_arg)]
    backend: Option<Backend>,
    /// Output path stem; defaults to the config name plus `_out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SteadyArgs {
    /// Path to a JSON experiment configuration.
    config: PathBuf,
    /// Output path stem; defaults to the config name plus `_steady`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Path to the base JSON configuration.
    config: PathBuf,
    /// Dotted path of a numeric config field; repeat for a 2-D grid.
    #[arg(long = "param", required = true)]
    params: Vec<String>,
    /// Comma-separated values for the matching --param, in grid order.
    #[arg(long = "values", required = true)]
    values: Vec<String>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path stem; defaults to the config name plus `_sweep`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FigureArgs {
    /// Figure pipeline name (see `figure --help` for the list).
    name: String,
    /// Directory for the output files (created if missing).
    #[arg(long = "out-dir", default_value = "figures")]
    out_dir: PathBuf,
    /// Worker threads for sweep-based pipelines.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct AbundanceArgs {
    /// Monte Carlo trials.
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// RNG seed; runs with equal seeds produce byte-identical JSON.
    #[arg(long, default_value_t = 20_260_815)]
    seed: u64,
    /// Inner radius of the search shell, nm.
    #[arg(long, default_value_t = 1.0)]
    rmin: f64,
    /// Outer radius of the search shell, nm.
    #[arg(long, default_value_t = 1.5)]
    rmax: f64,
    /// Isotopic abundance of spin-active sites.
    #[arg(long, default_value_t = 0.0055)]
    abundance: f64,
    /// Locate bonds by their nearer atom instead of the midpoint.
    #[arg(long)]
    nearer_atom: bool,
    /// Alignment tolerance to the symmetry axis, degrees.
    #[arg(long, default_value_t = 1.0)]
    angle_tol_deg: f64,
    /// Count only bonds parallel to the axis, not antiparallel ones.
    #[arg(long)]
    directed: bool,
    /// Also write the JSON body to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses the process arguments, runs the selected command, and returns
/// the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .try_init();
    let result = match &cli.command {
        Command::Evolve(args) => cmd_evolve(args),
        Command::Steady(args) => cmd_steady(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Figure(args) => cmd_figure(args),
        Command::Abundance(args) => cmd_abundance(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &SimError) -> i32 {
    match err {
        SimError::ConfigRead { .. }
        | SimError::ConfigParse { .. }
        | SimError::InvalidField { .. } => 2,
        _ => 3,
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> SimError {
    SimError::InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// Output records and file helpers
// ---------------------------------------------------------------------------

/// Trajectory observables as parallel columns, times in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTable {
    pub t_ms: Vec<f64>,
    pub pop_uu: Vec<f64>,
    pub pop_dd: Vec<f64>,
    pub pop_s: Vec<f64>,
    pub pop_t: Vec<f64>,
    pub ln: Vec<f64>,
    pub fidelity_s: Vec<f64>,
}

impl TrajectoryTable {
    pub fn from_trajectory(trajectory: &Trajectory) -> Self {
        let pick = |f: fn(&PairObservables) -> f64| -> Vec<f64> {
            trajectory.observables.iter().map(f).collect()
        };
        TrajectoryTable {
            t_ms: trajectory.times.iter().map(|t| t * 1e3).collect(),
            pop_uu: pick(|o| o.pop_uu),
            pop_dd: pick(|o| o.pop_dd),
            pop_s: pick(|o| o.pop_s),
            pop_t: pick(|o| o.pop_t),
            ln: pick(|o| o.ln_value),
            fidelity_s: pick(|o| o.singlet_fidelity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_ln: f64,
    pub final_pop_s: f64,
    pub final_fidelity_s: f64,
    pub t_cv_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub artifact_version: String,
    pub backend: String,
    pub seed: u64,
    pub config: ConfigFile,
    pub summary: RunSummary,
    pub trajectory: TrajectoryTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub artifact_version: String,
    pub backend: String,
    pub seed: u64,
    pub config: ConfigFile,
    pub max_trace_distance: f64,
    pub compared_samples: usize,
    pub summary_full: RunSummary,
    pub summary_effective: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub values: Vec<f64>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub artifact_version: String,
    pub params: Vec<String>,
    pub grids: Vec<Vec<f64>>,
    pub base_config: ConfigFile,
    pub resolved_base: ConfigFile,
    pub rows: Vec<SweepRow>,
}

fn summarize(trajectory: &Trajectory, threshold: f64) -> RunSummary {
    let last = trajectory
        .last_observables()
        .copied()
        .unwrap_or(PairObservables {
            pop_uu: 0.0,
            pop_dd: 0.0,
            pop_s: 0.0,
            pop_t: 0.0,
            ln_value: 0.0,
            singlet_fidelity: 0.0,
        });
    RunSummary {
        final_ln: last.ln_value,
        final_pop_s: last.pop_s,
        final_fidelity_s: last.singlet_fidelity,
        t_cv_ms: convergence_time(trajectory, threshold).map(|t| t * 1e3),
    }
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

fn write_text(path: &Path, text: &str) -> Result<(), SimError> {
    let wrap = |source: std::io::Error| SimError::OutputWrite {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(wrap)?;
        }
    }
    fs::write(path, text).map_err(wrap)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, record: &T) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(record).map_err(|e| SimError::Numerical {
        context: "serialize record".into(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn trajectory_csv(table: &TrajectoryTable) -> String {
    let mut text = String::from("t_ms, pop_uu, pop_dd, pop_S, pop_T, LN, fidelity_S\n");
    for i in 0..table.t_ms.len() {
        text.push_str(&format!(
            "{}, {}, {}, {}, {}, {}, {}\n",
            sig9(table.t_ms[i]),
            sig9(table.pop_uu[i]),
            sig9(table.pop_dd[i]),
            sig9(table.pop_s[i]),
            sig9(table.pop_t[i]),
            sig9(table.ln[i]),
            sig9(table.fidelity_s[i]),
        ));
    }
    text
}

fn stem_file(stem: &Path, tail: &str) -> PathBuf {
    PathBuf::from(format!("{}{}", stem.display(), tail))
}

fn default_stem(out: &Option<PathBuf>, config: &Path, suffix: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        let name = config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        PathBuf::from(format!("{name}{suffix}"))
    })
}

// ---------------------------------------------------------------------------
// evolve
// ---------------------------------------------------------------------------

fn maximally_mixed(dim: usize) -> CMatrix {
    identity(dim) * cr(1.0 / dim as f64)
}

fn run_trajectory(resolved: &Resolved, backend: Backend) -> Result<Trajectory, SimError> {
    let rho0 = maximally_mixed(resolved.system.nuclear_dim());
    match backend {
        Backend::Full => {
            let noisy = resolved.noise.gamma.iter().any(|&g| g > 0.0)
                || resolved.noise.gamma_dephase.iter().any(|&g| g > 0.0);
            if noisy {
                log::warn!("the full backend carries no nuclear noise channels; configured rates are ignored");
            }
            simulate_full(
                &resolved.system,
                &resolved.drive,
                &resolved.protocol,
                &rho0,
                resolved.run.t_total,
                resolved.run.sample_every,
            )
        }
        Backend::Effective => simulate_effective(
            &resolved.system,
            &resolved.drive,
            resolved.protocol.gamma_n_reset(),
            &resolved.noise,
            &rho0,
            resolved.run.t_total,
            resolved.run.dt_max,
        ),
        Backend::Both => Err(SimError::InvalidInput {
            context: "run_trajectory".into(),
            reason: "both is not a single backend".into(),
        }),
    }
}

fn single_record(resolved: &Resolved, backend: Backend) -> Result<(ResultRecord, Trajectory), SimError> {
    let trajectory = run_trajectory(resolved, backend)?;
    let record = ResultRecord {
        artifact_version: ARTIFACT_VERSION.into(),
        backend: backend.to_string(),
        seed: resolved.run.seed,
        config: resolved.echo(),
        summary: summarize(&trajectory, resolved.run.convergence_threshold),
        trajectory: TrajectoryTable::from_trajectory(&trajectory),
    };
    Ok((record, trajectory))
}

/// Largest trace distance between time-matched samples of two
/// trajectories; sample times within 1e-9 of the span are considered
/// matched.
fn max_matched_trace_distance(
    a: &Trajectory,
    b: &Trajectory,
    t_total: f64,
) -> Result<(f64, usize), SimError> {
    let tol = 1e-9 * t_total.max(1e-12);
    let mut worst = 0.0f64;
    let mut matched = 0usize;
    let mut j = 0usize;
    for (i, &ta) in a.times.iter().enumerate() {
        while j < b.times.len() && b.times[j] < ta - tol {
            j += 1;
        }
        if j < b.times.len() && (b.times[j] - ta).abs() <= tol {
            worst = worst.max(trace_distance(&a.pair_states[i], &b.pair_states[j])?);
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(SimError::Numerical {
            context: "backend comparison".into(),
            reason: "no time-matched samples between the two trajectories".into(),
        });
    }
    Ok((worst, matched))
}

fn run_evolve(resolved: &Resolved, backend: Backend, stem: &Path) -> Result<(), SimError> {
    match backend {
        Backend::Both => {
            let (full_record, full_traj) = single_record(resolved, Backend::Full)?;
            let (eff_record, eff_traj) = single_record(resolved, Backend::Effective)?;
            write_text(
                &stem_file(stem, "_full.csv"),
                &trajectory_csv(&full_record.trajectory),
            )?;
            write_json(&stem_file(stem, "_full.json"), &full_record)?;
            write_text(
                &stem_file(stem, "_effective.csv"),
                &trajectory_csv(&eff_record.trajectory),
            )?;
            write_json(&stem_file(stem, "_effective.json"), &eff_record)?;
            let (worst, matched) =
                max_matched_trace_distance(&full_traj, &eff_traj, resolved.run.t_total)?;
            let compare = CompareRecord {
                artifact_version: ARTIFACT_VERSION.into(),
                backend: Backend::Both.to_string(),
                seed: resolved.run.seed,
                config: resolved.echo(),
                max_trace_distance: worst,
                compared_samples: matched,
                summary_full: full_record.summary.clone(),
                summary_effective: eff_record.summary.clone(),
            };
            write_json(&stem_file(stem, "_compare.json"), &compare)?;
            println!(
                "backends: max trace distance {} over {} samples, final LN full {} effective {}",
                sig9(worst),
                matched,
                sig9(compare.summary_full.final_ln),
                sig9(compare.summary_effective.final_ln),
            );
        }
        single => {
            let (record, _) = single_record(resolved, single)?;
            write_text(&stem_file(stem, ".csv"), &trajectory_csv(&record.trajectory))?;
            write_json(&stem_file(stem, ".json"), &record)?;
            println!(
                "final pop_S {} LN {}",
                sig9(record.summary.final_pop_s),
                sig9(record.summary.final_ln),
            );
        }
    }
    Ok(())
}

fn cmd_evolve(args: &EvolveArgs) -> Result<(), SimError> {
    let resolved = load_config(&args.config)?;
    let backend = args.backend.unwrap_or(resolved.run.backend);
    let stem = default_stem(&args.out, &args.config, "_out");
    run_evolve(&resolved, backend, &stem)
}

// ---------------------------------------------------------------------------
// steady
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationsOut {
    pub pop_uu: f64,
    pub pop_dd: f64,
    pub pop_s: f64,
    pub pop_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadySolution {
    /// Pair-reduced density matrix as rows of [re, im] entries.
    pub rho_pair: Vec<Vec<[f64; 2]>>,
    pub populations: PopulationsOut,
    pub ln: f64,
    pub fidelity_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticComparison {
    pub delta1_rad_s: f64,
    pub omega_rf_rabi_rad_s: f64,
    pub fidelity_with_analytic: f64,
    pub ln_analytic: f64,
    pub ln_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyRecord {
    pub artifact_version: String,
    pub config: ConfigFile,
    pub zero_mode_count: usize,
    pub spectral_gap_per_s: f64,
    pub steady: Option<SteadySolution>,
    pub analytic: Option<AnalyticComparison>,
}

struct SteadyAnalysis {
    zero_mode_count: usize,
    spectral_gap: f64,
    steady: Option<(CMatrix, PairObservables)>,
}

fn steady_analysis(resolved: &Resolved) -> Result<SteadyAnalysis, SimError> {
    let h = build_local_hamiltonian(&resolved.system, &resolved.drive, 0.0)?;
    let jumps = build_jump_operators(
        &resolved.system,
        &resolved.drive,
        resolved.protocol.gamma_n_reset(),
        &resolved.noise,
    )?;
    let liouvillian = build_liouvillian(&h, &jumps)?;
    let count = zero_mode_count(&liouvillian, DEFAULT_ZERO_MODE_RTOL)?;
    let gap = spectral_gap(&liouvillian)?;
    let steady = if count == 1 {
        let rho = steady_state(&liouvillian)?;
        let rho_pair = if resolved.system.n_nuclei() == 2 {
            rho
        } else {
            reduced_pair_state(&rho, &resolved.system)?
        };
        let observables = pair_populations(&rho_pair)?;
        Some((rho_pair, observables))
    } else {
        None
    };
    Ok(SteadyAnalysis {
        zero_mode_count: count,
        spectral_gap: gap,
        steady,
    })
}

fn matrix_entries(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect()
}

/// The closed-form steady state applies to a noise-free constant-drive
/// pair with opposite detunings and equal perpendicular couplings.
fn analytic_comparison(
    resolved: &Resolved,
    observables: &PairObservables,
    rho_pair: &CMatrix,
) -> Result<Option<AnalyticComparison>, SimError> {
    if resolved.system.n_nuclei() != 2
        || !resolved.system.dipolar_entries().is_empty()
        || resolved.drive.schedule != DetuningSchedule::Constant
        || resolved.noise.gamma.iter().any(|&g| g != 0.0)
        || resolved.noise.gamma_dephase.iter().any(|&g| g != 0.0)
        || resolved.drive.omega_rf_rabi <= 0.0
    {
        return Ok(None);
    }
    let (p0, p1) = resolved.system.pair;
    let deltas = nuclear_detunings(&resolved.system, &resolved.drive, 0.0);
    let scale = deltas[p0].abs().max(deltas[p1].abs());
    if scale == 0.0 || (deltas[p0] + deltas[p1]).abs() > 1e-9 * scale {
        return Ok(None);
    }
    let a0 = resolved.system.nuclei[p0].a_perp;
    let a1 = resolved.system.nuclei[p1].a_perp;
    if (a0 - a1).abs() > 1e-9 * a0.abs().max(a1.abs()) {
        return Ok(None);
    }
    let psi = analytic_steady_state(deltas[p0], resolved.drive.omega_rf_rabi)?;
    let fidelity = (psi.adjoint() * rho_pair * &psi)[(0, 0)].re;
    let ln_analytic = analytic_ln(deltas[p0], resolved.drive.omega_rf_rabi)?;
    Ok(Some(AnalyticComparison {
        delta1_rad_s: deltas[p0],
        omega_rf_rabi_rad_s: resolved.drive.omega_rf_rabi,
        fidelity_with_analytic: fidelity,
        ln_analytic,
        ln_error: (observables.ln_value - ln_analytic).abs(),
    }))
}

fn steady_record(resolved: &Resolved) -> Result<SteadyRecord, SimError> {
    let analysis = steady_analysis(resolved)?;
    let (steady, analytic) = match &analysis.steady {
        Some((rho_pair, observables)) => (
            Some(SteadySolution {
                rho_pair: matrix_entries(rho_pair),
                populations: PopulationsOut {
                    pop_uu: observables.pop_uu,
                    pop_dd: observables.pop_dd,
                    pop_s: observables.pop_s,
                    pop_t: observables.pop_t,
                },
                ln: observables.ln_value,
                fidelity_s: observables.singlet_fidelity,
            }),
            analytic_comparison(resolved, observables, rho_pair)?,
        ),
        None => (None, None),
    };
    Ok(SteadyRecord {
        artifact_version: ARTIFACT_VERSION.into(),
        config: resolved.echo(),
        zero_mode_count: analysis.zero_mode_count,
        spectral_gap_per_s: analysis.spectral_gap,
        steady,
        analytic,
    })
}

fn cmd_steady(args: &SteadyArgs) -> Result<(), SimError> {
    let resolved = load_config(&args.config)?;
    let record = steady_record(&resolved)?;
    let stem = default_stem(&args.out, &args.config, "_steady");
    write_json(&stem_file(&stem, ".json"), &record)?;
    match &record.steady {
        Some(solution) => println!(
            "zero modes {}, spectral gap {} 1/s, steady LN {}",
            record.zero_mode_count,
            sig9(record.spectral_gap_per_s),
            sig9(solution.ln),
        ),
        None => println!(
            "zero modes {}, spectral gap {} 1/s, steady state not unique",
            record.zero_mode_count,
            sig9(record.spectral_gap_per_s),
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Sets a numeric leaf in a JSON tree by dotted path. Integer segments
/// index arrays; missing intermediate objects are created so unknown
/// names surface as schema errors at re-parse time.
fn patch_value(root: &mut Value, path: &str, x: f64) -> Result<(), SimError> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(invalid(path, "empty segment in parameter path"));
    }
    let (leaf, parents) = segments.split_last().expect("split on nonempty");
    let mut cursor = root;
    for seg in parents {
        cursor = if let Ok(index) = seg.parse::<usize>() {
            let array = cursor
                .as_array_mut()
                .ok_or_else(|| invalid(path, format!("segment {seg} indexes a non-array")))?;
            let len = array.len();
            array
                .get_mut(index)
                .ok_or_else(|| invalid(path, format!("index {index} out of bounds (length {len})")))?
        } else {
            let object = cursor
                .as_object_mut()
                .ok_or_else(|| invalid(path, format!("segment {seg} is not an object")))?;
            object.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
        };
    }
    if let Ok(index) = leaf.parse::<usize>() {
        let array = cursor
            .as_array_mut()
            .ok_or_else(|| invalid(path, format!("segment {leaf} indexes a non-array")))?;
        let len = array.len();
        let slot = array
            .get_mut(index)
            .ok_or_else(|| invalid(path, format!("index {index} out of bounds (length {len})")))?;
        *slot = serde_json::json!(x);
    } else {
        let object = cursor
            .as_object_mut()
            .ok_or_else(|| invalid(path, format!("parent of {leaf} is not an object")))?;
        object.insert(leaf.to_string(), serde_json::json!(x));
    }
    Ok(())
}

/// Grid points in row-major order: the first parameter is the outer loop.
fn grid_points(grids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match grids {
        [a] => a.iter().map(|&x| vec![x]).collect(),
        [a, b] => a
            .iter()
            .flat_map(|&x| b.iter().map(move |&y| vec![x, y]))
            .collect(),
        _ => Vec::new(),
    }
}

fn resolve_patched(root: &Value, params: &[String], point: &[f64]) -> Result<Resolved, SimError> {
    let mut patched = root.clone();
    for (param, &x) in params.iter().zip(point.iter()) {
        patch_value(&mut patched, param, x)?;
    }
    let text = patched.to_string();
    let file = parse_config(&text, "sweep point")?;
    resolve(&file)
}

fn run_sweep_point(root: &Value, params: &[String], point: &[f64]) -> Result<SweepRow, SimError> {
    let resolved = resolve_patched(root, params, point)?;
    if resolved.run.backend == Backend::Both {
        return Err(invalid(
            "run.backend",
            "sweep points run a single backend; set full or effective",
        ));
    }
    let trajectory = run_trajectory(&resolved, resolved.run.backend)?;
    Ok(SweepRow {
        values: point.to_vec(),
        summary: summarize(&trajectory, resolved.run.convergence_threshold),
    })
}

fn sweep_csv(params: &[String], rows: &[SweepRow]) -> String {
    let mut text = String::new();
    for param in params {
        text.push_str(param);
        text.push_str(", ");
    }
    text.push_str("final_LN, final_pop_S, fidelity_S, T_Cv_ms\n");
    for row in rows {
        for v in &row.values {
            text.push_str(&sig9(*v));
            text.push_str(", ");
        }
        text.push_str(&format!(
            "{}, {}, {}, {}\n",
            sig9(row.summary.final_ln),
            sig9(row.summary.final_pop_s),
            sig9(row.summary.final_fidelity_s),
            row.summary.t_cv_ms.map(sig9).unwrap_or_default(),
        ));
    }
    text
}

fn run_sweep(
    config_text: &str,
    config_name: &str,
    params: &[String],
    grids: &[Vec<f64>],
    jobs: Option<usize>,
    stem: &Path,
) -> Result<(), SimError> {
    if params.is_empty() || params.len() > 2 {
        return Err(invalid("--param", "give one or two parameter paths"));
    }
    if params.len() != grids.len() {
        return Err(invalid(
            "--values",
            "give exactly one --values list per --param",
        ));
    }
    if grids.iter().any(|g| g.is_empty()) {
        return Err(invalid("--values", "value lists cannot be empty"));
    }
    let file = parse_config(config_text, config_name)?;
    let resolved_base = resolve(&file)?;
    let root: Value = serde_json::from_str(config_text).map_err(|source| SimError::ConfigParse {
        path: config_name.into(),
        source,
    })?;
    let points = grid_points(grids);
    let rows = run_parallel(jobs, &points, |point| run_sweep_point(&root, params, point))?;
    write_text(&stem_file(stem, ".csv"), &sweep_csv(params, &rows))?;
    let record = SweepRecord {
        artifact_version: ARTIFACT_VERSION.into(),
        params: params.to_vec(),
        grids: grids.to_vec(),
        base_config: file,
        resolved_base: resolved_base.echo(),
        rows,
    };
    write_json(&stem_file(stem, ".json"), &record)?;
    Ok(())
}

/// Runs `work` over `items` on a bounded pool, preserving input order.
fn run_parallel<T, R, F>(jobs: Option<usize>, items: &[T], work: F) -> Result<Vec<R>, SimError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, SimError> + Sync,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&work).collect::<Result<Vec<R>, _>>();
    match jobs {
        Some(n) => {
            if n == 0 {
                return Err(invalid("--jobs", "must be at least 1"));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| SimError::Numerical {
                    context: "worker pool".into(),
                    reason: e.to_string(),
                })?;
            pool.install(run)
        }
        None => run(),
    }
}

fn parse_values_list(text: &str) -> Result<Vec<f64>, SimError> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .map_err(|_| invalid("--values", format!("{s:?} is not a number")))
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), SimError> {
    let text = fs::read_to_string(&args.config).map_err(|source| SimError::ConfigRead {
        path: args.config.display().to_string(),
        source,
    })?;
    let grids = args
        .values
        .iter()
        .map(|v| parse_values_list(v))
        .collect::<Result<Vec<_>, _>>()?;
    let stem = default_stem(&args.out, &args.config, "_sweep");
    run_sweep(
        &text,
        &args.config.display().to_string(),
        &args.params,
        &grids,
        args.jobs,
        &stem,
    )
}

// ---------------------------------------------------------------------------
// figure
// ---------------------------------------------------------------------------

const FIG2B_SUM_GRID: [f64; 9] = [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0];
const FIG2B_APERP_GRID: [f64; 9] = [14.0, 14.5, 15.0, 15.5, 16.0, 16.5, 17.0, 17.5, 18.0];
const FIG2C_RATIO_GRID: [f64; 9] = [0.25, 0.5, 1.0, 1.41, 2.0, 2.83, 4.0, 5.66, 8.0];
const FIG2D_DELTA_GRID: [f64; 6] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0];
const FIG2D_RATIO: f64 = 2.0;
const FIG2E_T2_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];
const FIG3_INSET_OMEGA_GRID: [f64; 5] = [10.0, 15.0, 20.0, 25.0, 30.0];
const FIG3_INSET_SUM_GRID: [f64; 5] = [0.81, 1.31, 1.81, 2.31, 2.81];

fn resolve_bundled(name: &str) -> Result<Resolved, SimError> {
    let text = figure_config(name).expect("bundled figure name");
    resolve(&parse_config(text, name)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2dRow {
    pub delta_khz: f64,
    pub t_re_us: f64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2dRecord {
    pub artifact_version: String,
    pub base_config: ConfigFile,
    pub rows: Vec<Fig2dRow>,
}

/// Detuning scan at a fixed jump-to-drive ratio: each point re-solves the
/// drive at the patched detuning, then sets the reset window by the
/// wide-line rule t_re = 4 (|alpha|^2/Omega) Omega / a_perp^2, which
/// realizes the target ratio when Gamma_N dominates the detuning.
fn run_fig2d(name: &str, jobs: Option<usize>, stem: &Path) -> Result<(), SimError> {
    let text = figure_config(name).expect("bundled figure name");
    let file = parse_config(text, name)?;
    let root: Value = serde_json::from_str(text).map_err(|source| SimError::ConfigParse {
        path: name.into(),
        source,
    })?;
    let deltas: Vec<f64> = FIG2D_DELTA_GRID.to_vec();
    let rows = run_parallel(jobs, &deltas, |&delta_khz| {
        let mut patched = root.clone();
        patch_value(&mut patched, "drive.delta_khz", delta_khz)?;
        let probe = resolve(&parse_config(&patched.to_string(), name)?)?;
        let (p0, _) = probe.system.pair;
        let a_perp = probe.system.nuclei[p0].a_perp;
        let t_re = 4.0 * FIG2D_RATIO * probe.drive.omega_rf_rabi / (a_perp * a_perp);
        patch_value(&mut patched, "protocol.t_re_s", t_re)?;
        patch_value(&mut patched, "protocol.t_re_us", f64::NAN)?;
        if let Some(protocol) = patched.get_mut("protocol").and_then(Value::as_object_mut) {
            protocol.remove("t_re_us");
        }
        let resolved = resolve(&parse_config(&patched.to_string(), name)?)?;
        let trajectory = run_trajectory(&resolved, Backend::Full)?;
        Ok(Fig2dRow {
            delta_khz,
            t_re_us: t_re * 1e6,
            summary: summarize(&trajectory, resolved.run.convergence_threshold),
        })
    })?;
    let mut csv = String::from("delta_khz, t_re_us, final_LN, final_pop_S, fidelity_S, T_Cv_ms\n");
    for row in &rows {
        csv.push_str(&format!(
            "{}, {}, {}, {}, {}, {}\n",
            sig9(row.delta_khz),
            sig9(row.t_re_us),
            sig9(row.summary.final_ln),
            sig9(row.summary.final_pop_s),
            sig9(row.summary.final_fidelity_s),
            row.summary.t_cv_ms.map(sig9).unwrap_or_default(),
        ));
    }
    write_text(&stem_file(stem, ".csv"), &csv)?;
    let record = Fig2dRecord {
        artifact_version: ARTIFACT_VERSION.into(),
        base_config: file,
        rows,
    };
    write_json(&stem_file(stem, ".json"), &record)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2eRow {
    pub t2_s: f64,
    pub gamma_per_s: f64,
    pub k: f64,
    pub delta_over_omega: f64,
    pub ln: f64,
    pub ln_at_zero_delta: f64,
    pub fidelity_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2eRecord {
    pub artifact_version: String,
    pub base_config: ConfigFile,
    pub resolved_base: ConfigFile,
    pub rows: Vec<Fig2eRow>,
}

/// Steady-state scan over nuclear coherence times: each point applies
/// uniform relaxation at 1/T2, sets the detuning to the noise-optimal
/// ratio sqrt(k/2) for k = sqrt(Gamma_j)/|alpha_j|, and solves the
/// effective model. The reset window and Rabi drive stay at the bundled
/// working point, where k is evaluated.
fn run_fig2e(stem: &Path) -> Result<(), SimError> {
    let file = parse_config(FIG2E_JSON, "fig2e")?;
    let base = resolve(&file)?;
    let (p0, _) = base.system.pair;
    let deltas = nuclear_detunings(&base.system, &base.drive, 0.0);
    let alpha = alpha_coefficient(
        base.system.nuclei[p0].a_perp,
        deltas[p0],
        base.protocol.gamma_n_reset(),
    )?;
    let omega = base.drive.omega_rf_rabi;
    let steady_at = |delta_rad: f64, t2: f64| -> Result<PairObservables, SimError> {
        let mut point = file.clone();
        point.protocol.alpha_sq_over_omega = None;
        point.protocol.t_re_us = None;
        point.protocol.t_re_s = Some(base.protocol.t_re);
        point.drive.delta_khz = None;
        point.drive.delta_rad_s = Some(delta_rad);
        point.noise = Some(NoiseSection {
            gamma_per_s: None,
            t2_s: Some(t2),
            gamma_dephase_per_s: None,
        });
        let analysis = steady_analysis(&resolve(&point)?)?;
        let (_, observables) = analysis.steady.ok_or_else(|| SimError::Numerical {
            context: "fig2e".into(),
            reason: format!("degenerate steady state ({} zero modes)", analysis.zero_mode_count),
        })?;
        Ok(observables)
    };
    let mut rows = Vec::with_capacity(FIG2E_T2_GRID.len());
    for &t2 in &FIG2E_T2_GRID {
        let gamma_j = 1.0 / t2;
        let k = gamma_j.sqrt() / alpha.norm();
        let ratio = optimal_detuning_ratio(k)?;
        let optimal = steady_at(ratio * omega, t2)?;
        let at_zero = steady_at(0.0, t2)?;
        rows.push(Fig2eRow {
            t2_s: t2,
            gamma_per_s: gamma_j,
            k,
            delta_over_omega: ratio,
            ln: optimal.ln_value,
            ln_at_zero_delta: at_zero.ln_value,
            fidelity_s: optimal.singlet_fidelity,
        });
    }
    let mut csv =
        String::from("t2_s, gamma_per_s, k, delta_over_omega, LN, LN_at_zero_delta, fidelity_S\n");
    for row in &rows {
        csv.push_str(&format!(
            "{}, {}, {}, {}, {}, {}, {}\n",
            sig9(row.t2_s),
            sig9(row.gamma_per_s),
            sig9(row.k),
            sig9(row.delta_over_omega),
            sig9(row.ln),
            sig9(row.ln_at_zero_delta),
            sig9(row.fidelity_s),
        ));
    }
    write_text(&stem_file(stem, ".csv"), &csv)?;
    let record = Fig2eRecord {
        artifact_version: ARTIFACT_VERSION.into(),
        base_config: file,
        resolved_base: base.echo(),
        rows,
    };
    write_json(&stem_file(stem, ".json"), &record)?;
    Ok(())
}

fn cmd_figure(args: &FigureArgs) -> Result<(), SimError> {
    let name = args.name.as_str();
    if figure_config(name).is_none() {
        return Err(invalid(
            "figure",
            format!("unknown figure {name:?}; valid names: {}", FIGURE_NAMES.join(", ")),
        ));
    }
    let stem = args.out_dir.join(name);
    let sweep = |params: &[&str], grids: &[&[f64]]| -> Result<(), SimError> {
        run_sweep(
            figure_config(name).expect("bundled figure name"),
            name,
            &params.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            &grids.iter().map(|g| g.to_vec()).collect::<Vec<_>>(),
            args.jobs,
            &stem,
        )
    };
    match name {
        "fig2a" => run_evolve(&resolve_bundled(name)?, Backend::Both, &stem),
        "fig2a-ramp" | "fig3" | "fig3-bath" => {
            run_evolve(&resolve_bundled(name)?, Backend::Full, &stem)
        }
        "fig2b" => sweep(
            &["drive.delta_sum_khz", "system.nuclei.1.a_perp_khz"],
            &[&FIG2B_SUM_GRID, &FIG2B_APERP_GRID],
        ),
        "fig2c" => sweep(&["protocol.alpha_sq_over_omega"], &[&FIG2C_RATIO_GRID]),
        "fig2d" | "fig2d-bath" => run_fig2d(name, args.jobs, &stem),
        "fig2e" => run_fig2e(&stem),
        "fig3-inset" => sweep(
            &["drive.omega_rf_rabi_khz", "drive.delta_sum_khz"],
            &[&FIG3_INSET_OMEGA_GRID, &FIG3_INSET_SUM_GRID],
        ),
        _ => unreachable!("figure_config covers the name set"),
    }
}

// ---------------------------------------------------------------------------
// abundance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbundanceRules {
    pub distance_rule: String,
    pub angle_tolerance_deg: f64,
    pub count_antiparallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbundanceRecord {
    pub artifact_version: String,
    pub lattice: LatticeSpec,
    pub rules: AbundanceRules,
    pub window_nm: [f64; 2],
    pub estimate: crate::geometry::AbundanceEstimate,
}

fn cmd_abundance(args: &AbundanceArgs) -> Result<(), SimError> {
    if args.trials < MIN_ABUNDANCE_TRIALS {
        return Err(invalid(
            "--trials",
            format!("{} is below the minimum {MIN_ABUNDANCE_TRIALS}", args.trials),
        ));
    }
    if !(args.rmin > 0.0 && args.rmax > args.rmin) {
        return Err(invalid(
            "--rmin",
            format!("need 0 < rmin < rmax, got {} and {}", args.rmin, args.rmax),
        ));
    }
    let mut spec = LatticeSpec::default();
    spec.abundance = args.abundance;
    spec.validate().map_err(|e| invalid("--abundance", e.to_string()))?;
    let rules = DimerRules {
        midpoint_distance: !args.nearer_atom,
        angle_tolerance: args.angle_tol_deg.to_radians(),
        count_antiparallel: !args.directed,
    };
    let estimate = dimer_abundance_with_rules(
        &spec,
        args.rmin * 1e-9,
        args.rmax * 1e-9,
        args.trials,
        args.seed,
        &rules,
    )?;
    let record = AbundanceRecord {
        artifact_version: ARTIFACT_VERSION.into(),
        lattice: spec,
        rules: AbundanceRules {
            distance_rule: if args.nearer_atom { "nearer_atom" } else { "midpoint" }.into(),
            angle_tolerance_deg: args.angle_tol_deg,
            count_antiparallel: !args.directed,
        },
        window_nm: [args.rmin, args.rmax],
        estimate,
    };
    let mut body = serde_json::to_string_pretty(&record).map_err(|e| SimError::Numerical {
        context: "serialize record".into(),
        reason: e.to_string(),
    })?;
    body.push('\n');
    print!("{body}");
    if let Some(path) = &args.out {
        write_text(path, &body)?;
    }
    Ok(())
}
