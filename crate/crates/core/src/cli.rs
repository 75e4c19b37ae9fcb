//! Command-line front end. Every subcommand writes its artifacts and a
//! `manifest.json` (input hashes, configuration, versions) into `--out`.
//!
//! Exit codes: 0 on success, 1 for bad input, 2 when a solver fails to
//! converge. A nonconverged estimate still writes its best iterate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{self, BoundActivity, EstimationData, EstimationOptions, Weights};
use crate::ipm::IterationLog;
use crate::network::{parse_network, GasNetwork};
use crate::nondim::{Scales, DEFAULT_LENGTH_SCALE};
use crate::profiles::BoundaryProfiles;
use crate::simulator::{inject_noise, Model, NoiseSpec, SimulationOptions};
use crate::timeseries::SeriesTable;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;

pub const FRICTION_FILE: &str = "friction_estimates.csv";
pub const FIT_FILE: &str = "fit_rmse.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATE_FILE: &str = "solution_state.csv";
pub const WITHDRAWAL_FILE: &str = "solution_withdrawals.csv";

#[derive(Debug, Parser)]
#[command(
    name = "gasnet",
    version,
    about = "Gas network transient simulation and state/friction estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the periodic transient for given boundary profiles.
    Simulate(SimulateArgs),
    /// Simulate, then sample noisy junction readings from the result.
    GenSynthetic(SyntheticArgs),
    /// Estimate state, withdrawals and pipe friction from readings.
    Estimate(EstimateArgs),
    /// Rebuild the report tables from saved estimation artifacts.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    /// Network JSON file.
    #[arg(long)]
    network: PathBuf,
    /// Maximum segment length after refinement (km).
    #[arg(long, default_value_t = 10.0)]
    segment_length: f64,
    /// Number of time points per period; inputs are resampled periodically.
    #[arg(long)]
    nt: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Boundary profile CSV.
    #[arg(long)]
    profiles: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SyntheticArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    profiles: PathBuf,
    /// Relative standard deviation of density readings.
    #[arg(long, default_value_t = 0.0)]
    noise_density: f64,
    /// Standard deviation of withdrawal readings relative to each
    /// junction's peak withdrawal.
    #[arg(long, default_value_t = 0.0)]
    noise_withdrawal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File listing metered junctions, one id per line.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Measurement CSV.
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Weights CSV with header `junction,withdrawal_weight,density_weight`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Scaled KKT tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 3000)]
    max_iter: usize,
    /// Initial friction as a multiple of the network's values.
    #[arg(long, default_value_t = 1.0)]
    friction_init: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Directory holding the artifacts of an `estimate` run.
    #[arg(long)]
    solution: PathBuf,
    /// Output directory; defaults to the solution directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Estimate(a) => estimate(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_NONCONVERGED
            }
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a C,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = Sha256::digest(&bytes);
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

fn write_manifest<C: Serialize>(
    out: &Path,
    command: &'static str,
    config: &C,
    inputs: &[&Path],
    mut outputs: Vec<String>,
) -> Result<()> {
    outputs.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    if let Some(nt) = args.nt {
        if nt < 4 {
            return Err(Error::InvalidConfig(format!(
                "--nt must be at least 4, got {nt}"
            )));
        }
    }
    let network = parse_network(&args.network)?;
    Model::new(network, args.segment_length * 1000.0, DEFAULT_LENGTH_SCALE)
}

fn read_profiles(
    network: &GasNetwork,
    path: &Path,
    steps: Option<usize>,
) -> Result<BoundaryProfiles> {
    let profiles = BoundaryProfiles::from_table(network, &SeriesTable::read(path)?)?;
    match steps {
        Some(s) if s != profiles.grid.steps => profiles.resample(s),
        _ => Ok(profiles),
    }
}

/// Reads a junction list: one id per line, `#` starts a comment.
pub fn read_mask(path: &Path, network: &GasNetwork) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let id = line.split('#').next().unwrap_or("").trim();
        if id.is_empty() {
            continue;
        }
        match network.junction_index(id) {
            Some(i) if !network.junctions()[i].is_slack() => {
                ids.insert(id.to_string());
            }
            Some(_) => {
                return Err(Error::SchemaViolation {
                    path: path.to_path_buf(),
                    message: format!("line {}: {id} is a supply junction", n + 1),
                })
            }
            None => {
                return Err(Error::SchemaViolation {
                    path: path.to_path_buf(),
                    message: format!("line {}: unknown junction {id}", n + 1),
                })
            }
        }
    }
    Ok(ids)
}

#[derive(Serialize)]
struct SimulationDiagnostics {
    converged: bool,
    iterations: usize,
    residual_inf: f64,
    conservation_error: f64,
    lumping_diagnostic: f64,
    nodes: usize,
    segments: usize,
    steps: usize,
    scales: Scales,
    /// Linepack (kg) at each time point.
    linepack: Vec<f64>,
}

fn simulate(args: &SimulateArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let profiles = read_profiles(&model.network, &args.profiles, args.model.nt)?;
    let sim = model.simulate(&profiles, None, &SimulationOptions::default())?;
    let out = &args.model.out;
    create_dir(out)?;
    model.state_table(&sim.state).write(out.join("state.csv"))?;
    let s = &model.scales;
    let diagnostics = SimulationDiagnostics {
        converged: true,
        iterations: sim.iterations,
        residual_inf: sim.residual_inf()?,
        conservation_error: sim.conservation_error(),
        lumping_diagnostic: sim.lumping_diagnostic(),
        nodes: model.refined.num_nodes(),
        segments: model.refined.num_segments(),
        steps: sim.state.grid.steps,
        scales: model.scales,
        linepack: sim
            .linepack()
            .iter()
            .map(|v| v * s.density * s.area * s.length)
            .collect(),
    };
    write_json(&out.join(DIAGNOSTICS_FILE), &diagnostics)?;
    write_manifest(
        out,
        "simulate",
        args,
        &[&args.model.network, &args.profiles],
        vec!["state.csv".into(), DIAGNOSTICS_FILE.into()],
    )?;
    Ok(EXIT_OK)
}

fn gen_synthetic(args: &SyntheticArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let profiles = read_profiles(&model.network, &args.profiles, args.model.nt)?;
    let noise = NoiseSpec {
        density: args.noise_density,
        withdrawal: args.noise_withdrawal,
        seed: args.seed,
    };
    noise.validate()?;
    let mask = args
        .mask
        .as_deref()
        .map(|p| read_mask(p, &model.network))
        .transpose()?;
    let sim = model.simulate(&profiles, None, &SimulationOptions::default())?;
    let readings = inject_noise(&model, &sim, &profiles, &noise)?;
    let mut data = EstimationData::new(&profiles, readings);
    if let Some(mask) = &mask {
        data = data.restrict(mask);
    }
    let out = &args.model.out;
    create_dir(out)?;
    data.to_table(&model.network)
        .write(out.join("measurements.csv"))?;
    model
        .state_table(&sim.state)
        .write(out.join("truth_state.csv"))?;
    let mut inputs: Vec<&Path> = vec![&args.model.network, &args.profiles];
    if let Some(m) = &args.mask {
        inputs.push(m);
    }
    write_manifest(
        out,
        "gen-synthetic",
        args,
        &inputs,
        vec!["measurements.csv".into(), "truth_state.csv".into()],
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EstimationDiagnostics {
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<SolveSummary>,
}

#[derive(Serialize)]
struct SolveSummary {
    scales: Scales,
    iterations: usize,
    objective: f64,
    kkt_error: f64,
    constraint_violation: f64,
    dual_infeasibility: f64,
    complementarity: f64,
    bound_activity: BoundActivity,
    /// Estimated λ per pipe id.
    friction: BTreeMap<String, f64>,
    trace: Vec<IterationLog>,
}

fn estimate(args: &EstimateArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let network = &model.network;
    let mut data = EstimationData::from_table(network, &SeriesTable::read(&args.measurements)?)?;
    if let Some(mask) = &args.mask {
        data = data.restrict(&read_mask(mask, network)?);
    }
    let weights = args
        .weights
        .as_deref()
        .map(Weights::read)
        .transpose()?
        .unwrap_or_default();
    let options = EstimationOptions {
        tol: args.tol,
        max_iterations: args.max_iter,
        friction_init_factor: args.friction_init,
        ..EstimationOptions::default()
    };
    options.validate()?;
    let out = &args.model.out;
    create_dir(out)?;
    let mut inputs: Vec<&Path> = vec![&args.model.network, &args.measurements];
    inputs.extend(args.mask.as_deref());
    inputs.extend(args.weights.as_deref());

    let result = estimator::estimate(&model, &data, &weights, args.model.nt, &options);
    let est = match result {
        Ok(est) => est,
        Err(e) if !e.is_input_error() => {
            let diagnostics = EstimationDiagnostics {
                converged: false,
                error: Some(e.to_string()),
                summary: None,
            };
            write_json(&out.join(DIAGNOSTICS_FILE), &diagnostics)?;
            write_manifest(
                out,
                "estimate",
                args,
                &inputs,
                vec![DIAGNOSTICS_FILE.into()],
            )?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let sol = &est.solution;
    est.state_table.write(out.join(STATE_FILE))?;
    est.withdrawal_table.write(out.join(WITHDRAWAL_FILE))?;
    let steps = est.state_table.grid.steps;
    let data = resample_data(&data, steps)?;
    write_report(
        network,
        &data,
        &est.state_table,
        &est.withdrawal_table,
        &sol.friction,
        out,
    )?;
    let diagnostics = EstimationDiagnostics {
        converged: sol.converged,
        error: None,
        summary: Some(SolveSummary {
            scales: model.scales,
            iterations: sol.iterations,
            objective: sol.objective,
            kkt_error: sol.kkt_error,
            constraint_violation: sol.constraint_violation,
            dual_infeasibility: sol.dual_infeasibility,
            complementarity: sol.complementarity,
            bound_activity: sol.bound_activity.clone(),
            friction: network
                .pipes()
                .iter()
                .zip(&sol.friction)
                .map(|(p, f)| (p.id.clone(), *f))
                .collect(),
            trace: sol.trace.clone(),
        }),
    };
    write_json(&out.join(DIAGNOSTICS_FILE), &diagnostics)?;
    write_manifest(
        out,
        "estimate",
        args,
        &inputs,
        vec![
            STATE_FILE.into(),
            WITHDRAWAL_FILE.into(),
            FRICTION_FILE.into(),
            FIT_FILE.into(),
            DIAGNOSTICS_FILE.into(),
        ],
    )?;
    if sol.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "estimate did not converge in {} iterations (KKT error {:.3e}); best iterate written",
            sol.iterations, sol.kkt_error
        );
        Ok(EXIT_NONCONVERGED)
    }
}

fn resample_data(data: &EstimationData, steps: usize) -> Result<EstimationData> {
    if data.measurements.grid.steps == steps {
        return Ok(data.clone());
    }
    let resample = |m: &BTreeMap<String, Vec<f64>>| -> BTreeMap<String, Vec<f64>> {
        m.iter()
            .map(|(k, v)| (k.clone(), crate::timeseries::resample_periodic(v, steps)))
            .collect()
    };
    let mut out = data.clone();
    out.measurements.grid = crate::dae::TimeGrid::new(data.measurements.grid.horizon, steps)?;
    out.measurements.density = resample(&data.measurements.density);
    out.measurements.withdrawal = resample(&data.measurements.withdrawal);
    Ok(out)
}

fn report(args: &ReportArgs) -> Result<i32> {
    let network = parse_network(&args.network)?;
    let mut data = EstimationData::from_table(&network, &SeriesTable::read(&args.measurements)?)?;
    if let Some(mask) = &args.mask {
        data = data.restrict(&read_mask(mask, &network)?);
    }
    let diagnostics_path = args.solution.join(DIAGNOSTICS_FILE);
    let text =
        std::fs::read_to_string(&diagnostics_path).map_err(|e| Error::io(&diagnostics_path, e))?;
    let diagnostics: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: diagnostics_path.clone(),
            message: e.to_string(),
        })?;
    let friction_map = diagnostics
        .pointer("/summary/friction")
        .and_then(|v| v.as_object())
        .ok_or_else(|| Error::SchemaViolation {
            path: diagnostics_path.clone(),
            message: "no friction estimates (the estimate failed before producing an iterate)"
                .into(),
        })?;
    let friction = network
        .pipes()
        .iter()
        .map(|p| {
            friction_map
                .get(&p.id)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::SchemaViolation {
                    path: diagnostics_path.clone(),
                    message: format!("no friction estimate for pipe {}", p.id),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    let state_path = args.solution.join(STATE_FILE);
    let withdrawal_path = args.solution.join(WITHDRAWAL_FILE);
    let state = SeriesTable::read(&state_path)?;
    let withdrawals = SeriesTable::read(&withdrawal_path)?;
    let data = resample_data(&data, state.grid.steps)?;
    let out = args.out.as_ref().unwrap_or(&args.solution);
    create_dir(out)?;
    write_report(&network, &data, &state, &withdrawals, &friction, out)?;
    let mut inputs: Vec<&Path> = vec![&args.network, &args.measurements];
    inputs.extend(args.mask.as_deref());
    inputs.extend([diagnostics_path.as_path(), &state_path, &withdrawal_path]);
    let manifest_dir = out.join("report");
    create_dir(&manifest_dir)?;
    write_manifest(
        &manifest_dir,
        "report",
        args,
        &inputs,
        vec![FRICTION_FILE.into(), FIT_FILE.into()],
    )?;
    Ok(EXIT_OK)
}

/// Writes the per-pipe friction table and the per-junction fit table.
fn write_report(
    network: &GasNetwork,
    data: &EstimationData,
    state: &SeriesTable,
    withdrawals: &SeriesTable,
    friction: &[f64],
    out: &Path,
) -> Result<()> {
    let mut text =
        String::from("pipe,length_km,friction_prior,friction_estimate,relative_deviation\n");
    for (p, f) in network.pipes().iter().zip(friction) {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.id,
            p.length / 1000.0,
            p.friction,
            f,
            (f - p.friction) / p.friction
        ));
    }
    write_text(&out.join(FRICTION_FILE), &text)?;

    let rmse = |a: &[f64], b: &[f64]| {
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64)
            .sqrt()
    };
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut text = String::from("junction,density_rmse,withdrawal_rmse\n");
    for j in network.nonslack_junctions() {
        let density = data
            .measurements
            .density
            .get(&j.id)
            .zip(state.column(&format!("rho:{}", j.id)))
            .map(|(m, e)| rmse(m, e));
        let withdrawal = data
            .measurements
            .withdrawal
            .get(&j.id)
            .zip(withdrawals.column(&j.id))
            .map(|(m, e)| rmse(m, e));
        text.push_str(&format!(
            "{},{},{}\n",
            j.id,
            cell(density),
            cell(withdrawal)
        ));
    }
    write_text(&out.join(FIT_FILE), &text)
}
