//! `grflow` — run the experiments from a key = value config.
//!
//! Exit codes: 0 pass, 1 usage or config error, 2 numerical failure,
//! 3 checks failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use grflow::experiment::{self, Check, ExperimentConfig, ExperimentError, KEYS};
use grflow::flow::{Trajectory, Verdict};
use grflow::lattice::{self, TensorField};

#[derive(Parser)]
#[command(name = "grflow", version, about = "Generalized Ricci flow numerical laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value config file; flags override it
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// directory for reports, tables and snapshots
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// data-parallel width; results do not depend on it
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// eigen residual tolerance
    #[arg(long, value_name = "X")]
    tol: Option<f64>,
    /// override any config key (repeatable); see `grflow keys`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Lowest eigenpair of −4Δ + R − |H|²/12 for the initial data
    Eigen(Common),
    /// Run the configured flow and export its trajectory
    Flow(Common),
    /// Flow from perturbed flat data and classify the endpoint
    Stability(Common),
    /// Finite-difference check of the μ gradient on seeded data
    Gradcheck(Common),
    /// Fit the Łojasiewicz exponent
    Lojasiewicz(Common),
    /// Left-invariant reduction on a three-dimensional Lie algebra
    Homogeneous(Common),
    /// Print the header of a lattice snapshot
    SnapshotInfo {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// List config keys with defaults
    Keys,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be ≥ 1".into()));
        }
        cfg.threads = Some(t);
    }
    if let Some(tol) = common.tol {
        cfg.tol = tol;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Output {
    report: Value,
    passed: bool,
    files: Vec<(String, Vec<u8>)>,
}

fn write_outputs(dir: &Path, name: &str, out: &Output) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Usage(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut text = serde_json::to_string_pretty(&out.report).map_err(|e| Failure::Numerical(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(format!("{name}.json")), text).map_err(io)?;
    for (file, bytes) in &out.files {
        fs::write(dir.join(file), bytes).map_err(io)?;
    }
    Ok(())
}

fn snapshot_bytes(fields: &[(String, TensorField)]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    lattice::write_snapshot(&mut buf, fields).map_err(|e| Failure::Numerical(e.to_string()))?;
    Ok(buf)
}

fn trajectory_files(traj: &Trajectory) -> Result<Vec<(String, Vec<u8>)>, Failure> {
    let s = &traj.final_state;
    Ok(vec![
        ("trajectory.csv".into(), traj.to_csv().into_bytes()),
        ("final_state.snap".into(), snapshot_bytes(&[("g".into(), s.g.tensor().clone()), ("b".into(), s.b.clone())])?),
    ])
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn checked(name: &str, cfg: &ExperimentConfig, report: Value, checks: &[Check], files: Vec<(String, Vec<u8>)>) -> Output {
    let passed = experiment::all_passed(checks);
    let report = json!({ "command": name, "config": to_value(cfg), "passed": passed, "checks": to_value(&checks), "report": report });
    Output { report, passed, files }
}

fn run(command: &Command) -> Result<(String, Output, Option<PathBuf>), Failure> {
    let (name, common) = match command {
        Command::Eigen(c) => ("eigen", c),
        Command::Flow(c) => ("flow", c),
        Command::Stability(c) => ("stability", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Lojasiewicz(c) => ("lojasiewicz", c),
        Command::Homogeneous(c) => ("homogeneous", c),
        Command::SnapshotInfo { path, common } => {
            let mut f = fs::File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let header = lattice::read_snapshot_header(&mut f).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let report = json!({ "command": "snapshot-info", "path": path.display().to_string(), "header": to_value(&header) });
            return Ok(("snapshot-info".into(), Output { report, passed: true, files: vec![] }, common.out.clone()));
        }
        Command::Keys => {
            let keys: Vec<Value> = KEYS.iter().map(|(k, d, m)| json!({ "key": k, "default": d, "meaning": m })).collect();
            return Ok(("keys".into(), Output { report: Value::Array(keys), passed: true, files: vec![] }, None));
        }
    };
    let cfg = load_config(common)?;
    let out = match command {
        Command::Eigen(_) => {
            let rep = experiment::cmd_eigen(&cfg)?;
            let snap = snapshot_bytes(&[("w".into(), rep.w.clone().into_tensor()), ("f".into(), rep.f.clone().into_tensor())])?;
            checked(name, &cfg, to_value(&rep), &[], vec![("eigen.snap".into(), snap)])
        }
        Command::Flow(_) => {
            let traj = experiment::cmd_flow(&cfg)?;
            let report = json!({ "stop": to_value(&traj.stop), "steps": traj.steps, "samples": traj.samples.len(), "final_sample": to_value(&traj.last()) });
            checked(name, &cfg, report, &[], trajectory_files(&traj)?)
        }
        Command::Stability(_) => {
            let rep = experiment::cmd_stability(&cfg)?;
            let conv = matches!(rep.verdict, Verdict::Converged { .. });
            let check = Check { name: "verdict CONVERGED".into(), passed: conv, value: f64::from(u8::from(conv)), threshold: 1.0 };
            checked(name, &cfg, to_value(&rep), &[check], trajectory_files(&rep.trajectory)?)
        }
        Command::Gradcheck(_) => {
            let rep = experiment::cmd_gradcheck(&cfg)?;
            checked(name, &cfg, to_value(&rep.cases), &rep.checks, vec![])
        }
        Command::Lojasiewicz(_) => {
            let rep = experiment::cmd_lojasiewicz(&cfg)?;
            let files = match &rep.trajectory {
                Some(t) => vec![("trajectory.csv".into(), t.to_csv().into_bytes())],
                None => vec![],
            };
            checked(name, &cfg, json!({ "source": rep.source, "fit": to_value(&rep.fit) }), &rep.checks, files)
        }
        Command::Homogeneous(_) => {
            let rep = experiment::cmd_homogeneous(&cfg)?;
            let files = rep.ode.iter().map(|csv| ("ode.csv".to_string(), csv.clone().into_bytes())).collect();
            checked(name, &cfg, to_value(&rep), &rep.checks, files)
        }
        Command::SnapshotInfo { .. } | Command::Keys => unreachable!(),
    };
    Ok((name.into(), out, cfg.out.clone()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command).and_then(|(name, out, dir)| {
        if let Some(dir) = dir {
            write_outputs(&dir, &name, &out)?;
        }
        Ok(out)
    }) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out.report).unwrap_or_default());
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
