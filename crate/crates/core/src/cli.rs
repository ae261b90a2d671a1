//! Command-line front end.
//!
//! Every verb except `report` reads a manifest, applies `--seed` and
//! `--set key=value` overrides, and writes its artifacts into `--out`.
//! Failures print one `error kind=<kind> code=<n> message=<text>` line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::{
    build_report, evaluate_decomposition, evaluate_nbody, evaluation_grid, force_curve_csv,
    history_csv, lambda_dir_name, lambda_sweep, parse_override, parse_pairs, push_decomposition_metrics,
    push_nbody_metrics, train, worker_count, write_atomic, write_run, Manifest, Summary,
};
use crate::nbody::{reference_initial_state, simulate};
use crate::properties::{PropertyKind, PropertyModel, PropertyTask};

#[derive(Debug, Parser)]
#[command(name = "physaug", version, about = "Physics-augmented learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the training set (or the oracle trajectory) to data.csv.
    GenData(RunArgs),
    /// Train one model.
    Train(RunArgs),
    /// Train one model per value of the manifest's `lambdas`.
    Sweep(RunArgs),
    /// Simulate the five-body system to trajectory.csv.
    NbodySim(RunArgs),
    /// Re-evaluate the checkpoint in the output directory.
    Evaluate(RunArgs),
    /// Merge run summaries into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest override, applied after the file is read.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run or sweep directories.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error: 2 manifest, 3 training, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Manifest(_) | Error::Parse(_) | Error::NotApplicable(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Manifest(_) | Error::Parse(_) | Error::NotApplicable(_) => "manifest",
        Error::Io(_) => "io",
        _ => "training",
    }
}

/// The single stderr line printed on failure.
pub fn error_line(err: &Error) -> String {
    let msg = err.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} code={} message={msg}", kind(err), exit_code(err))
}

/// Manifest file plus overrides.
pub fn load_manifest(args: &RunArgs) -> Result<Manifest> {
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", args.manifest.display())))?;
    let mut pairs = parse_pairs(&text)?;
    for o in &args.overrides {
        pairs.push(parse_override(o)?);
    }
    if let Some(seed) = args.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    Manifest::from_pairs(&pairs)
}

fn put(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    write_atomic(&p, contents.as_bytes())?;
    written.push(p);
    Ok(())
}

/// Runs one command; returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match &cli.command {
        Command::GenData(args) => {
            let m = load_manifest(args)?;
            if m.train.task == PropertyKind::TimeIndependence {
                let traj = simulate(&m.train.nbody.sim_config(), &reference_initial_state())?;
                let mut buf = Vec::new();
                traj.write_csv(&mut buf)?;
                put(&args.out, "trajectory.csv", &String::from_utf8_lossy(&buf), &mut written)?;
            } else {
                let data = m.train.dataset()?;
                let d = data.inputs.ncols();
                let mut out = if d == 1 {
                    "x,y\n".to_string()
                } else {
                    (1..=d).map(|k| format!("x{k},")).collect::<String>() + "y\n"
                };
                for (x, y) in data.inputs.rows().into_iter().zip(&data.labels) {
                    for v in x {
                        write!(out, "{v:.16e},").expect("string write");
                    }
                    writeln!(out, "{y:.16e}").expect("string write");
                }
                put(&args.out, "data.csv", &out, &mut written)?;
            }
        }
        Command::Train(args) => {
            let m = load_manifest(args)?;
            let result = train(&m.train)?;
            if let Some(why) = &result.aborted {
                eprintln!("warning: {why}");
            }
            written.extend(write_run(&args.out, &result, &[])?);
        }
        Command::Sweep(args) => {
            let m = load_manifest(args)?;
            if m.lambdas.is_empty() {
                return Err(Error::Manifest("sweep needs a nonempty `lambdas` list".into()));
            }
            let sweep = lambda_sweep(&m.train, &m.lambdas, worker_count()?)?;
            let mut ok = Vec::new();
            let mut first_err = None;
            for (lambda, run) in sweep.lambdas.iter().zip(sweep.runs) {
                match run {
                    Ok(r) => {
                        written.extend(write_run(&args.out.join(lambda_dir_name(*lambda)), &r, &m.lambdas)?);
                        ok.push(r);
                    }
                    Err(e) => {
                        eprintln!("warning: lambda={lambda} failed: {e}");
                        first_err.get_or_insert(e);
                    }
                }
            }
            let refs: Vec<_> = ok.iter().collect();
            put(&args.out, "sweep.csv", &history_csv(&refs), &mut written)?;
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::NbodySim(args) => {
            let m = load_manifest(args)?;
            let traj = simulate(&m.train.nbody.sim_config(), &reference_initial_state())?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            put(&args.out, "trajectory.csv", &String::from_utf8_lossy(&buf), &mut written)?;
        }
        Command::Evaluate(args) => {
            let m = load_manifest(args)?;
            let ckpt = fs::read(args.out.join("model.ckpt"))?;
            let model = PropertyModel::read_checkpoint(&mut ckpt.as_slice())?;
            if model.kind != m.train.task || model.paradigm != m.train.paradigm {
                return Err(Error::Structure(format!(
                    "checkpoint holds a {} {} model, manifest asks for {} {}",
                    model.paradigm, model.kind, m.train.paradigm, m.train.task
                )));
            }
            let mut s = Summary::default();
            s.push("task", model.kind);
            s.push("paradigm", model.paradigm);
            if model.kind == PropertyKind::TimeIndependence {
                let oracle = simulate(&m.train.nbody.sim_config(), &reference_initial_state())?;
                let rep = evaluate_nbody(&model, &oracle)?;
                push_nbody_metrics(&mut s, &rep);
                put(&args.out, "force_curve.csv", &force_curve_csv(&rep.force_curve), &mut written)?;
            } else {
                let task = PropertyTask::new(model.kind);
                let rep = evaluate_decomposition(&model, &task, &evaluation_grid(&task))?;
                push_decomposition_metrics(&mut s, &rep);
            }
            put(&args.out, "evaluation.csv", &s.to_csv(), &mut written)?;
        }
        Command::Report(args) => {
            let report = build_report(&args.dirs);
            for (d, why) in &report.skipped {
                eprintln!("warning: skipped {}: {why}", d.display());
            }
            put(&args.out, "report.csv", &report.to_csv(), &mut written)?;
            put(&args.out, "report.txt", &report.to_table(), &mut written)?;
        }
    }
    Ok(written)
}
