//! `dopplernet <command> <config.toml> [--seed N]`
//!
//! Progress and results go to stdout as JSON lines. Failures print a single
//! `{"error":{"kind":..,"message":..}}` line to stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dopplernet::harness::config::{Resolved, RunConfig};
use dopplernet::harness::{experiment, run};
use dopplernet::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dopplernet", version, about = "Doppler view classification on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); relative paths inside resolve against its directory.
    config: PathBuf,
    /// Run seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets.
    Gen(Common),
    /// Train the configured variant and write the model.
    Train(Common),
    /// Fit quantile tables on the training set and embed them in the model.
    Calibrate(Common),
    /// Confusion matrix and metrics on the test split.
    Eval(Common),
    /// Ignored and error rates over the quantile grid.
    Sweep(Common),
    /// Train and compare the E1 to E5 variants.
    Experiment(Common),
    /// Classify a manifest, one JSON line per recording.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Quantile for rejection; 0 never ignores.
        #[arg(long)]
        quantile: Option<f64>,
    },
    /// Finite-difference check of every layer kind and the desk model.
    Gradcheck(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Input { .. } => 3,
        Error::Data(_) => 4,
        Error::Usage(_) => 5,
        Error::Numerical { .. } => 6,
        Error::Format { .. } => 7,
        Error::Checksum { .. } => 8,
        Error::Io { .. } => 9,
        Error::Internal(_) => 10,
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::from(code)
}

fn line(v: serde_json::Value) {
    println!("{v}");
}

fn resolve(c: &Common) -> dopplernet::Result<Resolved> {
    RunConfig::load(&c.config, c.seed)
}

fn execute(cmd: Command) -> dopplernet::Result<()> {
    match cmd {
        Command::Gen(c) => {
            let r = resolve(&c)?;
            for (split, n) in run::gen(&r)? {
                line(json!({"split": split, "records": n}));
            }
        }
        Command::Train(c) => {
            let r = resolve(&c)?;
            let (path, clf) = run::train(&r, &mut |l| line(json!(l)))?;
            line(json!({
                "model": path,
                "variant": format!("{:?}", clf.variant),
                "params": clf.param_count(),
                "size_bytes": clf.estimated_bytes(),
            }));
        }
        Command::Calibrate(c) => {
            let r = resolve(&c)?;
            for w in run::calibrate(&r)? {
                line(json!({"warning": w}));
            }
            line(json!({"calibrated": r.artifact_path()}));
        }
        Command::Eval(c) => {
            let r = resolve(&c)?;
            let rep = run::eval(&r)?;
            line(json!({
                "total": rep.total,
                "accuracy": rep.accuracy,
                "structural_errors": rep.confusion.structural_count(),
            }));
        }
        Command::Sweep(c) => {
            let r = resolve(&c)?;
            for s in run::sweep(&r)? {
                line(json!(s));
            }
        }
        Command::Experiment(c) => {
            let r = resolve(&c)?;
            let results = experiment::run_experiments(&r, &mut |id, l| {
                line(json!({"experiment": id, "epoch": l}))
            })?;
            for x in results {
                line(json!(x.row));
            }
        }
        Command::Predict { common, quantile } => {
            let r = resolve(&common)?;
            print!("{}", run::predict(&r, quantile)?);
        }
        Command::Gradcheck(c) => {
            let r = resolve(&c)?;
            let cases = run::gradcheck(&r)?;
            let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            for case in &cases {
                line(json!(case));
            }
            line(json!({"cases": cases.len(), "max_rel_err": worst}));
            if worst >= 1e-4 {
                return Err(Error::Numerical {
                    node: "gradcheck".into(),
                    message: format!("max relative error {worst:.3e} exceeds 1e-4"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            return fail("usage", first.trim_start_matches("error: ").to_string(), 5);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), exit_code(&e)),
    }
}
