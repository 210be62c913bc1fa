//! Command-line driver: surrogate training, closed-loop simulation, batch
//! runs, prediction snapshots, and model verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dctmpc::error::Error;
use dctmpc::icnn::{verify_convexity, DcModel};
use dctmpc::plant::ModelParams;
use dctmpc::report;
use dctmpc::sim::{run_closed_loop, run_seed_batch, Scenario};
use dctmpc::train::{
    estimate_disturbance_bounds, generate_dataset, train_dc_pair, Architecture, DisturbanceBounds,
    TargetMap, TrainConfig,
};

#[derive(Parser)]
#[command(name = "dctmpc", about = "DC tube MPC for fed-batch bioreactor control", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Rhs,
    Psi,
}

#[derive(Subcommand)]
enum Command {
    /// Train a difference-of-convex network pair on the nominal model.
    Train {
        /// Which map to learn: the model right-hand side or the regressor.
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 250)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output model file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional training-log CSV (epoch, train MAE, val MAE).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run one closed-loop scenario and emit its report files.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override scenario fields, e.g. --set mpc.horizon=20.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run a scenario across a seed range (inclusive start, exclusive end).
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        /// Seed range as a..b.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Emit the predicted trajectories and tube envelopes of the first
    /// control step.
    SnapshotPrediction {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Check the convexity invariants of a stored model.
    VerifyModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ModelInput(_) | Error::Serialization(_) | Error::Io { .. } => 2,
        Error::Network(_) | Error::Dimension { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train {
            target,
            samples,
            epochs,
            lr,
            seed,
            out,
            log,
        } => {
            let target = match target {
                TargetArg::Rhs => TargetMap::Rhs,
                TargetArg::Psi => TargetMap::Psi,
            };
            let arch = match target {
                TargetMap::Rhs => Architecture::rhs_pair(),
                TargetMap::Psi => Architecture::psi_pair(),
            };
            let nominal = ModelParams::nominal();
            let sampling_box = dctmpc::train::constraint_box();
            eprintln!("sampling {samples} points...");
            let data = generate_dataset(samples, &sampling_box, &nominal, target, seed)?;
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            eprintln!("training {epochs} epochs...");
            let t0 = std::time::Instant::now();
            let outcome = train_dc_pair(&data, &arch, &cfg)?;
            eprintln!(
                "done in {:.1?}: train MAE {:.3e}, validation MAE {:.3e}",
                t0.elapsed(),
                outcome.model.meta.train_mae,
                outcome.model.meta.val_mae
            );
            outcome.model.save(&out)?;
            eprintln!("model written to {}", out.display());
            if let Some(log_path) = log {
                let mut text = String::from("# schema=training-log/1\nepoch,train_mae,val_mae\n");
                for r in &outcome.log {
                    text.push_str(&format!("{},{:.16e},{:.16e}\n", r.epoch, r.train_mae, r.val_mae));
                }
                std::fs::write(&log_path, text)
                    .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            }
            if target == TargetMap::Rhs {
                let bounds = estimate_disturbance_bounds(
                    &outcome.model,
                    &data,
                    1.0,
                    1.5,
                    &DisturbanceBounds::paper_floor(),
                )?;
                let sidecar = out.with_extension("bounds.json");
                let doc = serde_json::json!({
                    "schema": "disturbance-bounds/1",
                    "lower": bounds.lower.as_slice(),
                    "upper": bounds.upper.as_slice(),
                });
                std::fs::write(&sidecar, serde_json::to_string_pretty(&doc).unwrap())
                    .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
                eprintln!("estimator disturbance bounds written to {}", sidecar.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            scenario,
            seed,
            out,
            sets,
        } => {
            let (sc, f_model, g_model) = load_scenario(&scenario, seed, &sets)?;
            let log = run_closed_loop(&sc, &f_model, &g_model)?;
            report::emit_report(&log, Some(&sc), &out)?;
            println!(
                "final product {:.4} g/L after {} steps; violations {}; report in {}",
                log.metrics.final_product,
                log.records.len(),
                log.metrics.constraint_violations,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch {
            scenario,
            seeds,
            out,
            threads,
            sets,
        } => {
            let (sc, f_model, g_model) = load_scenario(&scenario, None, &sets)?;
            let (a, b) = seeds
                .split_once("..")
                .ok_or_else(|| Error::Config("seed range must be a..b".into()))?;
            let a: u64 = a.trim().parse().map_err(|_| Error::Config("bad seed range".into()))?;
            let b: u64 = b.trim().parse().map_err(|_| Error::Config("bad seed range".into()))?;
            if b <= a {
                return Err(Error::Config("seed range must be non-empty".into()));
            }
            let logs = run_seed_batch(&sc, a..b, &f_model, &g_model, threads)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let mut violations = 0;
            for log in &logs {
                let dir = out.join(format!("seed_{}", log.seed));
                report::emit_report(log, Some(&sc), &dir)?;
                violations += log.metrics.constraint_violations;
            }
            println!(
                "{} runs complete; total constraint violations {violations}; reports in {}",
                logs.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::SnapshotPrediction {
            scenario,
            seed,
            out,
            sets,
        } => {
            let (mut sc, f_model, g_model) = load_scenario(&scenario, seed, &sets)?;
            // one sample instant is enough for the t=0 snapshot
            sc.duration = sc.mpc.delta;
            let log = run_closed_loop(&sc, &f_model, &g_model)?;
            let snapshot = log
                .prediction_t0
                .ok_or_else(|| Error::SolverFailure("no prediction snapshot produced".into()))?;
            std::fs::write(&out, report::prediction_csv(&snapshot))
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            println!("prediction snapshot written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyModel { model, samples } => {
            let dc = DcModel::load(&model)?;
            let mut failed = false;
            for (name, net) in [("f1", &dc.f1), ("f2", &dc.f2)] {
                let report = verify_convexity(net, &dc.sampling_box, samples, 0);
                println!(
                    "{name}: structural {} (min kernel {:.3e}), sampled {} (worst violation {:.3e} over {} pairs)",
                    if report.structural_pass { "PASS" } else { "FAIL" },
                    report.min_kernel_entry,
                    if report.sampled_pass { "PASS" } else { "FAIL" },
                    report.worst_violation,
                    report.pairs_checked
                );
                failed |= !report.pass();
            }
            if failed {
                Ok(ExitCode::from(4))
            } else {
                println!("model verification passed");
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

/// Load a scenario file, apply overrides, and load its model pair.
fn load_scenario(
    path: &Path,
    seed: Option<u64>,
    sets: &[String],
) -> Result<(Scenario, DcModel, DcModel), Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut value: toml::Value =
        toml::from_str(&text).map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
    for set in sets {
        apply_override(&mut value, set)?;
    }
    let mut sc: Scenario = value
        .try_into()
        .map_err(|e| Error::Config(format!("scenario fields: {e}")))?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    sc.validate()?;
    // model paths resolve relative to the scenario file
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let f_model = DcModel::load(&resolve(&sc.f_model))?;
    let g_model = DcModel::load(&resolve(&sc.g_model))?;
    Ok((sc, f_model, g_model))
}

/// Apply one `key.path=value` override onto a TOML document.
fn apply_override(doc: &mut toml::Value, setting: &str) -> Result<(), Error> {
    let (key, raw) = setting
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {setting:?} must be key=value")))?;
    let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
        .map(|t: toml::Value| t["v"].clone())
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cursor {
                toml::Value::Table(t) => {
                    t.insert(part.to_string(), parsed);
                    return Ok(());
                }
                _ => return Err(Error::Config(format!("override path {key:?} is not a table"))),
            }
        }
        cursor = cursor
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown override path segment {part:?}")))?;
    }
    Ok(())
}
