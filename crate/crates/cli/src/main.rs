use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use physs_cli::config::ExperimentConfig;
use physs_cli::data::{load_csv, Schema};
use physs_cli::experiment::{predict_grid, predictions_csv, run, simulate, write_dataset, SavedRun};
use physs_cli::metrics::metrics;
use physs_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "physs", version, about = "Physics-informed state-space Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train.csv and test.csv.
    Simulate {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model described by a TOML config and write metrics and predictions.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict on the cells of a CSV grid from a saved state.json.
    Predict {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions CSV against a truth CSV (first output).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1)]
        spatial_dims: usize,
    },
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Config(e.to_string()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { name, out, seed } => {
            let data = simulate(&name, &None, seed)?;
            write_dataset(&data, &out)
        }
        Command::Fit { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = run(&cfg, out.as_deref())?;
            println!("{}", to_json(&result.metrics)?);
            Ok(())
        }
        Command::Predict { state, grid, out } => {
            let saved: SavedRun =
                serde_json::from_str(&read(&state)?).map_err(|e| CliError::Config(format!("state file: {e}")))?;
            let dims = saved
                .config
                .data
                .csv
                .as_ref()
                .map(|c| c.spatial_dims)
                .unwrap_or_else(|| saved.config.model.latents[0].spatial.len());
            let grid = load_csv(&grid, Schema { spatial_dims: dims })?;
            let (experiment, preds) = predict_grid(&saved, &grid)?;
            let text = predictions_csv(&experiment, &preds);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::io(&p, e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Eval {
            pred,
            truth,
            spatial_dims,
        } => {
            let schema = Schema { spatial_dims };
            let p = load_csv(&pred, schema)?;
            let t = load_csv(&truth, schema)?;
            if p.outputs < 2 {
                return Err(CliError::Config("predictions need mean and std columns".into()));
            }
            let (mut mean, mut std, mut y) = (Vec::new(), Vec::new(), Vec::new());
            for (ti, time) in t.times.iter().enumerate() {
                for (si, loc) in t.locations.iter().enumerate() {
                    let Some(target) = t.value(ti, si, 0) else { continue };
                    let pt = p.times.iter().position(|v| v == time);
                    let ps = p.locations.iter().position(|v| v == loc);
                    let (Some(pt), Some(ps)) = (pt, ps) else {
                        return Err(CliError::NonGriddableData(format!("no prediction at t={time}, s={loc:?}")));
                    };
                    match (p.value(pt, ps, 0), p.value(pt, ps, 1)) {
                        (Some(m), Some(s)) => {
                            mean.push(m);
                            std.push(s);
                            y.push(target);
                        }
                        _ => {
                            return Err(CliError::NonGriddableData(format!("missing prediction at t={time}, s={loc:?}")))
                        }
                    }
                }
            }
            println!("{}", to_json(&metrics(&mean, &std, &y)?)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
