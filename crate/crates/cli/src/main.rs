use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use deepsplit::harness::{
    compute_oracle, emit_loss_trace, emit_slice, fmt9, load_solution, run_experiment, slice_oracle_for, summary,
    SliceOracle, DEFAULT_OUT_DIR, OUT_DIR_ENV,
};
use deepsplit::{ExperimentConfig, Preset};

#[derive(Parser)]
#[command(name = "deepsplit", version, about = "Deep-splitting solver for semilinear PIDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write its report.
    Run {
        config: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Number of seeds, overriding the config and preset.
        #[arg(long)]
        seeds: Option<usize>,
        /// Write the first `n` simulated paths of seed 0 to `paths.csv`.
        #[arg(long)]
        dump_paths: Option<usize>,
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out: PathBuf,
    },
    /// Evaluate `U_0` along one coordinate axis.
    Slice {
        solution: PathBuf,
        #[arg(long)]
        axis: usize,
        /// Endpoints `a,b`.
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        range: (f64, f64),
        #[arg(long)]
        res: usize,
        /// Anchor point, comma separated; defaults to all ones.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        anchor: Option<Vec<f64>>,
        /// Monte-Carlo paths per basket oracle point; 0 leaves the column out.
        #[arg(long, default_value_t = 0)]
        oracle_points: usize,
    },
    /// Print the loss trace of one trained step.
    Trace {
        solution: PathBuf,
        #[arg(long)]
        step: usize,
    },
    /// Compute (or read from the cache) the oracle value of an experiment.
    Oracle {
        config: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
        out: PathBuf,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    if !(a < b) {
        return Err("range must satisfy a < b".into());
    }
    Ok((a, b))
}

fn load_config(path: &Path, preset: Option<PresetArg>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(p) = preset {
        cfg.apply_preset(p.into());
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            preset,
            seeds,
            dump_paths,
            out,
        } => {
            let mut cfg = load_config(&config, preset)?;
            if let Some(n) = seeds {
                cfg.seeds.count = n;
            }
            if let Some(n) = dump_paths {
                cfg.report.dump_paths = n;
            }
            let report = run_experiment(&cfg, &out)?;
            for (k, v) in summary(&report) {
                println!("{k}: {v}");
            }
            println!("output: {}", out.display());
            if report.failed {
                bail!("at least one seed failed to train");
            }
        }
        Command::Slice {
            solution,
            axis,
            range,
            res,
            anchor,
            oracle_points,
        } => {
            let (sol, cfg) = load_solution(&solution)?;
            let anchor = anchor.unwrap_or_else(|| vec![1.0; cfg.problem.dim()]);
            let oracle = slice_oracle_for(&cfg, oracle_points)?;
            let source = match &oracle {
                Some(f) => SliceOracle::Function(f.as_ref()),
                None => SliceOracle::None,
            };
            let csv = emit_slice(&sol, axis, range, res, &anchor, source)?;
            print!("{}", csv.to_csv());
        }
        Command::Trace { solution, step } => {
            let (sol, _) = load_solution(&solution)?;
            print!("{}", emit_loss_trace(&sol, step)?);
        }
        Command::Oracle { config, preset, out } => {
            let cfg = load_config(&config, preset)?;
            let v = compute_oracle(&cfg, Some(&out))?;
            println!("method: {}", v.method);
            println!("value: {}", fmt9(v.value));
            if let Some(se) = v.standard_error {
                println!("standard_error: {}", fmt9(se));
            }
            println!("key: {}", v.key);
        }
    }
    Ok(())
}
