use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uwbslam::config::{resolve, ExperimentConfig, SweepKind};
use uwbslam::experiments::{
    emit_plot_data, load_dataset, metrics_from_outputs, run_experiment, run_sweep_to_dir, DATASET_FILE,
};
use uwbslam::scenario::write_dataset;

/// Distributed multi-robot SLAM from UWB ranging and odometry.
///
/// Settings resolve in this order, later wins: built-in defaults, the
/// `--config` file, a sweep preset, `--set` overrides, then verb flags.
#[derive(Parser)]
#[command(name = "uwbslam", version)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set pipeline.estimator.tau=25`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for scenario, noise, network and outlier streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from `[scenario]` and `[noise]`.
    Generate {
        /// Output file (default: <run.output_dir>/dataset.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline and write trajectories, closures, cost trace,
    /// communication report and metrics.
    Run {
        /// Dataset file (default: generate from the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter sweep over (setting, seed) cells.
    Sweep {
        /// Experiment family: tab1, tab2, fig4, fig6, fig7, fig8 or tab4.
        #[arg(long)]
        preset: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute error metrics from the files of a previous run.
    Metrics {
        /// Run output directory.
        #[arg(long)]
        dir: PathBuf,
        /// Dataset with ground truth (default: <dir>/dataset.txt).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Summarize sweep CSVs into per-setting plot tables.
    PlotData {
        /// Directory holding sweep_<kind>.csv files.
        #[arg(long)]
        dir: PathBuf,
        /// Families to emit (default: every sweep file present).
        #[arg(long = "kind")]
        kinds: Vec<String>,
    },
}

fn parse_kind(name: &str) -> Result<SweepKind, String> {
    SweepKind::parse(name).ok_or_else(|| {
        let names: Vec<&str> = SweepKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown sweep family {name:?}; expected one of {}", names.join(", "))
    })
}

fn config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let file = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?),
        None => None,
    };
    let mut overrides = Vec::new();
    if let Some(Command::Sweep { preset: Some(p), .. }) = &cli.command {
        overrides.extend(parse_kind(p)?.preset());
    }
    overrides.extend(cli.overrides.iter().cloned());
    let mut cfg = resolve(file.as_deref(), &overrides).map_err(|e| e.to_string())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
        cfg.sweep.seeds = vec![seed];
    }
    match &cli.command {
        Some(Command::Run { dataset, out }) => {
            if let Some(d) = dataset {
                cfg.run.dataset = d.clone();
            }
            if let Some(o) = out {
                cfg.run.output_dir = o.clone();
            }
        }
        Some(Command::Sweep { out: Some(o), .. }) => cfg.run.output_dir = o.clone(),
        _ => {}
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), String> {
    let cfg = config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err("no command given; see --help".into());
    };
    match command {
        Command::Generate { out } => {
            let path = out.clone().unwrap_or_else(|| cfg.run.output_dir.join(DATASET_FILE));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
            }
            let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
            write_dataset(&path, &data).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        Command::Run { .. } => {
            let art = run_experiment(&cfg).map_err(|e| e.to_string())?;
            match &art.report {
                Some(r) => print!("{}", r.to_text()),
                None => println!("dataset has no ground truth; metrics skipped"),
            }
            println!("outputs in {}", cfg.run.output_dir.display());
        }
        Command::Sweep { .. } => {
            let (table, path) = run_sweep_to_dir(&cfg).map_err(|e| e.to_string())?;
            println!("{} rows written to {}", table.rows.len(), path.display());
        }
        Command::Metrics { dir, dataset } => {
            let report = metrics_from_outputs(dir, dataset.as_deref()).map_err(|e| e.to_string())?;
            print!("{}", report.to_text());
        }
        Command::PlotData { dir, kinds } => {
            let kinds = kinds.iter().map(|k| parse_kind(k)).collect::<Result<Vec<_>, _>>()?;
            for path in emit_plot_data(dir, &kinds).map_err(|e| e.to_string())? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
