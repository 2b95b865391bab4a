//! Command-line entry point: dataset bootstrap and generation, training
//! runs, parameter sweeps, report aggregation, and dataset export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sope::driver::{
    self, bootstrap, gen_data, run_schedule, write_run_artifacts, BootstrapConfig,
    ScheduleConfig, ScheduleKind, SweepParam,
};
use sope::envlab::DatasetTier;
use sope::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sope",
    about = "Offline-stabilized RL training lab with FLOP accounting",
    version
)]
struct Cli {
    /// Dataset/anchor directory (default: $SOPE_DATA_DIR or ./data)
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train source policies online and save tier checkpoints plus score anchors
    Bootstrap {
        /// Environment name (pendulum-swingup, point-reacher, tabular-chain)
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Online environment-step training budget
        #[arg(long, default_value_t = 60_000)]
        budget: u64,
        /// Hidden layer widths, comma separated
        #[arg(long, default_value = "64,64")]
        hidden: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Episodes per anchor policy when computing score anchors
        #[arg(long, default_value_t = 100)]
        anchor_episodes: usize,
    },
    /// Roll out a tier checkpoint to generate a prior-data dataset
    GenData {
        env: String,
        /// Dataset tier (simple, medium, expert)
        tier: String,
        #[arg(long, default_value_t = driver::DEFAULT_DATASET_SIZE)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Execute one training run and write its artifacts
    Run(RunArgs),
    /// Run a grid over one parameter and several seeds
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Parameter to vary (patience, n_fix)
        #[arg(long)]
        param: String,
        /// Grid values, comma separated
        #[arg(long)]
        values: String,
        /// Seeds, comma separated
        #[arg(long)]
        seeds: String,
    },
    /// Aggregate metrics.csv from several run directories
    Report {
        /// Run directories to pool
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Export a binary dataset to CSV
    ExportCsv {
        dataset: PathBuf,
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Schedule (sope, sacfd, rlpd_lite, speq_fixed)
    schedule: String,
    env: String,
    /// Dataset tier (simple, medium, expert)
    #[arg(long, default_value = "expert")]
    tier: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat key=value config file applied before --set overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual key=value overrides (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for run artifacts
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<ScheduleConfig> {
        let kind = ScheduleKind::named(&self.schedule)?;
        let tier = DatasetTier::named(&self.tier)?;
        let mut cfg = ScheduleConfig::new(kind, &self.env, tier, self.seed);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for pair in &self.sets {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Usage(format!("--set expects KEY=VALUE, got `{pair}`"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("invalid {what} value `{}`", s.trim())))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    let root = cli.data_dir.unwrap_or_else(driver::data_dir);
    match cli.command {
        Command::Bootstrap {
            env,
            seed,
            budget,
            hidden,
            batch,
            anchor_episodes,
        } => {
            let mut cfg = BootstrapConfig::new(&env);
            cfg.seed = seed;
            cfg.budget = budget;
            cfg.hidden = parse_list("hidden", &hidden)?;
            cfg.batch = batch;
            cfg.anchor_episodes = anchor_episodes;
            bootstrap(&root, &cfg)?;
            println!("bootstrap complete: checkpoints and anchors in {}", root.display());
        }
        Command::GenData {
            env,
            tier,
            count,
            seed,
        } => {
            let tier = DatasetTier::named(&tier)?;
            gen_data(&root, &env, tier, count, seed)?;
            println!("dataset written under {}", root.display());
        }
        Command::Run(args) => {
            let cfg = args.config()?;
            let result = run_schedule(&cfg, &root)?;
            write_run_artifacts(&args.out, &cfg, &result)?;
            println!(
                "{} on {} finished: final score {:.2}, {} gradient updates, {:.3e} FLOPs, {:.1}s",
                cfg.kind.name(),
                cfg.env,
                result.final_score,
                result.ledger.grad_updates,
                result.ledger.total_flops() as f64,
                result.wall_seconds
            );
            println!("artifacts in {}", args.out.display());
        }
        Command::Sweep {
            run,
            param,
            values,
            seeds,
        } => {
            let cfg = run.config()?;
            let param = SweepParam::named(&param)?;
            let values: Vec<u64> = parse_list("grid", &values)?;
            let seeds: Vec<u64> = parse_list("seed", &seeds)?;
            driver::sweep(&cfg, param, &values, &seeds, &root, &run.out)?;
            println!(
                "sweep over {} complete: comparison in {}",
                param.name(),
                run.out.join("comparison.csv").display()
            );
        }
        Command::Report { dirs, out } => {
            driver::report(&dirs, &out)?;
            println!("report written to {}", out.display());
        }
        Command::ExportCsv { dataset, out } => {
            driver::export_csv(&dataset, &out)?;
            println!("exported {} to {}", dataset.display(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print to stdout and exit 0; real usage errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
