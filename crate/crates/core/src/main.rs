use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dipa::env::Threshold;
use dipa::harness::{self, ExperimentConfig, Sweep};
use dipa::teleop::{server, Session};
use dipa::types::DisturbanceLevel;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dipa", version, about = "Imitation learning under partial automation with disturbance injection")]
struct Cli {
    /// TOML experiment configuration. Missing keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root seed; replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and seed on the configured environment.
    Run {
        /// Train once on recorded trajectory files instead of iterating.
        #[arg(long, num_args = 1..)]
        from_demos: Vec<PathBuf>,
    },
    /// Evaluate a saved policy bundle without disturbance.
    Eval {
        bundle: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Object count; defaults to the configured environment.
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        threshold: Option<ThresholdArg>,
    },
    /// Aggregate an artifact directory into CSV tables.
    Report { dir: Option<PathBuf> },
    /// Run a predefined condition sweep.
    Sweep {
        #[arg(value_enum)]
        which: SweepArg,
    },
    /// Serve a live teleoperation session over WebSocket.
    Teleop {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Disturbance variances (cm², cm², cm², rad²), comma separated.
        #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [0.0, 0.0, 0.0, 0.0])]
        sigma: Vec<f64>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the full default configuration as TOML.
    PrintDefaults,
    /// Print the effective configuration after merging the config file.
    Show,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    /// Object count 1..3 at threshold L.
    P1,
    /// Thresholds L, M, S with two objects.
    P2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    L,
    M,
    S,
}

impl From<ThresholdArg> for Threshold {
    fn from(t: ThresholdArg) -> Self {
        match t {
            ThresholdArg::L => Threshold::L,
            ThresholdArg::M => Threshold::M,
            ThresholdArg::S => Threshold::S,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.experiment.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.experiment.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Config { action: ConfigAction::PrintDefaults } => {
            print!("{}", ExperimentConfig::default().to_toml_string());
        }
        Command::Config { action: ConfigAction::Show } => {
            print!("{}", load_config(&cli)?.to_toml_string());
        }
        Command::Run { from_demos } => {
            let config = load_config(&cli)?;
            let dir = if from_demos.is_empty() {
                harness::cmd_run(&config)?
            } else {
                harness::cmd_run_from_demos(&config, from_demos)?
            };
            println!("{}", dir.display());
        }
        Command::Sweep { which } => {
            let config = load_config(&cli)?;
            let sweep = match which {
                SweepArg::P1 => Sweep::ObjectCount,
                SweepArg::P2 => Sweep::Threshold,
            };
            println!("{}", harness::cmd_sweep(&config, sweep)?.display());
        }
        Command::Eval { bundle, episodes, objects, threshold } => {
            let config = load_config(&cli)?;
            let mut env = match objects {
                Some(n) if *n != config.env.n_objects => dipa::EnvConfig::with_objects(*n),
                _ => config.env.clone(),
            };
            if let Some(t) = threshold {
                env.auto2_threshold = (*t).into();
            }
            let seed = config.experiment.seeds[0];
            let metrics = harness::cmd_eval(bundle, &env, *episodes, seed)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Report { dir } => {
            let root = match dir {
                Some(d) => d.clone(),
                None => load_config(&cli)?.experiment.output_dir,
            };
            let (report, out) = harness::cmd_report(&root)?;
            println!("{} cells summarised, {} partial; tables in {}", report.success_final.len(), report.partial_cells.len(), out.display());
        }
        Command::Teleop { port, host, sigma } => {
            let config = load_config(&cli)?;
            let Ok(sigma): Result<[f64; 4], _> = sigma.clone().try_into() else {
                bail!("--sigma takes four values");
            };
            let level = DisturbanceLevel::new(sigma, 0)?;
            let out = config.experiment.output_dir.join("teleop");
            let session = Session::new(&out, level, config.experiment.seeds[0]);
            let handle = server::spawn(&format!("{host}:{port}"), session)?;
            println!("listening on ws://{}; episodes are saved under {}", handle.local_addr(), out.display());
            handle.join();
        }
    }
    Ok(())
}
