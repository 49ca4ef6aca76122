use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use ltc_core::config::{EnvKind, RunConfig};
use ltc_core::control::{ControllerKind, LearnMode};
use ltc_core::feeder::FeederTopology;
use ltc_core::harness::{run_episode, tap_agreement, EpisodeOutcome, HarnessError};
use ltc_core::io;
use ltc_core::loads::{synthesize_loads, LoadProfile};
use ltc_core::scenario;

#[derive(Parser)]
#[command(name = "ltc", version, about = "Load tap changer control on radial feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Linear,
    Sweep,
}

impl From<SolverArg> for EnvKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Linear => EnvKind::Linear,
            SolverArg::Sweep => EnvKind::Sweep,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Rl,
    Conventional,
    Exhaustive,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Rl => ControllerKind::Rl,
            ControllerArg::Conventional => ControllerKind::Conventional,
            ControllerArg::Exhaustive => ControllerKind::Exhaustive,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// Feeder JSON file, or a built-in name (`ieee13`, `ieee123`).
    #[arg(long)]
    feeder: String,
    /// Load profile CSV (`step,bus,p,q`); synthesized from the config when absent.
    #[arg(long)]
    loads: Option<PathBuf>,
    /// TOML configuration; omitted keys keep the feeder's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Learn inside the triggering step instead of on a worker thread.
    #[arg(long)]
    sync_learn: bool,
    /// Environment model; overrides the config file.
    #[arg(long, value_enum)]
    env: Option<SolverArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Solves one power flow and writes `bus,V`.
    Powerflow {
        #[arg(long)]
        feeder: String,
        /// Injections CSV (`bus,p,q`).
        #[arg(long)]
        injections: PathBuf,
        /// Tap positions, one per LTC; neutral when absent.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        taps: Option<Vec<i32>>,
        #[arg(long, value_enum, default_value = "sweep")]
        solver: SolverArg,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs one controller over warm-up plus scored days.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
    },
    /// Runs all three controllers on the same profile.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Writes the synthesized load profile for a feeder and config.
    Loads {
        #[arg(long)]
        feeder: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Prepared {
    topology: Arc<FeederTopology>,
    cfg: RunConfig,
    profile: LoadProfile,
    env: EnvKind,
}

fn load_config(feeder: &str, path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    let base = scenario::base_run_config(feeder);
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            RunConfig::parse_over(&text, &p.display().to_string(), &base)
        }
        None => Ok(base),
    }
}

fn prepare(args: &RunArgs) -> Result<Prepared, HarnessError> {
    let cfg = load_config(&args.feeder, args.config.as_deref())?;
    let topology = cfg.apply_windows(&scenario::resolve_feeder(&args.feeder)?)?;
    let profile = match &args.loads {
        Some(path) => io::load_profile_csv(path, topology.n(), cfg.loads.step_minutes)?,
        None => synthesize_loads(&cfg.load_config(), topology.n(), args.seed)?,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| HarnessError::Io {
        path: args.out.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(Prepared {
        topology: Arc::new(topology),
        env: args.env.map_or(cfg.episode.env, EnvKind::from),
        cfg,
        profile,
    })
}

fn run_one(
    p: &Prepared,
    kind: ControllerKind,
    args: &RunArgs,
) -> Result<EpisodeOutcome, HarnessError> {
    let mode = if args.sync_learn {
        LearnMode::Sync
    } else {
        LearnMode::Background
    };
    let mut controller =
        p.cfg
            .build_controller(kind, Arc::clone(&p.topology), p.env, args.seed, mode)?;
    let episode = p.cfg.episode_config(p.topology.n(), p.env);
    info!("running {} for {} steps", kind.as_str(), episode.steps);
    let outcome = run_episode(&p.topology, &p.profile, controller.as_mut(), &episode)?;
    if let Some(f) = &outcome.failure {
        warn!("{}: episode stopped early: {f}", kind.as_str());
    }
    let csv_path = args.out.join(format!("episode_{}.csv", kind.as_str()));
    let file = File::create(&csv_path).map_err(|e| HarnessError::Io {
        path: csv_path.display().to_string(),
        message: e.to_string(),
    })?;
    io::write_episode_csv(file, &outcome.log)?;
    let hist_path = args.out.join(format!("history_{}.csv", kind.as_str()));
    let file = File::create(&hist_path).map_err(|e| HarnessError::Io {
        path: hist_path.display().to_string(),
        message: e.to_string(),
    })?;
    io::write_history_csv(file, &outcome.history)?;
    Ok(outcome)
}

#[derive(Serialize)]
struct CompareSummary {
    rho: BTreeMap<String, f64>,
    tap_changes: BTreeMap<String, usize>,
    rho_per_day: BTreeMap<String, Vec<f64>>,
    violation_steps: BTreeMap<String, usize>,
    rl_exhaustive_tap_agreement: f64,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Powerflow {
            feeder,
            injections,
            taps,
            solver,
            out,
        } => {
            let topology = scenario::resolve_feeder(&feeder)?;
            let inj = io::load_injections_file(&injections, topology.n())?;
            let positions = taps.unwrap_or_else(|| topology.neutral_positions());
            let ratios = topology.ratios(&positions)?;
            let state = EnvKind::from(solver).solver().solve(&topology, &ratios, &inj)?;
            match out {
                Some(path) => {
                    let f = File::create(&path).map_err(|e| HarnessError::Io {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                    io::write_voltages_csv(f, &state)?;
                }
                None => io::write_voltages_csv(std::io::stdout().lock(), &state)?,
            }
        }
        Command::Simulate { run, controller } => {
            let p = prepare(&run)?;
            let kind = controller
                .map(ControllerKind::from)
                .or(p.cfg.controller)
                .unwrap_or(ControllerKind::Rl);
            let outcome = run_one(&p, kind, &run)?;
            io::write_json(&run.out.join("summary.json"), &outcome.metrics)?;
            println!(
                "{}: rho = {:.6e}, tap changes = {}",
                kind.as_str(),
                outcome.metrics.rho,
                outcome.metrics.tap_changes
            );
        }
        Command::Compare { run } => {
            let p = prepare(&run)?;
            let kinds = [
                ControllerKind::Rl,
                ControllerKind::Exhaustive,
                ControllerKind::Conventional,
            ];
            let outcomes = kinds
                .iter()
                .map(|&k| run_one(&p, k, &run))
                .collect::<Result<Vec<_>, _>>()?;
            let logs: Vec<_> = outcomes.iter().map(|o| &o.log).collect();
            io::write_comparison_csvs(&run.out, &logs)?;
            let named = || kinds.iter().map(|k| k.as_str().to_string()).zip(&outcomes);
            let summary = CompareSummary {
                rho: named().map(|(k, o)| (k, o.metrics.rho)).collect(),
                tap_changes: named().map(|(k, o)| (k, o.metrics.tap_changes)).collect(),
                rho_per_day: named()
                    .map(|(k, o)| (k, o.metrics.rho_per_day.clone()))
                    .collect(),
                violation_steps: named()
                    .map(|(k, o)| (k, o.metrics.violation_steps))
                    .collect(),
                rl_exhaustive_tap_agreement: tap_agreement(&outcomes[0].log, &outcomes[1].log),
            };
            io::write_json(&run.out.join("summary.json"), &summary)?;
            for (k, o) in named() {
                println!(
                    "{k:>12}: rho = {:.6e}, tap changes = {}",
                    o.metrics.rho, o.metrics.tap_changes
                );
            }
            println!(
                "rl/exhaustive tap agreement: {:.1}%",
                100.0 * summary.rl_exhaustive_tap_agreement
            );
        }
        Command::Loads {
            feeder,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(&feeder, config.as_deref())?;
            let topology = scenario::resolve_feeder(&feeder)?;
            let profile = synthesize_loads(&cfg.load_config(), topology.n(), seed)?;
            let f = File::create(&out).map_err(|e| HarnessError::Io {
                path: out.display().to_string(),
                message: e.to_string(),
            })?;
            io::write_profile_csv(f, &profile)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
