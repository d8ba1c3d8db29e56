use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dmppi::config::RunConfig;
use dmppi::controllers::PlannerKind;
use dmppi::logs::{self, RunSummary};
use dmppi::sim::{make_scenario, monte_carlo, run_trial, trial_seeds, TrialResult};

#[derive(Parser)]
#[command(name = "dmppi", version, about = "Belief-aware MPPI planners on a highway on-ramp merge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop trial and write its logs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Index of the paired trial to reproduce from a `montecarlo` run.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Run paired trials for several planners and write a report.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Number of paired trials.
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; scenario and planner seeds of each trial derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Planner for `run`; comma-separated list for `montecarlo`.
    #[arg(long, value_delimiter = ',')]
    planner: Vec<PlannerKind>,
    /// Output directory.
    #[arg(long, env = "DMPPI_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Dotted-path overrides, e.g. `mppi.lambda=5000`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, trials: Option<usize>, single: bool) -> Result<RunConfig, String> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides).map_err(|e| e.to_string())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = trials {
            cfg.trials = t;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if single {
            if let Some(&k) = self.planner.last() {
                cfg.planner = k;
            }
        } else if !self.planner.is_empty() {
            cfg.planners = self.planner.clone();
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn write_logs(dir: &Path, prefix: &str, r: &TrialResult) -> Result<(), String> {
    let open = |name: &str| -> Result<BufWriter<File>, String> {
        let p = dir.join(format!("{prefix}{name}"));
        File::create(&p).map(BufWriter::new).map_err(|e| format!("{}: {e}", p.display()))
    };
    r.trajectory.write_csv(open("trajectory.csv")?).map_err(|e| e.to_string())?;
    r.belief.write_csv(open("belief.csv")?).map_err(|e| e.to_string())?;
    Ok(())
}

fn cmd_run(cfg: &RunConfig, j: u64) -> Result<(), String> {
    let dir = out_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| e.to_string())?;
    let trial = cfg.trial_config();
    let (scenario_seed, planner_seed) = trial_seeds(cfg.seed, j);
    let scenario = make_scenario(&trial.scenario, scenario_seed).map_err(|e| e.to_string())?;
    info!("running {} on scenario {scenario_seed:#x}", cfg.planner);
    let r = run_trial(&trial, cfg.planner, &scenario, planner_seed).map_err(|e| e.to_string())?;
    write_logs(&dir, "", &r)?;
    let summary = RunSummary {
        trial: &r.summary,
        total_rollouts: r.total_rollouts,
        mean_plan_ms: 1e3 * r.plan_time.as_secs_f64() / r.summary.steps.max(1) as f64,
    };
    logs::write_json(&dir.join("summary.json"), &summary).map_err(|e| e.to_string())?;
    println!(
        "{}: {} after {} steps ({})",
        r.summary.planner,
        r.summary.outcome.as_str(),
        r.summary.steps,
        dir.display()
    );
    Ok(())
}

fn cmd_montecarlo(cfg: &RunConfig) -> Result<(), String> {
    let dir = out_dir(cfg);
    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| format!("{}: {e}", trials_dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| e.to_string())?;
    let trial = cfg.trial_config();
    let (report, results) = monte_carlo(&trial, &cfg.planners, cfg.trials, cfg.seed, None, |j, r| {
        info!("trial {j} {}: {}", r.summary.planner, r.summary.outcome.as_str());
    })
    .map_err(|e| e.to_string())?;
    for (idx, r) in results.iter().enumerate() {
        let j = idx / cfg.planners.len();
        let prefix = format!("{j:04}_{}_", r.summary.planner.to_string().to_lowercase());
        write_logs(&trials_dir, &prefix, r)?;
    }
    logs::write_report(&dir, &report).map_err(|e| e.to_string())?;
    print!("{}", logs::render_report_table(&report));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (common, trials, single) = match &cli.command {
        Command::Run { common, .. } => (common, None, true),
        Command::Montecarlo { common, trials } => (common, *trials, false),
    };
    let cfg = match common.resolve(trials, single) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(w) = cfg.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Run { trial, .. } => cmd_run(&cfg, trial),
        Command::Montecarlo { .. } => cmd_montecarlo(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
