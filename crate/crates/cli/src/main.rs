use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rtrl_core::approx::{verify_unbiased, Reducer, TestSystem, UnbiasedConfig};
use rtrl_core::exec::{set_num_threads, Mode};
use rtrl_core::harness::{self, ExperimentConfig, OUTPUT_ROOT_VAR};
use rtrl_core::schedules::{validate_exponents, AlgorithmClass, ExponentProfile};

#[derive(Parser)]
#[command(name = "rtrl", version, about = "Online learning experiments for dynamical systems")]
struct Cli {
    /// Worker threads for trial-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every arm and seed of an experiment.
    Run(RunArgs),
    /// Run a parameter grid and write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axis, e.g. `schedule.b=[0.3, 0.7]`.
        #[arg(long = "grid", value_name = "KEY=[VALUES]")]
        grid: Vec<String>,
    },
    /// Hypothesis checkers.
    #[command(subcommand)]
    Check(Check),
    /// List the shipped configs.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or the name of a shipped config.
    config: String,
    /// Override a config key, e.g. `schedule.gamma=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Run even when the step-size exponents are invalid.
    #[arg(long)]
    force: bool,
    /// Output root.
    #[arg(long, env = OUTPUT_ROOT_VAR, default_value = "results")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self, grid: &[String]) -> Result<ExperimentConfig> {
        let mut cfg = harness::load_config(&self.config)?;
        cfg = harness::apply_cli(&cfg, &self.set, grid)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if self.force {
            cfg.force = true;
            for arm in &mut cfg.arms {
                arm.set.remove("force");
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Check {
    /// Step-size exponent constraints.
    Schedule {
        /// exact, imperfect or tbptt.
        #[arg(long)]
        class: String,
        #[arg(long)]
        a: f64,
        /// Loss growth exponent.
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long)]
        b: f64,
        /// Truncation exponent (tbptt).
        #[arg(long = "trunc")]
        truncation: Option<f64>,
    },
    /// Spectral radius of the state Jacobians along the reference trajectory.
    Stability {
        config: String,
        #[arg(long, default_value_t = 500)]
        window: usize,
        #[arg(long, default_value_t = 50)]
        k_max: usize,
    },
    /// Local optimality of the reference parameter.
    Optimum {
        config: String,
        #[arg(long, default_value_t = 2000)]
        horizon: usize,
    },
    /// Exhaustive sign enumeration of a rank-one reduction.
    Unbiased {
        #[arg(long)]
        reducer: Reducer,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Use a zero system instead of a random recurrent one.
        #[arg(long)]
        zero_system: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sequential: bool,
    },
}

fn verdict(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.jobs {
        set_num_threads(n).map_err(anyhow::Error::msg)?;
    }
    match cli.cmd {
        Cmd::Run(args) => {
            let cfg = args.config(&[])?;
            let summary = harness::run_experiment(&cfg, &args.out)?;
            let converged = summary.rows.iter().filter(|r| r.converged()).count();
            println!("wrote {} trials to {}", summary.rows.len(), summary.dir.display());
            println!("converged: {converged}/{}", summary.rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { run, grid } => {
            let cfg = run.config(&grid)?;
            let rows = harness::run_sweep(&cfg, &run.out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("wrote {} sweep rows ({failed} failed)", rows.len());
            for r in rows.iter().filter(|r| r.error.is_some()) {
                let point: Vec<String> = r.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
                eprintln!("  {}: {}", point.join(" "), r.error.as_deref().unwrap_or(""));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::List => {
            for name in harness::canned_names() {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check(check) => match check {
            Check::Schedule { class, a, gamma, b, truncation } => {
                let class: AlgorithmClass = class.parse()?;
                let v = validate_exponents(&ExponentProfile { a, gamma_loss: gamma, class, truncation }, b);
                println!("{v}");
                Ok(verdict(v.valid))
            }
            Check::Stability { config, window, k_max } => {
                let cfg = harness::load_config(&config)?;
                let profile = harness::check_config_stability(&cfg, window, k_max)?;
                println!("{profile}");
                Ok(verdict(profile.certificate.is_some()))
            }
            Check::Optimum { config, horizon } => {
                let cfg = harness::load_config(&config)?;
                let report = harness::check_config_optimum(&cfg, horizon)?;
                println!("{report}");
                Ok(verdict(report.pass()))
            }
            Check::Unbiased { reducer, dim, steps, zero_system, seed, sequential } => {
                let mut cfg = UnbiasedConfig::new(reducer, dim, steps);
                cfg.seed = seed;
                if zero_system {
                    cfg.system = TestSystem::Zero;
                }
                let mode = if sequential { Mode::Sequential } else { Mode::Parallel };
                let report = verify_unbiased(&cfg, mode).context("unbiasedness check")?;
                println!("{report}");
                Ok(verdict(report.pass()))
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<rtrl_core::Error>().is_some_and(rtrl_core::Error::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
