use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tdcr_core::harness::{benchmark_solver, run_comparison, run_scenario};
use tdcr_core::meshgen;
use tdcr_core::scenario::{ControllerKind, ScenarioConfig};
use tdcr_core::sdf::write_obj;

#[derive(Parser)]
#[command(name = "tdcr", version, about = "Continuum robot controller experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Disturbance seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Controller override.
    #[arg(long)]
    controller: Option<ControllerKind>,
    /// Control rate override (Hz).
    #[arg(long)]
    rate: Option<f64>,
}

impl Common {
    fn load(&self) -> tdcr_core::Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.disturbance.seed = seed;
        }
        if let Some(c) = self.controller {
            cfg.controller = c;
        }
        if let Some(rate) = self.rate {
            cfg.rate = rate;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run two controllers on the same disturbance realisation.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Second config; defaults to the first with the other controller.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve-time statistics.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Horizon override.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Serve the live teleoperation endpoint.
    #[cfg(feature = "teleop")]
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        /// Write metrics.csv and events.jsonl here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the shipped safe-zone meshes.
    Meshes {
        #[arg(long, default_value = "meshes")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> tdcr_core::Result<()> {
    match cli.command {
        Command::Run { common, out } => {
            let cfg = common.load()?;
            let result = run_scenario(&cfg, &out)?;
            let s = &result.summary;
            println!(
                "{}: {} ticks, waypoints reached {}/{}, settle {:?} s, margin violations {}, mean solve {:.2} ms",
                s.name,
                s.ticks,
                s.waypoints.iter().filter(|w| w.reached_tick.is_some()).count(),
                s.waypoints.len(),
                s.settle_time,
                s.margin_violation_ticks,
                s.solve_time.mean_ms
            );
        }
        Command::Compare { common, against, out } => {
            let a = common.load()?;
            let b = match against {
                Some(path) => ScenarioConfig::load(path)?,
                None => {
                    let mut b = a.clone();
                    b.controller = match a.controller {
                        ControllerKind::Mpc => ControllerKind::Dls,
                        ControllerKind::Dls => ControllerKind::Mpc,
                    };
                    b
                }
            };
            let report = run_comparison(&a, &b, Some(&out))?;
            print!("{}", report.table());
        }
        Command::Bench {
            common,
            repetitions,
            horizon,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = horizon {
                cfg.mpc.horizon = n;
            }
            let stats = benchmark_solver(&cfg, repetitions)?;
            println!(
                "N = {}: {} samples, mean {:.3} ms, p95 {:.3} ms, max {:.3} ms",
                cfg.mpc.horizon, stats.samples, stats.mean_ms, stats.p95_ms, stats.max_ms
            );
        }
        #[cfg(feature = "teleop")]
        Command::Serve {
            common,
            bind,
            time_scale,
            out,
        } => {
            let cfg = common.load()?;
            let opts = tdcr_core::teleop::TeleopOptions { time_scale, out };
            tdcr_core::teleop::serve_blocking_with(cfg, &bind, opts)?;
        }
        Command::Meshes { out } => {
            std::fs::create_dir_all(&out)?;
            let meshes = [
                ("cube.obj", "unit cube", meshgen::unit_cube()),
                ("tube.obj", "winding tube", meshgen::winding_tube()),
                ("inverted_u.obj", "inverted U", meshgen::inverted_u()),
                ("box.obj", "box with a wall at x = 40", meshgen::half_space_box()),
            ];
            for (name, comment, (v, t)) in meshes {
                std::fs::write(out.join(name), write_obj(&v, &t, comment))?;
                println!("wrote {}", out.join(name).display());
            }
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
