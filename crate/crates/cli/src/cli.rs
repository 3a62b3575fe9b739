//! Flag parsing. Command flags are shorthands for config overrides and are
//! applied after `--set`, so they win.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use primdiff::control::LatencyMode;
use primdiff::envs::EnvKind;

use crate::commands::*;
use crate::config::Config;

#[derive(Debug, Parser)]
#[command(
    name = "primdiff",
    version,
    about = "Movement-primitive diffusion teacher and one-step student"
)]
pub struct Cli {
    /// TOML configuration file; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set teacher.steps=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write a dataset.
    GenData {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-step teacher.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shorthand for `--set teacher.steps=N`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a one-step student from a teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shorthand for `--set distill.steps=N`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop success, latency and smoothness.
    Eval {
        #[arg(long)]
        env: EnvKind,
        /// Teacher checkpoint; repeat to pool several.
        #[arg(long)]
        teacher: Vec<PathBuf>,
        /// Student checkpoint; repeat to pool several.
        #[arg(long)]
        student: Vec<PathBuf>,
        /// Also evaluate the scripted expert.
        #[arg(long)]
        expert: bool,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-plan latency of teacher and student on identical inputs.
    BenchLatency {
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Shorthand for `--set bench.repetitions=N`.
        #[arg(long)]
        repetitions: Option<usize>,
        /// Shorthand for `--set bench.warmup=N`.
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success against the number of demonstrations.
    SweepDataEfficiency {
        #[arg(long)]
        env: EnvKind,
        /// Comma-separated, e.g. `0.25,0.5,1`.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Velocity traces, jerk and handoff continuity of an episode log.
    MotionReport {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Shorthand for `--set eval.episodes=N`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Shorthand for `--set eval.seed=N`.
    #[arg(long = "episode-seed")]
    pub episode_seed: Option<u64>,
    /// Shorthand for `--set eval.control.latency_mode=MODE`.
    #[arg(long)]
    pub mode: Option<LatencyMode>,
    /// Shorthand for `--set eval.control.deadline=S`.
    #[arg(long)]
    pub deadline: Option<f64>,
    /// Write one JSONL log per episode.
    #[arg(long)]
    pub logs: bool,
}

impl EvalFlags {
    fn overrides(&self, out: &mut Vec<String>) {
        if let Some(n) = self.episodes {
            out.push(format!("eval.episodes={n}"));
        }
        if let Some(s) = self.episode_seed {
            out.push(format!("eval.seed={s}"));
        }
        if let Some(m) = self.mode {
            out.push(format!("eval.control.latency_mode=\"{m}\""));
        }
        if let Some(d) = self.deadline {
            out.push(format!("eval.control.deadline={d:?}"));
        }
        if self.logs {
            out.push("eval.control.record_log=true".into());
        }
    }
}

impl Cli {
    /// `--set` overrides followed by those implied by command flags.
    pub fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        match &self.command {
            Command::TrainTeacher { steps: Some(n), .. } => o.push(format!("teacher.steps={n}")),
            Command::Distill { steps: Some(n), .. } => o.push(format!("distill.steps={n}")),
            Command::Eval { eval, .. } => eval.overrides(&mut o),
            Command::BenchLatency {
                repetitions,
                warmup,
                ..
            } => {
                if let Some(n) = repetitions {
                    o.push(format!("bench.repetitions={n}"));
                }
                if let Some(n) = warmup {
                    o.push(format!("bench.warmup={n}"));
                }
            }
            Command::SweepDataEfficiency {
                fractions,
                seeds,
                eval,
                ..
            } => {
                if let Some(f) = fractions {
                    o.push(format!("sweep.fractions={f:?}"));
                }
                if let Some(s) = seeds {
                    o.push(format!("sweep.seeds={s:?}"));
                }
                eval.overrides(&mut o);
            }
            _ => {}
        }
        o
    }

    pub fn config(&self) -> Result<Config> {
        Config::load(self.config.as_deref(), &self.overrides())
    }
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config()?;
    match cli.command {
        Command::GenData {
            env,
            count,
            seed,
            out,
        } => {
            gen_data(
                &cfg,
                &GenData {
                    env,
                    count,
                    seed,
                    out,
                },
            )?;
        }
        Command::TrainTeacher {
            data, seed, out, ..
        } => {
            let o = train_teacher_cmd(&cfg, &Train { data, seed, out })?;
            println!("{}", o.model.display());
        }
        Command::Distill {
            teacher,
            data,
            seed,
            out,
            ..
        } => {
            let o = distill_cmd(
                &cfg,
                &DistillArgs {
                    teacher,
                    data,
                    seed,
                    out,
                },
            )?;
            println!("{}", o.model.display());
        }
        Command::Eval {
            env,
            teacher,
            student,
            expert,
            out,
            ..
        } => {
            let o = eval_cmd(
                &cfg,
                &Eval {
                    env,
                    teachers: teacher,
                    students: student,
                    expert,
                    out,
                },
            )?;
            println!("{}", o.csv.display());
        }
        Command::BenchLatency {
            env,
            teacher,
            student,
            out,
            ..
        } => {
            let o = bench_latency_cmd(
                &cfg,
                &Bench {
                    env,
                    teacher,
                    student,
                    out,
                },
            )?;
            for r in &o.rows {
                println!(
                    "{}: mean {:.4} ms, ratio to teacher {:.4}",
                    r.method,
                    r.mean_ms,
                    r.ratio_to_teacher.unwrap_or(f64::NAN)
                );
            }
        }
        Command::SweepDataEfficiency { env, out, .. } => {
            let o = sweep_cmd(&cfg, &Sweep { env, out })?;
            println!("{}", o.dir.join(CURVE_FILE).display());
        }
        Command::MotionReport { log, out } => {
            let o = motion_report_cmd(&cfg, &Motion { log, out })?;
            println!(
                "isj {:.6e}, max handoff jump {:.3e}",
                o.summary.isj, o.summary.max_handoff_jump
            );
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}
