//! The subcommands as library functions; the binary only parses flags.
//!
//! Each command writes into its own output directory and finishes by
//! writing `manifest.json` there, listing inputs and outputs with hashes.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use primdiff::control::{plan, run_episode, EpisodeResult, LatencyMode, LogRecord, Planner};
use primdiff::distill::{distill, StudentModel};
use primdiff::envs::{generate_dataset, Dataset, EnvKind, Terminal, World};
use primdiff::metrics::{integrated_squared_jerk, mean, velocity_trace, LatencyStats, SuccessRate};
use primdiff::par::{self, Exec};
use primdiff::teacher::{train_teacher, TeacherModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::artifacts::{resolve_out, write_with, ManifestBuilder};
use crate::config::Config;
use crate::plot::{write_svg, Chart, Series};
use crate::report::*;

pub const DATASET_FILE: &str = "dataset.bin";
pub const TEACHER_FILE: &str = "teacher.bin";
pub const STUDENT_FILE: &str = "student.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const LOG_DIR: &str = "logs";
pub const LATENCY_FILE: &str = "latency.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const CURVE_PLOT: &str = "curve.svg";
pub const MOTION_FILE: &str = "motion.csv";
pub const MOTION_SUMMARY_FILE: &str = "motion_summary.csv";
pub const VELOCITY_PLOT: &str = "velocity.svg";
pub const PATH_PLOT: &str = "path.svg";

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Dataset::read_from(&mut BufReader::new(f))
        .with_context(|| format!("reading dataset {}", path.display()))
}

pub fn load_teacher(path: &Path) -> Result<TeacherModel> {
    let f = File::open(path).with_context(|| format!("opening teacher {}", path.display()))?;
    TeacherModel::read_from(&mut BufReader::new(f))
        .with_context(|| format!("reading teacher {}", path.display()))
}

pub fn load_student(path: &Path) -> Result<StudentModel> {
    let f = File::open(path).with_context(|| format!("opening student {}", path.display()))?;
    StudentModel::read_from(&mut BufReader::new(f))
        .with_context(|| format!("reading student {}", path.display()))
}

fn progress(what: &str, step: usize, steps: usize, loss: f64) {
    let tenth = (steps / 10).max(1);
    if (step + 1).is_multiple_of(tenth) || step + 1 == steps {
        eprintln!("{what}: step {}/{steps} loss {loss:.5}", step + 1);
    }
}

/// Mean of the first and last tenth of a loss curve.
fn loss_ends(losses: &[f64]) -> (f64, f64) {
    let n = (losses.len() / 10).max(1).min(losses.len());
    let first = mean(&losses[..n]).unwrap_or(f64::NAN);
    let last = mean(&losses[losses.len() - n..]).unwrap_or(f64::NAN);
    (first, last)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let rows: Vec<LossRow> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow {
            schema: LOSS_SCHEMA.into(),
            step,
            loss,
        })
        .collect();
    write_csv(path, &rows)
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR)
        .join(format!("step-{:07}.bin", step + 1))
}

/// Refuses datasets built with primitive settings other than the config's.
fn check_dataset_matches(ds: &Dataset, cfg: &Config) -> Result<()> {
    let c = &cfg.dataset;
    let p = &ds.prodmp;
    if ds.horizon != c.horizon
        || p.num_basis != c.num_basis
        || p.alpha != c.alpha
        || p.alpha_x != c.alpha_x
    {
        bail!(
            "dataset has horizon {}, {} basis functions, alpha {}, alpha_x {}; \
             config has {}, {}, {}, {}",
            ds.horizon,
            p.num_basis,
            p.alpha,
            p.alpha_x,
            c.horizon,
            c.num_basis,
            c.alpha,
            c.alpha_x
        );
    }
    Ok(())
}

pub struct GenData {
    pub env: EnvKind,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub struct GenDataOutput {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub records: usize,
    pub discarded: u64,
    pub failed_demos: u64,
    pub max_residual: f64,
}

/// Expert rollouts sliced and fitted into a dataset file.
pub fn gen_data(cfg: &Config, a: &GenData) -> Result<GenDataOutput> {
    cfg.validate()?;
    let dir = resolve_out(&a.out);
    let mut m = ManifestBuilder::start(
        "gen-data",
        json!({ "env": a.env, "count": a.count, "seed": a.seed, "out": dir }),
        vec![a.seed],
        cfg,
    );
    let ds = generate_dataset(a.env, a.count, &cfg.dataset, a.seed, Exec::Parallel)?;
    let max_residual = ds.check_residuals()?;
    let path = dir.join(DATASET_FILE);
    write_with(&path, |b| Ok(ds.write_to(b)?))?;
    m.output(&path);
    let total = ds.records.len() as u64 + ds.discarded;
    m.note("records", ds.records.len())?;
    m.note("discarded", ds.discarded)?;
    m.note(
        "discarded_fraction",
        if total > 0 {
            ds.discarded as f64 / total as f64
        } else {
            0.0
        },
    )?;
    m.note("failed_demos", ds.failed_demos)?;
    m.note("max_residual", max_residual)?;
    m.finish(&dir)?;
    eprintln!(
        "gen-data: {} records, {} discarded, {} failed demos -> {}",
        ds.records.len(),
        ds.discarded,
        ds.failed_demos,
        path.display()
    );
    Ok(GenDataOutput {
        dir,
        dataset: path,
        records: ds.records.len(),
        discarded: ds.discarded,
        failed_demos: ds.failed_demos,
        max_residual,
    })
}

pub struct Train {
    pub data: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

pub struct TrainOutput {
    pub dir: PathBuf,
    /// The final model.
    pub model: PathBuf,
    /// Kept snapshots, oldest first; the last is the final model.
    pub checkpoints: Vec<PathBuf>,
    pub losses: Vec<f64>,
}

/// Trains a teacher on a dataset file.
pub fn train_teacher_cmd(cfg: &Config, a: &Train) -> Result<TrainOutput> {
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    check_dataset_matches(&ds, cfg)?;
    ensure!(
        !ds.records.is_empty(),
        "dataset {} has no records",
        a.data.display()
    );
    let dir = resolve_out(&a.out);
    let mut tcfg = cfg.teacher.clone();
    tcfg.seed = a.seed;
    let mut m = ManifestBuilder::start(
        "train-teacher",
        json!({ "data": a.data, "seed": a.seed, "out": dir }),
        vec![a.seed],
        cfg,
    );
    m.input(&a.data);
    let space = ds.space()?;
    let records = ds.train_records(&space);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let steps = tcfg.steps;
    let mut losses = Vec::with_capacity(steps);
    let mut kept = Vec::new();
    let model = train_teacher(
        space,
        ds.obs_std.clone(),
        &records,
        &tcfg,
        &mut rng,
        Exec::Parallel,
        |s, loss, model| {
            losses.push(loss);
            if cfg.checkpoints.keeps(s, steps) {
                kept.push((s, model.clone()));
            }
            progress("train-teacher", s, steps, loss);
            Ok(())
        },
    )?;
    let mut checkpoints = Vec::new();
    for (s, snap) in &kept {
        let p = checkpoint_path(&dir, *s);
        write_with(&p, |b| Ok(snap.write_to(b)?))?;
        m.output(&p);
        checkpoints.push(p);
    }
    let path = dir.join(TEACHER_FILE);
    write_with(&path, |b| Ok(model.write_to(b)?))?;
    m.output(&path);
    let loss_path = dir.join(LOSS_FILE);
    write_losses(&loss_path, &losses)?;
    m.output(&loss_path);
    let (first, last) = loss_ends(&losses);
    m.note("loss_first_tenth", first)?;
    m.note("loss_last_tenth", last)?;
    m.note("sigma_data", model.schedule.sigma_data)?;
    m.note("levels", &model.schedule.levels)?;
    m.finish(&dir)?;
    Ok(TrainOutput {
        dir,
        model: path,
        checkpoints,
        losses,
    })
}

pub struct DistillArgs {
    pub teacher: PathBuf,
    pub data: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

/// Distills a one-step student from a teacher checkpoint.
pub fn distill_cmd(cfg: &Config, a: &DistillArgs) -> Result<TrainOutput> {
    cfg.validate()?;
    let teacher = load_teacher(&a.teacher)?;
    let ds = load_dataset(&a.data)?;
    check_dataset_matches(&ds, cfg)?;
    ensure!(
        !ds.records.is_empty(),
        "dataset {} has no records",
        a.data.display()
    );
    ensure!(
        ds.obs_std == teacher.obs_std && &ds.theta_std == teacher.space.theta_std(),
        "dataset {} is not standardized like teacher {}",
        a.data.display(),
        a.teacher.display()
    );
    let dir = resolve_out(&a.out);
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = a.seed;
    let mut m = ManifestBuilder::start(
        "distill",
        json!({ "teacher": a.teacher, "data": a.data, "seed": a.seed, "out": dir }),
        vec![a.seed],
        cfg,
    );
    m.input(&a.teacher);
    m.input(&a.data);
    let records = ds.train_records(&teacher.space);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let steps = dcfg.steps;
    let mut losses = Vec::with_capacity(steps);
    let mut kept = Vec::new();
    let student = distill(
        &teacher,
        &records,
        &dcfg,
        &mut rng,
        Exec::Parallel,
        |s, loss, st| {
            losses.push(loss);
            if cfg.checkpoints.keeps(s, steps) {
                kept.push((s, st.clone()));
            }
            progress("distill", s, steps, loss);
            Ok(())
        },
    )?;
    let mut checkpoints = Vec::new();
    for (s, snap) in &kept {
        let p = checkpoint_path(&dir, *s);
        write_with(&p, |b| Ok(snap.write_to(b)?))?;
        m.output(&p);
        checkpoints.push(p);
    }
    let path = dir.join(STUDENT_FILE);
    write_with(&path, |b| Ok(student.write_to(b)?))?;
    m.output(&path);
    let loss_path = dir.join(LOSS_FILE);
    write_losses(&loss_path, &losses)?;
    m.output(&loss_path);

    // The written student must still map anything at epsilon to itself.
    let loaded = load_student(&path)?;
    let mut check_rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x5eed);
    for r in records.iter().take(16) {
        let z: Vec<f64> = (0..loaded.space.param_dim())
            .map(|_| check_rng.sample(StandardNormal))
            .collect();
        let out = loaded.consistency_apply(&z, &r.obs, loaded.epsilon())?;
        ensure!(out == z, "student does not reproduce its input at epsilon");
    }
    let (first, last) = loss_ends(&losses);
    m.note("loss_first_tenth", first)?;
    m.note("loss_last_tenth", last)?;
    m.note("boundary_identity", true)?;
    m.finish(&dir)?;
    Ok(TrainOutput {
        dir,
        model: path,
        checkpoints,
        losses,
    })
}

pub struct Eval {
    pub env: EnvKind,
    pub teachers: Vec<PathBuf>,
    pub students: Vec<PathBuf>,
    pub expert: bool,
    pub out: PathBuf,
}

pub struct EvalOutput {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub rows: Vec<EvalRow>,
    pub episodes: Vec<EpisodeRow>,
}

/// Runs every checkpoint of one method for `cfg.eval.episodes` seeded
/// episodes. Checkpoint `c` draws planner noise from stream `c`.
pub fn run_method(
    env: EnvKind,
    planners: &[Planner<'_>],
    cfg: &Config,
) -> Result<Vec<Vec<EpisodeResult>>> {
    let e = &cfg.eval;
    let exec = if e.parallel_episodes && e.control.latency_mode != LatencyMode::SimulateDeadline {
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    planners
        .iter()
        .enumerate()
        .map(|(c, &planner)| {
            par::map_range(exec, e.episodes, |i| {
                let seed = e.seed + i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                run_episode(World::new(env, seed), planner, &e.control, &mut rng)
            })
            .into_iter()
            .collect::<primdiff::Result<Vec<_>>>()
            .map_err(Into::into)
        })
        .collect()
}

fn terminal_cells(t: Terminal) -> (Option<f64>, Option<f64>, Option<f64>) {
    let finite = |v: f64| v.is_finite().then_some(v);
    match t {
        Terminal::Push { goal_distance } => (finite(goal_distance), None, None),
        Terminal::Catch { miss, rel_speed } => (None, finite(miss), finite(rel_speed)),
    }
}

fn ms(v: f64) -> f64 {
    v * 1e3
}

/// Pools episodes of all checkpoints of one method into a report row.
pub fn eval_row(
    env: EnvKind,
    method: &str,
    cfg: &Config,
    runs: &[Vec<EpisodeResult>],
) -> Result<EvalRow> {
    let all: Vec<&EpisodeResult> = runs.iter().flatten().collect();
    ensure!(!all.is_empty(), "no episodes to report for {method}");
    let rate = SuccessRate::from_flags(&all.iter().map(|r| r.success).collect::<Vec<_>>())?;
    let jerks: Vec<f64> = all.iter().map(|r| r.jerk).collect();
    let ok_jerks: Vec<f64> = all.iter().filter(|r| r.success).map(|r| r.jerk).collect();
    let steps: Vec<f64> = all.iter().map(|r| r.steps as f64).collect();
    let plans: u64 = all.iter().map(|r| r.plan_evals.len() as u64).sum();
    let evals: u64 = all.iter().flat_map(|r| r.plan_evals.iter()).sum();
    let intervals: Vec<f64> = all
        .iter()
        .filter_map(|r| r.effective_replan_interval())
        .collect();
    let lat: Vec<f64> = all
        .iter()
        .flat_map(|r| r.plan_latencies.iter().copied())
        .collect();
    let stats = if lat.is_empty() {
        None
    } else {
        Some(LatencyStats::from_samples(&lat)?)
    };
    let ctl = &cfg.eval.control;
    Ok(EvalRow {
        schema: EVAL_SCHEMA.into(),
        env: env.to_string(),
        task: env.task().into(),
        tier: env.tier().into(),
        method: method.into(),
        latency_mode: ctl.latency_mode.to_string(),
        deadline_s: (ctl.latency_mode == LatencyMode::SimulateDeadline).then_some(ctl.deadline),
        checkpoints: runs.len(),
        episodes: all.len(),
        successes: rate.successes,
        success_rate: rate.rate,
        ci_low: rate.ci_low,
        ci_high: rate.ci_high,
        mean_steps: mean(&steps).unwrap_or(0.0),
        isj_mean: mean(&jerks).unwrap_or(0.0),
        isj_success_mean: mean(&ok_jerks),
        max_handoff_jump: all.iter().map(|r| r.max_handoff_jump).fold(0.0, f64::max),
        evals_per_plan: if plans > 0 {
            evals as f64 / plans as f64
        } else {
            0.0
        },
        effective_replan_interval: mean(&intervals),
        latency_mean_ms: stats.map(|s| ms(s.mean)),
        latency_std_ms: stats.and_then(|s| s.std.map(ms)),
        latency_p50_ms: stats.map(|s| ms(s.p50)),
        latency_p90_ms: stats.map(|s| ms(s.p90)),
        latency_p99_ms: stats.map(|s| ms(s.p99)),
    })
}

fn episode_rows(method: &str, cfg: &Config, runs: &[Vec<EpisodeResult>]) -> Vec<EpisodeRow> {
    let mut out = Vec::new();
    for (c, eps) in runs.iter().enumerate() {
        for (i, r) in eps.iter().enumerate() {
            let (goal_distance, miss, rel_speed) = terminal_cells(r.terminal);
            out.push(EpisodeRow {
                schema: EPISODES_SCHEMA.into(),
                method: method.into(),
                checkpoint: c,
                episode: i,
                env_seed: cfg.eval.seed + i as u64,
                success: r.success,
                steps: r.steps,
                plans: r.plan_evals.len(),
                isj: r.jerk,
                max_handoff_jump: r.max_handoff_jump,
                goal_distance,
                miss,
                rel_speed,
                latency_mean_ms: mean(&r.plan_latencies).map(ms),
                wall_time_s: r.wall_time,
            });
        }
    }
    out
}

/// Writes one JSON object per line.
pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    write_with(path, |b| {
        for rec in log {
            serde_json::to_writer(&mut *b, rec)?;
            b.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).with_context(|| format!("opening log {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: bad log record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Evaluates the expert and any teacher and student checkpoints.
pub fn eval_cmd(cfg: &Config, a: &Eval) -> Result<EvalOutput> {
    cfg.validate()?;
    ensure!(
        a.expert || !a.teachers.is_empty() || !a.students.is_empty(),
        "nothing to evaluate: pass --expert, --teacher or --student"
    );
    let dir = resolve_out(&a.out);
    let mut m = ManifestBuilder::start(
        "eval",
        json!({
            "env": a.env,
            "teachers": a.teachers,
            "students": a.students,
            "expert": a.expert,
            "out": dir,
        }),
        vec![cfg.eval.seed],
        cfg,
    );
    let teachers: Vec<TeacherModel> = a
        .teachers
        .iter()
        .map(|p| load_teacher(p))
        .collect::<Result<_>>()?;
    let students: Vec<StudentModel> = a
        .students
        .iter()
        .map(|p| load_student(p))
        .collect::<Result<_>>()?;
    for p in a.teachers.iter().chain(&a.students) {
        m.input(p);
    }
    let mut groups: Vec<(&str, Vec<Planner<'_>>)> = Vec::new();
    if a.expert {
        groups.push(("expert", vec![Planner::Expert]));
    }
    if !teachers.is_empty() {
        groups.push(("teacher", teachers.iter().map(Planner::Teacher).collect()));
    }
    if !students.is_empty() {
        groups.push(("student", students.iter().map(Planner::Student).collect()));
    }
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    for (method, planners) in &groups {
        for p in planners {
            p.check(a.env, cfg.eval.control.horizon)
                .with_context(|| format!("{method} checkpoint does not fit {}", a.env))?;
        }
        let runs = run_method(a.env, planners, cfg)?;
        if cfg.eval.control.record_log {
            for (c, eps) in runs.iter().enumerate() {
                for (i, r) in eps.iter().enumerate() {
                    let p = dir
                        .join(LOG_DIR)
                        .join(format!("{method}-c{c}-e{i:03}.jsonl"));
                    write_log(&p, &r.log)?;
                    m.output(&p);
                }
            }
        }
        let row = eval_row(a.env, method, cfg, &runs)?;
        eprintln!(
            "eval {} {method}: {}/{} success [{:.3}, {:.3}]",
            a.env, row.successes, row.episodes, row.ci_low, row.ci_high
        );
        rows.push(row);
        episodes.extend(episode_rows(method, cfg, &runs));
    }
    let csv = dir.join(EVAL_FILE);
    write_csv(&csv, &rows)?;
    m.output(&csv);
    let ep_csv = dir.join(EPISODES_FILE);
    write_csv(&ep_csv, &episodes)?;
    m.output(&ep_csv);
    m.finish(&dir)?;
    Ok(EvalOutput {
        dir,
        csv,
        rows,
        episodes,
    })
}

pub struct Bench {
    pub env: EnvKind,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub out: PathBuf,
}

pub struct BenchOutput {
    pub dir: PathBuf,
    pub rows: Vec<LatencyRow>,
    pub wall_time_s: f64,
}

fn time_plans(planner: Planner<'_>, worlds: &mut [World], cfg: &Config) -> Result<(Vec<f64>, f64)> {
    let b = &cfg.bench;
    let horizon = cfg.eval.control.horizon;
    let obs: Vec<Vec<f64>> = worlds.iter_mut().map(|w| w.observe()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    for i in 0..b.warmup {
        let k = i % worlds.len();
        plan(planner, &worlds[k], &obs[k], horizon, true, &mut rng)?;
    }
    let mut lat = Vec::with_capacity(b.repetitions);
    let mut evals = 0u64;
    for i in 0..b.repetitions {
        let k = i % worlds.len();
        let mut rng = ChaCha8Rng::seed_from_u64(b.seed + i as u64);
        let p = plan(planner, &worlds[k], &obs[k], horizon, true, &mut rng)?;
        lat.push(p.latency.expect("measured plan"));
        evals += p.evals;
    }
    Ok((lat, evals as f64 / b.repetitions as f64))
}

/// Per-plan latency of teacher and student on the same inputs, one plan
/// at a time on the calling thread.
pub fn bench_latency_cmd(cfg: &Config, a: &Bench) -> Result<BenchOutput> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let dir = resolve_out(&a.out);
    let b = &cfg.bench;
    let mut m = ManifestBuilder::start(
        "bench-latency",
        json!({ "env": a.env, "teacher": a.teacher, "student": a.student, "out": dir }),
        vec![b.seed],
        cfg,
    );
    m.input(&a.teacher);
    m.input(&a.student);
    let teacher = load_teacher(&a.teacher)?;
    let student = load_student(&a.student)?;
    let horizon = cfg.eval.control.horizon;
    let mut rows = Vec::new();
    let mut teacher_mean = None;
    for (method, planner, path) in [
        ("teacher", Planner::Teacher(&teacher), &a.teacher),
        ("student", Planner::Student(&student), &a.student),
    ] {
        planner.check(a.env, horizon)?;
        let mut worlds: Vec<World> = (0..b.inputs as u64)
            .map(|i| World::new(a.env, b.seed + i))
            .collect();
        let (lat, evals) = time_plans(planner, &mut worlds, cfg)?;
        let s = LatencyStats::from_samples(&lat)?;
        let base = *teacher_mean.get_or_insert(s.mean);
        rows.push(LatencyRow {
            schema: LATENCY_SCHEMA.into(),
            method: method.into(),
            checkpoint: path.display().to_string(),
            evals_per_plan: evals,
            warmup: b.warmup,
            repetitions: b.repetitions,
            mean_ms: ms(s.mean),
            std_ms: s.std.map(ms),
            min_ms: ms(s.min),
            p50_ms: ms(s.p50),
            p90_ms: ms(s.p90),
            p99_ms: ms(s.p99),
            max_ms: ms(s.max),
            ratio_to_teacher: Some(s.mean / base),
        });
        eprintln!(
            "bench-latency {method}: mean {:.4} ms over {} plans",
            ms(s.mean),
            b.repetitions
        );
    }
    let csv = dir.join(LATENCY_FILE);
    write_csv(&csv, &rows)?;
    m.output(&csv);
    m.finish(&dir)?;
    Ok(BenchOutput {
        dir,
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub struct Sweep {
    pub env: EnvKind,
    pub out: PathBuf,
}

pub struct SweepOutput {
    pub dir: PathBuf,
    pub rows: Vec<CurveRow>,
}

fn curve_row(
    env: EnvKind,
    fraction: f64,
    demos: usize,
    seed: Option<u64>,
    method: &str,
    successes: usize,
    n: usize,
) -> Result<CurveRow> {
    let r = SuccessRate::new(successes, n)?;
    Ok(CurveRow {
        schema: CURVE_SCHEMA.into(),
        env: env.to_string(),
        fraction,
        demos,
        seed,
        method: method.into(),
        episodes: n,
        successes,
        success_rate: r.rate,
        ci_low: r.ci_low,
        ci_high: r.ci_high,
    })
}

/// Retrains teacher and student on growing prefixes of one dataset and
/// evaluates both. Each cell keeps its own manifests.
pub fn sweep_cmd(cfg: &Config, a: &Sweep) -> Result<SweepOutput> {
    cfg.validate()?;
    let s = &cfg.sweep;
    let dir = resolve_out(&a.out);
    let mut m = ManifestBuilder::start(
        "sweep-data-efficiency",
        json!({ "env": a.env, "out": dir }),
        s.seeds.clone(),
        cfg,
    );
    let data = gen_data(
        cfg,
        &GenData {
            env: a.env,
            count: s.demos,
            seed: s.data_seed,
            out: dir.join("data"),
        },
    )?;
    m.input(&data.dataset);
    let full = load_dataset(&data.dataset)?;
    let mut rows = Vec::new();
    for &fraction in &s.fractions {
        let sub = full.subset_episodes(fraction)?;
        let mut eps: Vec<u32> = sub.records.iter().map(|r| r.episode).collect();
        eps.dedup();
        let demos = eps.len();
        let cell_root = dir.join(format!("fraction-{fraction}"));
        let sub_path = cell_root.join(DATASET_FILE);
        write_with(&sub_path, |b| Ok(sub.write_to(b)?))?;
        m.output(&sub_path);
        let mut pooled = [("teacher", 0usize, 0usize), ("student", 0, 0)];
        for &seed in &s.seeds {
            let cell = cell_root.join(format!("seed-{seed}"));
            let t = train_teacher_cmd(
                cfg,
                &Train {
                    data: sub_path.clone(),
                    seed,
                    out: cell.join("teacher"),
                },
            )?;
            let st = distill_cmd(
                cfg,
                &DistillArgs {
                    teacher: t.model.clone(),
                    data: sub_path.clone(),
                    seed,
                    out: cell.join("student"),
                },
            )?;
            let ev = eval_cmd(
                cfg,
                &Eval {
                    env: a.env,
                    teachers: vec![t.model.clone()],
                    students: vec![st.model.clone()],
                    expert: false,
                    out: cell.join("eval"),
                },
            )?;
            m.output(&ev.csv);
            for (row, acc) in ev.rows.iter().zip(pooled.iter_mut()) {
                acc.1 += row.successes;
                acc.2 += row.episodes;
                rows.push(curve_row(
                    a.env,
                    fraction,
                    demos,
                    Some(seed),
                    &row.method,
                    row.successes,
                    row.episodes,
                )?);
            }
        }
        for (method, k, n) in pooled {
            rows.push(curve_row(a.env, fraction, demos, None, method, k, n)?);
        }
    }
    let csv = dir.join(CURVE_FILE);
    write_csv(&csv, &rows)?;
    m.output(&csv);

    let pooled: Vec<&CurveRow> = rows.iter().filter(|r| r.seed.is_none()).collect();
    let mut series = Vec::new();
    for method in ["teacher", "student"] {
        let mut pts: Vec<(f64, f64)> = pooled
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.demos as f64, r.success_rate))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Reported, not enforced: small evaluations are noisy.
        let monotone = pts.windows(2).all(|w| w[1].1 >= w[0].1);
        m.note(&format!("{method}_monotone"), monotone)?;
        eprintln!("sweep {method}: success non-decreasing in demos: {monotone}");
        series.push(Series {
            name: method.into(),
            points: pts,
        });
    }
    let plot = dir.join(CURVE_PLOT);
    write_svg(
        &plot,
        &Chart {
            title: &format!("{} success vs demonstrations", a.env),
            x_label: "demonstrations",
            y_label: "success rate",
            series,
            markers: true,
        },
    )?;
    m.output(&plot);
    m.finish(&dir)?;
    Ok(SweepOutput { dir, rows })
}

pub struct Motion {
    pub log: PathBuf,
    pub out: PathBuf,
}

pub struct MotionOutput {
    pub dir: PathBuf,
    pub rows: Vec<MotionRow>,
    pub summary: MotionSummaryRow,
}

/// Velocity traces, jerk and handoff continuity of one episode log.
pub fn motion_report_cmd(cfg: &Config, a: &Motion) -> Result<MotionOutput> {
    let dir = resolve_out(&a.out);
    let mut m = ManifestBuilder::start(
        "motion-report",
        json!({ "log": a.log, "out": dir }),
        vec![],
        cfg,
    );
    m.input(&a.log);
    let log = read_log(&a.log)?;
    ensure!(!log.is_empty(), "log {} has no records", a.log.display());
    ensure!(
        log.iter().all(|r| r.pos.len() == 2 && r.vel.len() == 2),
        "motion reports cover two-axis logs"
    );
    let dt = if log.len() > 1 {
        log[1].t - log[0].t
    } else {
        0.0
    };
    ensure!(
        log.len() < 2 || dt > 0.0,
        "log {} does not advance in time",
        a.log.display()
    );
    let positions: Vec<f64> = log.iter().flat_map(|r| r.pos.iter().copied()).collect();
    let fd = if dt > 0.0 {
        velocity_trace(&positions, 2, dt)
    } else {
        Vec::new()
    };
    let rows: Vec<MotionRow> = log
        .iter()
        .enumerate()
        .map(|(k, r)| MotionRow {
            schema: MOTION_SCHEMA.into(),
            step: r.step,
            t: r.t,
            pos_0: r.pos[0],
            pos_1: r.pos[1],
            vel_0: r.vel[0],
            vel_1: r.vel[1],
            fd_vel_0: (k > 0).then(|| fd[(k - 1) * 2]),
            fd_vel_1: (k > 0).then(|| fd[(k - 1) * 2 + 1]),
            plan_id: r.plan_id,
            handoff_jump: r.handoff_jump,
        })
        .collect();
    let mut plan_ids: Vec<usize> = log.iter().filter_map(|r| r.plan_id).collect();
    plan_ids.dedup();
    let summary = MotionSummaryRow {
        schema: MOTION_SUMMARY_SCHEMA.into(),
        steps: log.len() - 1,
        duration_s: log[log.len() - 1].t - log[0].t,
        plans: plan_ids.len(),
        isj: if dt > 0.0 {
            integrated_squared_jerk(&positions, 2, dt)
        } else {
            0.0
        },
        max_handoff_jump: log
            .iter()
            .filter_map(|r| r.handoff_jump)
            .fold(0.0, f64::max),
        max_speed: log
            .iter()
            .map(|r| r.vel[0].hypot(r.vel[1]))
            .fold(0.0, f64::max),
    };
    let csv = dir.join(MOTION_FILE);
    write_csv(&csv, &rows)?;
    m.output(&csv);
    let sum_csv = dir.join(MOTION_SUMMARY_FILE);
    write_csv(&sum_csv, std::slice::from_ref(&summary))?;
    m.output(&sum_csv);

    let trace = |f: &dyn Fn(&MotionRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.t, v))).collect()
    };
    let vel_plot = dir.join(VELOCITY_PLOT);
    write_svg(
        &vel_plot,
        &Chart {
            title: "velocity per axis",
            x_label: "t [s]",
            y_label: "velocity",
            series: vec![
                Series {
                    name: "axis 0".into(),
                    points: trace(&|r| Some(r.vel_0)),
                },
                Series {
                    name: "axis 1".into(),
                    points: trace(&|r| Some(r.vel_1)),
                },
                Series {
                    name: "axis 0 (differenced)".into(),
                    points: trace(&|r| r.fd_vel_0),
                },
                Series {
                    name: "axis 1 (differenced)".into(),
                    points: trace(&|r| r.fd_vel_1),
                },
            ],
            markers: false,
        },
    )?;
    m.output(&vel_plot);
    let path_plot = dir.join(PATH_PLOT);
    write_svg(
        &path_plot,
        &Chart {
            title: "end-effector path",
            x_label: "axis 0",
            y_label: "axis 1",
            series: vec![Series {
                name: "path".into(),
                points: rows.iter().map(|r| (r.pos_0, r.pos_1)).collect(),
            }],
            markers: true,
        },
    )?;
    m.output(&path_plot);
    m.note("isj", summary.isj)?;
    m.note("max_handoff_jump", summary.max_handoff_jump)?;
    m.finish(&dir)?;
    Ok(MotionOutput { dir, rows, summary })
}
