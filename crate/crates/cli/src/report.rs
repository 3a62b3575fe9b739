//! Versioned CSV schemas. Every row starts with a `schema` cell naming its
//! layout; `docs/csv-schemas.md` describes each column.

use std::path::Path;

use anyhow::Result;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::artifacts::write_with;

pub const EVAL_SCHEMA: &str = "eval/1";
pub const EPISODES_SCHEMA: &str = "episodes/1";
pub const LATENCY_SCHEMA: &str = "latency/1";
pub const LOSS_SCHEMA: &str = "loss/1";
pub const CURVE_SCHEMA: &str = "curve/1";
pub const MOTION_SCHEMA: &str = "motion/1";
pub const MOTION_SUMMARY_SCHEMA: &str = "motion-summary/1";

/// One method on one environment, pooled over checkpoints and episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub schema: String,
    pub env: String,
    pub task: String,
    pub tier: String,
    pub method: String,
    pub latency_mode: String,
    pub deadline_s: Option<f64>,
    pub checkpoints: usize,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_steps: f64,
    pub isj_mean: f64,
    pub isj_success_mean: Option<f64>,
    pub max_handoff_jump: f64,
    pub evals_per_plan: f64,
    pub effective_replan_interval: Option<f64>,
    pub latency_mean_ms: Option<f64>,
    pub latency_std_ms: Option<f64>,
    pub latency_p50_ms: Option<f64>,
    pub latency_p90_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
}

pub const EVAL_COLUMNS: &[&str] = &[
    "schema",
    "env",
    "task",
    "tier",
    "method",
    "latency_mode",
    "deadline_s",
    "checkpoints",
    "episodes",
    "successes",
    "success_rate",
    "ci_low",
    "ci_high",
    "mean_steps",
    "isj_mean",
    "isj_success_mean",
    "max_handoff_jump",
    "evals_per_plan",
    "effective_replan_interval",
    "latency_mean_ms",
    "latency_std_ms",
    "latency_p50_ms",
    "latency_p90_ms",
    "latency_p99_ms",
];

/// Columns holding wall-clock measurements.
pub const EVAL_TIMING_COLUMNS: &[&str] = &[
    "latency_mean_ms",
    "latency_std_ms",
    "latency_p50_ms",
    "latency_p90_ms",
    "latency_p99_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub schema: String,
    pub method: String,
    pub checkpoint: usize,
    pub episode: usize,
    pub env_seed: u64,
    pub success: bool,
    pub steps: usize,
    pub plans: usize,
    pub isj: f64,
    pub max_handoff_jump: f64,
    pub goal_distance: Option<f64>,
    pub miss: Option<f64>,
    pub rel_speed: Option<f64>,
    pub latency_mean_ms: Option<f64>,
    pub wall_time_s: f64,
}

pub const EPISODES_COLUMNS: &[&str] = &[
    "schema",
    "method",
    "checkpoint",
    "episode",
    "env_seed",
    "success",
    "steps",
    "plans",
    "isj",
    "max_handoff_jump",
    "goal_distance",
    "miss",
    "rel_speed",
    "latency_mean_ms",
    "wall_time_s",
];

pub const EPISODES_TIMING_COLUMNS: &[&str] = &["latency_mean_ms", "wall_time_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub schema: String,
    pub method: String,
    pub checkpoint: String,
    pub evals_per_plan: f64,
    pub warmup: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub std_ms: Option<f64>,
    pub min_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// This method's mean over the teacher's mean.
    pub ratio_to_teacher: Option<f64>,
}

pub const LATENCY_COLUMNS: &[&str] = &[
    "schema",
    "method",
    "checkpoint",
    "evals_per_plan",
    "warmup",
    "repetitions",
    "mean_ms",
    "std_ms",
    "min_ms",
    "p50_ms",
    "p90_ms",
    "p99_ms",
    "max_ms",
    "ratio_to_teacher",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub schema: String,
    pub step: usize,
    pub loss: f64,
}

pub const LOSS_COLUMNS: &[&str] = &["schema", "step", "loss"];

/// Success at one data fraction; `seed` is empty on rows pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub schema: String,
    pub env: String,
    pub fraction: f64,
    pub demos: usize,
    pub seed: Option<u64>,
    pub method: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const CURVE_COLUMNS: &[&str] = &[
    "schema",
    "env",
    "fraction",
    "demos",
    "seed",
    "method",
    "episodes",
    "successes",
    "success_rate",
    "ci_low",
    "ci_high",
];

/// One logged step. Finite-difference velocities are empty on the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRow {
    pub schema: String,
    pub step: usize,
    pub t: f64,
    pub pos_0: f64,
    pub pos_1: f64,
    pub vel_0: f64,
    pub vel_1: f64,
    pub fd_vel_0: Option<f64>,
    pub fd_vel_1: Option<f64>,
    pub plan_id: Option<usize>,
    pub handoff_jump: Option<f64>,
}

pub const MOTION_COLUMNS: &[&str] = &[
    "schema",
    "step",
    "t",
    "pos_0",
    "pos_1",
    "vel_0",
    "vel_1",
    "fd_vel_0",
    "fd_vel_1",
    "plan_id",
    "handoff_jump",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSummaryRow {
    pub schema: String,
    pub steps: usize,
    pub duration_s: f64,
    pub plans: usize,
    pub isj: f64,
    pub max_handoff_jump: f64,
    pub max_speed: f64,
}

pub const MOTION_SUMMARY_COLUMNS: &[&str] = &[
    "schema",
    "steps",
    "duration_s",
    "plans",
    "isj",
    "max_handoff_jump",
    "max_speed",
];

/// Writes `rows` with a header atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_with(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// The header row of a CSV file.
pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.headers()?.iter().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_of<T: Serialize>(row: T) -> Vec<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        text.lines()
            .next()
            .unwrap()
            .split(',')
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn headers_match_pinned_columns() {
        let eval = EvalRow {
            schema: EVAL_SCHEMA.into(),
            env: "push".into(),
            task: "push".into(),
            tier: "-".into(),
            method: "student".into(),
            latency_mode: "measure-only".into(),
            deadline_s: None,
            checkpoints: 1,
            episodes: 2,
            successes: 1,
            success_rate: 0.5,
            ci_low: 0.1,
            ci_high: 0.9,
            mean_steps: 10.0,
            isj_mean: 1.0,
            isj_success_mean: None,
            max_handoff_jump: 0.0,
            evals_per_plan: 1.0,
            effective_replan_interval: Some(4.0),
            latency_mean_ms: None,
            latency_std_ms: None,
            latency_p50_ms: None,
            latency_p90_ms: None,
            latency_p99_ms: None,
        };
        assert_eq!(header_of(eval), EVAL_COLUMNS);
        let ep = EpisodeRow {
            schema: EPISODES_SCHEMA.into(),
            method: "teacher".into(),
            checkpoint: 0,
            episode: 0,
            env_seed: 0,
            success: true,
            steps: 1,
            plans: 1,
            isj: 0.0,
            max_handoff_jump: 0.0,
            goal_distance: None,
            miss: None,
            rel_speed: None,
            latency_mean_ms: None,
            wall_time_s: 0.0,
        };
        assert_eq!(header_of(ep), EPISODES_COLUMNS);
        let lat = LatencyRow {
            schema: LATENCY_SCHEMA.into(),
            method: "student".into(),
            checkpoint: "s.bin".into(),
            evals_per_plan: 1.0,
            warmup: 1,
            repetitions: 1,
            mean_ms: 1.0,
            std_ms: None,
            min_ms: 1.0,
            p50_ms: 1.0,
            p90_ms: 1.0,
            p99_ms: 1.0,
            max_ms: 1.0,
            ratio_to_teacher: None,
        };
        assert_eq!(header_of(lat), LATENCY_COLUMNS);
        let loss = LossRow {
            schema: LOSS_SCHEMA.into(),
            step: 0,
            loss: 1.0,
        };
        assert_eq!(header_of(loss), LOSS_COLUMNS);
        let curve = CurveRow {
            schema: CURVE_SCHEMA.into(),
            env: "push".into(),
            fraction: 1.0,
            demos: 1,
            seed: None,
            method: "teacher".into(),
            episodes: 1,
            successes: 1,
            success_rate: 1.0,
            ci_low: 0.2,
            ci_high: 1.0,
        };
        assert_eq!(header_of(curve), CURVE_COLUMNS);
        let motion = MotionRow {
            schema: MOTION_SCHEMA.into(),
            step: 0,
            t: 0.0,
            pos_0: 0.0,
            pos_1: 0.0,
            vel_0: 0.0,
            vel_1: 0.0,
            fd_vel_0: None,
            fd_vel_1: None,
            plan_id: None,
            handoff_jump: None,
        };
        assert_eq!(header_of(motion), MOTION_COLUMNS);
        let summary = MotionSummaryRow {
            schema: MOTION_SUMMARY_SCHEMA.into(),
            steps: 0,
            duration_s: 0.0,
            plans: 0,
            isj: 0.0,
            max_handoff_jump: 0.0,
            max_speed: 0.0,
        };
        assert_eq!(header_of(summary), MOTION_SUMMARY_COLUMNS);
    }

    #[test]
    fn absent_values_are_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let row = LossRow {
            schema: LOSS_SCHEMA.into(),
            step: 3,
            loss: 0.25,
        };
        write_csv(&p, std::slice::from_ref(&row)).unwrap();
        assert_eq!(read_csv::<LossRow>(&p).unwrap(), vec![row]);
        let curve = CurveRow {
            schema: CURVE_SCHEMA.into(),
            env: "push".into(),
            fraction: 0.5,
            demos: 10,
            seed: None,
            method: "student".into(),
            episodes: 4,
            successes: 2,
            success_rate: 0.5,
            ci_low: 0.15,
            ci_high: 0.85,
        };
        let p = dir.path().join("c.csv");
        write_csv(&p, &[curve]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",10,,student,"));
    }
}
