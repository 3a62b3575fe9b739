//! Receding-horizon execution: plan from the current end-effector state,
//! execute a prefix of the plan as velocity commands, replan.
//!
//! In deadline mode each control step grants the planner `deadline`
//! seconds of compute. A plan that took `L` seconds becomes available
//! `ceil(L / deadline)` steps after it was requested, was conditioned on
//! the observation at request time, and starts from the state the robot
//! will be in when it takes over. Until then the previous plan keeps
//! running; past its end the robot is commanded to stop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::StudentModel;
use crate::envs::{EnvKind, Terminal, World};
use crate::metrics::integrated_squared_jerk;
use crate::nn::forward_calls;
use crate::prodmp::{BoundaryCondition, Trajectory};
use crate::space::TrajectorySpace;
use crate::teacher::TeacherModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerTag {
    Expert,
    Teacher,
    Student,
}

impl PlannerTag {
    pub fn name(self) -> &'static str {
        match self {
            PlannerTag::Expert => "expert",
            PlannerTag::Teacher => "teacher",
            PlannerTag::Student => "student",
        }
    }
}

impl fmt::Display for PlannerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlannerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PlannerTag::Expert),
            "teacher" => Ok(PlannerTag::Teacher),
            "student" => Ok(PlannerTag::Student),
            _ => Err(Error::InvalidConfig(format!(
                "unknown planner {s:?} (expert, teacher, student)"
            ))),
        }
    }
}

/// Something that turns an observation into a plan.
#[derive(Debug, Clone, Copy)]
pub enum Planner<'a> {
    /// Scripted expert rolled out on a copy of the world.
    Expert,
    /// Multi-step sampler.
    Teacher(&'a TeacherModel),
    /// One-step consistency model.
    Student(&'a StudentModel),
}

impl Planner<'_> {
    pub fn tag(&self) -> PlannerTag {
        match self {
            Planner::Expert => PlannerTag::Expert,
            Planner::Teacher(_) => PlannerTag::Teacher,
            Planner::Student(_) => PlannerTag::Student,
        }
    }

    fn space(&self) -> Option<&TrajectorySpace> {
        match self {
            Planner::Expert => None,
            Planner::Teacher(m) => Some(&m.space),
            Planner::Student(m) => Some(&m.space),
        }
    }

    fn obs_dim(&self) -> Option<usize> {
        match self {
            Planner::Expert => None,
            Planner::Teacher(m) => Some(m.obs_dim()),
            Planner::Student(m) => Some(m.obs_dim()),
        }
    }

    /// Checks that a learned planner was built for this world and horizon.
    pub fn check(&self, kind: EnvKind, horizon: usize) -> Result<()> {
        let (Some(space), Some(obs_dim)) = (self.space(), self.obs_dim()) else {
            return Ok(());
        };
        if obs_dim != kind.obs_dim() || space.dof() != kind.dof() {
            return Err(Error::Shape(format!(
                "{} model expects {} observations and {} DoF, {kind} has {} and {}",
                self.tag(),
                obs_dim,
                space.dof(),
                kind.obs_dim(),
                kind.dof()
            )));
        }
        if space.horizon() != horizon || (space.dt() - kind.dt()).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "{} model plans {} steps of {} s, loop wants {horizon} steps of {} s",
                self.tag(),
                space.horizon(),
                space.dt(),
                kind.dt()
            )));
        }
        Ok(())
    }
}

/// A plan at `t_0..t_H` starting at the state it was planned from.
#[derive(Debug, Clone)]
pub struct Plan {
    pub traj: Trajectory,
    /// Network forward passes spent on this plan.
    pub evals: u64,
    /// Wall-clock seconds, when measured.
    pub latency: Option<f64>,
}

/// Plans from `world`'s end-effector state, conditioning learned planners
/// on `obs`. Latency covers sampling and decoding.
pub fn plan<R: Rng + ?Sized>(
    planner: Planner<'_>,
    world: &World,
    obs: &[f64],
    horizon: usize,
    measure: bool,
    rng: &mut R,
) -> Result<Plan> {
    let (pos, vel) = world.ee_state();
    let bc = BoundaryCondition::new(pos.to_vec(), vel.to_vec())?;
    let calls = forward_calls();
    let start = measure.then(Instant::now);
    let traj = match planner {
        Planner::Expert => expert_plan(world, horizon),
        Planner::Teacher(m) => m.sample_multistep(obs, &bc, rng)?.traj,
        Planner::Student(m) => m.one_step_generate(obs, &bc, rng)?.traj,
    };
    let latency = start.map(|s| s.elapsed().as_secs_f64());
    Ok(Plan {
        traj,
        evals: forward_calls() - calls,
        latency,
    })
}

fn expert_plan(world: &World, horizon: usize) -> Trajectory {
    let mut w = world.clone();
    let dof = w.kind().dof();
    let dt = w.kind().dt();
    let mut positions = Vec::with_capacity((horizon + 1) * dof);
    let mut velocities = Vec::with_capacity((horizon + 1) * dof);
    for k in 0..=horizon {
        let (p, v) = w.ee_state();
        positions.extend_from_slice(&p);
        velocities.extend_from_slice(&v);
        if k < horizon {
            let u = w.expert_command();
            w.step(&u);
        }
    }
    Trajectory {
        times: (0..=horizon).map(|k| k as f64 * dt).collect(),
        positions,
        velocities,
        dof,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyMode {
    /// No timing at all.
    Off,
    /// Plans are timed but timing never changes what is executed.
    MeasureOnly,
    /// Slow plans arrive late; see the module documentation.
    SimulateDeadline,
}

impl FromStr for LatencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(LatencyMode::Off),
            "measure-only" => Ok(LatencyMode::MeasureOnly),
            "simulate-deadline" => Ok(LatencyMode::SimulateDeadline),
            _ => Err(Error::InvalidConfig(format!(
                "unknown latency mode {s:?} (off, measure-only, simulate-deadline)"
            ))),
        }
    }
}

impl fmt::Display for LatencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatencyMode::Off => "off",
            LatencyMode::MeasureOnly => "measure-only",
            LatencyMode::SimulateDeadline => "simulate-deadline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub replan_interval: usize,
    pub horizon: usize,
    pub latency_mode: LatencyMode,
    /// Compute budget per control step in seconds.
    pub deadline: f64,
    /// Keep per-step log records in the result.
    pub record_log: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            replan_interval: 4,
            horizon: 20,
            latency_mode: LatencyMode::MeasureOnly,
            deadline: 0.05,
            record_log: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.replan_interval == 0 || self.replan_interval > self.horizon {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= replan_interval ({}) <= horizon ({})",
                self.replan_interval, self.horizon
            )));
        }
        if self.latency_mode == LatencyMode::SimulateDeadline && !(self.deadline > 0.0) {
            return Err(Error::InvalidConfig("deadline must be positive".into()));
        }
        Ok(())
    }
}

/// One executed control step (or the final state, with no action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Seconds since the episode started.
    pub t: f64,
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Vec<f64>>,
    /// Plan being executed, counting from 0; absent before the first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<usize>,
    /// Latency of a plan requested at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
    /// Start-state mismatch of a plan taking over at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handoff_jump: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    pub env: EnvKind,
    pub planner: PlannerTag,
    pub success: bool,
    pub steps: usize,
    /// Measured plan latencies in seconds, in request order.
    pub plan_latencies: Vec<f64>,
    pub plan_evals: Vec<u64>,
    /// Steps at which plans were requested and took over.
    pub plan_requested: Vec<usize>,
    pub plan_applied: Vec<usize>,
    pub max_handoff_jump: f64,
    /// Executed end-effector positions, initial state included.
    pub positions: Vec<f64>,
    pub jerk: f64,
    pub terminal: Terminal,
    pub wall_time: f64,
    #[serde(skip)]
    pub log: Vec<LogRecord>,
}

impl EpisodeResult {
    /// Mean number of steps between plan takeovers, if there were two.
    pub fn effective_replan_interval(&self) -> Option<f64> {
        let a = &self.plan_applied;
        (a.len() > 1).then(|| (a[a.len() - 1] - a[0]) as f64 / (a.len() - 1) as f64)
    }
}

struct Active {
    traj: Trajectory,
    start: usize,
}

fn command(active: Option<&Active>, step: usize, dt: f64, dof: usize) -> Vec<f64> {
    let Some(a) = active else {
        return vec![0.0; dof];
    };
    let j = step - a.start;
    if j + 1 >= a.traj.len() {
        return vec![0.0; dof];
    }
    let p0 = a.traj.position(j);
    let p1 = a.traj.position(j + 1);
    p0.iter().zip(p1).map(|(x, y)| (y - x) / dt).collect()
}

fn handoff_jump(world: &World, traj: &Trajectory) -> f64 {
    let (p, v) = world.ee_state();
    let dp = p.iter().zip(traj.position(0)).map(|(a, b)| (a - b).abs());
    let dv = v.iter().zip(traj.velocity(0)).map(|(a, b)| (a - b).abs());
    dp.chain(dv).fold(0.0, f64::max)
}

/// Runs the receding-horizon loop until the world reports done.
pub fn run_episode<R: Rng + Clone>(
    mut world: World,
    planner: Planner<'_>,
    cfg: &LoopConfig,
    rng: &mut R,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let kind = world.kind();
    planner.check(kind, cfg.horizon)?;
    let dt = kind.dt();
    let measure = cfg.latency_mode != LatencyMode::Off;
    let wall = Instant::now();

    let mut active: Option<Active> = None;
    let mut pending: Option<(Plan, usize)> = None;
    let mut next_request = 0;
    let mut plans = 0usize;
    let mut res = EpisodeResult {
        env: kind,
        planner: planner.tag(),
        success: false,
        steps: 0,
        plan_latencies: Vec::new(),
        plan_evals: Vec::new(),
        plan_requested: Vec::new(),
        plan_applied: Vec::new(),
        max_handoff_jump: 0.0,
        positions: world.ee_state().0.to_vec(),
        jerk: 0.0,
        terminal: world.terminal(),
        wall_time: 0.0,
        log: Vec::new(),
    };

    while !world.is_done() {
        let s = world.steps();
        let mut latency = None;
        if s == next_request {
            let obs = world.observe();
            let snapshot = rng.clone();
            let mut p = plan(planner, &world, &obs, cfg.horizon, measure, rng)?;
            let mut delay = 1;
            if cfg.latency_mode == LatencyMode::SimulateDeadline {
                let l = p.latency.unwrap_or(0.0);
                delay = ((l / cfg.deadline).ceil() as usize).max(1);
                if delay > 1 {
                    // Replan from where the robot will be at takeover,
                    // with the same noise and the now stale observation.
                    let mut ahead = world.clone();
                    for i in 0..delay - 1 {
                        if ahead.is_done() {
                            break;
                        }
                        ahead.step(&command(active.as_ref(), s + i, dt, kind.dof()));
                    }
                    *rng = snapshot;
                    let late = plan(planner, &ahead, &obs, cfg.horizon, false, rng)?;
                    p = Plan {
                        traj: late.traj,
                        evals: p.evals,
                        latency: p.latency,
                    };
                }
            }
            latency = p.latency;
            if let Some(l) = p.latency {
                res.plan_latencies.push(l);
            }
            res.plan_evals.push(p.evals);
            res.plan_requested.push(s);
            next_request = s + cfg.replan_interval.max(delay);
            pending = Some((p, s + delay - 1));
        }
        let mut jump = None;
        if pending.as_ref().is_some_and(|(_, at)| *at == s) {
            let (p, _) = pending.take().expect("pending plan");
            let j = handoff_jump(&world, &p.traj);
            res.max_handoff_jump = res.max_handoff_jump.max(j);
            jump = Some(j);
            res.plan_applied.push(s);
            active = Some(Active {
                traj: p.traj,
                start: s,
            });
            plans += 1;
        }
        let u = command(active.as_ref(), s, dt, kind.dof());
        if cfg.record_log {
            let (pos, vel) = world.ee_state();
            res.log.push(LogRecord {
                step: s,
                t: s as f64 * dt,
                pos: pos.to_vec(),
                vel: vel.to_vec(),
                action: Some(u.clone()),
                plan_id: plans.checked_sub(1),
                latency,
                handoff_jump: jump,
            });
        }
        world.step(&u);
        res.positions.extend_from_slice(&world.ee_state().0);
    }

    if cfg.record_log {
        let (pos, vel) = world.ee_state();
        res.log.push(LogRecord {
            step: world.steps(),
            t: world.steps() as f64 * dt,
            pos: pos.to_vec(),
            vel: vel.to_vec(),
            action: None,
            plan_id: plans.checked_sub(1),
            latency: None,
            handoff_jump: None,
        });
    }
    res.success = world.is_success();
    res.steps = world.steps();
    res.terminal = world.terminal();
    res.jerk = integrated_squared_jerk(&res.positions, kind.dof(), dt);
    res.wall_time = wall.elapsed().as_secs_f64();
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Tier;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: LatencyMode) -> LoopConfig {
        LoopConfig {
            latency_mode: mode,
            record_log: true,
            ..LoopConfig::default()
        }
    }

    #[test]
    fn expert_planner_succeeds_with_continuous_handoffs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [EnvKind::PushBlock, EnvKind::BallCatch(Tier::Easy)] {
            for seed in 0..5 {
                let world = World::new(kind, seed);
                let r = run_episode(
                    world,
                    Planner::Expert,
                    &cfg(LatencyMode::MeasureOnly),
                    &mut rng,
                )
                .unwrap();
                assert!(r.success, "{kind} seed {seed}");
                assert!(r.max_handoff_jump <= 1e-9);
                assert!(r.plan_evals.iter().all(|&e| e == 0));
                assert_eq!(r.plan_latencies.len(), r.plan_requested.len());
                let total: f64 = r.plan_latencies.iter().sum();
                assert!(total <= r.wall_time);
            }
        }
    }

    #[test]
    fn measuring_does_not_change_actions() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let world = World::new(EnvKind::PushBlock, 9);
        let off = run_episode(
            world.clone(),
            Planner::Expert,
            &cfg(LatencyMode::Off),
            &mut a,
        )
        .unwrap();
        let on = run_episode(
            world,
            Planner::Expert,
            &cfg(LatencyMode::MeasureOnly),
            &mut b,
        )
        .unwrap();
        assert_eq!(off.positions, on.positions);
        assert!(off.plan_latencies.is_empty());
        let strip = |r: &EpisodeResult| -> Vec<LogRecord> {
            r.log
                .iter()
                .cloned()
                .map(|mut l| {
                    l.latency = None;
                    l
                })
                .collect()
        };
        assert_eq!(strip(&off), strip(&on));
    }

    #[test]
    fn replans_follow_the_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let world = World::new(EnvKind::PushBlock, 2);
        let r = run_episode(world, Planner::Expert, &cfg(LatencyMode::Off), &mut rng).unwrap();
        assert!(r
            .plan_requested
            .iter()
            .enumerate()
            .all(|(i, &s)| s == 4 * i));
        assert_eq!(r.plan_requested, r.plan_applied);
        assert_eq!(r.effective_replan_interval(), Some(4.0));
    }

    #[test]
    fn log_serializes_one_line_per_record() {
        let rec = LogRecord {
            step: 3,
            t: 0.15,
            pos: vec![0.1, 0.2],
            vel: vec![0.0, 0.0],
            action: Some(vec![0.3, -0.1]),
            plan_id: Some(0),
            latency: None,
            handoff_jump: Some(0.0),
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(!line.contains('\n'));
        assert!(!line.contains("latency"));
        let back: LogRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn interval_bounds_are_validated() {
        let mut c = LoopConfig {
            replan_interval: 21,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.replan_interval = 0;
        assert!(c.validate().is_err());
    }
}
