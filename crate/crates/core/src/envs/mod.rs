//! Toy environments, scripted experts and demonstration datasets.

pub mod ballcatch;
mod dataset;
pub mod pushblock;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ballcatch::{BallCatch, Tier};
pub use dataset::{generate_dataset, Dataset, DatasetConfig, DatasetRecord};
pub use pushblock::PushBlock;

use crate::{Error, Result};

/// Which world to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EnvKind {
    PushBlock,
    BallCatch(Tier),
}

impl EnvKind {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::PushBlock => pushblock::OBS_DIM,
            EnvKind::BallCatch(_) => ballcatch::OBS_DIM,
        }
    }

    pub fn dof(self) -> usize {
        2
    }

    pub fn dt(self) -> f64 {
        match self {
            EnvKind::PushBlock => pushblock::DT,
            EnvKind::BallCatch(_) => ballcatch::DT,
        }
    }

    pub fn max_steps(self) -> usize {
        match self {
            EnvKind::PushBlock => pushblock::MAX_STEPS,
            EnvKind::BallCatch(_) => ballcatch::MAX_STEPS,
        }
    }

    /// Task label used in reports.
    pub fn task(self) -> &'static str {
        match self {
            EnvKind::PushBlock => "push",
            EnvKind::BallCatch(_) => "catch",
        }
    }

    /// Difficulty label used in reports.
    pub fn tier(self) -> &'static str {
        match self {
            EnvKind::PushBlock => "-",
            EnvKind::BallCatch(t) => t.name(),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::PushBlock => write!(f, "push"),
            EnvKind::BallCatch(t) => write!(f, "catch-{}", t.name()),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "push" => Ok(EnvKind::PushBlock),
            "catch-easy" => Ok(EnvKind::BallCatch(Tier::Easy)),
            "catch-medium" => Ok(EnvKind::BallCatch(Tier::Medium)),
            "catch-hard" => Ok(EnvKind::BallCatch(Tier::Hard)),
            _ => Err(Error::InvalidConfig(format!(
                "unknown environment {s:?} (push, catch-easy, catch-medium, catch-hard)"
            ))),
        }
    }
}

impl From<EnvKind> for String {
    fn from(k: EnvKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for EnvKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Task-specific terminal numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Terminal {
    Push { goal_distance: f64 },
    Catch { miss: f64, rel_speed: f64 },
}

/// One running environment instance.
#[derive(Debug, Clone, PartialEq)]
pub enum World {
    Push(PushBlock),
    Catch(BallCatch),
}

impl World {
    pub fn new(kind: EnvKind, seed: u64) -> Self {
        match kind {
            EnvKind::PushBlock => World::Push(PushBlock::new(seed)),
            EnvKind::BallCatch(t) => World::Catch(BallCatch::new(seed, t)),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            World::Push(_) => EnvKind::PushBlock,
            World::Catch(c) => EnvKind::BallCatch(c.tier),
        }
    }

    pub fn observe(&mut self) -> Vec<f64> {
        match self {
            World::Push(e) => e.observe(),
            World::Catch(e) => e.observe(),
        }
    }

    /// End-effector position and velocity.
    pub fn ee_state(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            World::Push(e) => (e.pusher, e.vel),
            World::Catch(e) => (e.ee_pos, e.ee_vel),
        }
    }

    pub fn step(&mut self, cmd: &[f64]) {
        match self {
            World::Push(e) => e.step(cmd),
            World::Catch(e) => e.step(cmd),
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            World::Push(e) => e.steps,
            World::Catch(e) => e.steps,
        }
    }

    pub fn is_success(&self) -> bool {
        match self {
            World::Push(e) => e.is_success(),
            World::Catch(e) => e.is_success(),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            World::Push(e) => e.is_done(),
            World::Catch(e) => e.is_done(),
        }
    }

    /// Scripted expert's next velocity command.
    pub fn expert_command(&self) -> [f64; 2] {
        match self {
            World::Push(e) => pushblock::expert_push(e),
            World::Catch(e) => ballcatch::expert_catch(e),
        }
    }

    pub fn terminal(&self) -> Terminal {
        match self {
            World::Push(e) => Terminal::Push {
                goal_distance: e.goal_distance(),
            },
            World::Catch(e) => {
                let o = e.outcome;
                Terminal::Catch {
                    miss: o.map_or(f64::NAN, |o| o.miss),
                    rel_speed: o.map_or(f64::NAN, |o| o.rel_speed),
                }
            }
        }
    }
}

/// Runs the scripted expert until the episode ends; returns success.
pub fn run_expert(kind: EnvKind, seed: u64) -> bool {
    let mut w = World::new(kind, seed);
    while !w.is_done() {
        let u = w.expert_command();
        w.step(&u);
    }
    w.is_success()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in [
            EnvKind::PushBlock,
            EnvKind::BallCatch(Tier::Easy),
            EnvKind::BallCatch(Tier::Medium),
            EnvKind::BallCatch(Tier::Hard),
        ] {
            assert_eq!(k.to_string().parse::<EnvKind>().unwrap(), k);
        }
        assert!("pong".parse::<EnvKind>().is_err());
    }

    #[test]
    fn identical_actions_give_identical_states() {
        for kind in [EnvKind::PushBlock, EnvKind::BallCatch(Tier::Hard)] {
            let mut a = World::new(kind, 17);
            let mut b = World::new(kind, 17);
            for i in 0..30 {
                let u = [(i as f64 * 0.3).sin() * 0.3, (i as f64 * 0.7).cos() * 0.3];
                a.step(&u);
                b.step(&u);
                assert_eq!(a, b);
                assert_eq!(a.observe(), b.observe());
            }
        }
    }
}
