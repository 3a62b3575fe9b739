//! The declarative run configuration: one TOML file, overridable per key.
//!
//! Every section has defaults, so an empty file is valid. Overrides use
//! dotted keys, `--set teacher.steps=5000`; the value is read as a TOML
//! literal when it parses as one and as a bare string otherwise.

use std::path::Path;

use anyhow::{bail, Context, Result};
use primdiff::control::LoopConfig;
use primdiff::distill::DistillConfig;
use primdiff::envs::DatasetConfig;
use primdiff::teacher::TeacherConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub checkpoints: CheckpointConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
}

/// Which training snapshots are kept: the last `keep`, `every` steps apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub keep: usize,
    pub every: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            keep: 3,
            every: 1000,
        }
    }
}

impl CheckpointConfig {
    /// Whether step index `step` of `steps` is a kept snapshot.
    pub fn keeps(&self, step: usize, steps: usize) -> bool {
        if step >= steps {
            return false;
        }
        let back = steps - 1 - step;
        back.is_multiple_of(self.every) && back / self.every < self.keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episode `i` resets its world with seed `seed + i`.
    pub seed: u64,
    /// Run episodes concurrently. Only honoured outside simulate-deadline
    /// mode, and latencies measured this way share the machine.
    pub parallel_episodes: bool,
    pub control: LoopConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: 1000,
            parallel_episodes: false,
            control: LoopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    /// Untimed plans before timing starts, per method.
    pub warmup: usize,
    /// Distinct observations cycled through, taken from worlds reset with
    /// seeds `seed..seed + inputs`.
    pub inputs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 200,
            warmup: 20,
            inputs: 16,
            seed: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub demos: usize,
    pub data_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            demos: 200,
            data_seed: 1,
        }
    }
}

impl Config {
    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.teacher.steps == 0 || self.distill.steps == 0 {
            bail!("training needs at least one step");
        }
        self.distill.validate(self.teacher.levels)?;
        if self.checkpoints.keep == 0 || self.checkpoints.every == 0 {
            bail!("checkpoints.keep and checkpoints.every must be positive");
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be positive");
        }
        self.eval.control.validate()?;
        if self.eval.control.horizon != self.dataset.horizon {
            bail!(
                "eval.control.horizon {} differs from dataset.horizon {}",
                self.eval.control.horizon,
                self.dataset.horizon
            );
        }
        if self.bench.repetitions == 0 || self.bench.inputs == 0 {
            bail!("bench.repetitions and bench.inputs must be positive");
        }
        if self
            .sweep
            .fractions
            .iter()
            .any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            bail!("sweep fractions must lie in (0, 1]");
        }
        if self.sweep.seeds.is_empty() || self.sweep.demos == 0 {
            bail!("sweep needs seeds and demos");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Sets `key=value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut t = table;
    for p in path {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a table"))?;
    }
    t.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use primdiff::control::LatencyMode;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::load(None, &[]).unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = Config::load(
            None,
            &[
                "teacher.steps=7".into(),
                "teacher.hidden=[8, 8]".into(),
                "eval.control.latency_mode=simulate-deadline".into(),
                "sweep.fractions=[0.5, 1.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.teacher.steps, 7);
        assert_eq!(cfg.teacher.hidden, vec![8, 8]);
        assert_eq!(cfg.eval.control.latency_mode, LatencyMode::SimulateDeadline);
        assert_eq!(cfg.sweep.fractions, vec![0.5, 1.0]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::load(None, &["teacher.stepz=7".into()]).is_err());
        assert!(Config::load(None, &["eval.episodes=0".into()]).is_err());
        assert!(Config::load(None, &["teacher.steps".into()]).is_err());
        assert!(Config::load(None, &["eval.control.replan_interval=50".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::load(None, &["distill.k=2".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn checkpoint_selection_keeps_the_tail() {
        let c = CheckpointConfig { keep: 3, every: 10 };
        let kept: Vec<usize> = (0..100).filter(|&s| c.keeps(s, 100)).collect();
        assert_eq!(kept, vec![79, 89, 99]);
        let kept: Vec<usize> = (0..15).filter(|&s| c.keeps(s, 15)).collect();
        assert_eq!(kept, vec![4, 14]);
    }
}
