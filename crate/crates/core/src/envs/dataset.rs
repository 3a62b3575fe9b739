//! Demonstration datasets: expert rollouts sliced into fixed-length
//! segments, each with its start observation, start state and fitted
//! primitive parameters.
//!
//! Binary layout (little-endian), version 1:
//!
//! ```text
//! magic "PDDATSET", u32 version
//! str env, f64 tau, f64 rate, u32 horizon, u32 dof, u32 obs_dim
//! primitive config (u32 K, f64 alpha, f64 beta, f64 alpha_x, f64 tau,
//!                   u32 dof, u32 grid_points)
//! f64 residual_threshold, u64 demos, u64 failed_demos, u64 discarded
//! obs standardizer, parameter standardizer (each: f64 array mean, scale)
//! u64 record count, then per record:
//!   u32 episode, f64[obs_dim] obs, f64[dof] y0, f64[dof] y0_dot,
//!   f64[(horizon + 1) * dof] segment, f64[dof * (K + 1)] theta, f64 residual
//! ```
//!
//! `f64[n]` arrays carry a `u64` length prefix.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvKind, World};
use crate::codec;
use crate::par::{self, Exec};
use crate::prodmp::{
    fit_params, precompute_basis, read_config, write_config, BasisTable, BoundaryCondition,
    DecodePlan, ProDmpConfig, ProDmpParams, Trajectory,
};
use crate::space::{Standardizer, TrainRecord, TrajectorySpace};
use crate::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"PDDATSET";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Segment length in control steps.
    pub horizon: usize,
    /// Steps between consecutive segment starts.
    pub stride: usize,
    pub num_basis: usize,
    pub alpha: f64,
    pub alpha_x: f64,
    /// Largest accepted position RMS of a fitted segment.
    pub residual_threshold: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            stride: 2,
            num_basis: 10,
            alpha: 25.0,
            alpha_x: 25.0 / 3.0,
            residual_threshold: 4e-3,
        }
    }
}

impl DatasetConfig {
    /// Primitive covering one segment of `kind`.
    pub fn prodmp(&self, kind: EnvKind) -> ProDmpConfig {
        let mut cfg =
            ProDmpConfig::new(self.num_basis, self.horizon as f64 * kind.dt(), kind.dof());
        cfg.alpha = self.alpha;
        cfg.beta = self.alpha / 4.0;
        cfg.alpha_x = self.alpha_x;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.stride < 1 {
            return Err(Error::InvalidConfig(
                "horizon >= 2 and stride >= 1 required".into(),
            ));
        }
        if !(self.residual_threshold > 0.0) {
            return Err(Error::InvalidConfig(
                "residual_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub episode: u32,
    pub obs: Vec<f64>,
    pub bc: BoundaryCondition,
    /// Absolute positions at `t_0..t_H`, row-major.
    pub segment: Vec<f64>,
    pub theta: ProDmpParams,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvKind,
    pub horizon: usize,
    pub prodmp: ProDmpConfig,
    pub residual_threshold: f64,
    pub demos: u64,
    pub failed_demos: u64,
    pub discarded: u64,
    pub obs_std: Standardizer,
    pub theta_std: Standardizer,
    pub records: Vec<DatasetRecord>,
}

struct Rollout {
    obs: Vec<Vec<f64>>,
    pos: Vec<[f64; 2]>,
    vel: Vec<[f64; 2]>,
    /// Last admissible segment start.
    last_start: usize,
}

/// Expert rollout continued `horizon` steps past the end of the episode so
/// every admissible start has a full segment. `None` if the expert failed.
fn rollout(kind: EnvKind, seed: u64, horizon: usize) -> Option<Rollout> {
    let mut w = World::new(kind, seed);
    let mut r = Rollout {
        obs: Vec::new(),
        pos: Vec::new(),
        vel: Vec::new(),
        last_start: 0,
    };
    let record = |w: &mut World, r: &mut Rollout| {
        let (p, v) = w.ee_state();
        r.obs.push(w.observe());
        r.pos.push(p);
        r.vel.push(v);
    };
    record(&mut w, &mut r);
    while !w.is_done() {
        let u = w.expert_command();
        w.step(&u);
        record(&mut w, &mut r);
    }
    if !w.is_success() {
        return None;
    }
    r.last_start = w.steps() - 1;
    for _ in 0..horizon {
        let u = w.expert_command();
        w.step(&u);
        record(&mut w, &mut r);
    }
    Some(r)
}

/// Rolls out the expert on `count` seeded episodes and fits a primitive to
/// every segment. Episodes the expert fails are skipped and counted;
/// segments whose fit residual exceeds the threshold are discarded and
/// counted.
pub fn generate_dataset(
    kind: EnvKind,
    count: usize,
    cfg: &DatasetConfig,
    seed: u64,
    exec: Exec,
) -> Result<Dataset> {
    cfg.validate()?;
    let prodmp = cfg.prodmp(kind);
    let table = precompute_basis(&prodmp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let times: Vec<f64> = (0..=cfg.horizon).map(|k| k as f64 * kind.dt()).collect();
    let dof = kind.dof();

    let per_episode = par::map_range(
        exec,
        count,
        |i| -> Result<Option<(Vec<DatasetRecord>, u64)>> {
            let Some(r) = rollout(kind, seeds[i], cfg.horizon) else {
                return Ok(None);
            };
            let mut out = Vec::new();
            let mut discarded = 0;
            for s in (0..=r.last_start).step_by(cfg.stride) {
                let mut positions = Vec::with_capacity((cfg.horizon + 1) * dof);
                let mut velocities = Vec::with_capacity((cfg.horizon + 1) * dof);
                for k in 0..=cfg.horizon {
                    positions.extend_from_slice(&r.pos[s + k]);
                    velocities.extend_from_slice(&r.vel[s + k]);
                }
                let bc = BoundaryCondition::new(r.pos[s].to_vec(), r.vel[s].to_vec())?;
                let traj = Trajectory {
                    times: times.clone(),
                    positions,
                    velocities,
                    dof,
                };
                let fit = fit_params(&traj, &bc, &table)?;
                if !(fit.residual_rms <= cfg.residual_threshold) {
                    discarded += 1;
                    continue;
                }
                out.push(DatasetRecord {
                    episode: i as u32,
                    obs: r.obs[s].clone(),
                    bc,
                    segment: traj.positions,
                    theta: fit.params,
                    residual: fit.residual_rms,
                });
            }
            Ok(Some((out, discarded)))
        },
    );

    let mut records = Vec::new();
    let mut failed = 0;
    let mut discarded = 0;
    for ep in per_episode {
        match ep? {
            None => failed += 1,
            Some((recs, d)) => {
                records.extend(recs);
                discarded += d;
            }
        }
    }
    let mut ds = Dataset {
        env: kind,
        horizon: cfg.horizon,
        prodmp,
        residual_threshold: cfg.residual_threshold,
        demos: count as u64,
        failed_demos: failed,
        discarded,
        obs_std: Standardizer::identity(kind.obs_dim()),
        theta_std: Standardizer::identity(table.cfg.num_params()),
        records,
    };
    ds.refit_statistics()?;
    Ok(ds)
}

impl Dataset {
    pub fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }

    pub fn dof(&self) -> usize {
        self.prodmp.dof
    }

    pub fn tau(&self) -> f64 {
        self.prodmp.tau
    }

    /// Samples per second along a segment.
    pub fn rate(&self) -> f64 {
        self.horizon as f64 / self.prodmp.tau
    }

    /// Recomputes the observation and relative-parameter standardization
    /// from the current records.
    pub fn refit_statistics(&mut self) -> Result<()> {
        let k = self.prodmp.num_basis;
        self.obs_std = Standardizer::fit(
            self.obs_dim(),
            self.records.iter().map(|r| r.obs.as_slice()),
        )?;
        let rel: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| {
                let mut v = r.theta.as_slice().to_vec();
                for (d, y) in r.bc.y0.iter().enumerate() {
                    v[d * (k + 1) + k] -= y;
                }
                v
            })
            .collect();
        self.theta_std =
            Standardizer::fit(self.prodmp.num_params(), rel.iter().map(|r| r.as_slice()))?;
        Ok(())
    }

    /// Frame for learning on this dataset.
    pub fn space(&self) -> Result<TrajectorySpace> {
        let table: Arc<BasisTable> = Arc::new(precompute_basis(&self.prodmp)?);
        TrajectorySpace::new(table, self.horizon, self.theta_std.clone())
    }

    pub fn train_records(&self, space: &TrajectorySpace) -> Vec<TrainRecord> {
        self.records
            .iter()
            .map(|r| TrainRecord::new(space, &self.obs_std, &r.obs, &r.bc, &r.theta))
            .collect()
    }

    /// Decodes every record's parameters and returns the largest position
    /// RMS against its stored segment; errors if any exceeds the threshold.
    pub fn check_residuals(&self) -> Result<f64> {
        let table = precompute_basis(&self.prodmp)?;
        let times: Vec<f64> = (0..=self.horizon)
            .map(|k| k as f64 * self.env.dt())
            .collect();
        let plan = DecodePlan::new(&table, &times)?;
        let mut worst = 0.0f64;
        for (i, r) in self.records.iter().enumerate() {
            let traj = plan.decode(&r.theta, &r.bc)?;
            let sq: f64 = traj
                .positions
                .iter()
                .zip(&r.segment)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let rms = (sq / r.segment.len() as f64).sqrt();
            if !(rms <= self.residual_threshold) {
                return Err(Error::InvalidConfig(format!(
                    "record {i} decodes {rms:e} from its segment, threshold {:e}",
                    self.residual_threshold
                )));
            }
            worst = worst.max(rms);
        }
        Ok(worst)
    }

    /// Keeps the records of the first `ceil(fraction * episodes)` successful
    /// episodes, keeping the standardization of the full set.
    pub fn subset_episodes(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let mut episodes: Vec<u32> = self.records.iter().map(|r| r.episode).collect();
        episodes.dedup();
        let keep = ((fraction * episodes.len() as f64).ceil() as usize).max(1);
        let allowed: std::collections::HashSet<u32> = episodes.into_iter().take(keep).collect();
        let mut out = self.clone();
        out.records.retain(|r| allowed.contains(&r.episode));
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, DATASET_MAGIC, DATASET_VERSION)?;
        codec::write_str(w, &self.env.to_string())?;
        codec::write_f64(w, self.tau())?;
        codec::write_f64(w, self.rate())?;
        codec::write_u32(w, self.horizon as u32)?;
        codec::write_u32(w, self.dof() as u32)?;
        codec::write_u32(w, self.obs_dim() as u32)?;
        write_config(w, &self.prodmp)?;
        codec::write_f64(w, self.residual_threshold)?;
        codec::write_u64(w, self.demos)?;
        codec::write_u64(w, self.failed_demos)?;
        codec::write_u64(w, self.discarded)?;
        self.obs_std.write_to(w)?;
        self.theta_std.write_to(w)?;
        codec::write_u64(w, self.records.len() as u64)?;
        for r in &self.records {
            codec::write_u32(w, r.episode)?;
            codec::write_f64s(w, &r.obs)?;
            codec::write_f64s(w, &r.bc.y0)?;
            codec::write_f64s(w, &r.bc.y0_dot)?;
            codec::write_f64s(w, &r.segment)?;
            codec::write_f64s(w, r.theta.as_slice())?;
            codec::write_f64(w, r.residual)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, DATASET_MAGIC, DATASET_VERSION)?;
        let env: EnvKind = codec::read_str(r)?.parse()?;
        let tau = codec::read_f64(r)?;
        let _rate = codec::read_f64(r)?;
        let horizon = codec::read_u32(r)? as usize;
        let dof = codec::read_u32(r)? as usize;
        let obs_dim = codec::read_u32(r)? as usize;
        let prodmp = read_config(r)?;
        prodmp.validate()?;
        if obs_dim != env.obs_dim() || dof != prodmp.dof || tau != prodmp.tau {
            return Err(Error::Format("dataset header is inconsistent".into()));
        }
        let residual_threshold = codec::read_f64(r)?;
        let demos = codec::read_u64(r)?;
        let failed_demos = codec::read_u64(r)?;
        let discarded = codec::read_u64(r)?;
        let obs_std = Standardizer::read_from(r)?;
        let theta_std = Standardizer::read_from(r)?;
        let p = prodmp.num_params();
        if obs_std.dim() != obs_dim || theta_std.dim() != p {
            return Err(Error::Format("standardizer dimensions".into()));
        }
        let n = codec::read_u64(r)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let episode = codec::read_u32(r)?;
            let obs = codec::read_f64s(r, Some(obs_dim))?;
            let y0 = codec::read_f64s(r, Some(dof))?;
            let y0_dot = codec::read_f64s(r, Some(dof))?;
            let segment = codec::read_f64s(r, Some((horizon + 1) * dof))?;
            let theta = codec::read_f64s(r, Some(p))?;
            let residual = codec::read_f64(r)?;
            records.push(DatasetRecord {
                episode,
                obs,
                bc: BoundaryCondition::new(y0, y0_dot)?,
                segment,
                theta: ProDmpParams::new(dof, prodmp.num_basis, theta)?,
                residual,
            });
        }
        Ok(Self {
            env,
            horizon,
            prodmp,
            residual_threshold,
            demos,
            failed_demos,
            discarded,
            obs_std,
            theta_std,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Tier;

    #[test]
    fn empty_dataset_round_trips() {
        let ds = generate_dataset(
            EnvKind::PushBlock,
            0,
            &DatasetConfig::default(),
            1,
            Exec::Sequential,
        )
        .unwrap();
        assert!(ds.records.is_empty());
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn small_dataset_round_trips_and_is_deterministic() {
        let kind = EnvKind::BallCatch(Tier::Easy);
        let cfg = DatasetConfig::default();
        let a = generate_dataset(kind, 3, &cfg, 7, Exec::Sequential).unwrap();
        let b = generate_dataset(kind, 3, &cfg, 7, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(!a.records.is_empty());
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), a);
        let worst = a.check_residuals().unwrap();
        assert!(worst <= cfg.residual_threshold);
        assert!(a.records.iter().all(|r| r.residual <= worst + 1e-12));
    }
}
