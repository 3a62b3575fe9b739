//! One-step consistency student distilled from the teacher.
//!
//! The student works in the standardized parameter frame:
//!
//! ```text
//! f(z, o, t) = c_skip(t) * z + c_out(t) / sigma_d * raw(z, o, t)
//! c_skip(t)  = sigma_d^2 / ((t - eps)^2 + sigma_d^2)
//! c_out(t)   = sigma_d * (t - eps) / sqrt(t^2 + sigma_d^2)
//! ```
//!
//! so `f(z, o, eps) = z` for any weights. Training pairs come from the
//! teacher: its parameter estimate at `t_{n+k}` is the student input, and
//! the EMA target's output on the teacher's estimate one ODE hop lower is
//! the regression target.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::nn::{
    noise_embedding, Activation, AdamConfig, ApproximatorSpec, ApproximatorWeights, OptimizerState,
};
use crate::par::{self, Exec};
use crate::prodmp::BoundaryCondition;
use crate::space::{Standardizer, TrainRecord, TrajectorySpace};
use crate::teacher::{decayed_lr, NoiseSchedule, Sample, TeacherModel};
use crate::{Error, Result};

const STUDENT_MAGIC: &[u8; 8] = b"PDSTUDT\0";
const STUDENT_VERSION: u32 = 1;

/// Distance between student outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    /// Mean squared difference.
    SquaredL2,
    /// `sqrt(|a - b|^2 / n + c^2) - c`.
    PseudoHuber { c: f64 },
}

impl Metric {
    /// Value and gradient with respect to `a`.
    fn eval(self, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let n = a.len() as f64;
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum::<f64>() / n;
        match self {
            Metric::SquaredL2 => (sq, diff.iter().map(|d| 2.0 * d / n).collect()),
            Metric::PseudoHuber { c } => {
                let r = (sq + c * c).sqrt();
                (r - c, diff.iter().map(|d| d / (n * r)).collect())
            }
        }
    }
}

/// Weight on each noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Teacher ODE hops bridged per pair.
    pub k: usize,
    /// EMA rate of the target network.
    pub mu: f64,
    pub lambda: LambdaRule,
    pub metric: Metric,
    pub steps: usize,
    pub batch: usize,
    /// Fraction of samples whose input is drawn from `N(0, I)` at level `T`.
    pub top_level_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_width: usize,
    pub lr: f64,
    pub lr_final_fraction: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 1,
            mu: 0.95,
            lambda: LambdaRule::Uniform,
            metric: Metric::SquaredL2,
            steps: 5_000,
            batch: 64,
            top_level_fraction: 0.25,
            hidden: vec![256, 256],
            activation: Activation::Gelu,
            embed_width: 16,
            lr: 1e-3,
            lr_final_fraction: 0.05,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.k < 1 || self.k + 1 > levels {
            return Err(Error::InvalidConfig(format!(
                "skip interval {} outside 1..={}",
                self.k,
                levels.saturating_sub(1)
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidConfig(format!(
                "EMA rate {} outside [0, 1]",
                self.mu
            )));
        }
        if !(0.0..=1.0).contains(&self.top_level_fraction) {
            return Err(Error::InvalidConfig(
                "top_level_fraction outside [0, 1]".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if let Metric::PseudoHuber { c } = self.metric {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(
                    "pseudo-Huber constant must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Boundary-respecting skip and output scales of the student.
pub fn consistency_scales(t: f64, epsilon: f64, sigma_data: f64) -> (f64, f64) {
    let d2 = sigma_data * sigma_data;
    let s = t - epsilon;
    let c_skip = d2 / (s * s + d2);
    let c_out = sigma_data * s / (t * t + d2).sqrt();
    (c_skip, c_out)
}

/// Student network `f_phi`, its EMA target `f_phi-`, and everything needed
/// to generate without the teacher.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub online: ApproximatorWeights,
    pub target: ApproximatorWeights,
    pub schedule: NoiseSchedule,
    pub space: TrajectorySpace,
    pub obs_std: Standardizer,
    pub embed_width: usize,
}

impl StudentModel {
    /// Fresh student sharing the teacher's frame and schedule; the target
    /// starts as a copy of the online weights.
    pub fn new(teacher: &TeacherModel, cfg: &DistillConfig) -> Result<Self> {
        let p = teacher.space.param_dim();
        let spec = ApproximatorSpec::new(
            p + teacher.obs_dim() + cfg.embed_width,
            cfg.hidden.clone(),
            p,
            cfg.activation,
            cfg.seed,
        );
        let online = ApproximatorWeights::init(&spec)?;
        Ok(Self {
            target: online.clone(),
            online,
            schedule: teacher.schedule.clone(),
            space: teacher.space.clone(),
            obs_std: teacher.obs_std.clone(),
            embed_width: cfg.embed_width,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.epsilon
    }

    pub fn t_max(&self) -> f64 {
        self.schedule.t_max()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_std.dim()
    }

    fn input(&self, z: &[f64], obs_n: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.online.spec().input_dim);
        x.extend_from_slice(z);
        x.extend_from_slice(obs_n);
        x.extend(noise_embedding(t, self.embed_width)?);
        Ok(x)
    }

    fn check_level(&self, t: f64) -> Result<()> {
        let (lo, hi) = (self.epsilon(), self.t_max());
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange(format!("level {t} outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// `f(z, o, t)` with the given weights and a normalized observation.
    pub fn apply_with(
        &self,
        weights: &ApproximatorWeights,
        z: &[f64],
        obs_n: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        self.check_level(t)?;
        let sd = self.schedule.sigma_data;
        let (c_skip, c_out) = consistency_scales(t, self.epsilon(), sd);
        if c_out == 0.0 {
            return Ok(z.to_vec());
        }
        let raw = weights.predict(&self.input(z, obs_n, t)?)?;
        let out: Vec<f64> = z
            .iter()
            .zip(&raw)
            .map(|(a, r)| c_skip * a + c_out / sd * r)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("student output".into()));
        }
        Ok(out)
    }

    /// Online consistency function on a normalized observation.
    pub fn consistency_apply(&self, z: &[f64], obs_n: &[f64], t: f64) -> Result<Vec<f64>> {
        self.apply_with(&self.online, z, obs_n, t)
    }

    /// One network evaluation from `z_T ~ N(0, I)` at level `T`.
    pub fn one_step_generate<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        bc: &BoundaryCondition,
        rng: &mut R,
    ) -> Result<Sample> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Shape(format!(
                "observation has {} values, model expects {}",
                obs.len(),
                self.obs_dim()
            )));
        }
        let obs_n = self.obs_std.apply(obs);
        let z_t: Vec<f64> = (0..self.space.param_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z = self.consistency_apply(&z_t, &obs_n, self.t_max())?;
        let theta = self.space.z_to_theta(&z, &bc.y0)?;
        let traj = self.space.decode_z(&z, bc)?;
        Ok(Sample {
            z,
            theta,
            traj,
            evals: 1,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, STUDENT_MAGIC, STUDENT_VERSION)?;
        self.space.write_to(w)?;
        self.obs_std.write_to(w)?;
        self.schedule.write_to(w)?;
        codec::write_f64(w, self.epsilon())?;
        codec::write_f64(w, self.t_max())?;
        codec::write_u32(w, self.embed_width as u32)?;
        self.online.write_to(w)?;
        self.target.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, STUDENT_MAGIC, STUDENT_VERSION)?;
        let space = TrajectorySpace::read_from(r)?;
        let obs_std = Standardizer::read_from(r)?;
        let schedule = NoiseSchedule::read_from(r)?;
        let eps = codec::read_f64(r)?;
        let t_max = codec::read_f64(r)?;
        if eps != schedule.epsilon || t_max != schedule.t_max() {
            return Err(Error::Format(
                "student level range disagrees with its schedule".into(),
            ));
        }
        let embed_width = codec::read_u32(r)? as usize;
        let online = ApproximatorWeights::read_from(r)?;
        let target = ApproximatorWeights::read_from(r)?;
        let p = space.param_dim();
        if online.spec() != target.spec()
            || online.spec().input_dim != p + obs_std.dim() + embed_width
            || online.spec().output_dim != p
        {
            return Err(Error::Format(
                "student networks do not match their frame".into(),
            ));
        }
        Ok(Self {
            online,
            target,
            schedule,
            space,
            obs_std,
            embed_width,
        })
    }
}

/// `phi_minus <- mu * phi_minus + (1 - mu) * phi`.
pub fn ema_update(
    phi_minus: &mut ApproximatorWeights,
    phi: &ApproximatorWeights,
    mu: f64,
) -> Result<()> {
    phi_minus.ema_toward(phi, mu)
}

/// Chained Euler hops of the teacher's probability-flow ODE from level
/// `t_{n+k}` down to `t_n` (indices count up from `t_1 = epsilon`).
/// Returns the trajectory at `t_n` and the teacher's parameter estimate at
/// the starting level.
pub fn teacher_k_step(
    teacher: &TeacherModel,
    tau: &[f64],
    obs_n: &[f64],
    v0: &[f64],
    n: usize,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = &teacher.schedule;
    if n < 1 || n + k > s.len() {
        return Err(Error::OutOfRange(format!(
            "hop from level {} to {n} outside 1..={}",
            n + k,
            s.len()
        )));
    }
    let mut x = tau.to_vec();
    let mut first = None;
    for m in (n..n + k).rev() {
        let (next, z_hat) = teacher.euler_step(&x, obs_n, v0, s.t(m + 1)?, s.t(m)?)?;
        first.get_or_insert(z_hat);
        x = next;
    }
    let first = match first {
        Some(z) => z,
        None => teacher.denoise_z(&x, obs_n, v0, s.t(n)?)?,
    };
    Ok((x, first))
}

struct Draw<'a> {
    rec: &'a TrainRecord,
    /// Lower level index `n`.
    n: usize,
    xi: Vec<f64>,
    /// Replaces the teacher estimate as input when drawn at the top level.
    z_top: Option<Vec<f64>>,
}

struct Acc {
    grads: Vec<f64>,
    loss: f64,
}

/// One distillation step: regression of the online student at `t_{n+k}`
/// onto the EMA target at `t_n`, then the EMA update. Returns the mean
/// loss.
pub fn distill_step<R: Rng + ?Sized>(
    teacher: &TeacherModel,
    student: &mut StudentModel,
    batch: &[&TrainRecord],
    cfg: &DistillConfig,
    opt: &mut OptimizerState,
    rng: &mut R,
    exec: Exec,
) -> Result<f64> {
    let levels = teacher.schedule.len();
    cfg.validate(levels)?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let p = student.space.param_dim();
    let draws: Vec<Draw> = batch
        .iter()
        .map(|rec| {
            let top = rng.random::<f64>() < cfg.top_level_fraction;
            let n = if top {
                levels - cfg.k
            } else {
                rng.random_range(1..=levels - cfg.k)
            };
            let xi = (0..rec.tau0.len())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let z_top = top.then(|| (0..p).map(|_| rng.sample(StandardNormal)).collect());
            Draw { rec, n, xi, z_top }
        })
        .collect();

    let st = &*student;
    let sd = st.schedule.sigma_data;
    let eps = st.epsilon();
    let n_params = st.online.num_params();
    let scale = 1.0 / batch.len() as f64;
    let chunks = par::chunked_fold(
        exec,
        &draws,
        || Acc {
            grads: vec![0.0; n_params],
            loss: 0.0,
        },
        |acc: &mut Acc, d: &Draw| {
            let r = (|| -> Result<()> {
                let s = &teacher.schedule;
                let t_hi = s.t(d.n + cfg.k)?;
                let t_lo = s.t(d.n)?;
                let tau: Vec<f64> = d
                    .rec
                    .tau0
                    .iter()
                    .zip(&d.xi)
                    .map(|(x, e)| x + t_hi * e)
                    .collect();
                let (tau_lo, z_hi) =
                    teacher_k_step(teacher, &tau, &d.rec.obs, &d.rec.v0, d.n, cfg.k)?;
                let z_lo = teacher.denoise_z(&tau_lo, &d.rec.obs, &d.rec.v0, t_lo)?;
                let target = st.apply_with(&st.target, &z_lo, &d.rec.obs, t_lo)?;
                let input = d.z_top.as_ref().unwrap_or(&z_hi);
                let (c_skip, c_out) = consistency_scales(t_hi, eps, sd);
                let (raw, tape) = st.online.forward(&st.input(input, &d.rec.obs, t_hi)?)?;
                let out: Vec<f64> = input
                    .iter()
                    .zip(&raw)
                    .map(|(a, r)| c_skip * a + c_out / sd * r)
                    .collect();
                let (loss, g) = cfg.metric.eval(&out, &target);
                acc.loss += scale * loss;
                let g_raw: Vec<f64> = g.iter().map(|v| scale * c_out / sd * v).collect();
                st.online
                    .backward_accumulate(&tape, &g_raw, &mut acc.grads)?;
                Ok(())
            })();
            if r.is_err() {
                acc.loss = f64::NAN;
            }
        },
    );
    let mut grads = vec![0.0; n_params];
    let mut loss = 0.0;
    for c in chunks {
        loss += c.loss;
        for (g, x) in grads.iter_mut().zip(&c.grads) {
            *g += x;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    opt.step(&mut student.online, &grads)?;
    let online = student.online.clone();
    ema_update(&mut student.target, &online, cfg.mu)?;
    Ok(loss)
}

/// Distills a fresh student. `on_step` sees `(step, loss, student)` after
/// every update.
pub fn distill<R: Rng + ?Sized>(
    teacher: &TeacherModel,
    records: &[TrainRecord],
    cfg: &DistillConfig,
    rng: &mut R,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64, &StudentModel) -> Result<()>,
) -> Result<StudentModel> {
    cfg.validate(teacher.schedule.len())?;
    if records.is_empty() {
        return Err(Error::InvalidConfig("no training records".into()));
    }
    let mut student = StudentModel::new(teacher, cfg)?;
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        student.online.num_params(),
    );
    for step in 0..cfg.steps {
        opt.cfg.lr = decayed_lr(cfg.lr, cfg.lr_final_fraction, step, cfg.steps);
        let batch: Vec<&TrainRecord> = (0..cfg.batch)
            .map(|_| &records[rng.random_range(0..records.len())])
            .collect();
        let loss = distill_step(teacher, &mut student, &batch, cfg, &mut opt, rng, exec)?;
        on_step(step, loss, &student)?;
    }
    Ok(student)
}

/// Mean cross-level discrepancy of the student along teacher ODE paths,
/// and the mean norm of the clean parameters, over `records`.
///
/// Each record is noised to the top level and integrated down by the
/// teacher; at every level the teacher's parameter estimate is mapped
/// through the student, and all pairs of outputs are compared.
pub fn self_consistency<R: Rng + ?Sized>(
    teacher: &TeacherModel,
    student: &StudentModel,
    records: &[TrainRecord],
    rng: &mut R,
    exec: Exec,
) -> Result<(f64, f64)> {
    let levels = teacher.schedule.levels.clone();
    let draws: Vec<(&TrainRecord, Vec<f64>)> = records
        .iter()
        .map(|r| {
            let xi = (0..r.tau0.len())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            (r, xi)
        })
        .collect();
    let per = par::map(exec, &draws, |(rec, xi)| -> Result<(f64, f64)> {
        let mut tau: Vec<f64> = rec
            .tau0
            .iter()
            .zip(xi)
            .map(|(x, e)| x + levels[0] * e)
            .collect();
        let mut outs = Vec::with_capacity(levels.len());
        for (i, &from) in levels.iter().enumerate() {
            let to = levels.get(i + 1).copied().unwrap_or(0.0);
            let (next, z_hat) = teacher.euler_step(&tau, &rec.obs, &rec.v0, from, to)?;
            outs.push(student.consistency_apply(&z_hat, &rec.obs, from)?);
            tau = next;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                let d: f64 = outs[i]
                    .iter()
                    .zip(&outs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sum += d;
                count += 1;
            }
        }
        let norm = rec.z0.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok((sum / count.max(1) as f64, norm))
    });
    let mut disc = 0.0;
    let mut norm = 0.0;
    for r in &per {
        let (d, n) = r.as_ref().map_err(|e| Error::NonFinite(e.to_string()))?;
        disc += d;
        norm += n;
    }
    let n = per.len().max(1) as f64;
    Ok((disc / n, norm / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_respect_boundary() {
        let (s, o) = consistency_scales(0.002, 0.002, 0.3);
        assert_eq!(s, 1.0);
        assert_eq!(o, 0.0);
        let (s, o) = consistency_scales(80.0, 0.002, 0.3);
        assert!(s < 1e-4 && (o - 0.3).abs() < 1e-3);
    }

    #[test]
    fn metric_gradients() {
        let a = [0.3, -1.0, 2.0];
        let b = [0.1, 0.5, 1.0];
        for m in [Metric::SquaredL2, Metric::PseudoHuber { c: 0.03 }] {
            let (_, g) = m.eval(&a, &b);
            for i in 0..3 {
                let h = 1e-6;
                let mut ap = a;
                ap[i] += h;
                let mut am = a;
                am[i] -= h;
                let fd = (m.eval(&ap, &b).0 - m.eval(&am, &b).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "{m:?} {i}: {fd} vs {}", g[i]);
            }
            assert_eq!(m.eval(&a, &a).0, 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DistillConfig::default();
        assert!(c.validate(20).is_ok());
        c.k = 20;
        assert!(c.validate(20).is_err());
        c.k = 1;
        c.mu = 1.5;
        assert!(c.validate(20).is_err());
    }
}
