//! Multi-step diffusion teacher over relative trajectories.
//!
//! Noise is variance-exploding: `tau_sigma = tau_0 + sigma * xi`. The
//! denoiser pulls the noisy trajectory back into parameter space, blends it
//! with the network output, and decodes:
//!
//! ```text
//! z_hat   = c_skip(sigma) * pullback(tau_sigma) + c_out(sigma) / sigma_d * raw
//! tau_hat = base(v0) + M_z z_hat
//! ```
//!
//! with the network fed `[c_in(sigma) * tau_sigma, obs, embed(sigma)]`.
//! Sampling integrates the probability-flow ODE with Euler steps, one
//! denoiser call per level.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::nn::{
    noise_embedding, Activation, AdamConfig, ApproximatorSpec, ApproximatorWeights, OptimizerState,
    Tape,
};
use crate::par::{self, Exec};
use crate::prodmp::{BoundaryCondition, ProDmpParams, Trajectory};
use crate::space::{Standardizer, TrainRecord, TrajectorySpace};
use crate::{Error, Result};

const TEACHER_MAGIC: &[u8; 8] = b"PDTEACH\0";
const TEACHER_VERSION: u32 = 1;

/// Decreasing noise levels shared by the teacher and the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `levels[0] = T > ... > levels[N - 1] = epsilon`.
    pub levels: Vec<f64>,
    pub epsilon: f64,
    pub sigma_data: f64,
}

/// Karras-style levels interpolated linearly in `sigma^(1 / rho)`.
pub fn make_schedule(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<NoiseSchedule> {
    if n < 2 {
        return Err(Error::InvalidConfig(
            "schedule needs at least two levels".into(),
        ));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidConfig("rho must be positive".into()));
    }
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut levels: Vec<f64> = (0..n)
        .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(rho))
        .collect();
    levels[0] = sigma_max;
    levels[n - 1] = sigma_min;
    NoiseSchedule::from_levels(levels, 1.0)
}

impl NoiseSchedule {
    pub fn from_levels(levels: Vec<f64>, sigma_data: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidConfig("empty schedule".into()));
        }
        if levels.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(
                "levels must be positive and finite".into(),
            ));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(
                "levels must be strictly decreasing".into(),
            ));
        }
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::InvalidConfig("sigma_data must be positive".into()));
        }
        let epsilon = *levels.last().unwrap();
        Ok(Self {
            levels,
            epsilon,
            sigma_data,
        })
    }

    pub fn with_sigma_data(mut self, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::InvalidConfig("sigma_data must be positive".into()));
        }
        self.sigma_data = sigma_data;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Largest level `T`.
    pub fn t_max(&self) -> f64 {
        self.levels[0]
    }

    /// Level `t_n` for `n` in `1..=N`, counting up from `t_1 = epsilon`.
    pub fn t(&self, n: usize) -> Result<f64> {
        let len = self.levels.len();
        if n == 0 || n > len {
            return Err(Error::OutOfRange(format!(
                "level index {n} outside 1..={len}"
            )));
        }
        Ok(self.levels[len - n])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_f64s(w, &self.levels)?;
        codec::write_f64(w, self.sigma_data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let levels = codec::read_f64s(r, None)?;
        let sd = codec::read_f64(r)?;
        Self::from_levels(levels, sd)
    }
}

/// `tau0 + sigma * xi` with standard normal `xi`.
pub fn add_noise<R: Rng + ?Sized>(tau0: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    tau0.iter()
        .map(|x| {
            let n: f64 = rng.sample(StandardNormal);
            x + sigma * n
        })
        .collect()
}

/// `(denoised - noisy) / sigma^2`.
pub fn score(traj_hat: &[f64], tau_noisy: &[f64], sigma: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    traj_hat
        .iter()
        .zip(tau_noisy)
        .map(|(d, x)| (d - x) / s2)
        .collect()
}

/// `(c_skip, c_out, c_in)` of the denoiser at level `sigma`.
pub fn preconditioning(sigma: f64, sigma_data: f64) -> (f64, f64, f64) {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let c_skip = d2 / (s2 + d2);
    let c_out = sigma * sigma_data / (s2 + d2).sqrt();
    let c_in = 1.0 / (s2 + d2).sqrt();
    (c_skip, c_out, c_in)
}

/// Training and architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_width: usize,
    pub levels: usize,
    pub sigma_min: f64,
    /// `sigma_max = sigma_max_factor * sigma_data`.
    pub sigma_max_factor: f64,
    pub rho: f64,
    /// Training levels are `ln sigma ~ N(ln sigma_data + p_mean, p_std^2)`.
    pub p_mean: f64,
    pub p_std: f64,
    pub lr: f64,
    /// Learning rate at the last step, as a fraction of `lr` (linear decay).
    pub lr_final_fraction: f64,
    pub batch: usize,
    pub steps: usize,
    /// Extra squared error on standardized parameters.
    pub param_loss_weight: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            activation: Activation::Gelu,
            embed_width: 16,
            levels: 20,
            sigma_min: 0.002,
            sigma_max_factor: 80.0,
            rho: 7.0,
            p_mean: -0.5,
            p_std: 1.2,
            lr: 1e-3,
            lr_final_fraction: 0.05,
            batch: 64,
            steps: 20_000,
            param_loss_weight: 0.0,
            seed: 0,
        }
    }
}

/// Output of a sampler: standardized parameters, absolute parameters, the
/// decoded plan at `t_0..t_H`, and how many network calls produced it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub z: Vec<f64>,
    pub theta: ProDmpParams,
    pub traj: Trajectory,
    pub evals: usize,
}

/// Denoiser `E` with its schedule, frame and observation normalization.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub net: ApproximatorWeights,
    pub schedule: NoiseSchedule,
    pub space: TrajectorySpace,
    pub obs_std: Standardizer,
    pub embed_width: usize,
}

struct Denoised {
    z_hat: Vec<f64>,
    tape: Option<Tape>,
    c_out: f64,
}

impl TeacherModel {
    pub fn new(
        space: TrajectorySpace,
        obs_std: Standardizer,
        schedule: NoiseSchedule,
        cfg: &TeacherConfig,
    ) -> Result<Self> {
        let input = space.traj_dim() + obs_std.dim() + cfg.embed_width;
        let spec = ApproximatorSpec::new(
            input,
            cfg.hidden.clone(),
            space.param_dim(),
            cfg.activation,
            cfg.seed,
        );
        Ok(Self {
            net: ApproximatorWeights::init(&spec)?,
            schedule,
            space,
            obs_std,
            embed_width: cfg.embed_width,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_std.dim()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Shape(format!(
                "observation has {} values, model expects {}",
                obs.len(),
                self.obs_dim()
            )));
        }
        Ok(())
    }

    fn input(&self, tau: &[f64], obs_n: &[f64], sigma: f64, c_in: f64) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.net.spec().input_dim);
        x.extend(tau.iter().map(|v| c_in * v));
        x.extend_from_slice(obs_n);
        x.extend(noise_embedding(sigma, self.embed_width)?);
        Ok(x)
    }

    fn denoise_inner(
        &self,
        tau: &[f64],
        obs_n: &[f64],
        v0: &[f64],
        sigma: f64,
        record: bool,
    ) -> Result<Denoised> {
        let sd = self.schedule.sigma_data;
        let (c_skip, c_out, c_in) = preconditioning(sigma, sd);
        let x = self.input(tau, obs_n, sigma, c_in)?;
        let (raw, tape) = if record {
            let (o, t) = self.net.forward(&x)?;
            (o, Some(t))
        } else {
            (self.net.predict(&x)?, None)
        };
        let proxy = self.space.pullback(tau, v0);
        let z_hat: Vec<f64> = proxy
            .iter()
            .zip(&raw)
            .map(|(p, r)| c_skip * p + c_out / sd * r)
            .collect();
        if z_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(Denoised { z_hat, tape, c_out })
    }

    /// Denoised standardized parameters for a normalized observation.
    pub fn denoise_z(
        &self,
        tau: &[f64],
        obs_n: &[f64],
        v0: &[f64],
        sigma: f64,
    ) -> Result<Vec<f64>> {
        Ok(self.denoise_inner(tau, obs_n, v0, sigma, false)?.z_hat)
    }

    /// Denoises a relative noisy trajectory for a raw observation, returning
    /// absolute parameters and the decoded plan from `bc`.
    pub fn denoise(
        &self,
        tau_noisy: &[f64],
        obs: &[f64],
        bc: &BoundaryCondition,
        sigma: f64,
    ) -> Result<(ProDmpParams, Trajectory)> {
        self.check_obs(obs)?;
        if tau_noisy.len() != self.space.traj_dim() {
            return Err(Error::Shape("noisy trajectory length".into()));
        }
        let obs_n = self.obs_std.apply(obs);
        let z = self.denoise_z(tau_noisy, &obs_n, &bc.y0_dot, sigma)?;
        let theta = self.space.z_to_theta(&z, &bc.y0)?;
        let traj = self.space.decode_z(&z, bc)?;
        Ok((theta, traj))
    }

    /// One Euler step of the probability-flow ODE from `from` to `to`.
    /// Returns the new state and the denoised parameters at `from`.
    pub fn euler_step(
        &self,
        tau: &[f64],
        obs_n: &[f64],
        v0: &[f64],
        from: f64,
        to: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let z_hat = self.denoise_z(tau, obs_n, v0, from)?;
        let d = self.space.z_to_traj(&z_hat, v0);
        let s = score(&d, tau, from);
        // dx/dsigma = -sigma * score
        let next = tau
            .iter()
            .zip(&s)
            .map(|(x, g)| x + (to - from) * (-from * g))
            .collect();
        Ok((next, z_hat))
    }

    /// Runs the sampler in the standardized frame; returns `(z, evals)`.
    pub fn sample_z<R: Rng + ?Sized>(
        &self,
        obs_n: &[f64],
        v0: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, usize)> {
        let levels = &self.schedule.levels;
        let zero = vec![0.0; self.space.traj_dim()];
        let mut tau = add_noise(&zero, levels[0], rng);
        let mut z = Vec::new();
        for (i, &from) in levels.iter().enumerate() {
            let to = levels.get(i + 1).copied().unwrap_or(0.0);
            let (next, z_hat) = self.euler_step(&tau, obs_n, v0, from, to)?;
            tau = next;
            z = z_hat;
        }
        Ok((z, levels.len()))
    }

    /// Full multi-step sample from a raw observation and start state.
    pub fn sample_multistep<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        bc: &BoundaryCondition,
        rng: &mut R,
    ) -> Result<Sample> {
        self.check_obs(obs)?;
        let obs_n = self.obs_std.apply(obs);
        let (z, evals) = self.sample_z(&obs_n, &bc.y0_dot, rng)?;
        let theta = self.space.z_to_theta(&z, &bc.y0)?;
        let traj = self.space.decode_z(&z, bc)?;
        Ok(Sample {
            z,
            theta,
            traj,
            evals,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, TEACHER_MAGIC, TEACHER_VERSION)?;
        self.space.write_to(w)?;
        self.obs_std.write_to(w)?;
        self.schedule.write_to(w)?;
        codec::write_u32(w, self.embed_width as u32)?;
        self.net.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, TEACHER_MAGIC, TEACHER_VERSION)?;
        let space = TrajectorySpace::read_from(r)?;
        let obs_std = Standardizer::read_from(r)?;
        let schedule = NoiseSchedule::read_from(r)?;
        let embed_width = codec::read_u32(r)? as usize;
        let net = ApproximatorWeights::read_from(r)?;
        let spec = net.spec();
        if spec.input_dim != space.traj_dim() + obs_std.dim() + embed_width
            || spec.output_dim != space.param_dim()
        {
            return Err(Error::Format(
                "teacher network does not match its frame".into(),
            ));
        }
        Ok(Self {
            net,
            schedule,
            space,
            obs_std,
            embed_width,
        })
    }
}

/// Pooled standard deviation of the clean relative trajectories.
pub fn estimate_sigma_data(records: &[TrainRecord]) -> Result<f64> {
    let Some(first) = records.first() else {
        return Err(Error::InvalidConfig("no training records".into()));
    };
    let dim = first.tau0.len();
    let std = Standardizer::fit(dim, records.iter().map(|r| r.tau0.as_slice()))?;
    let mut acc = 0.0;
    for r in records {
        for (x, m) in r.tau0.iter().zip(&std.mean) {
            acc += (x - m) * (x - m);
        }
    }
    let sd = (acc / (records.len() * dim) as f64).sqrt();
    if sd > 0.0 {
        Ok(sd)
    } else {
        Err(Error::InvalidConfig(
            "training trajectories have no spread".into(),
        ))
    }
}

struct Draw<'a> {
    rec: &'a TrainRecord,
    sigma: f64,
    xi: Vec<f64>,
}

struct Acc {
    grads: Vec<f64>,
    loss: f64,
}

/// One optimizer step on a batch; returns the mean weighted loss.
pub fn teacher_train_step<R: Rng + ?Sized>(
    model: &mut TeacherModel,
    batch: &[&TrainRecord],
    cfg: &TeacherConfig,
    opt: &mut OptimizerState,
    rng: &mut R,
    exec: Exec,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let sd = model.schedule.sigma_data;
    let (lo, hi) = (model.schedule.epsilon, model.schedule.t_max());
    let draws: Vec<Draw> = batch
        .iter()
        .map(|rec| {
            let n: f64 = rng.sample(StandardNormal);
            let sigma = (sd.ln() + cfg.p_mean + cfg.p_std * n).exp().clamp(lo, hi);
            let xi = (0..rec.tau0.len())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            Draw { rec, sigma, xi }
        })
        .collect();

    let model_ref = &*model;
    let n_params = model_ref.net.num_params();
    let n_traj = model_ref.space.traj_dim() as f64;
    let n_z = model_ref.space.param_dim() as f64;
    let scale = 1.0 / batch.len() as f64;
    let chunks = par::chunked_fold(
        exec,
        &draws,
        || Acc {
            grads: vec![0.0; n_params],
            loss: 0.0,
        },
        |acc: &mut Acc, d: &Draw| {
            // Errors surface through a NaN loss below.
            let r = (|| -> Result<()> {
                let tau: Vec<f64> = d
                    .rec
                    .tau0
                    .iter()
                    .zip(&d.xi)
                    .map(|(x, n)| x + d.sigma * n)
                    .collect();
                let den = model_ref.denoise_inner(&tau, &d.rec.obs, &d.rec.v0, d.sigma, true)?;
                let dz: Vec<f64> = den
                    .z_hat
                    .iter()
                    .zip(&d.rec.z0)
                    .map(|(a, b)| a - b)
                    .collect();
                let err = model_ref.space.apply_m_z(&dz);
                let lambda = (d.sigma * d.sigma + sd * sd) / (d.sigma * sd).powi(2);
                let sq: f64 = err.iter().map(|e| e * e).sum();
                let sqz: f64 = dz.iter().map(|e| e * e).sum();
                acc.loss += scale * (lambda * sq / n_traj + cfg.param_loss_weight * sqz / n_z);
                let g_traj: Vec<f64> = err.iter().map(|e| 2.0 * lambda * e / n_traj).collect();
                let mut g_z = model_ref.space.traj_grad_to_z(&g_traj);
                for (g, e) in g_z.iter_mut().zip(&dz) {
                    *g += 2.0 * cfg.param_loss_weight * e / n_z;
                }
                let k = scale * den.c_out / sd;
                let g_raw: Vec<f64> = g_z.iter().map(|g| g * k).collect();
                model_ref.net.backward_accumulate(
                    den.tape.as_ref().unwrap(),
                    &g_raw,
                    &mut acc.grads,
                )?;
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
        return Err(Error::NonFinite("teacher loss".into()));
    }
    opt.step(&mut model.net, &grads)?;
    Ok(loss)
}

/// Linear learning-rate decay from `lr` to `lr * final_fraction`.
pub fn decayed_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let f = step as f64 / (steps - 1) as f64;
    lr * (1.0 - (1.0 - final_fraction) * f)
}

/// Trains a teacher from scratch. `on_step` sees `(step, loss, model)`
/// after every update.
pub fn train_teacher<R: Rng + ?Sized>(
    space: TrajectorySpace,
    obs_std: Standardizer,
    records: &[TrainRecord],
    cfg: &TeacherConfig,
    rng: &mut R,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64, &TeacherModel) -> Result<()>,
) -> Result<TeacherModel> {
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    let sd = estimate_sigma_data(records)?;
    let schedule = make_schedule(
        cfg.levels,
        cfg.sigma_min,
        cfg.sigma_max_factor * sd,
        cfg.rho,
    )?
    .with_sigma_data(sd)?;
    let mut model = TeacherModel::new(space, obs_std, schedule, cfg)?;
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.net.num_params(),
    );
    for step in 0..cfg.steps {
        opt.cfg.lr = decayed_lr(cfg.lr, cfg.lr_final_fraction, step, cfg.steps);
        let batch: Vec<&TrainRecord> = (0..cfg.batch)
            .map(|_| &records[rng.random_range(0..records.len())])
            .collect();
        let loss = teacher_train_step(&mut model, &batch, cfg, &mut opt, rng, exec)?;
        on_step(step, loss, &model)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_formula() {
        let s = make_schedule(10, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.levels[0], 80.0);
        assert_eq!(s.levels[9], 0.002);
        let a = 80f64.powf(1.0 / 7.0);
        let b = 0.002f64.powf(1.0 / 7.0);
        let mid = (a + 5.0 / 9.0 * (b - a)).powf(7.0);
        assert!((s.levels[5] - mid).abs() <= 1e-12 * mid);
        assert_eq!(s.epsilon, 0.002);
        assert_eq!(s.t(1).unwrap(), 0.002);
        assert_eq!(s.t(10).unwrap(), 80.0);
        assert!(s.t(0).is_err());
    }

    #[test]
    fn rho_one_is_linear() {
        let s = make_schedule(5, 1.0, 3.0, 1.0).unwrap();
        assert!((s.levels[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 0.1, 1.0, 7.0).is_err());
        assert!(make_schedule(5, 1.0, 0.1, 7.0).is_err());
        assert!(make_schedule(5, 0.0, 1.0, 7.0).is_err());
        assert!(make_schedule(5, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn score_scaling() {
        let d = [1.0, -2.0, 0.5];
        let x = [0.0, 0.0, 0.0];
        let a = score(&d, &x, 0.3);
        let b = score(&d, &x, 0.6);
        for (u, v) in a.iter().zip(&b) {
            assert!((u / 4.0 - v).abs() <= 1e-15 * u.abs());
        }
        assert_eq!(score(&d, &d, 0.3), vec![0.0; 3]);
    }

    #[test]
    fn preconditioning_limits() {
        let (s, o, i) = preconditioning(1e-9, 0.5);
        assert!((s - 1.0).abs() < 1e-12 && o < 1e-8 && (i - 2.0).abs() < 1e-8);
        let (s, o, _) = preconditioning(1e6, 0.5);
        assert!(s < 1e-12 && (o - 0.5).abs() < 1e-9);
    }
}
