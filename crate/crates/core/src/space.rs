//! The frame the learning components work in.
//!
//! Both networks see trajectories relative to the plan start: the vector
//! `tau` holds positions at `t_k = k * dt`, `k = 1..=H`, minus `y0`, laid
//! out `k * dof + d`. Parameters are likewise made relative (goal minus
//! `y0`) and standardized per coordinate. With the decoder `M` at those
//! times and the standardizer `(mu, s)`, the SVD `M diag(s) = U S V^T`
//! gives the coordinates `z = S V^T (theta_rel - mu) / s`, in which
//!
//! ```text
//! tau = base(v0) + M_z z,    M_z = U,    base(v0) = v0 * y2(t_k) + M mu
//! ```
//!
//! The start position drops out, only the start velocity remains as an
//! offset, and `M_z` has orthonormal columns: isotropic noise on `tau`
//! pulls back to isotropic noise on `z` instead of being amplified along
//! directions the decoder barely moves.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::codec;
use crate::prodmp::{
    precompute_basis, read_config, write_config, BasisTable, BoundaryCondition, DecodePlan,
    ProDmpConfig, ProDmpParams, Trajectory,
};
use crate::{Error, Result};

/// Per-coordinate affine normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and population standard deviation over `rows`. Coordinates with
    /// (near) zero spread keep unit scale.
    pub fn fit<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row of {} values, expected {dim}",
                    row.len()
                )));
            }
            n += 1;
            for (j, &x) in row.iter().enumerate() {
                let delta = x - mean[j];
                mean[j] += delta / n as f64;
                m2[j] += delta * (x - mean[j]);
            }
        }
        if n == 0 {
            return Ok(Self::identity(dim));
        }
        let scale = m2
            .iter()
            .zip(&mean)
            .map(|(&s, &m)| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-9 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_f64s(w, &self.mean)?;
        codec::write_f64s(w, &self.scale)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mean = codec::read_f64s(r, None)?;
        let scale = codec::read_f64s(r, Some(mean.len()))?;
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Format("standardizer scale must be positive".into()));
        }
        Ok(Self { mean, scale })
    }
}

/// Start position and velocity read from an observation whose first
/// `2 * dof` entries are end-effector position then velocity.
pub fn bc_from_obs(obs: &[f64], dof: usize) -> Result<BoundaryCondition> {
    if obs.len() < 2 * dof {
        return Err(Error::Shape(format!(
            "observation of length {} has no end-effector state for {dof} DoF",
            obs.len()
        )));
    }
    BoundaryCondition::new(obs[..dof].to_vec(), obs[dof..2 * dof].to_vec())
}

/// One training example in the learning frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    /// Normalized observation.
    pub obs: Vec<f64>,
    /// Start velocity.
    pub v0: Vec<f64>,
    /// Standardized relative parameters.
    pub z0: Vec<f64>,
    /// `base(v0) + M_z z0`, the clean relative trajectory.
    pub tau0: Vec<f64>,
}

impl TrainRecord {
    pub fn new(
        space: &TrajectorySpace,
        obs_std: &Standardizer,
        obs: &[f64],
        bc: &BoundaryCondition,
        theta: &ProDmpParams,
    ) -> Self {
        let z0 = space.theta_to_z(theta, &bc.y0);
        let tau0 = space.z_to_traj(&z0, &bc.y0_dot);
        Self {
            obs: obs_std.apply(obs),
            v0: bc.y0_dot.clone(),
            z0,
            tau0,
        }
    }
}

/// Relative, standardized parameter and trajectory frame for one basis.
#[derive(Debug, Clone)]
pub struct TrajectorySpace {
    table: Arc<BasisTable>,
    horizon: usize,
    dt: f64,
    theta_std: Standardizer,
    /// Decoder at `t_1..t_H`.
    rel: DecodePlan,
    /// Decoder at `t_0..t_H`.
    full: DecodePlan,
    m_z: DMatrix<f64>,
    /// `S V^T`, standardized parameters to `z`.
    whiten: DMatrix<f64>,
    /// `V S^-1`, its inverse.
    unwhiten: DMatrix<f64>,
    mu_traj: Vec<f64>,
}

impl TrajectorySpace {
    pub fn new(table: Arc<BasisTable>, horizon: usize, theta_std: Standardizer) -> Result<Self> {
        let cfg = &table.cfg;
        if horizon < 1 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        let p = cfg.num_params();
        if theta_std.dim() != p {
            return Err(Error::Shape(format!(
                "standardizer has {} coordinates, parameters have {p}",
                theta_std.dim()
            )));
        }
        let dt = cfg.tau / horizon as f64;
        let rel_times: Vec<f64> = (1..=horizon).map(|k| k as f64 * dt).collect();
        let full_times: Vec<f64> = (0..=horizon).map(|k| k as f64 * dt).collect();
        let rel = DecodePlan::new(&table, &rel_times)?;
        let full = DecodePlan::new(&table, &full_times)?;
        let n = horizon * cfg.dof;
        let m = rel.linear_map().rows(0, n).into_owned();
        if n < p {
            return Err(Error::RankDeficient(format!(
                "{n} trajectory values cannot determine {p} parameters"
            )));
        }
        let mut scaled = m.clone();
        for (j, s) in theta_std.scale.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        let mu_traj = (&m * DVector::from_column_slice(&theta_std.mean))
            .iter()
            .copied()
            .collect();
        let svd = scaled.svd(true, true);
        let sv = &svd.singular_values;
        if !(sv.min() > 1e-12 * sv.max()) {
            return Err(Error::RankDeficient(format!(
                "decoder singular values span {:e} to {:e}",
                sv.min(),
                sv.max()
            )));
        }
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let whiten = DMatrix::from_diagonal(sv) * &v_t;
        let unwhiten = v_t.transpose() * DMatrix::from_diagonal(&sv.map(|x| 1.0 / x));
        Ok(Self {
            table,
            horizon,
            dt,
            theta_std,
            rel,
            full,
            m_z: u,
            whiten,
            unwhiten,
            mu_traj,
        })
    }

    pub fn cfg(&self) -> &ProDmpConfig {
        &self.table.cfg
    }

    pub fn table(&self) -> &Arc<BasisTable> {
        &self.table
    }

    pub fn dof(&self) -> usize {
        self.table.cfg.dof
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn theta_std(&self) -> &Standardizer {
        &self.theta_std
    }

    /// Length of the relative trajectory vector, `H * dof`.
    pub fn traj_dim(&self) -> usize {
        self.horizon * self.dof()
    }

    /// Length of `z`, `dof * (K + 1)`.
    pub fn param_dim(&self) -> usize {
        self.table.cfg.num_params()
    }

    pub fn m_z(&self) -> &DMatrix<f64> {
        &self.m_z
    }

    /// Trajectory offset that does not depend on `z`.
    pub fn base(&self, v0: &[f64]) -> Vec<f64> {
        let dof = self.dof();
        let mut out = self.mu_traj.clone();
        for k in 0..self.horizon {
            for d in 0..dof {
                out[k * dof + d] += v0[d] * self.rel.y2[k];
            }
        }
        out
    }

    /// `base(v0) + M_z z`.
    pub fn z_to_traj(&self, z: &[f64], v0: &[f64]) -> Vec<f64> {
        let mz = &self.m_z * DVector::from_column_slice(z);
        let mut out = self.base(v0);
        for (o, m) in out.iter_mut().zip(mz.iter()) {
            *o += m;
        }
        out
    }

    /// `M_z z` without the offset.
    pub fn apply_m_z(&self, z: &[f64]) -> Vec<f64> {
        (&self.m_z * DVector::from_column_slice(z))
            .iter()
            .copied()
            .collect()
    }

    /// Least-squares `z` reproducing a relative trajectory, `M_z^T (tau - base)`.
    pub fn pullback(&self, tau: &[f64], v0: &[f64]) -> Vec<f64> {
        let base = self.base(v0);
        let r: Vec<f64> = tau.iter().zip(&base).map(|(a, b)| a - b).collect();
        self.traj_grad_to_z(&r)
    }

    /// `M_z^T g`, the chain rule from trajectory to `z` gradients.
    pub fn traj_grad_to_z(&self, g: &[f64]) -> Vec<f64> {
        self.m_z
            .tr_mul(&DVector::from_column_slice(g))
            .iter()
            .copied()
            .collect()
    }

    /// Standardized relative coordinates of absolute parameters.
    pub fn theta_to_z(&self, theta: &ProDmpParams, y0: &[f64]) -> Vec<f64> {
        let k = theta.num_basis();
        let mut rel = theta.as_slice().to_vec();
        for (d, y) in y0.iter().enumerate() {
            rel[d * (k + 1) + k] -= y;
        }
        let std = DVector::from_vec(self.theta_std.apply(&rel));
        (&self.whiten * std).iter().copied().collect()
    }

    pub fn z_to_theta(&self, z: &[f64], y0: &[f64]) -> Result<ProDmpParams> {
        let cfg = self.cfg();
        let k = cfg.num_basis;
        let std: Vec<f64> = (&self.unwhiten * DVector::from_column_slice(z))
            .iter()
            .copied()
            .collect();
        let mut v = self.theta_std.invert(&std);
        for (d, y) in y0.iter().enumerate() {
            v[d * (k + 1) + k] += y;
        }
        ProDmpParams::new(cfg.dof, k, v)
    }

    /// Absolute trajectory at `t_0..t_H` for a `z` and start state.
    pub fn decode_z(&self, z: &[f64], bc: &BoundaryCondition) -> Result<Trajectory> {
        let theta = self.z_to_theta(z, &bc.y0)?;
        self.full.decode(&theta, bc)
    }

    /// Relative positions at `t_1..t_H` of an absolute trajectory sampled at
    /// `t_0..t_H`.
    pub fn relative_segment(&self, positions: &[f64]) -> Result<Vec<f64>> {
        let dof = self.dof();
        if positions.len() != (self.horizon + 1) * dof {
            return Err(Error::Shape(format!(
                "segment has {} values, expected {}",
                positions.len(),
                (self.horizon + 1) * dof
            )));
        }
        Ok((dof..positions.len())
            .map(|i| positions[i] - positions[i % dof])
            .collect())
    }

    pub fn full_times(&self) -> &[f64] {
        &self.full.times
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_config(w, self.cfg())?;
        codec::write_u64(w, self.horizon as u64)?;
        self.theta_std.write_to(w)
    }

    /// Reads the frame back, recomputing the basis table.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let cfg = read_config(r)?;
        let horizon = codec::read_u64(r)? as usize;
        let std = Standardizer::read_from(r)?;
        let table = Arc::new(precompute_basis(&cfg)?);
        Self::new(table, horizon, std)
    }
}
