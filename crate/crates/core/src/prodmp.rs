//! Closed-form movement primitives on a critically damped second-order
//! system.
//!
//! The underlying system for each degree of freedom is
//!
//! ```text
//! tau^2 * y'' = alpha * (beta * (g - y) - tau * y') + f(x)
//! ```
//!
//! with `beta = alpha / 4`, so the characteristic root is repeated at
//! `omega = alpha / (2 tau)`. The homogeneous solutions are
//! `y1 = exp(-omega t)` and `y2 = t exp(-omega t)`. Each forcing weight
//! contributes the zero-initial-state response to its normalized radial
//! basis, obtained by variation of parameters and tabulated on a dense
//! grid. The goal enters through the unit step response
//! `1 - exp(-omega t) (1 + omega t)`, i.e. the goal column carries unit DC
//! gain and `g` is stored in position units.
//!
//! A trajectory is then affine in the parameters:
//!
//! ```text
//! y(t)  = c1 y1(t)  + c2 y2(t)  + phi(t)     . theta
//! y'(t) = c1 y1'(t) + c2 y2'(t) + phi_dot(t) . theta
//! ```
//!
//! where `(c1, c2)` follow from the start state alone.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::{Error, Result};

const BASIS_MAGIC: &[u8; 8] = b"PDMPBASE";
const BASIS_VERSION: u32 = 1;

/// Shape and dynamics of the primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProDmpConfig {
    /// Number of forcing basis functions per degree of freedom.
    pub num_basis: usize,
    /// Spring gain.
    pub alpha: f64,
    /// Damping factor; must equal `alpha / 4`.
    pub beta: f64,
    /// Phase decay rate.
    pub alpha_x: f64,
    /// Motion duration in seconds.
    pub tau: f64,
    pub dof: usize,
    /// Number of points on the precomputation grid.
    pub grid_points: usize,
}

impl Default for ProDmpConfig {
    fn default() -> Self {
        Self::new(10, 1.0, 1)
    }
}

impl ProDmpConfig {
    /// Classical defaults: `alpha = 25`, critical damping, `alpha_x = alpha / 3`,
    /// 1000 grid points.
    pub fn new(num_basis: usize, tau: f64, dof: usize) -> Self {
        let alpha = 25.0;
        Self {
            num_basis,
            alpha,
            beta: alpha / 4.0,
            alpha_x: alpha / 3.0,
            tau,
            dof,
            grid_points: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.alpha_x > 0.0 && self.alpha_x.is_finite()) {
            return bad("alpha_x must be positive");
        }
        if self.num_basis < 1 {
            return bad("num_basis must be at least 1");
        }
        if self.dof < 1 {
            return bad("dof must be at least 1");
        }
        if self.grid_points < 100 {
            return bad("grid_points must be at least 100");
        }
        if (self.beta - self.alpha / 4.0).abs() > 1e-12 * self.alpha {
            return bad("only critical damping (beta = alpha / 4) has a closed form here");
        }
        Ok(())
    }

    /// Repeated characteristic root.
    pub fn omega(&self) -> f64 {
        self.alpha / (2.0 * self.tau)
    }

    /// Parameters per degree of freedom: `K` weights and one goal.
    pub fn params_per_dof(&self) -> usize {
        self.num_basis + 1
    }

    pub fn num_params(&self) -> usize {
        self.dof * self.params_per_dof()
    }

    pub fn phase(&self, t: f64) -> f64 {
        (-self.alpha_x * t / self.tau).exp()
    }

    /// Basis centers in phase: equally spaced in time over `[0, tau]`, then
    /// mapped through `x(t)`.
    pub fn centers(&self) -> Vec<f64> {
        self.center_times().iter().map(|&t| self.phase(t)).collect()
    }

    pub fn center_times(&self) -> Vec<f64> {
        let k = self.num_basis;
        if k == 1 {
            return vec![0.0];
        }
        (0..k)
            .map(|i| i as f64 * self.tau / (k - 1) as f64)
            .collect()
    }

    /// Gaussian precision per basis, set from the phase gap to the next
    /// center (the previous one for the last basis) so neighbours cross at
    /// 0.5.
    pub fn widths(&self) -> Vec<f64> {
        let c = self.centers();
        let k = c.len();
        if k == 1 {
            let gap = 1.0 - self.phase(self.tau);
            return vec![4.0 * std::f64::consts::LN_2 / (gap * gap)];
        }
        (0..k)
            .map(|i| {
                let gap = if i + 1 < k {
                    c[i] - c[i + 1]
                } else {
                    c[i - 1] - c[i]
                };
                4.0 * std::f64::consts::LN_2 / (gap * gap)
            })
            .collect()
    }

    /// Normalized forcing inputs `q_i(t) = x phi_i(x) / sum_j phi_j(x) / tau^2`.
    pub fn forcing_basis(&self, t: f64) -> Vec<f64> {
        let x = self.phase(t);
        let raw: Vec<f64> = self
            .centers()
            .iter()
            .zip(self.widths())
            .map(|(c, h)| (-h * (x - c) * (x - c)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let scale = x / (total * self.tau * self.tau);
        raw.iter().map(|r| r * scale).collect()
    }
}

/// Flat parameter vector, one `[w_0 .. w_{K-1}, g]` block per DoF.
#[derive(Debug, Clone, PartialEq)]
pub struct ProDmpParams {
    dof: usize,
    num_basis: usize,
    values: Vec<f64>,
}

impl ProDmpParams {
    pub fn new(dof: usize, num_basis: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dof * (num_basis + 1) {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, expected {}",
                values.len(),
                dof * (num_basis + 1)
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ProDMP parameters".into()));
        }
        Ok(Self {
            dof,
            num_basis,
            values,
        })
    }

    pub fn zeros(dof: usize, num_basis: usize) -> Self {
        Self {
            dof,
            num_basis,
            values: vec![0.0; dof * (num_basis + 1)],
        }
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, d: usize) -> &[f64] {
        let k1 = self.num_basis + 1;
        &self.values[d * k1..(d + 1) * k1]
    }

    pub fn weights(&self, d: usize) -> &[f64] {
        &self.block(d)[..self.num_basis]
    }

    pub fn goal(&self, d: usize) -> f64 {
        self.block(d)[self.num_basis]
    }
}

/// Start state of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCondition {
    pub y0: Vec<f64>,
    pub y0_dot: Vec<f64>,
}

impl BoundaryCondition {
    pub fn new(y0: Vec<f64>, y0_dot: Vec<f64>) -> Result<Self> {
        if y0.len() != y0_dot.len() {
            return Err(Error::Shape("position and velocity lengths differ".into()));
        }
        if y0.iter().chain(&y0_dot).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("boundary condition".into()));
        }
        Ok(Self { y0, y0_dot })
    }

    pub fn zeros(dof: usize) -> Self {
        Self {
            y0: vec![0.0; dof],
            y0_dot: vec![0.0; dof],
        }
    }

    pub fn dof(&self) -> usize {
        self.y0.len()
    }
}

/// Time-indexed positions and velocities, row-major `H x dof`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub dof: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dof..(k + 1) * self.dof]
    }

    pub fn velocity(&self, k: usize) -> &[f64] {
        &self.velocities[k * self.dof..(k + 1) * self.dof]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.positions.len() != n * self.dof || self.velocities.len() != n * self.dof {
            return Err(Error::Shape("trajectory arrays disagree with times".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "trajectory times must be strictly increasing".into(),
            ));
        }
        if self
            .positions
            .iter()
            .chain(&self.velocities)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("trajectory".into()));
        }
        Ok(())
    }
}

/// Dense tabulation of the basis and complementary solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisTable {
    pub cfg: ProDmpConfig,
    pub time_grid: Vec<f64>,
    /// `grid_points x (K + 1)`, row-major; last column is the goal.
    pub phi: Vec<f64>,
    pub phi_dot: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y1_dot: Vec<f64>,
    pub y2_dot: Vec<f64>,
}

/// Running Simpson integral on a uniform grid. Even indices use the
/// composite rule; odd indices add the quadratic-fit rule over the last
/// interval.
fn cumulative_simpson(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    for j in 1..n {
        if j % 2 == 0 {
            out[j] = out[j - 2] + h / 3.0 * (f[j - 2] + 4.0 * f[j - 1] + f[j]);
        } else if j == 1 {
            out[1] = h / 12.0 * (5.0 * f[0] + 8.0 * f[1] - f[2.min(n - 1)]);
        } else {
            out[j] = out[j - 1] + h / 12.0 * (-f[j - 2] + 8.0 * f[j - 1] + 5.0 * f[j]);
        }
    }
    out
}

/// Tabulates the basis on `cfg.grid_points` uniformly spaced times.
pub fn precompute_basis(cfg: &ProDmpConfig) -> Result<BasisTable> {
    cfg.validate()?;
    let n = cfg.grid_points;
    let k = cfg.num_basis;
    let k1 = k + 1;
    let h = cfg.tau / (n - 1) as f64;
    let omega = cfg.omega();

    // Adjacent bases must be resolvable on the grid.
    let center_times = cfg.center_times();
    if center_times
        .windows(2)
        .any(|w| (w[1] - w[0]).abs() < 2.0 * h)
    {
        return Err(Error::InvalidConfig(format!(
            "grid of {n} points is too coarse for {k} bases (centers collide)"
        )));
    }

    let time_grid: Vec<f64> = (0..n).map(|j| j as f64 * h).collect();
    let decay: Vec<f64> = time_grid.iter().map(|t| (-omega * t).exp()).collect();
    let y1 = decay.clone();
    let y2: Vec<f64> = time_grid.iter().zip(&decay).map(|(t, e)| t * e).collect();
    let y1_dot: Vec<f64> = decay.iter().map(|e| -omega * e).collect();
    let y2_dot: Vec<f64> = time_grid
        .iter()
        .zip(&decay)
        .map(|(t, e)| (1.0 - omega * t) * e)
        .collect();

    let forcing: Vec<Vec<f64>> = time_grid.iter().map(|&t| cfg.forcing_basis(t)).collect();

    let mut phi = vec![0.0; n * k1];
    let mut phi_dot = vec![0.0; n * k1];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    for i in 0..k {
        for j in 0..n {
            // y1 q / W = exp(omega s) q,  y2 q / W = s exp(omega s) q
            let grow = (omega * time_grid[j]).exp();
            f1[j] = grow * forcing[j][i];
            f2[j] = time_grid[j] * f1[j];
            if !(f1[j].is_finite() && f2[j].is_finite()) {
                return Err(Error::NonFinite(format!(
                    "basis integrand {i} at t = {}",
                    time_grid[j]
                )));
            }
        }
        let i1 = cumulative_simpson(&f1, h);
        let i2 = cumulative_simpson(&f2, h);
        for j in 0..n {
            let t = time_grid[j];
            phi[j * k1 + i] = decay[j] * (t * i1[j] - i2[j]);
            phi_dot[j * k1 + i] = decay[j] * ((1.0 - omega * t) * i1[j] + omega * i2[j]);
        }
    }
    for j in 0..n {
        let t = time_grid[j];
        phi[j * k1 + k] = 1.0 - decay[j] * (1.0 + omega * t);
        phi_dot[j * k1 + k] = omega * omega * t * decay[j];
    }
    // Exact rest at t = 0 (the formulas above already give 0; make it explicit).
    for v in phi[..k1].iter_mut().chain(phi_dot[..k1].iter_mut()) {
        *v = 0.0;
    }
    if phi.iter().chain(&phi_dot).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("basis table".into()));
    }

    Ok(BasisTable {
        cfg: cfg.clone(),
        time_grid,
        phi,
        phi_dot,
        y1,
        y2,
        y1_dot,
        y2_dot,
    })
}

impl BasisTable {
    pub fn grid_step(&self) -> f64 {
        self.cfg.tau / (self.cfg.grid_points - 1) as f64
    }

    /// Linear-interpolation stencil `(j, frac)` for a query time.
    fn stencil(&self, t: f64) -> Result<(usize, f64)> {
        let tau = self.cfg.tau;
        let slack = 1e-9 * tau;
        if !t.is_finite() || t < -slack || t > tau + slack {
            return Err(Error::TimeOutOfRange { t, tau });
        }
        let t = t.clamp(0.0, tau);
        let n = self.cfg.grid_points;
        let s = t / self.grid_step();
        let j = (s.floor() as usize).min(n - 2);
        Ok((j, (s - j as f64).clamp(0.0, 1.0)))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, BASIS_MAGIC, BASIS_VERSION)?;
        write_config(w, &self.cfg)?;
        for arr in [
            &self.time_grid,
            &self.phi,
            &self.phi_dot,
            &self.y1,
            &self.y2,
            &self.y1_dot,
            &self.y2_dot,
        ] {
            codec::write_f64s(w, arr)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, BASIS_MAGIC, BASIS_VERSION)?;
        let cfg = read_config(r)?;
        cfg.validate()?;
        let n = cfg.grid_points;
        let k1 = cfg.params_per_dof();
        let time_grid = codec::read_f64s(r, Some(n))?;
        let phi = codec::read_f64s(r, Some(n * k1))?;
        let phi_dot = codec::read_f64s(r, Some(n * k1))?;
        let y1 = codec::read_f64s(r, Some(n))?;
        let y2 = codec::read_f64s(r, Some(n))?;
        let y1_dot = codec::read_f64s(r, Some(n))?;
        let y2_dot = codec::read_f64s(r, Some(n))?;
        Ok(Self {
            cfg,
            time_grid,
            phi,
            phi_dot,
            y1,
            y2,
            y1_dot,
            y2_dot,
        })
    }
}

pub fn write_config<W: Write>(w: &mut W, cfg: &ProDmpConfig) -> Result<()> {
    codec::write_u32(w, cfg.num_basis as u32)?;
    codec::write_f64(w, cfg.alpha)?;
    codec::write_f64(w, cfg.beta)?;
    codec::write_f64(w, cfg.alpha_x)?;
    codec::write_f64(w, cfg.tau)?;
    codec::write_u32(w, cfg.dof as u32)?;
    codec::write_u32(w, cfg.grid_points as u32)?;
    Ok(())
}

pub fn read_config<R: Read>(r: &mut R) -> Result<ProDmpConfig> {
    Ok(ProDmpConfig {
        num_basis: codec::read_u32(r)? as usize,
        alpha: codec::read_f64(r)?,
        beta: codec::read_f64(r)?,
        alpha_x: codec::read_f64(r)?,
        tau: codec::read_f64(r)?,
        dof: codec::read_u32(r)? as usize,
        grid_points: codec::read_u32(r)? as usize,
    })
}

/// `(c1, c2)` for each DoF from the 2x2 system at `t = 0`.
pub fn boundary_coefficients(bc: &BoundaryCondition, table: &BasisTable) -> Vec<(f64, f64)> {
    let (a, b, c, d) = (table.y1[0], table.y2[0], table.y1_dot[0], table.y2_dot[0]);
    let det = a * d - b * c;
    bc.y0
        .iter()
        .zip(&bc.y0_dot)
        .map(|(&p, &v)| ((p * d - b * v) / det, (a * v - c * p) / det))
        .collect()
}

/// Interpolated basis rows for a fixed set of query times.
///
/// Building one of these once and reusing it is how the learning and
/// control code decode repeatedly at the same times.
#[derive(Debug, Clone)]
pub struct DecodePlan {
    pub times: Vec<f64>,
    pub dof: usize,
    pub k1: usize,
    /// `H x (K + 1)` row-major.
    pub phi: Vec<f64>,
    pub phi_dot: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y1_dot: Vec<f64>,
    pub y2_dot: Vec<f64>,
    table_y: [f64; 4],
}

impl DecodePlan {
    pub fn new(table: &BasisTable, query_times: &[f64]) -> Result<Self> {
        let k1 = table.cfg.params_per_dof();
        let h = query_times.len();
        let mut plan = DecodePlan {
            times: query_times.to_vec(),
            dof: table.cfg.dof,
            k1,
            phi: vec![0.0; h * k1],
            phi_dot: vec![0.0; h * k1],
            y1: vec![0.0; h],
            y2: vec![0.0; h],
            y1_dot: vec![0.0; h],
            y2_dot: vec![0.0; h],
            table_y: [table.y1[0], table.y2[0], table.y1_dot[0], table.y2_dot[0]],
        };
        let lerp = |arr: &[f64], j: usize, s: f64| (1.0 - s) * arr[j] + s * arr[j + 1];
        for (q, &t) in query_times.iter().enumerate() {
            let (j, s) = table.stencil(t)?;
            for i in 0..k1 {
                plan.phi[q * k1 + i] =
                    (1.0 - s) * table.phi[j * k1 + i] + s * table.phi[(j + 1) * k1 + i];
                plan.phi_dot[q * k1 + i] =
                    (1.0 - s) * table.phi_dot[j * k1 + i] + s * table.phi_dot[(j + 1) * k1 + i];
            }
            plan.y1[q] = lerp(&table.y1, j, s);
            plan.y2[q] = lerp(&table.y2, j, s);
            plan.y1_dot[q] = lerp(&table.y1_dot, j, s);
            plan.y2_dot[q] = lerp(&table.y2_dot, j, s);
        }
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn coefficients(&self, bc: &BoundaryCondition) -> Vec<(f64, f64)> {
        let [a, b, c, d] = self.table_y;
        let det = a * d - b * c;
        bc.y0
            .iter()
            .zip(&bc.y0_dot)
            .map(|(&p, &v)| ((p * d - b * v) / det, (a * v - c * p) / det))
            .collect()
    }

    fn check(&self, theta: &ProDmpParams, bc: &BoundaryCondition) -> Result<()> {
        if theta.dof() != self.dof || theta.num_basis() + 1 != self.k1 {
            return Err(Error::Shape(format!(
                "parameters are {}x{}, basis expects {}x{}",
                theta.dof(),
                theta.num_basis() + 1,
                self.dof,
                self.k1
            )));
        }
        if bc.dof() != self.dof {
            return Err(Error::Shape(format!(
                "boundary condition has {} DoF, basis expects {}",
                bc.dof(),
                self.dof
            )));
        }
        Ok(())
    }

    /// Positions only, written into `out` (`H x dof`).
    pub fn positions_into(&self, theta: &[f64], bc: &BoundaryCondition, out: &mut [f64]) {
        let coeffs = self.coefficients(bc);
        let (k1, dof) = (self.k1, self.dof);
        for q in 0..self.len() {
            let row = &self.phi[q * k1..(q + 1) * k1];
            for (d, &(c1, c2)) in coeffs.iter().enumerate() {
                let block = &theta[d * k1..(d + 1) * k1];
                let forced: f64 = row.iter().zip(block).map(|(a, b)| a * b).sum();
                out[q * dof + d] = c1 * self.y1[q] + c2 * self.y2[q] + forced;
            }
        }
    }

    pub fn decode(&self, theta: &ProDmpParams, bc: &BoundaryCondition) -> Result<Trajectory> {
        self.check(theta, bc)?;
        let coeffs = self.coefficients(bc);
        let (k1, dof, h) = (self.k1, self.dof, self.len());
        let mut positions = vec![0.0; h * dof];
        let mut velocities = vec![0.0; h * dof];
        for q in 0..h {
            let row = &self.phi[q * k1..(q + 1) * k1];
            let row_dot = &self.phi_dot[q * k1..(q + 1) * k1];
            for (d, &(c1, c2)) in coeffs.iter().enumerate() {
                let block = theta.block(d);
                let p: f64 = row.iter().zip(block).map(|(a, b)| a * b).sum();
                let v: f64 = row_dot.iter().zip(block).map(|(a, b)| a * b).sum();
                positions[q * dof + d] = c1 * self.y1[q] + c2 * self.y2[q] + p;
                velocities[q * dof + d] = c1 * self.y1_dot[q] + c2 * self.y2_dot[q] + v;
            }
        }
        let traj = Trajectory {
            times: self.times.clone(),
            positions,
            velocities,
            dof,
        };
        if traj
            .positions
            .iter()
            .chain(&traj.velocities)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("decoded trajectory".into()));
        }
        Ok(traj)
    }

    /// Matrix taking `theta` to stacked `(positions, velocities)`; rows are
    /// `k * dof + d` for positions, then `H * dof + k * dof + d`.
    pub fn linear_map(&self) -> DMatrix<f64> {
        let (k1, dof, h) = (self.k1, self.dof, self.len());
        let mut m = DMatrix::zeros(2 * h * dof, dof * k1);
        for q in 0..h {
            for d in 0..dof {
                for i in 0..k1 {
                    m[(q * dof + d, d * k1 + i)] = self.phi[q * k1 + i];
                    m[(h * dof + q * dof + d, d * k1 + i)] = self.phi_dot[q * k1 + i];
                }
            }
        }
        m
    }
}

/// Decodes `theta` from `bc` at the given times.
pub fn decode(
    theta: &ProDmpParams,
    bc: &BoundaryCondition,
    table: &BasisTable,
    query_times: &[f64],
) -> Result<Trajectory> {
    DecodePlan::new(table, query_times)?.decode(theta, bc)
}

/// Linear part of [`decode`]: `decode(theta, bc) = decode(0, bc) + map * theta`.
pub fn decode_linear_map(table: &BasisTable, query_times: &[f64]) -> Result<DMatrix<f64>> {
    Ok(DecodePlan::new(table, query_times)?.linear_map())
}

/// Least-squares parameters and their position residual.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ProDmpParams,
    pub residual_rms: f64,
}

/// Condition-number ceiling beyond which a regression is treated as
/// rank-deficient.
const MAX_CONDITION: f64 = 1e12;

/// Fits parameters to a trajectory's positions given its start state.
pub fn fit_params(
    traj: &Trajectory,
    bc: &BoundaryCondition,
    table: &BasisTable,
) -> Result<FitResult> {
    let cfg = &table.cfg;
    let k1 = cfg.params_per_dof();
    let dof = cfg.dof;
    if traj.dof != dof || bc.dof() != dof {
        return Err(Error::Shape("trajectory / boundary DoF mismatch".into()));
    }
    let h = traj.len();
    if h < k1 {
        return Err(Error::RankDeficient(format!(
            "{h} samples cannot determine {k1} parameters"
        )));
    }
    let plan = DecodePlan::new(table, &traj.times)?;
    let coeffs = plan.coefficients(bc);

    let mut a = DMatrix::from_row_slice(h, k1, &plan.phi);
    // Equilibrate columns; the late forcing columns are orders of magnitude
    // smaller than the goal column.
    let scales: Vec<f64> = (0..k1)
        .map(|i| {
            let n = a.column(i).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    for (i, s) in scales.iter().enumerate() {
        a.column_mut(i).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::RankDeficient(format!(
            "condition number {:.3e} over {h} samples",
            smax / smin
        )));
    }

    let mut values = vec![0.0; dof * k1];
    let mut sq = 0.0;
    for (d, &(c1, c2)) in coeffs.iter().enumerate() {
        let b = DVector::from_iterator(
            h,
            (0..h).map(|q| traj.positions[q * dof + d] - c1 * plan.y1[q] - c2 * plan.y2[q]),
        );
        let x = svd
            .solve(&b, 0.0)
            .map_err(|e| Error::RankDeficient(e.to_string()))?;
        let r = &a * &x - &b;
        sq += r.norm_squared();
        for i in 0..k1 {
            values[d * k1 + i] = x[i] / scales[i];
        }
    }
    Ok(FitResult {
        params: ProDmpParams::new(dof, cfg.num_basis, values)?,
        residual_rms: (sq / (h * dof) as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(k: usize, dof: usize) -> BasisTable {
        precompute_basis(&ProDmpConfig::new(k, 1.0, dof)).unwrap()
    }

    #[test]
    fn boundary_invariants_hold_on_the_table() {
        let t = table(8, 1);
        let k1 = 9;
        assert!(t.phi[..k1].iter().all(|&v| v == 0.0));
        assert!(t.phi_dot[..k1].iter().all(|&v| v == 0.0));
        let w = t.cfg.omega();
        assert_eq!(t.y1[0], 1.0);
        assert_eq!(t.y2[0], 0.0);
        assert_eq!(t.y1_dot[0], -w);
        assert_eq!(t.y2_dot[0], 1.0);
        assert!(t.time_grid.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn single_basis_starts_at_rest() {
        let t = table(1, 1);
        assert_eq!(t.phi[0], 0.0);
        assert_eq!(t.phi[1], 0.0);
    }

    #[test]
    fn goal_column_matches_step_response() {
        // omega * tau = 10
        let mut cfg = ProDmpConfig::new(5, 1.0, 1);
        cfg.alpha = 20.0;
        cfg.beta = 5.0;
        let t = precompute_basis(&cfg).unwrap();
        let last = (cfg.grid_points - 1) * 6 + 5;
        let expected = 1.0 - (-10.0f64).exp() * 11.0;
        assert!((t.phi[last] - expected).abs() < 1e-14);
        assert!((expected - 0.9995006).abs() < 1e-7);
        let goal: Vec<f64> = (0..cfg.grid_points).map(|j| t.phi[j * 6 + 5]).collect();
        assert!(goal.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn boundary_coefficients_solve_start_state() {
        let t = table(4, 1);
        let w = t.cfg.omega();
        let c = boundary_coefficients(&BoundaryCondition::zeros(1), &t);
        assert_eq!(c, vec![(0.0, 0.0)]);
        let bc = BoundaryCondition::new(vec![1.0], vec![0.0]).unwrap();
        let (c1, c2) = boundary_coefficients(&bc, &t)[0];
        assert_eq!(c1, 1.0);
        assert!((c2 - w).abs() < 1e-12);
        let bc = BoundaryCondition::new(vec![0.0], vec![3.0]).unwrap();
        assert_eq!(boundary_coefficients(&bc, &t)[0], (0.0, 3.0));
    }

    #[test]
    fn omega_two_example() {
        // alpha = 4, tau = 1 -> omega = 2
        let mut cfg = ProDmpConfig::new(3, 1.0, 1);
        cfg.alpha = 4.0;
        cfg.beta = 1.0;
        cfg.alpha_x = 4.0 / 3.0;
        let t = precompute_basis(&cfg).unwrap();
        let bc = BoundaryCondition::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(boundary_coefficients(&bc, &t)[0], (1.0, 2.0));
    }

    #[test]
    fn zero_everything_decodes_to_rest() {
        let t = table(6, 2);
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
        let tr = decode(
            &ProDmpParams::zeros(2, 6),
            &BoundaryCondition::zeros(2),
            &t,
            &times,
        )
        .unwrap();
        assert!(tr.positions.iter().chain(&tr.velocities).all(|&v| v == 0.0));
    }

    #[test]
    fn decode_rejects_times_outside_horizon() {
        let t = table(4, 1);
        let err = decode(
            &ProDmpParams::zeros(1, 4),
            &BoundaryCondition::zeros(1),
            &t,
            &[0.5, 1.2],
        );
        assert!(matches!(err, Err(Error::TimeOutOfRange { .. })));
        let err = decode(
            &ProDmpParams::zeros(1, 4),
            &BoundaryCondition::zeros(1),
            &t,
            &[-0.1],
        );
        assert!(matches!(err, Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn decode_rejects_mismatched_params() {
        let t = table(4, 2);
        let err = decode(
            &ProDmpParams::zeros(1, 4),
            &BoundaryCondition::zeros(2),
            &t,
            &[0.5],
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn unit_vectors_give_map_columns() {
        let t = table(5, 2);
        let times = [0.0, 0.13, 0.5, 0.77, 1.0];
        let m = decode_linear_map(&t, &times).unwrap();
        let bc = BoundaryCondition::zeros(2);
        let base = decode(&ProDmpParams::zeros(2, 5), &bc, &t, &times).unwrap();
        for col in 0..12 {
            let mut v = vec![0.0; 12];
            v[col] = 1.0;
            let tr = decode(&ProDmpParams::new(2, 5, v).unwrap(), &bc, &t, &times).unwrap();
            let stacked: Vec<f64> = tr
                .positions
                .iter()
                .zip(&base.positions)
                .chain(tr.velocities.iter().zip(&base.velocities))
                .map(|(a, b)| a - b)
                .collect();
            for (r, s) in stacked.iter().enumerate() {
                assert_eq!(*s, m[(r, col)]);
            }
        }
    }

    #[test]
    fn fit_rejects_too_few_samples() {
        let t = table(8, 1);
        let times: Vec<f64> = (0..8).map(|k| k as f64 * 0.1).collect();
        let tr = Trajectory {
            positions: vec![0.0; 8],
            velocities: vec![0.0; 8],
            times,
            dof: 1,
        };
        let err = fit_params(&tr, &BoundaryCondition::zeros(1), &t);
        assert!(matches!(err, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn fit_reproduces_constant_trajectory() {
        let t = table(8, 1);
        let times: Vec<f64> = (1..=20).map(|k| k as f64 * 0.05).collect();
        let tr = Trajectory {
            positions: vec![0.7; 20],
            velocities: vec![0.0; 20],
            times,
            dof: 1,
        };
        let bc = BoundaryCondition::new(vec![0.7], vec![0.0]).unwrap();
        let fit = fit_params(&tr, &bc, &t).unwrap();
        assert!(fit.residual_rms < 1e-10, "residual {}", fit.residual_rms);
    }

    #[test]
    fn basis_roundtrips_through_bytes() {
        let t = table(4, 2);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = BasisTable::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        buf[0] = b'X';
        assert!(BasisTable::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn config_validation() {
        let c = ProDmpConfig {
            grid_points: 50,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ProDmpConfig {
            beta: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ProDmpConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = ProDmpConfig::new(200, 1.0, 1);
        c.grid_points = 100;
        assert!(matches!(precompute_basis(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn precompute_is_deterministic() {
        let cfg = ProDmpConfig::new(10, 1.0, 2);
        assert_eq!(
            precompute_basis(&cfg).unwrap(),
            precompute_basis(&cfg).unwrap()
        );
    }
}
