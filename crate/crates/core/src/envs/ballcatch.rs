//! Catching a ballistic ball in the vertical `(x, z)` plane.
//!
//! The ball flies toward the catch plane `x = 0` under gravity; its state is
//! evaluated in closed form from the launch state, never integrated. The
//! end-effector tracks velocity commands under acceleration and speed
//! limits. The episode is decided at the instant the ball crosses the
//! plane: success needs the end-effector within `CATCH_RADIUS` of the ball
//! and its velocity within `V_REL_MAX` of the ball's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DT: f64 = 0.05;
pub const GRAVITY: f64 = 9.81;
pub const CATCH_RADIUS: f64 = 0.05;
pub const V_REL_MAX: f64 = 0.5;
pub const A_MAX: f64 = 30.0;
pub const SPEED_MAX: f64 = 3.0;
pub const HOME: [f64; 2] = [0.0, 1.0];
pub const X_RANGE: (f64, f64) = (-0.6, 0.6);
pub const Z_RANGE: (f64, f64) = (0.3, 1.7);
pub const MAX_STEPS: usize = 40;
pub const OBS_DIM: usize = 11;
/// Fraction of the ball velocity the expert matches at contact.
pub const ABSORB: f64 = 0.8;
/// Expert deceleration after the catch.
pub const SETTLE_ACCEL: f64 = 4.0;

type V2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    /// Half-width of the crossing-height distribution around home height.
    pub fn height_spread(self) -> f64 {
        match self {
            Tier::Easy => 0.05,
            Tier::Medium => 0.15,
            Tier::Hard => 0.3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }

    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];
}

/// What happened when the ball crossed the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatchOutcome {
    pub miss: f64,
    pub rel_speed: f64,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct BallCatch {
    pub tier: Tier,
    pub launch_pos: V2,
    pub launch_vel: V2,
    pub t_cross: f64,
    pub ee_pos: V2,
    pub ee_vel: V2,
    pub ee_acc: V2,
    pub steps: usize,
    pub outcome: Option<CatchOutcome>,
    obs_noise: f64,
    noise_rng: ChaCha8Rng,
}

impl PartialEq for BallCatch {
    fn eq(&self, o: &Self) -> bool {
        self.tier == o.tier
            && self.launch_pos == o.launch_pos
            && self.launch_vel == o.launch_vel
            && self.ee_pos == o.ee_pos
            && self.ee_vel == o.ee_vel
            && self.ee_acc == o.ee_acc
            && self.steps == o.steps
            && self.outcome == o.outcome
    }
}

impl BallCatch {
    pub fn new(seed: u64, tier: Tier) -> Self {
        Self::with_noise(seed, tier, 0.0)
    }

    /// `obs_noise` is the standard deviation of Gaussian noise added to the
    /// observed ball position and velocity.
    pub fn with_noise(seed: u64, tier: Tier, obs_noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_cross = rng.random_range(0.7..0.9);
        let spread = tier.height_spread();
        let z_cross = HOME[1] + rng.random_range(-spread..spread);
        let vz_cross = rng.random_range(-1.0..0.0);
        let vx = -rng.random_range(0.8..1.2);
        let vz0 = vz_cross + GRAVITY * t_cross;
        let z0 = z_cross - vz0 * t_cross + 0.5 * GRAVITY * t_cross * t_cross;
        let x0 = -vx * t_cross;
        Self {
            tier,
            launch_pos: [x0, z0],
            launch_vel: [vx, vz0],
            t_cross,
            ee_pos: HOME,
            ee_vel: [0.0; 2],
            ee_acc: [0.0; 2],
            steps: 0,
            outcome: None,
            obs_noise,
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b5e),
        }
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * DT
    }

    /// Exact ball position and velocity at time `t`.
    pub fn ball_at(&self, t: f64) -> (V2, V2) {
        let [x0, z0] = self.launch_pos;
        let [vx, vz0] = self.launch_vel;
        (
            [x0 + vx * t, z0 + vz0 * t - 0.5 * GRAVITY * t * t],
            [vx, vz0 - GRAVITY * t],
        )
    }

    pub fn crossing(&self) -> (V2, V2) {
        self.ball_at(self.t_cross)
    }

    pub fn crossed(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn is_success(&self) -> bool {
        self.outcome.is_some_and(|o| o.success)
    }

    pub fn is_done(&self) -> bool {
        self.crossed() || self.steps >= MAX_STEPS
    }

    /// `[ee_pos, ee_vel, ball - ee, ball_vel, t_remaining, z_cross - ee_z,
    /// vz_cross]`, with the crossing quantities predicted from the observed
    /// ball state.
    pub fn observe(&mut self) -> Vec<f64> {
        let t = self.time();
        let (mut bp, mut bv) = self.ball_at(t);
        if self.obs_noise > 0.0 {
            for v in bp.iter_mut().chain(bv.iter_mut()) {
                let n: f64 = self.noise_rng.sample(StandardNormal);
                *v += self.obs_noise * n;
            }
        }
        let (t_rem, z_cross, vz_cross) = predict_crossing(bp, bv);
        let t_rem = if self.crossed() { 0.0 } else { t_rem.max(0.0) };
        vec![
            self.ee_pos[0],
            self.ee_pos[1],
            self.ee_vel[0],
            self.ee_vel[1],
            bp[0] - self.ee_pos[0],
            bp[1] - self.ee_pos[1],
            bv[0],
            bv[1],
            t_rem,
            z_cross - self.ee_pos[1],
            vz_cross,
        ]
    }

    /// Velocity command under acceleration and speed limits.
    pub fn step(&mut self, cmd: &[f64]) {
        let t0 = self.time();
        let want = [
            if cmd[0].is_finite() { cmd[0] } else { 0.0 },
            if cmd[1].is_finite() { cmd[1] } else { 0.0 },
        ];
        let dv = clamp_norm(
            [want[0] - self.ee_vel[0], want[1] - self.ee_vel[1]],
            A_MAX * DT,
        );
        let mut v = clamp_norm([self.ee_vel[0] + dv[0], self.ee_vel[1] + dv[1]], SPEED_MAX);
        let old = self.ee_pos;
        let mut p = [old[0] + v[0] * DT, old[1] + v[1] * DT];
        for (axis, (lo, hi)) in [X_RANGE, Z_RANGE].into_iter().enumerate() {
            if p[axis] < lo || p[axis] > hi {
                p[axis] = p[axis].clamp(lo, hi);
                v[axis] = (p[axis] - old[axis]) / DT;
            }
        }
        self.ee_acc = [(v[0] - self.ee_vel[0]) / DT, (v[1] - self.ee_vel[1]) / DT];
        self.ee_vel = v;
        self.ee_pos = p;
        self.steps += 1;
        let t1 = self.time();
        if self.outcome.is_none() && t0 < self.t_cross && self.t_cross <= t1 + 1e-12 {
            let s = self.t_cross - t0;
            let ee = [old[0] + v[0] * s, old[1] + v[1] * s];
            let (bp, bv) = self.crossing();
            let miss = (ee[0] - bp[0]).hypot(ee[1] - bp[1]);
            let rel_speed = (v[0] - bv[0]).hypot(v[1] - bv[1]);
            self.outcome = Some(CatchOutcome {
                miss,
                rel_speed,
                success: miss <= CATCH_RADIUS && rel_speed <= V_REL_MAX,
            });
        }
    }
}

fn clamp_norm(a: V2, max: f64) -> V2 {
    let n = a[0].hypot(a[1]);
    if n > max {
        [a[0] * max / n, a[1] * max / n]
    } else {
        a
    }
}

/// Time to reach `x = 0`, height and vertical velocity there, for a ball
/// at `p` moving with `v`. A ball not approaching the plane yields zero
/// time and its current height.
pub fn predict_crossing(p: V2, v: V2) -> (f64, f64, f64) {
    if v[0] >= -1e-9 || p[0] <= 0.0 {
        return (0.0, p[1], v[1]);
    }
    let t = -p[0] / v[0];
    (
        t,
        p[1] + v[1] * t - 0.5 * GRAVITY * t * t,
        v[1] - GRAVITY * t,
    )
}

/// Quintic with given position, velocity and acceleration at both ends.
#[derive(Debug, Clone, Copy)]
pub struct Quintic {
    c: [f64; 6],
}

impl Quintic {
    pub fn new(p0: f64, v0: f64, a0: f64, p1: f64, v1: f64, a1: f64, t: f64) -> Self {
        let (t2, t3, t4, t5) = (t * t, t * t * t, t.powi(4), t.powi(5));
        let h = p1 - p0 - v0 * t - 0.5 * a0 * t2;
        let dv = v1 - v0 - a0 * t;
        let da = a1 - a0;
        let c3 = (10.0 * h - 4.0 * dv * t + 0.5 * da * t2) / t3;
        let c4 = (-15.0 * h + 7.0 * dv * t - da * t2) / t4;
        let c5 = (6.0 * h - 3.0 * dv * t + 0.5 * da * t2) / t5;
        Self {
            c: [p0, v0, 0.5 * a0, c3, c4, c5],
        }
    }

    pub fn pos(&self, t: f64) -> f64 {
        let c = &self.c;
        c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))))
    }

    pub fn vel(&self, t: f64) -> f64 {
        let c = &self.c;
        c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])))
    }

    pub fn acc(&self, t: f64) -> f64 {
        let c = &self.c;
        2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]))
    }
}

/// Interception target: the crossing point clipped into the workspace,
/// and the velocity to arrive with.
fn intercept(env: &BallCatch) -> (V2, V2) {
    let (bp, bv) = env.crossing();
    let target = [
        bp[0].clamp(X_RANGE.0, X_RANGE.1),
        bp[1].clamp(Z_RANGE.0, Z_RANGE.1),
    ];
    (target, [ABSORB * bv[0], ABSORB * bv[1]])
}

/// Minimum-jerk plan from the current end-effector state to the
/// interception point, arriving at the crossing time with a fraction of the
/// ball's velocity. `None` once the ball has crossed.
pub fn expert_catch_plan(env: &BallCatch) -> Option<[Quintic; 2]> {
    let t_rem = env.t_cross - env.time();
    if env.crossed() || t_rem <= 1e-9 {
        return None;
    }
    let (target, vt) = intercept(env);
    Some([0, 1].map(|a| {
        Quintic::new(
            env.ee_pos[a],
            env.ee_vel[a],
            env.ee_acc[a],
            target[a],
            vt[a],
            0.0,
            t_rem,
        )
    }))
}

/// Next velocity command of the catching expert: track the current
/// minimum-jerk plan one step ahead, land exactly on the target in the
/// crossing step, and brake to rest afterwards.
pub fn expert_catch(env: &BallCatch) -> [f64; 2] {
    let t_rem = env.t_cross - env.time();
    match expert_catch_plan(env) {
        Some(plan) if t_rem > DT => [0, 1].map(|a| (plan[a].pos(DT) - env.ee_pos[a]) / DT),
        Some(_) => {
            let (target, _) = intercept(env);
            [0, 1].map(|a| (target[a] - env.ee_pos[a]) / t_rem)
        }
        None => {
            let v = env.ee_vel;
            let dv = clamp_norm(v, SETTLE_ACCEL * DT);
            [v[0] - dv[0], v[1] - dv[1]]
        }
    }
}

/// Expert segment of `horizon` steps from the current state, as positions
/// at `t_0..t_H` (row-major, two columns).
pub fn expert_catch_segment(env: &BallCatch, horizon: usize) -> Vec<f64> {
    let mut sim = env.clone();
    let mut out = Vec::with_capacity(2 * (horizon + 1));
    out.extend_from_slice(&sim.ee_pos);
    for _ in 0..horizon {
        let u = expert_catch(&sim);
        sim.step(&u);
        out.extend_from_slice(&sim.ee_pos);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quintic_boundaries() {
        let q = Quintic::new(0.3, -1.0, 2.0, 1.5, 0.4, -0.5, 0.8);
        assert!((q.pos(0.0) - 0.3).abs() < 1e-14);
        assert!((q.vel(0.0) + 1.0).abs() < 1e-14);
        assert!((q.acc(0.0) - 2.0).abs() < 1e-14);
        assert!((q.pos(0.8) - 1.5).abs() < 1e-12);
        assert!((q.vel(0.8) - 0.4).abs() < 1e-12);
        assert!((q.acc(0.8) + 0.5).abs() < 1e-11);
    }

    #[test]
    fn ball_is_exactly_ballistic() {
        let env = BallCatch::new(9, Tier::Hard);
        let (p, v) = env.ball_at(0.37);
        let [x0, z0] = env.launch_pos;
        let [vx, vz] = env.launch_vel;
        assert_eq!(p[0], x0 + vx * 0.37);
        assert!((p[1] - (z0 + vz * 0.37 - 4.905 * 0.37 * 0.37)).abs() <= 1e-12);
        assert!((v[1] - (vz - 9.81 * 0.37)).abs() <= 1e-12);
        let (c, _) = env.crossing();
        assert!(c[0].abs() <= 1e-12);
    }

    #[test]
    fn aligned_ball_is_caught_by_matching_motion() {
        // Ball crosses at home; the end-effector already moves with it.
        let mut env = BallCatch::new(4, Tier::Easy);
        let (_, bv) = env.crossing();
        env.t_cross = 0.825;
        let t = env.t_cross;
        env.launch_vel = [bv[0], bv[1] + GRAVITY * t];
        env.launch_pos = [
            -bv[0] * t,
            HOME[1] - env.launch_vel[1] * t + 0.5 * GRAVITY * t * t,
        ];
        let v = [bv[0] * 0.9, bv[1] * 0.9];
        env.steps = 14;
        let lead = t - env.time();
        env.ee_vel = v;
        env.ee_pos = [HOME[0] - v[0] * lead, HOME[1] - v[1] * lead];
        while !env.is_done() {
            env.step(&v);
        }
        let o = env.outcome.unwrap();
        assert!(o.miss < 1e-9 && o.success, "{o:?}");
    }

    #[test]
    fn stationary_end_effector_fails() {
        let mut env = BallCatch::new(1, Tier::Easy);
        while !env.is_done() {
            env.step(&[0.0, 0.0]);
        }
        assert!(!env.is_success());
        assert!(env.outcome.unwrap().rel_speed > V_REL_MAX);
    }

    #[test]
    fn crossing_prediction_matches_closed_form() {
        let mut env = BallCatch::new(2, Tier::Medium);
        let obs = env.observe();
        let (c, cv) = env.crossing();
        assert!((obs[8] - env.t_cross).abs() < 1e-12);
        assert!((obs[9] - (c[1] - HOME[1])).abs() < 1e-9);
        assert!((obs[10] - cv[1]).abs() < 1e-9);
    }

    #[test]
    fn expert_segment_starts_at_current_state() {
        let env = BallCatch::new(5, Tier::Medium);
        let seg = expert_catch_segment(&env, 20);
        assert_eq!(&seg[..2], &env.ee_pos);
        assert_eq!(seg.len(), 42);
    }
}
