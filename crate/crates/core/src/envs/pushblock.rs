//! Planar quasi-static pushing: a circular pusher moves a square block into
//! a goal disc, then retreats to an end zone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DT: f64 = 0.05;
pub const MAX_STEPS: usize = 400;
pub const V_MAX: f64 = 0.4;
pub const PUSHER_RADIUS: f64 = 0.02;
pub const BLOCK_HALF: f64 = 0.05;
pub const GOAL: [f64; 2] = [0.5, 0.5];
pub const GOAL_RADIUS: f64 = 0.03;
pub const END_ZONE: [f64; 2] = [0.9, 0.9];
pub const END_ZONE_RADIUS: f64 = 0.08;
pub const OBS_DIM: usize = 10;
/// Minimum approach component for the pusher to carry the block.
const CARRY_MIN: f64 = 0.2;

type V2 = [f64; 2];

fn sub(a: V2, b: V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: V2) -> f64 {
    a[0].hypot(a[1])
}

fn clamp_norm(a: V2, max: f64) -> V2 {
    let n = norm(a);
    if n > max {
        [a[0] * max / n, a[1] * max / n]
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushBlock {
    pub pusher: V2,
    pub vel: V2,
    pub block: V2,
    pub steps: usize,
    success: bool,
}

impl PushBlock {
    /// Block 0.12 to 0.3 from the goal, on the end-zone side of it
    /// (bearing -20 to 110 degrees); pusher 0.12 to 0.3 further out, within
    /// 45 degrees of the block's bearing, clear of the block and the end
    /// zone.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let polar = |c: V2, r: f64, a: f64| [c[0] + r * a.cos(), c[1] + r * a.sin()];
        let bearing = rng.random_range(-20f64..110.0).to_radians();
        let block = polar(GOAL, rng.random_range(0.12..0.3), bearing);
        let pusher = loop {
            let a = bearing + rng.random_range(-45f64..45.0).to_radians();
            let p = polar(block, rng.random_range(0.12..0.3), a);
            let p = [p[0].clamp(0.05, 0.95), p[1].clamp(0.05, 0.95)];
            let clear = box_distance(p, block, BLOCK_HALF) > PUSHER_RADIUS + 0.03;
            if clear && norm(sub(p, END_ZONE)) > END_ZONE_RADIUS + 0.03 {
                break p;
            }
        };
        Self {
            pusher,
            vel: [0.0; 2],
            block,
            steps: 0,
            success: false,
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        let rel = sub(self.block, self.pusher);
        let to_goal = sub(GOAL, self.block);
        vec![
            self.pusher[0],
            self.pusher[1],
            self.vel[0],
            self.vel[1],
            self.block[0],
            self.block[1],
            rel[0],
            rel[1],
            to_goal[0],
            to_goal[1],
        ]
    }

    pub fn block_in_goal(&self) -> bool {
        norm(sub(self.block, GOAL)) <= GOAL_RADIUS
    }

    pub fn pusher_in_end_zone(&self) -> bool {
        norm(sub(self.pusher, END_ZONE)) <= END_ZONE_RADIUS
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    pub fn is_done(&self) -> bool {
        self.success || self.steps >= MAX_STEPS
    }

    pub fn goal_distance(&self) -> f64 {
        norm(sub(self.block, GOAL))
    }

    /// Applies a velocity command for one step. Commands are clipped to
    /// `V_MAX`; the recorded velocity is the realised displacement rate.
    pub fn step(&mut self, cmd: &[f64]) {
        let u = clamp_norm([cmd[0], cmd[1]], V_MAX);
        let u = [
            if u[0].is_finite() { u[0] } else { 0.0 },
            if u[1].is_finite() { u[1] } else { 0.0 },
        ];
        let old = self.pusher;
        let lo = PUSHER_RADIUS;
        let hi = 1.0 - PUSHER_RADIUS;
        let mut p = [
            (old[0] + u[0] * DT).clamp(lo, hi),
            (old[1] + u[1] * DT).clamp(lo, hi),
        ];
        self.resolve_contact(old, &mut p);
        self.vel = [(p[0] - old[0]) / DT, (p[1] - old[1]) / DT];
        self.pusher = p;
        self.steps += 1;
        if self.block_in_goal() && self.pusher_in_end_zone() {
            self.success = true;
        }
    }

    /// Non-penetration projection. A pusher driving into the block carries
    /// it along its own direction of motion (sticking contact, no
    /// rotation); a grazing pusher shoves it along the contact normal. If
    /// the block is pinned against a wall the pusher yields instead.
    fn resolve_contact(&mut self, old: V2, p: &mut V2) {
        let Some((n, pen)) = penetration(*p, self.block) else {
            return;
        };
        let step = sub(*p, old);
        let len = norm(step);
        let m = if len > 1e-12 {
            [step[0] / len, step[1] / len]
        } else {
            [0.0; 2]
        };
        let into = -(n[0] * m[0] + n[1] * m[1]);
        let target = if into > CARRY_MIN {
            let clear = |t: f64| {
                let b = [self.block[0] + t * m[0], self.block[1] + t * m[1]];
                penetration(*p, b).is_none()
            };
            let mut hi = pen / into;
            while !clear(hi) {
                hi *= 2.0;
            }
            let mut lo = 0.0;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if clear(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            [self.block[0] + hi * m[0], self.block[1] + hi * m[1]]
        } else {
            [self.block[0] - n[0] * pen, self.block[1] - n[1] * pen]
        };
        let lo = BLOCK_HALF;
        let hi = 1.0 - BLOCK_HALF;
        self.block = [target[0].clamp(lo, hi), target[1].clamp(lo, hi)];
        if let Some((n, pen)) = penetration(*p, self.block) {
            p[0] += n[0] * pen;
            p[1] += n[1] * pen;
        }
    }
}

/// Distance from a point to an axis-aligned square (zero inside).
pub fn box_distance(p: V2, center: V2, half: f64) -> f64 {
    let dx = ((p[0] - center[0]).abs() - half).max(0.0);
    let dy = ((p[1] - center[1]).abs() - half).max(0.0);
    dx.hypot(dy)
}

/// Outward normal (from block to pusher) and overlap depth, if touching.
fn penetration(p: V2, block: V2) -> Option<(V2, f64)> {
    let q = [
        p[0].clamp(block[0] - BLOCK_HALF, block[0] + BLOCK_HALF),
        p[1].clamp(block[1] - BLOCK_HALF, block[1] + BLOCK_HALF),
    ];
    let d = sub(p, q);
    let dist = norm(d);
    if dist >= PUSHER_RADIUS {
        return None;
    }
    if dist > 1e-12 {
        return Some(([d[0] / dist, d[1] / dist], PUSHER_RADIUS - dist));
    }
    // Centre inside the square: leave through the nearest face.
    let rel = sub(p, block);
    let gx = BLOCK_HALF - rel[0].abs();
    let gy = BLOCK_HALF - rel[1].abs();
    if gx <= gy {
        let s = if rel[0] >= 0.0 { 1.0 } else { -1.0 };
        Some(([s, 0.0], gx + PUSHER_RADIUS))
    } else {
        let s = if rel[1] >= 0.0 { 1.0 } else { -1.0 };
        Some(([0.0, s], gy + PUSHER_RADIUS))
    }
}

/// Expert acceleration limit, keeping commands smooth.
pub const EXPERT_ACCEL: f64 = 3.0;
/// Block-to-goal distance at which the expert stops pushing.
const SETTLE_TOL: f64 = 0.01;
/// Block-to-goal distance below which the expert does not start a new push.
const LEAVE_TOL: f64 = 0.025;
/// Clearance kept around the block while travelling.
const CLEARANCE: f64 = 0.02;
/// Distance behind the contact point where a push starts.
const RUN_UP: f64 = 0.05;
/// Lateral slack tolerated while pushing.
const LANE: f64 = 0.02;
/// Scripted pusher: approach behind the block on the block-to-goal line,
/// push it straight at the goal, re-approach if the pusher slips off the
/// line; once the block is in the goal, retreat to the end zone.
pub fn expert_push(env: &PushBlock) -> [f64; 2] {
    let desired = expert_desired_velocity(env);
    let dv = clamp_norm(sub(desired, env.vel), EXPERT_ACCEL * DT);
    clamp_norm([env.vel[0] + dv[0], env.vel[1] + dv[1]], V_MAX)
}

fn expert_desired_velocity(env: &PushBlock) -> V2 {
    let p = env.pusher;
    let b = env.block;
    let err = sub(GOAL, b);
    let remaining = norm(err);
    let retreat = || {
        if env.pusher_in_end_zone() && norm(sub(p, END_ZONE)) < 0.02 {
            [0.0; 2]
        } else {
            navigate(p, END_ZONE, b)
        }
    };
    if remaining <= SETTLE_TOL {
        return retreat();
    }
    let d = [err[0] / remaining, err[1] / remaining];
    let reach = BLOCK_HALF / d[0].abs().max(d[1].abs()) + PUSHER_RADIUS;
    let rel = sub(p, b);
    let along = rel[0] * d[0] + rel[1] * d[1];
    let lateral = [rel[0] - along * d[0], rel[1] - along * d[1]];
    // Half-width of the block's shadow across the push direction.
    let shadow = BLOCK_HALF * (d[0].abs() + d[1].abs());
    let gap = -along - reach;
    if gap > -0.002 && gap < RUN_UP + 0.01 && norm(lateral) < shadow - LANE {
        // Carrying contact moves the block with the pusher, so once
        // touching the pusher just drives along the line; before that it
        // also closes in on the centre line.
        let speed = (0.8 * (2.0 * EXPERT_ACCEL * remaining).sqrt())
            .min((remaining + gap.max(0.0)) / DT)
            .clamp(0.02, V_MAX);
        let k = if gap > 0.005 { 0.5 / DT } else { 0.0 };
        let v = [d[0] * speed - k * lateral[0], d[1] * speed - k * lateral[1]];
        return clamp_norm(v, V_MAX);
    }
    if remaining <= LEAVE_TOL {
        return retreat();
    }
    let approach = [
        b[0] - (reach + RUN_UP) * d[0],
        b[1] - (reach + RUN_UP) * d[1],
    ];
    navigate(p, approach, b)
}

/// Velocity toward the next waypoint of the shortest path from `p` to
/// `target` around the block inflated by pusher radius plus clearance.
fn navigate(p: V2, target: V2, block: V2) -> V2 {
    let half = BLOCK_HALF + PUSHER_RADIUS + CLEARANCE;
    let corner = half + 0.006;
    let mut nodes = vec![p, target];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            nodes.push([block[0] + sx * corner, block[1] + sy * corner]);
        }
    }
    // Inside the clearance box, edges leaving the pusher only have to stay
    // out of the box it currently sits on the boundary of.
    let own = (p[0] - block[0]).abs().max((p[1] - block[1]).abs()) - 1e-9;
    let next = shortest_first_hop(&nodes, |a, b| {
        let h = if a == p { half.min(own) } else { half };
        !segment_hits_box(a, b, block, h)
    });
    let goal = nodes[next];
    let d = sub(goal, p);
    let dist = norm(d);
    if dist < 1e-9 {
        return [0.0; 2];
    }
    // Arrive at rest at the final target; pass through corners briskly.
    let speed = if next == 1 {
        V_MAX.min((2.0 * EXPERT_ACCEL * dist).sqrt()).min(dist / DT)
    } else {
        V_MAX.min((2.0 * EXPERT_ACCEL * dist).sqrt() + 0.1)
    };
    [d[0] / dist * speed, d[1] / dist * speed]
}

/// Dijkstra from node 0 to node 1; returns the first node after 0 on the
/// path (1 itself if the direct segment is free or nothing is reachable).
fn shortest_first_hop(nodes: &[V2], free: impl Fn(V2, V2) -> bool) -> usize {
    let n = nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut first = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[0] = 0.0;
    for _ in 0..n {
        let Some(u) = (0..n)
            .filter(|&i| !done[i] && dist[i].is_finite())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
        else {
            break;
        };
        done[u] = true;
        if u == 1 {
            break;
        }
        for v in 0..n {
            if done[v] || !free(nodes[u], nodes[v]) {
                continue;
            }
            let nd = dist[u] + norm(sub(nodes[u], nodes[v]));
            if nd < dist[v] {
                dist[v] = nd;
                first[v] = if u == 0 { v } else { first[u] };
            }
        }
    }
    if first[1] == usize::MAX {
        1
    } else {
        first[1]
    }
}

/// Whether segment `a -> b` passes through the open square of half-size
/// `half` around `c` (slab clipping).
fn segment_hits_box(a: V2, b: V2, c: V2, half: f64) -> bool {
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for axis in 0..2 {
        let d = b[axis] - a[axis];
        let lo = c[axis] - half - a[axis];
        let hi = c[axis] + half - a[axis];
        if d.abs() < 1e-12 {
            if lo >= -1e-12 || hi <= 1e-12 {
                return false;
            }
        } else {
            let (mut e0, mut e1) = (lo / d, hi / d);
            if e0 > e1 {
                std::mem::swap(&mut e0, &mut e1);
            }
            t0 = t0.max(e0);
            t1 = t1.min(e1);
        }
    }
    t1 - t0 > 1e-9
}
