//! Success-rate intervals, latency summaries and motion smoothness.

use serde::Serialize;

use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `n` trials.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidConfig("success rate of zero trials".into()));
    }
    if successes > n {
        return Err(Error::InvalidConfig(format!(
            "{successes} successes out of {n} trials"
        )));
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    // Exact at the ends, where rounding could otherwise exclude `p`.
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).clamp(0.0, p)
    };
    let hi = if successes == n {
        1.0
    } else {
        (centre + half).clamp(p, 1.0)
    };
    Ok((lo, hi))
}

/// A success count with its rate and 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuccessRate {
    pub successes: usize,
    pub n: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SuccessRate {
    pub fn new(successes: usize, n: usize) -> Result<Self> {
        let (ci_low, ci_high) = wilson_interval(successes, n, Z95)?;
        Ok(Self {
            successes,
            n,
            rate: successes as f64 / n as f64,
            ci_low,
            ci_high,
        })
    }

    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        Self::new(flags.iter().filter(|&&s| s).count(), flags.len())
    }
}

/// Summary of a latency sample in seconds. `std` is `None` for a single
/// sample: one observation says nothing about spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("latency summary of no samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latency sample".into()));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            let ss: f64 = samples.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            n,
            mean,
            std,
            min: sorted[0],
            p50: percentile(&sorted, 0.5),
            p90: percentile(&sorted, 0.9),
            p99: percentile(&sorted, 0.99),
            max: sorted[n - 1],
        })
    }
}

/// Linear-interpolated quantile of an ascending, non-empty slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    sorted[lo] + f * (sorted[hi] - sorted[lo])
}

/// `sum_k |dddot p_k|^2 dt` with third differences of positions sampled
/// every `dt`, row-major `T x dof`. Fewer than four samples give zero.
pub fn integrated_squared_jerk(positions: &[f64], dof: usize, dt: f64) -> f64 {
    let n = positions.len() / dof;
    if n < 4 {
        return 0.0;
    }
    let p = |k: usize, d: usize| positions[k * dof + d];
    let dt3 = dt * dt * dt;
    let mut total = 0.0;
    for k in 0..n - 3 {
        for d in 0..dof {
            let j = (p(k + 3, d) - 3.0 * p(k + 2, d) + 3.0 * p(k + 1, d) - p(k, d)) / dt3;
            total += j * j;
        }
    }
    total * dt
}

/// Per-axis finite-difference velocities, `(T - 1) x dof`.
pub fn velocity_trace(positions: &[f64], dof: usize, dt: f64) -> Vec<f64> {
    let n = positions.len() / dof;
    let mut out = Vec::with_capacity(n.saturating_sub(1) * dof);
    for k in 1..n {
        for d in 0..dof {
            out.push((positions[k * dof + d] - positions[(k - 1) * dof + d]) / dt);
        }
    }
    out
}

/// Largest displacement from the first sample, `max_k |p_k - p_0|`.
pub fn segment_amplitude(positions: &[f64], dof: usize) -> f64 {
    let p0 = &positions[..dof];
    positions
        .chunks(dof)
        .map(|p| {
            p.iter()
                .zip(p0)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// RMS position error over all segments divided by their mean amplitude.
/// Each pair holds predicted and reference positions of equal length.
pub fn amplitude_relative_rms(pairs: &[(Vec<f64>, Vec<f64>)], dof: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no segments to compare".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut amp = 0.0;
    for (pred, truth) in pairs {
        if pred.len() != truth.len() || truth.len() % dof != 0 {
            return Err(Error::Shape("segment lengths differ".into()));
        }
        sq += pred
            .iter()
            .zip(truth)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        count += truth.len() / dof;
        amp += segment_amplitude(truth, dof);
    }
    let amp = amp / pairs.len() as f64;
    if !(amp > 0.0) {
        return Err(Error::InvalidConfig(
            "reference segments do not move".into(),
        ));
    }
    Ok((sq / count as f64).sqrt() / amp)
}

/// Energy distance between two point clouds, V-statistic form:
/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|`. Zero for identical samples.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidConfig(
            "energy distance needs two non-empty samples".into(),
        ));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let mean_dist = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += p
                    .iter()
                    .zip(q)
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn wilson_interval_contains_the_rate(n in 1usize..2000, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).round() as usize;
            let r = SuccessRate::new(k, n).unwrap();
            prop_assert!(0.0 <= r.ci_low && r.ci_low <= r.rate);
            prop_assert!(r.rate <= r.ci_high && r.ci_high <= 1.0);
        }

        #[test]
        fn energy_distance_is_symmetric_and_nonnegative(
            a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..12),
            b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..12),
        ) {
            let ab = energy_distance(&a, &b).unwrap();
            let ba = energy_distance(&b, &a).unwrap();
            prop_assert!(ab >= -1e-12);
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(energy_distance(&a, &a).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn energy_distance_of_point_masses_is_twice_their_gap() {
        let x = vec![vec![0.0, 0.0]; 3];
        let y = vec![vec![3.0, 4.0]; 5];
        assert!((energy_distance(&x, &y).unwrap() - 10.0).abs() < 1e-12);
        // {0, 2} against {1}: 2*1 - (0+2+2+0)/4 - 0 = 1
        let x = vec![vec![0.0], vec![2.0]];
        let y = vec![vec![1.0]];
        assert!((energy_distance(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(energy_distance(&x, &[]).is_err());
    }

    #[test]
    fn wilson_known_values() {
        // 8/10 at 95%: (0.4902, 0.9433).
        let (lo, hi) = wilson_interval(8, 10, Z95).unwrap();
        assert!((lo - 0.4902).abs() < 1e-4, "{lo}");
        assert!((hi - 0.9433).abs() < 1e-4, "{hi}");
        let (lo, hi) = wilson_interval(0, 5, Z95).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 1.0);
        assert!(wilson_interval(0, 0, Z95).is_err());
        assert!(wilson_interval(3, 2, Z95).is_err());
    }

    #[test]
    fn single_latency_has_no_spread() {
        let s = LatencyStats::from_samples(&[0.004]).unwrap();
        assert_eq!(s.std, None);
        assert_eq!(s.p50, 0.004);
        let s = LatencyStats::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.std.unwrap() - 1.290_994_448_735_805_6).abs() < 1e-12);
        assert_eq!(s.p50, 2.5);
        assert!(LatencyStats::from_samples(&[]).is_err());
    }

    #[test]
    fn constant_velocity_has_no_jerk() {
        let pos: Vec<f64> = (0..30)
            .flat_map(|k| [0.1 * k as f64, 2.0 - 0.03 * k as f64])
            .collect();
        assert!(integrated_squared_jerk(&pos, 2, 0.05) < 1e-12);
    }

    #[test]
    fn cubic_motion_has_constant_jerk() {
        let dt = 0.1;
        let pos: Vec<f64> = (0..11).map(|k| (k as f64 * dt).powi(3)).collect();
        // Jerk 6 over 8 third differences.
        let isj = integrated_squared_jerk(&pos, 1, dt);
        assert!((isj - 36.0 * 8.0 * dt).abs() < 1e-6, "{isj}");
    }

    #[test]
    fn relative_rms_scales_with_amplitude() {
        let truth = vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0];
        let pred = vec![0.0, 0.1, 1.0, 0.1, 2.0, 0.1];
        let r = amplitude_relative_rms(&[(pred, truth)], 2).unwrap();
        assert!((r - 0.05).abs() < 1e-12);
    }
}
