//! Teacher and student behaviour on small problems: noise moments, the
//! zero network, sampler step counts, contraction, overfitting one
//! demonstration and loss curves.

use primdiff::distill::{distill, ema_update, teacher_k_step, DistillConfig, StudentModel};
use primdiff::envs::{generate_dataset, DatasetConfig, EnvKind};
use primdiff::metrics::amplitude_relative_rms;
use primdiff::nn::{Activation, ApproximatorSpec, ApproximatorWeights};
use primdiff::par::Exec;
use primdiff::space::TrainRecord;
use primdiff::teacher::{
    add_noise, make_schedule, preconditioning, score, train_teacher, NoiseSchedule, TeacherConfig,
    TeacherModel,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn push_data(
    demos: usize,
    seed: u64,
) -> (
    primdiff::envs::Dataset,
    primdiff::space::TrajectorySpace,
    Vec<TrainRecord>,
) {
    let ds = generate_dataset(
        EnvKind::PushBlock,
        demos,
        &DatasetConfig::default(),
        seed,
        Exec::Parallel,
    )
    .unwrap();
    let space = ds.space().unwrap();
    let recs = ds.train_records(&space);
    (ds, space, recs)
}

#[test]
fn added_noise_has_unit_moments() {
    let tau0 = [0.3, -1.0, 2.0, 0.0];
    let sigma = 0.7;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..n {
        let x = add_noise(&tau0, sigma, &mut rng);
        for d in 0..4 {
            let e = (x[d] - tau0[d]) / sigma;
            sum[d] += e;
            sq[d] += e * e;
        }
    }
    for d in 0..4 {
        let mean = sum[d] / n as f64;
        let var = sq[d] / n as f64 - mean * mean;
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "variance {var}");
    }
    assert_eq!(add_noise(&tau0, 0.0, &mut rng), tau0.to_vec());
    let a = add_noise(&tau0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let b = add_noise(&tau0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn score_matches_its_formula(
        d in prop::collection::vec(-5.0f64..5.0, 6),
        x in prop::collection::vec(-5.0f64..5.0, 6),
        sigma in 0.01f64..10.0,
    ) {
        let s = score(&d, &x, sigma);
        for i in 0..6 {
            let want = (d[i] - x[i]) / (sigma * sigma);
            prop_assert!((s[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

fn zero_teacher(
    space: primdiff::space::TrajectorySpace,
    obs_std: primdiff::space::Standardizer,
    schedule: NoiseSchedule,
) -> TeacherModel {
    let cfg = TeacherConfig {
        hidden: vec![8],
        ..Default::default()
    };
    let mut t = TeacherModel::new(space, obs_std, schedule, &cfg).unwrap();
    t.net = ApproximatorWeights::zeros(t.net.spec()).unwrap();
    t
}

#[test]
fn zero_network_denoiser_is_the_preconditioned_skip() {
    let (ds, space, recs) = push_data(2, 3);
    let schedule = make_schedule(20, 0.002, 8.0, 7.0)
        .unwrap()
        .with_sigma_data(0.1)
        .unwrap();
    let t = zero_teacher(space.clone(), ds.obs_std.clone(), schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for r in recs.iter().take(5) {
        for sigma in [0.01, 0.3, 5.0] {
            let tau = add_noise(&r.tau0, sigma, &mut rng);
            let z = t.denoise_z(&tau, &r.obs, &r.v0, sigma).unwrap();
            let (c_skip, _, _) = preconditioning(sigma, 0.1);
            let want: Vec<f64> = space
                .pullback(&tau, &r.v0)
                .iter()
                .map(|p| c_skip * p)
                .collect();
            for (a, b) in z.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}

#[test]
fn sampler_step_counts_and_determinism() {
    let (ds, space, _) = push_data(2, 3);
    let rec = &ds.records[0];
    let one = NoiseSchedule::from_levels(vec![8.0], 0.1).unwrap();
    let t1 = zero_teacher(space.clone(), ds.obs_std.clone(), one);
    let s = t1
        .sample_multistep(&rec.obs, &rec.bc, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap();
    assert_eq!(s.evals, 1);
    // A single level denoises the initial draw once at sigma_max.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tau = add_noise(&vec![0.0; space.traj_dim()], 8.0, &mut rng);
    let z = t1
        .denoise_z(&tau, &ds.obs_std.apply(&rec.obs), &rec.bc.y0_dot, 8.0)
        .unwrap();
    assert_eq!(s.z, z);

    let sched = make_schedule(20, 0.002, 8.0, 7.0)
        .unwrap()
        .with_sigma_data(0.1)
        .unwrap();
    let t20 = zero_teacher(space, ds.obs_std.clone(), sched);
    let a = t20
        .sample_multistep(&rec.obs, &rec.bc, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let b = t20
        .sample_multistep(&rec.obs, &rec.bc, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    assert_eq!(a.evals, 20);
    assert_eq!(a.z, b.z);
    for d in 0..2 {
        assert!((a.traj.position(0)[d] - rec.bc.y0[d]).abs() <= 1e-9);
        assert!((a.traj.velocity(0)[d] - rec.bc.y0_dot[d]).abs() <= 1e-6);
    }
}

/// With data concentrated at one point (tiny `sigma_data`) the zero network
/// is an essentially exact denoiser; each ODE hop must move towards the
/// clean trajectory.
#[test]
fn teacher_hops_contract_towards_a_point_mass() {
    let (ds, space, recs) = push_data(2, 3);
    let sched = make_schedule(20, 0.002, 4.0, 7.0)
        .unwrap()
        .with_sigma_data(1e-4)
        .unwrap();
    let t = zero_teacher(space.clone(), ds.obs_std.clone(), sched);
    let r = &recs[0];
    let v0 = r.v0.clone();
    let clean = space.z_to_traj(&vec![0.0; space.param_dim()], &v0);
    let dist = |x: &[f64]| {
        x.iter()
            .zip(&clean)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut before, mut after) = (0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let t_hi = t.schedule.t(n + 1).unwrap();
        let tau = add_noise(&clean, t_hi, &mut rng);
        let (lo, _) = teacher_k_step(&t, &tau, &r.obs, &v0, n, 1).unwrap();
        before += dist(&tau);
        after += dist(&lo);
    }
    assert!(after < before, "{after} vs {before}");

    let tau = add_noise(&clean, 1.0, &mut rng);
    let (same, _) = teacher_k_step(&t, &tau, &r.obs, &v0, 5, 0).unwrap();
    assert_eq!(same, tau);
    let (x1, z1) = teacher_k_step(&t, &tau, &r.obs, &v0, 5, 2).unwrap();
    let (x2, z2) = teacher_k_step(&t, &tau, &r.obs, &v0, 5, 2).unwrap();
    assert_eq!((x1, z1), (x2, z2));
}

#[test]
fn ema_update_endpoints() {
    let spec = ApproximatorSpec::new(1, vec![1], 1, Activation::Identity, 0);
    let phi = ApproximatorWeights::from_params(spec.clone(), vec![0.0; 4]).unwrap();
    let mut target = ApproximatorWeights::from_params(spec.clone(), vec![1.0; 4]).unwrap();
    ema_update(&mut target, &phi, 1.0).unwrap();
    assert_eq!(target.params(), &[1.0; 4]);
    ema_update(&mut target, &phi, 0.95).unwrap();
    assert!(target.params().iter().all(|v| (v - 0.95).abs() < 1e-15));
    ema_update(&mut target, &phi, 0.0).unwrap();
    assert_eq!(target.params(), phi.params());
}

/// One push demonstration, overfit by a small teacher and then distilled;
/// both samplers must reproduce the demonstrated segments.
#[test]
fn overfitting_one_demonstration() {
    let (ds, space, recs) = push_data(1, 11);
    let tcfg = TeacherConfig {
        hidden: vec![64, 64],
        steps: 12000,
        batch: 32,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    let teacher = train_teacher(
        space,
        ds.obs_std.clone(),
        &recs,
        &tcfg,
        &mut rng,
        Exec::Parallel,
        |_, l, _| {
            losses.push(l);
            Ok(())
        },
    )
    .unwrap();
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "teacher loss {head} -> {tail}");

    let mut pairs = Vec::new();
    for r in &ds.records {
        let s = teacher.sample_multistep(&r.obs, &r.bc, &mut rng).unwrap();
        pairs.push((s.traj.positions, r.segment.clone()));
    }
    let rel = amplitude_relative_rms(&pairs, 2).unwrap();
    assert!(rel <= 0.05, "teacher relative RMS {rel}");

    // Near the bottom of the schedule the denoiser returns the clean segment.
    let eps = teacher.schedule.epsilon;
    let mut pairs = Vec::new();
    for (r, tr) in ds.records.iter().zip(&recs) {
        let tau = add_noise(&tr.tau0, eps, &mut rng);
        let (_, traj) = teacher.denoise(&tau, &r.obs, &r.bc, eps).unwrap();
        pairs.push((traj.positions, r.segment.clone()));
    }
    let rel_eps = amplitude_relative_rms(&pairs, 2).unwrap();
    assert!(rel_eps <= rel.max(0.01), "denoised at epsilon {rel_eps}");

    let dcfg = DistillConfig {
        hidden: vec![64, 64],
        steps: 15000,
        batch: 32,
        top_level_fraction: 0.5,
        ..Default::default()
    };
    let mut dl = Vec::new();
    let student: StudentModel = distill(
        &teacher,
        &recs,
        &dcfg,
        &mut rng,
        Exec::Parallel,
        |_, l, _| {
            dl.push(l);
            Ok(())
        },
    )
    .unwrap();
    let mut pairs = Vec::new();
    for r in &ds.records {
        let s = student.one_step_generate(&r.obs, &r.bc, &mut rng).unwrap();
        pairs.push((s.traj.positions, r.segment.clone()));
    }
    let rel = amplitude_relative_rms(&pairs, 2).unwrap();
    assert!(rel <= 0.05, "student relative RMS {rel}");
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    // 100-step moving averages at step 100 and step 5000.
    let early = avg(&dl[..100]);
    let late = avg(&dl[4900..5000]);
    assert!(late * 10.0 <= early, "distillation loss {early} -> {late}");
}
