//! Batch work under `Exec::Parallel` and `Exec::Sequential`: one teacher
//! gradient step, one distillation step and expert dataset generation.
//! Build with `--no-default-features` to compile rayon out entirely.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use primdiff::distill::{distill_step, DistillConfig, StudentModel};
use primdiff::envs::{generate_dataset, DatasetConfig, EnvKind};
use primdiff::nn::{AdamConfig, OptimizerState};
use primdiff::par::Exec;
use primdiff::teacher::{
    estimate_sigma_data, make_schedule, teacher_train_step, TeacherConfig, TeacherModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [
    ("parallel", Exec::Parallel),
    ("sequential", Exec::Sequential),
];

fn training_steps(c: &mut Criterion) {
    let ds = generate_dataset(
        EnvKind::PushBlock,
        4,
        &DatasetConfig::default(),
        1,
        Exec::Parallel,
    )
    .unwrap();
    let space = ds.space().unwrap();
    let records = ds.train_records(&space);
    let batch: Vec<_> = records.iter().cycle().take(64).collect();
    let tcfg = TeacherConfig::default();
    let sd = estimate_sigma_data(&records).unwrap();
    let schedule = make_schedule(
        tcfg.levels,
        tcfg.sigma_min,
        tcfg.sigma_max_factor * sd,
        tcfg.rho,
    )
    .unwrap()
    .with_sigma_data(sd)
    .unwrap();
    let teacher = TeacherModel::new(space, ds.obs_std.clone(), schedule, &tcfg).unwrap();
    let dcfg = DistillConfig::default();

    let mut g = c.benchmark_group("teacher_step_batch64");
    for (name, exec) in MODES {
        let mut model = teacher.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), model.net.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                teacher_train_step(&mut model, &batch, &tcfg, &mut opt, &mut rng, exec).unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("distill_step_batch64");
    for (name, exec) in MODES {
        let mut student = StudentModel::new(&teacher, &dcfg).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default(), student.online.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                distill_step(
                    &teacher,
                    &mut student,
                    &batch,
                    &dcfg,
                    &mut opt,
                    &mut rng,
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("push_dataset_8_demos");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                generate_dataset(EnvKind::PushBlock, 8, &DatasetConfig::default(), 1, exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, training_steps, dataset_generation);
criterion_main!(benches);
