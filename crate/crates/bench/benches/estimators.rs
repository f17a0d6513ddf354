//! Advantage, KL and training-step throughput.

use std::hint::black_box;

use advlab_bench::{batch, binary_rewards, policy, prompts};
use advlab_core::advantage::{adv_grpo_batch, adv_rloo_batch, adv_rpp_baseline};
use advlab_core::klpen::{k2_loss_gradient, k3_loss_gradient};
use advlab_core::oracle::mc_conditional_advantage;
use advlab_core::{BiasProbeConfig, EstimatorKind, StdConvention, TrainConfig, Trainer};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_advantages(c: &mut Criterion) {
    let mut group = c.benchmark_group("advantage");
    for groups in [16, 256] {
        let (rewards, layout) = binary_rewards(groups, 4, 1);
        group.bench_with_input(BenchmarkId::new("grpo", groups), &rewards, |b, r| {
            b.iter(|| adv_grpo_batch(black_box(r), &layout, 1e-8, StdConvention::Population).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rloo", groups), &rewards, |b, r| {
            b.iter(|| adv_rloo_batch(black_box(r), &layout).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rpp_baseline", groups), &rewards, |b, r| {
            b.iter(|| adv_rpp_baseline(black_box(r), &layout, 1e-8).unwrap())
        });
    }
    group.finish();
}

fn bench_kl_gradients(c: &mut Criterion) {
    let params = policy(1, 8, 16);
    let reference = policy(1, 8, 16);
    let trajectories = batch(&params, &reference, 64);
    c.bench_function("k2_loss_gradient_64x8", |b| {
        b.iter(|| k2_loss_gradient(&params, black_box(&trajectories)).unwrap())
    });
    c.bench_function("k3_loss_gradient_64x8", |b| {
        b.iter(|| k3_loss_gradient(&params, black_box(&trajectories)).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let set = prompts(8, 8);
    let init = policy(set.len(), 4, 4);
    let mut group = c.benchmark_group("train_iteration");
    for est in [EstimatorKind::GrpoLocal, EstimatorKind::RPlusPlusBaseline, EstimatorKind::Gae] {
        let cfg = TrainConfig {
            estimator: est,
            ..TrainConfig::default()
        };
        group.bench_function(est.key(), |b| {
            b.iter_batched(
                || Trainer::new(cfg.clone(), set.clone(), init.clone()).unwrap(),
                |mut t| t.run_iteration().unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn bench_bias_probe(c: &mut Criterion) {
    let cfg = BiasProbeConfig {
        n: 8,
        sigma: 1.0,
        eps_i: 1.0,
        trials: 1 << 16,
        seed: 0,
    };
    c.bench_function("conditional_advantage_65k_trials", |b| {
        b.iter(|| mc_conditional_advantage(black_box(&cfg)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_advantages, bench_kl_gradients, bench_training_step, bench_bias_probe
}
criterion_main!(benches);
