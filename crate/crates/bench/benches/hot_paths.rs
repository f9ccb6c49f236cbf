use std::hint::black_box;

use bamrl_bench::{nature_net, sample_obs};
use bamrl_core::attack::{pgd_attack, AttackConfig};
use bamrl_core::conv::Conv2dGeometry;
use bamrl_core::recovery::{recover_policy, RecoveryConfig};
use bamrl_core::tape::Tape;
use bamrl_core::tensor::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn policy_forward(c: &mut Criterion) {
    let obs = sample_obs();
    let mut group = c.benchmark_group("policy_forward");
    for (name, with_bam) in [("baseline", false), ("bam", true)] {
        let net = nature_net(with_bam);
        group.bench_function(name, |b| {
            b.iter(|| net.forward(black_box(&obs)).expect("forward"))
        });
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    // The widest layer of the trunk: 8->16 channels on a 16x16 plane.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[4, 8, 16, 16], &mut rng);
    let w = rand_tensor(&[16, 8, 3, 3], &mut rng);
    let bias = Tensor::<f32>::zeros(&[16]);
    let geo = Conv2dGeometry::new(2, 1, 1).expect("valid geometry");

    c.bench_function("conv2d_forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.constant(black_box(x.clone()));
            let wv = tape.constant(w.clone());
            let bv = tape.constant(bias.clone());
            tape.conv2d(xv, wv, bv, geo).expect("conv")
        })
    });

    c.bench_function("conv2d_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.leaf(black_box(x.clone()), true);
            let wv = tape.leaf(w.clone(), true);
            let bv = tape.leaf(bias.clone(), true);
            let y = tape.conv2d(xv, wv, bv, geo).expect("conv");
            let loss = tape.sum(y);
            tape.backward(loss).expect("backward")
        })
    });
}

fn attack(c: &mut Criterion) {
    let net = nature_net(true);
    let obs = sample_obs();
    let cfg = AttackConfig {
        epsilon: 0.1,
        ..AttackConfig::default()
    };
    c.bench_function("pgd_attack_10_iters", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| pgd_attack(&net, black_box(&obs), &cfg, &mut rng).expect("attack"))
    });
}

fn recovery(c: &mut Criterion) {
    let net = nature_net(true);
    let obs = sample_obs();
    let cfg = RecoveryConfig::default();
    c.bench_function("recover_policy", |b| {
        b.iter(|| recover_policy(&net, black_box(&obs), &cfg).expect("recovery"))
    });
}

criterion_group!(benches, policy_forward, conv2d, attack, recovery);
criterion_main!(benches);
