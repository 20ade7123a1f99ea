use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ropelab_core::attention::attention_forward;
use ropelab_core::planner::{default_lengths, emit_curve, PlanQuery};
use ropelab_core::rope::apply_partial_rope;
use ropelab_core::train::synthetic::{SyntheticTask, TaskKind};
use ropelab_core::{
    AttentionConfig, AttentionParams, Model, ModelConfig, RopeCache, RopeConfig, Tape, Tensor,
    TopologyKind,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = random(&mut rng, &[2048, n]);
        let b = random(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::inference();
                black_box(
                    tape.constant(a.clone())
                        .matmul(&tape.constant(b.clone()))
                        .unwrap()
                        .to_tensor(),
                )
            })
        });
    }
    group.finish();
}

fn rope(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[32, 4, 64, 32]);
    let mut group = c.benchmark_group("rope_apply");
    for f in [0.25, 1.0] {
        let cache = RopeCache::build(&RopeConfig::new(32, f, 64).unwrap()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(f), &f, |bench, _| {
            bench.iter(|| black_box(apply_partial_rope(&x, &cache, 0).unwrap()))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rope = RopeConfig::new(32, 0.25, 64).unwrap();
    let cfg = AttentionConfig::new(128, 4, 4, true, rope.clone()).unwrap();
    let cache = RopeCache::build(&rope).unwrap();
    let params = AttentionParams::init(&cfg, &mut rng, 0.02, 0.02);
    let x = random(&mut rng, &[8, 64, 128]);
    c.bench_function("attention_forward", |bench| {
        bench.iter(|| {
            let tape = Tape::inference();
            let p = params.bind(&tape);
            black_box(
                attention_forward(&tape.constant(x.clone()), &p, &cfg, &cache)
                    .unwrap()
                    .to_tensor(),
            )
        })
    });
    c.bench_function("attention_forward_backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let y = attention_forward(&tape.leaf(x.clone()), &p, &cfg, &cache).unwrap();
            let loss = y.mean().unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let model = Model::new(
        ModelConfig::desk(64, 64, 0.25, TopologyKind::Sequential).unwrap(),
        0,
    )
    .unwrap();
    let task = SyntheticTask::new(TaskKind::Reverse, 64, 64).unwrap();
    let (tokens, targets) = task
        .sample_batch(8, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let mut group = c.benchmark_group("desk_model");
    group.sample_size(10);
    group.bench_function("loss_and_grads_b8", |bench| {
        bench.iter(|| black_box(model.loss_and_grads(&tokens, &targets).unwrap()))
    });
    group.finish();
}

fn plan_curve(c: &mut Criterion) {
    let lengths = default_lengths();
    c.bench_function("plan_curve_full_grid", |bench| {
        bench.iter(|| {
            black_box(
                emit_curve(&[0.1, 0.25, 1.0], &lengths, &PlanQuery::new(1, 256, 1.0)).unwrap(),
            )
        })
    });
}

criterion_group!(benches, matmul, rope, attention, train_step, plan_curve);
criterion_main!(benches);
