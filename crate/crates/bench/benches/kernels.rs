use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ledits::rng;
use ledits::tasks;
use ledits::toy_model::{Example, MlpArch, MlpDenoiser, IMAGE_PIXELS};
use ledits::{
    gmm_eps, invert, ledits_edit, ConceptEdit, Condition, Direction, EditParams, GmmPredictor,
    GuidanceConfig, ScheduleParams,
};

fn analytic(c: &mut Criterion) {
    let s = ScheduleParams::with_default_betas(100, 1.0)
        .build()
        .unwrap();
    let g = tasks::three_component();
    let x = [0.3, -0.2];
    c.bench_function("gmm_eps/3 components", |b| {
        b.iter(|| gmm_eps(black_box(&x), 50, &g, &s).unwrap())
    });

    let p = GmmPredictor::new(tasks::two_component(), s.clone());
    let x0 = vec![-1.0, 0.2];
    c.bench_function("invert/T=100", |b| {
        b.iter(|| invert(black_box(&x0), &p, &Condition::Unconditional, &s, 1).unwrap())
    });
    let params = EditParams {
        target: Condition::single(1),
        guidance: GuidanceConfig {
            concepts: vec![ConceptEdit::new(Condition::single(1), Direction::Add)],
            ..Default::default()
        },
        ..EditParams::default()
    };
    c.bench_function("ledits_edit/defaults", |b| {
        b.iter(|| ledits_edit(black_box(&x0), &p, &params).unwrap())
    });
}

fn mlp(c: &mut Criterion) {
    let s = ScheduleParams::with_default_betas(100, 1.0)
        .build()
        .unwrap();
    let mut group = c.benchmark_group("mlp");
    for dim in [2, IMAGE_PIXELS] {
        let model = MlpDenoiser::init(MlpArch::new(dim, 2), &s, 0).unwrap();
        let mut r = rng::seeded(1);
        let x = rng::standard_normal(&mut r, dim);
        group.bench_with_input(BenchmarkId::new("forward", dim), &x, |b, x| {
            b.iter(|| model.forward(black_box(x), 40, 0).unwrap())
        });
        let batch: Vec<Example> = (0..64)
            .map(|i| Example {
                x0: rng::standard_normal(&mut r, dim),
                t: 1 + i % 100,
                eps: rng::standard_normal(&mut r, dim),
                cond_id: i % 3,
            })
            .collect();
        group.bench_with_input(
            BenchmarkId::new("loss_and_grads/64", dim),
            &batch,
            |b, batch| b.iter(|| model.loss_and_grads(black_box(batch)).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, analytic, mlp);
criterion_main!(benches);
