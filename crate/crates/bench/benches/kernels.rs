use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use modaltune_bench::{desk_model, survival_problem};
use modaltune_core::adapter::{ForwardOptions, TASK_GENERAL, TASK_SUBTYPE, TASK_SURVIVAL};
use modaltune_core::eval::{concordance_index, fit_cph};
use modaltune_core::numerics::Graph;
use std::hint::black_box;

fn encoder_forward(c: &mut Criterion) {
    let m = desk_model(64);
    c.bench_function("frozen encoder cls, 64 patches", |b| {
        b.iter(|| black_box(m.encoder.cls_embedding(&m.bag).unwrap()))
    });
}

fn adapter_step(c: &mut Criterion) {
    let m = desk_model(64);
    c.bench_function("adapter forward+backward, 3 prompts", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let tasks = [TASK_GENERAL, TASK_SURVIVAL, TASK_SUBTYPE];
            let vars = m
                .adapter
                .forward(&mut g, &m.encoder, &m.bag, &m.inputs, &tasks, None, ForwardOptions::eval())
                .unwrap();
            let mut loss = g.sum_all(vars[0].output);
            for v in &vars[1..] {
                let s = g.sum_all(v.output);
                loss = g.add(loss, s).unwrap();
            }
            black_box(g.backward(loss).unwrap().param_grads(&g, m.adapter.store()))
        })
    });
}

fn cph(c: &mut Criterion) {
    let (x, s) = survival_problem(200, 16);
    c.bench_function("cph newton fit, n=200 p=16", |b| {
        b.iter(|| black_box(fit_cph(&x, &s, 0.1).unwrap()))
    });
}

fn cindex(c: &mut Criterion) {
    let (x, s) = survival_problem(1000, 1);
    let risk: Vec<f64> = x.iter().map(|r| r[0]).collect();
    c.bench_function("c-index, n=1000", |b| {
        b.iter_batched(|| risk.clone(), |r| black_box(concordance_index(&r, &s).unwrap()), BatchSize::SmallInput)
    });
}

criterion_group!(benches, encoder_forward, adapter_step, cph, cindex);
criterion_main!(benches);
