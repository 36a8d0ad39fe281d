use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dia_bench::{model, patches, rng, token_batches};
use dia_core::alignment::{pdl_loss_tape, pfr_reconstruct, PdlVariant, TokenPool};
use dia_core::gradcheck::random_tensor;
use dia_core::svd::svd;
use dia_core::tape::Tape;
use dia_core::tsai::{BankHook, Integration};
use dia_core::vit;

fn bench_svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd");
    for (rows, cols) in [(8, 32), (32, 8), (32, 32)] {
        let w = random_tensor(&mut rng(1), &[rows, cols]);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &w, |b, w| {
            b.iter(|| svd(black_box(w)).unwrap())
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("vit_forward_backward");
    g.sample_size(20);
    for tasks in [1, 5] {
        let (backbone, bank) = model(tasks);
        let x = patches(&backbone.config, 32, 2);
        g.bench_with_input(BenchmarkId::new("batch32_tasks", tasks), &tasks, |b, &tasks| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = backbone.bind(&mut tape, false);
                let mut hook = BankHook::bind(&bank, &mut tape, tasks, true, Integration::Routed);
                let input = tape.constant(x.clone());
                let out = vit::forward(&mut tape, &backbone.config, &vars, input, 32, &mut hook).unwrap();
                let loss = tape.sum(out).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.grad(hook.trainable_vars(&tape)[0]))
            })
        });
    }
    g.finish();
}

fn bench_pdl(c: &mut Criterion) {
    let seq = 17;
    let new = random_tensor(&mut rng(3), &[32 * seq, 32]);
    let old = random_tensor(&mut rng(4), &[32 * seq, 32]);
    c.bench_function("pdl_loss_tape_batch32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let n = tape.param(new.clone());
            let o = tape.constant(old.clone());
            let l = pdl_loss_tape(&mut tape, n, o, seq, PdlVariant::Patch).unwrap();
            tape.backward(l).unwrap();
            black_box(tape.grad(n))
        })
    });
}

fn bench_pfr(c: &mut Criterion) {
    let images = token_batches(32, 16, 32, 5);
    let pool = TokenPool::new(&images).unwrap();
    let mu = random_tensor(&mut rng(6), &[32]);
    c.bench_function("pfr_reconstruct_pool512", |b| {
        b.iter(|| pfr_reconstruct(black_box(mu.data()), &pool, 0.7).unwrap())
    });
}

criterion_group!(benches, bench_svd, bench_forward, bench_pdl, bench_pfr);
criterion_main!(benches);
