use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use anchorbind::encoder::{Activation, MlpEncoder};
use anchorbind::loss::{infonce, LossVariant, Temperature};
use anchorbind::matrix::Matrix;
use anchorbind::retrieval::{rank_of_truth, similarity_matrix};
use anchorbind::Tape;

fn wave(rows: usize, cols: usize, phase: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.731 + phase).sin()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = wave(128, 64, 0.0);
    let b = wave(64, 32, 1.0);
    c.bench_function("matmul_128x64x32", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

fn infonce_step(c: &mut Criterion) {
    let enc = MlpEncoder::init(&[16, 64, 32], Activation::Tanh, 1).unwrap();
    let x = wave(128, 16, 0.3);
    let target = wave(128, 32, 2.0);
    for variant in [LossVariant::Directional, LossVariant::Symmetric] {
        c.bench_function(&format!("infonce_{}_fwd_bwd_k128", variant.as_str()), |bench| {
            bench.iter_batched(
                Tape::new,
                |mut tape| {
                    let xi = tape.constant(x.clone());
                    let g = enc.forward_tape(&mut tape, xi).unwrap();
                    let t = tape.constant(target.clone());
                    let s = Temperature::default().param(&mut tape);
                    let out = infonce(&mut tape, variant, g.output, t, s).unwrap();
                    tape.backward(out.loss).unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn ranking(c: &mut Criterion) {
    let q = wave(1000, 32, 0.1);
    let g = wave(1000, 32, 0.2);
    let truth: Vec<usize> = (0..1000).collect();
    c.bench_function("similarity_and_rank_1000", |bench| {
        bench.iter(|| {
            let sim = similarity_matrix(black_box(&q), black_box(&g)).unwrap();
            rank_of_truth(&sim, &truth).unwrap()
        })
    });
}

criterion_group!(benches, matmul, infonce_step, ranking);
criterion_main!(benches);
