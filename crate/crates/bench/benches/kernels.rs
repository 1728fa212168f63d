use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use unisearch_core::corpus::ImageGrid;
use unisearch_core::encoders::init_params;
use unisearch_core::eval::{recall_at_k, RetrievalTask};
use unisearch_core::lexicon::TokenSeq;
use unisearch_core::losses::{info_nce_symmetric_grad, similarity_matrix};
use unisearch_core::{Mat, ModelConfig};

/// Deterministic filler; benches need shapes, not realistic values.
fn filled(rows: usize, cols: usize, phase: f32) -> Mat<f32> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|i| (i as f32 * 0.731 + phase).sin()).collect())
}

fn gemm(c: &mut Criterion) {
    let a = filled(128, 64, 0.0);
    let b = filled(128, 64, 1.0);
    c.bench_function("matmul_t 128x64 . 64x128", |bch| bch.iter(|| black_box(&a).matmul_t(black_box(&b))));
}

fn encoders(c: &mut Criterion) {
    let cfg = ModelConfig { vocab_size: 200, ..ModelConfig::default() };
    let (text, image) = init_params::<f32>(&cfg, 7).unwrap();
    let short = TokenSeq::new((0..cfg.query_t_max as u32).map(|i| i % 200).collect(), 200, cfg.query_t_max).unwrap();
    let long = TokenSeq::new((0..cfg.text_t_max as u32).map(|i| (i * 7) % 200).collect(), 200, cfg.text_t_max).unwrap();
    let img = ImageGrid { pixels: (0..ImageGrid::LEN).map(|i| (i as f32 * 0.01).cos()).collect() };
    c.bench_function("text encode, query length", |b| b.iter(|| text.encode(black_box(&short), None).unwrap()));
    c.bench_function("text encode, chunk length", |b| b.iter(|| text.encode(black_box(&long), None).unwrap()));
    c.bench_function("image encode", |b| b.iter(|| image.encode(black_box(&img)).unwrap()));
}

fn contrastive(c: &mut Criterion) {
    let q = filled(32, 64, 0.0);
    let d = filled(32, 64, 2.0);
    c.bench_function("InfoNCE value+grad, batch 32", |b| {
        b.iter(|| {
            let s = similarity_matrix(black_box(&q), black_box(&d), 0.07).unwrap();
            info_nce_symmetric_grad(&s).unwrap()
        })
    });
}

fn retrieval(c: &mut Criterion) {
    let q = filled(300, 64, 0.0);
    let d = filled(300, 64, 3.0);
    let gold: Vec<Vec<usize>> = (0..300).map(|i| vec![i]).collect();
    let task = RetrievalTask::new(&q, &d, gold).unwrap();
    c.bench_function("recall@5, 300 x 300", |b| b.iter(|| recall_at_k(black_box(&task), 5).unwrap()));
}

criterion_group!(benches, gemm, encoders, contrastive, retrieval);
criterion_main!(benches);
