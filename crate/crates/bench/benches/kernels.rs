use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use xmodal_core::autodiff::{DiffValue, Matrix};
use xmodal_core::codebook::nearest_rows;
use xmodal_core::encoders::{knn_indices, upsample_bilinear, ImageGrid};
use xmodal_core::infotheory::verify_all;
use xmodal_core::objectives::info_nce;

fn wave(rows: usize, cols: usize, f: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * f).sin())
}

fn matmul(c: &mut Criterion) {
    let a = wave(512, 32, 0.37);
    let b = wave(32, 32, 0.91);
    c.bench_function("matmul 512x32 * 32x32", |bench| bench.iter(|| black_box(a.matmul(&b))));
    c.bench_function("matmul_tn 512x32' * 512x32", |bench| bench.iter(|| black_box(a.matmul_tn(&a))));
}

fn codebook(c: &mut Criterion) {
    let book = wave(64, 16, 1.3);
    let features = wave(1024, 16, 0.7);
    c.bench_function("nearest_rows 1024 vs 64 codes", |bench| bench.iter(|| black_box(nearest_rows(&book, &features))));
}

fn neighbours(c: &mut Criterion) {
    let points = wave(512, 3, 0.123);
    c.bench_function("knn k=8 over 512 points", |bench| bench.iter(|| black_box(knn_indices(&points, 8))));
}

fn losses(c: &mut Criterion) {
    let f3 = DiffValue::param(wave(256, 16, 0.3)).l2_normalize_rows().unwrap();
    let f2 = DiffValue::param(wave(256, 16, 0.8)).l2_normalize_rows().unwrap();
    c.bench_function("info_nce forward+backward, 256 pairs", |bench| {
        bench.iter(|| {
            let l = info_nce(&f3, &f2, 0.07).unwrap();
            l.backward().unwrap();
            black_box(l.item())
        })
    });
    let grid = ImageGrid::new([32, 32], 4).unwrap();
    let patches = DiffValue::param(wave(64, 16, 0.5));
    c.bench_function("upsample_bilinear 8x8 -> 32x32, 16 channels", |bench| {
        bench.iter(|| black_box(upsample_bilinear(&patches, &grid, grid.patch).unwrap().sum().item()))
    });
}

fn theory(c: &mut Criterion) {
    c.bench_function("verify_all 10 cases", |bench| bench.iter(|| black_box(verify_all(10, 4, 0).unwrap().passed)));
}

criterion_group!(benches, matmul, codebook, neighbours, losses, theory);
criterion_main!(benches);
