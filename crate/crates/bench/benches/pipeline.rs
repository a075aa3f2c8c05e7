use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use priorfuse_core::data::ImagePair;
use priorfuse_core::encoder::Modality;
use priorfuse_core::losses::sobel_magnitude;
use priorfuse_core::metrics::{mi, psnr, scd, ssim_sum};
use priorfuse_core::model::{Batch, BranchModel, JointModel, JointSpec, ModelConfig};
use priorfuse_core::pilot::{select_from_weights, SelectionRule};
use priorfuse_core::synth::shapes_dataset;
use priorfuse_core::trainer::fuse_pair;
use std::hint::black_box;

fn pair(size: usize) -> ImagePair {
    shapes_dataset(1, size, 17).unwrap().remove(0)
}

fn metrics(c: &mut Criterion) {
    let p = pair(128);
    let (ir, vi) = (p.infrared.clone(), p.visible_luma());
    let fused = priorfuse_core::data::Plane::from_fn(128, 128, |y, x| 0.5 * (ir.get(y, x) + vi.get(y, x)));
    let mut g = c.benchmark_group("metrics_128");
    g.bench_function("mi", |b| b.iter(|| mi(black_box(&fused), &ir, &vi).unwrap()));
    g.bench_function("ssim_sum", |b| b.iter(|| ssim_sum(black_box(&fused), &ir, &vi).unwrap()));
    g.bench_function("psnr", |b| b.iter(|| psnr(black_box(&fused), &ir, &vi).unwrap()));
    g.bench_function("scd", |b| b.iter(|| scd(black_box(&fused), &ir, &vi).unwrap()));
    g.finish();
}

fn sobel(c: &mut Criterion) {
    let mut g = c.benchmark_group("sobel_magnitude");
    for size in [64, 256] {
        let p = pair(size);
        let batch = Batch::from_pairs(&[&p]).unwrap();
        let x = batch.input(Modality::Ir);
        g.bench_with_input(BenchmarkId::from_parameter(size), x, |b, x| {
            b.iter(|| sobel_magnitude(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let model = BranchModel::new(&ModelConfig::default(), Modality::Ir, 0).unwrap();
    let mut g = c.benchmark_group("branch_forward");
    g.sample_size(10);
    for size in [64, 128] {
        let p = pair(size);
        let batch = Batch::from_pairs(&[&p]).unwrap();
        let x = batch.input(Modality::Ir);
        g.bench_with_input(BenchmarkId::from_parameter(size), x, |b, x| {
            b.iter(|| model.branch.forward(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn fusion(c: &mut Criterion) {
    let mut w = [0.05; 8];
    w[1] = 0.4;
    w[6] = 0.25;
    let rule = SelectionRule::default();
    let spec = JointSpec {
        model: ModelConfig::default(),
        selection_ir: select_from_weights(Modality::Ir, &w, rule).unwrap(),
        selection_vi: select_from_weights(Modality::Vi, &w, rule).unwrap(),
    };
    let model = JointModel::new(spec, 0).unwrap();
    let p = pair(96);
    let mut g = c.benchmark_group("fuse_pair");
    g.sample_size(10);
    g.bench_function("96", |b| b.iter(|| fuse_pair(&model, black_box(&p)).unwrap()));
    g.finish();
}

criterion_group!(benches, metrics, sobel, encoder, fusion);
criterion_main!(benches);
