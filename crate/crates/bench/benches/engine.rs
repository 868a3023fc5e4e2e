use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use uniedit_bench::{latent, matrix, panning_video, toy_model};
use uniedit_core::math::{attn, mask_fused_attn, AdditiveMask, AttnTensors, BlendMask};
use uniedit_core::metrics::{optical_flow, FlowConfig};
use uniedit_core::{
    embed_text, Branch, EditMode, EditRequest, EditSource, ForwardInfo, GuidancePass, NoHooks, NoisePredictor,
    NoiseSchedule,
};

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    // token counts of the 16x16 and 8x8 spatial layers, and a temporal group
    for n in [256usize, 64, 8] {
        let (q, k, v) = (matrix(n, 8, 1), matrix(n, 8, 2), matrix(n, 8, 3));
        let t = AttnTensors::new(q.view(), k.view(), v.view()).unwrap();
        g.bench_with_input(BenchmarkId::new("plain", n), &n, |b, _| b.iter(|| attn(black_box(&t))));
        let fg: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let bg: Vec<bool> = fg.iter().map(|f| !f).collect();
        let (mf, mb) = (AdditiveMask::from_visible_keys(n, &fg), AdditiveMask::from_visible_keys(n, &bg));
        let rows: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let mm = BlendMask::from_rows(&rows);
        g.bench_with_input(BenchmarkId::new("mask_fused", n), &n, |b, _| {
            b.iter(|| mask_fused_attn(black_box(&t), &mf, &mb, &mm).unwrap())
        });
    }
    g.finish();
}

fn predict_noise(c: &mut Criterion) {
    let model = toy_model();
    let cfg = model.config().clone();
    let text = embed_text("a square spinning over a wall", cfg.text_dim, cfg.seed);
    let mut g = c.benchmark_group("predict_noise");
    g.sample_size(20);
    for side in [8usize, 16] {
        let z = latent(side, 3);
        let info = ForwardInfo {
            branch: Branch::Edit,
            pass: GuidancePass::Cond,
            step: 0,
            timestep: 500.0,
        };
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| model.predict_noise(black_box(&z), &info, &text, &mut NoHooks).unwrap())
        });
    }
    g.finish();
}

fn edit_run(c: &mut Criterion) {
    let model = toy_model();
    let steps = 4;
    let sched = NoiseSchedule::linear(steps).unwrap();
    let layers = model.config().layers_per_kind();
    let z = latent(16, 5);
    let req = EditRequest::new(EditMode::Motion, EditSource::Noise(z), "", "a square spinning", steps, layers);
    let mut g = c.benchmark_group("edit");
    g.sample_size(10);
    g.bench_function("three_branch_t4_16x16", |b| {
        b.iter(|| uniedit_core::run_edit(black_box(&req), &model, &sched).unwrap())
    });
    g.finish();
}

fn flow(c: &mut Criterion) {
    let mut g = c.benchmark_group("optical_flow");
    for n in [32usize, 64] {
        let v = panning_video(4, n, 1.5);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| optical_flow(black_box(&v), &FlowConfig::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, attention, predict_noise, edit_run, flow);
criterion_main!(benches);
