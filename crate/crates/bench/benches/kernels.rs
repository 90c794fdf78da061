use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mcpt_core::encoder::{self, Input};
use mcpt_core::imaging::Image;
use mcpt_core::spectral::{build_mdc_masks, compute_mdc, power_spectrum};
use mcpt_core::{fft, pipeline, RunConfig, Tape};
use mcpt_bench::{desk_model, pairs, random_grid};

fn spectral(c: &mut Criterion) {
    let mut g = c.benchmark_group("dft2");
    for side in [32, 64, 128] {
        let x = random_grid(side, 1);
        g.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| b.iter(|| fft::dft2(black_box(x)).unwrap()));
    }
    g.finish();
    let x = random_grid(64, 2);
    c.bench_function("power_spectrum_64", |b| b.iter(|| power_spectrum(black_box(&x)).unwrap()));
}

fn mdc(c: &mut Criterion) {
    let ps = pairs(4, 64);
    let masks = build_mdc_masks(25, 64, 64).unwrap();
    c.bench_function("mdc_masks_25x64", |b| b.iter(|| build_mdc_masks(25, 64, 64).unwrap()));
    c.bench_function("compute_mdc_25x64", |b| b.iter(|| compute_mdc(black_box(&ps[0]), &masks).unwrap()));
}

fn forward(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let (store, trainable) = desk_model(&cfg);
    let ps = pairs(2, cfg.encoder.image_size);
    let sar: Vec<&Image> = ps.iter().map(|p| &p.sar).collect();
    let stripped = encoder::strip_auxiliary(&store);
    c.bench_function("embed_2_images", |b| b.iter(|| encoder::embed(&stripped, &cfg.encoder, &sar, 32).unwrap()));

    let curves = pipeline::pair_curves(&cfg, &ps).unwrap();
    let bc: Vec<_> = curves.iter().collect();
    let refs: Vec<_> = ps.iter().collect();
    let views = pipeline::view_order(&refs, &ps);
    c.bench_function("pretrain_step_2_pairs", |b| {
        b.iter(|| {
            let mut tape = Tape::new(&store, &trainable);
            let loss = pipeline::pretrain_loss(&mut tape, &cfg, Input::Images(&views), &bc, 3).unwrap();
            tape.gradients(loss.total).unwrap()
        })
    });
}

criterion_group!(benches, spectral, mdc, forward);
criterion_main!(benches);
