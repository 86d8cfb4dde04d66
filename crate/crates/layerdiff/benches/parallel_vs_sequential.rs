//! Compares the rayon-backed map against the sequential fallback on the
//! crate's two data-parallel hot spots: corpus rendering and batched
//! forward/backward item passes.

use criterion::{criterion_group, criterion_main, Criterion};

use layerdiff::backend::{Arch, DenoiserModel, Vocab};
use layerdiff::exec::{map_indexed_par, map_indexed_seq};
use layerdiff::rng::StageRng;
use layerdiff::synthdata::{render_scene, SceneFactors};
use layerdiff::types::NoiseSchedule;

const BATCH: usize = 8;

fn bench_corpus_render(c: &mut Criterion) {
    let grid = SceneFactors::grid();
    let mut g = c.benchmark_group("corpus_render_64");
    g.bench_function("sequential", |b| {
        b.iter(|| map_indexed_seq(64, |i| render_scene(grid[i % grid.len()], i as u64)))
    });
    g.bench_function("parallel", |b| {
        b.iter(|| map_indexed_par(64, |i| render_scene(grid[i % grid.len()], i as u64)))
    });
    g.finish();
}

fn bench_item_passes(c: &mut Criterion) {
    let model = DenoiserModel::new(
        Arch::probe(),
        Vocab::default(),
        NoiseSchedule::default_linear(),
        0,
    );
    let arch = *model.arch();
    let n_elem = arch.latent_c * arch.latent_h * arch.latent_w;
    let embed = model.encode_text("a large red square on a blue background").unwrap();

    let mut rng = StageRng::new(0, "bench");
    let items: Vec<(Vec<f64>, u32)> = (0..BATCH)
        .map(|_| (rng.normal_vec(n_elem), rng.uniform_int(1, 1000) as u32))
        .collect();

    let pass = |i: usize| -> Vec<f64> {
        let (x, t) = &items[i];
        let (out, cache) = model.forward_planar(x, *t, embed.data());
        let d_out: Vec<f64> = out.iter().map(|v| 2.0 * v / n_elem as f64).collect();
        model.backward_planar(&cache, &d_out).embed
    };

    let mut g = c.benchmark_group("forward_backward_batch8");
    g.sample_size(20);
    g.bench_function("sequential", |b| b.iter(|| map_indexed_seq(BATCH, pass)));
    g.bench_function("parallel", |b| b.iter(|| map_indexed_par(BATCH, pass)));
    g.finish();
}

criterion_group!(benches, bench_corpus_render, bench_item_passes);
criterion_main!(benches);
