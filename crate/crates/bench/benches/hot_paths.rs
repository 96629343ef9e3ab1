use std::collections::HashSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use diqdiff::data::{leave_one_out_split, synthesize_corpus, Batch, SyntheticSpec};
use diqdiff::inference::{generate_next_item, rank_items, GenerationParams};
use diqdiff::training::{init_state, train_step};
use diqdiff::{ScheduleConfig, TrainConfig};

fn small_cfg(dim: usize) -> TrainConfig {
    TrainConfig {
        dim,
        codes: 8,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

fn corpus() -> diqdiff::data::Corpus {
    let spec = SyntheticSpec {
        users: 64,
        items: 64,
        clusters: 8,
        ..SyntheticSpec::default()
    };
    leave_one_out_split(&synthesize_corpus(&spec).unwrap()).unwrap()
}

fn bench_schedule(c: &mut Criterion) {
    c.bench_function("schedule_build_T32", |b| {
        b.iter(|| black_box(ScheduleConfig::default()).build().unwrap())
    });
}

fn bench_generation(c: &mut Criterion) {
    let corpus = corpus();
    let mut g = c.benchmark_group("generate_next_item");
    for dim in [32, 128] {
        let state = init_state(&corpus, &small_cfg(dim)).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let history = corpus.sequences[0].history.clone();
        g.bench_function(format!("D{dim}"), |b| {
            let mut seed = 0u64;
            b.iter(|| {
                seed += 1;
                generate_next_item(&state, &history, &sched, GenerationParams::default(), seed, false).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let corpus = corpus().training_view();
    let cfg = small_cfg(32);
    let sched = cfg.schedule.build().unwrap();
    let batch = Batch::from_indices(&corpus, &(0..32).collect::<Vec<_>>());
    let mut state = init_state(&corpus, &cfg).unwrap();
    c.bench_function("train_step_B32_D32", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            train_step(&mut state, &batch, &sched, &cfg, seed).unwrap()
        })
    });
}

fn bench_rank(c: &mut Criterion) {
    let corpus = corpus();
    let state = init_state(&corpus, &small_cfg(128)).unwrap();
    let x0: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
    c.bench_function("rank_items_top20", |b| {
        b.iter(|| rank_items(black_box(&x0), &state.embeddings, 20, &HashSet::new()).unwrap())
    });
}

criterion_group!(benches, bench_schedule, bench_generation, bench_train_step, bench_rank);
criterion_main!(benches);
