//! Compares thread-pool widths on the two hottest per-record loops: volume
//! preprocessing and stage-1 per-sample gradient tapes. Both fan out through
//! `exec::par_map`, so the width-1 pool measures the sequential cost and the
//! wide pool measures the parallel speedup on this machine. (Building with
//! `--no-default-features` removes rayon entirely and `par_map` becomes a
//! plain iterator; that build has no pool to size, so the comparison here
//! runs within the parallel build.)
//!
//! Run with `cargo bench -p survtune-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use survtune_core::dataprep::{
    generate_synth_cohort, preprocess_volume, SynthCohortConfig, VolumeMeta, DESK_TARGET_SPACING,
};
use survtune_core::exec::{par_map, with_threads};
use survtune_core::model::HeadKind;
use survtune_core::train::{prepare_synth_training, run_stage1, NullSink, Stage, TrainConfig};

/// Pool widths under comparison: sequential, and as wide as the host allows
/// (at least 2, so the parallel dispatch path is exercised even on a single
/// hardware thread).
fn widths() -> [usize; 2] {
    let n = std::thread::available_parallelism().map_or(2, |n| n.get());
    [1, n.max(2)]
}

fn bench_preprocess(c: &mut Criterion) {
    let cohort = generate_synth_cohort(&SynthCohortConfig {
        n_patients: 16,
        seed: 5,
        ..SynthCohortConfig::default()
    })
    .unwrap();
    let meta = VolumeMeta {
        dims: cohort.dims,
        spacing_mm: cohort.spacing_mm,
    };

    let mut group = c.benchmark_group("preprocess_16_volumes");
    group.sample_size(20);
    for threads in widths() {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| {
                with_threads(t, || {
                    par_map(&cohort.volumes, |raw| {
                        preprocess_volume(raw, &meta, cohort.dims, DESK_TARGET_SPACING).unwrap()
                    })
                })
            })
        });
    }
    group.finish();
}

fn bench_stage1_steps(c: &mut Criterion) {
    let cohort = generate_synth_cohort(&SynthCohortConfig {
        n_patients: 12,
        seed: 5,
        ..SynthCohortConfig::default()
    })
    .unwrap();
    let (_, params, data) =
        prepare_synth_training(&cohort, HeadKind::Continuous, 512, 0).unwrap();
    let mut cfg = TrainConfig::desk(Stage::Pretrain);
    cfg.total_steps = 2;
    cfg.warmup_steps = 1;
    cfg.batch_size = 6;
    cfg.grad_accum_steps = 1;

    let mut group = c.benchmark_group("stage1_two_steps_batch6");
    group.sample_size(10);
    for threads in widths() {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| {
                with_threads(t, || {
                    run_stage1(&data, params.clone(), &cfg, None, 0, &mut NullSink).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_preprocess, bench_stage1_steps);
criterion_main!(benches);
