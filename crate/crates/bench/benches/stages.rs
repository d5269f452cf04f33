use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use flowtrack_bench::fixture;
use flowtrack_core::background::{estimate_background, ThresholdParams};
use flowtrack_core::flow::pseudo_label;
use flowtrack_core::instances::{binarize_and_extract, InstanceParams};
use flowtrack_core::pipeline::{run_frames, stage_extract, PipelineConfig};
use flowtrack_core::refine::{dense_crf, refine_labels, CrfParams, RefineParams, Stage1Blend};
use flowtrack_core::tracker::{track_sequence, TrackerConfig};

fn stages(c: &mut Criterion) {
    let fx = fixture("S2", 20).expect("fixture");
    let cfg = PipelineConfig::default();
    let mut g = c.benchmark_group("stages");
    g.sample_size(10);

    g.bench_function("background_median_10", |b| {
        b.iter(|| estimate_background(black_box(&fx.grays), 10).unwrap())
    });
    g.bench_function("pseudo_label_pair", |b| {
        b.iter(|| {
            pseudo_label(
                &fx.grays[4],
                &fx.grays[5],
                &fx.background,
                &ThresholdParams::default(),
                0.5,
            )
            .unwrap()
        })
    });
    g.bench_function("dense_crf_frame", |b| {
        b.iter(|| dense_crf(&fx.frames[5], black_box(&fx.soft[5]), &CrfParams::default()).unwrap())
    });
    g.bench_function("refine_round_4_frames", |b| {
        let params = RefineParams {
            max_rounds: 1,
            ..Default::default()
        };
        let pred = Stage1Blend {
            stage1: fx.soft[..4].to_vec(),
        };
        b.iter(|| refine_labels(&fx.frames[..4], &fx.soft[..4], &pred, &params).unwrap())
    });
    g.bench_function("extract_frame", |b| {
        b.iter(|| binarize_and_extract(black_box(&fx.soft[5]), &InstanceParams::default()).unwrap())
    });
    let dets = stage_extract(&fx.soft, &cfg).unwrap();
    g.bench_function("track_20_frames", |b| {
        b.iter(|| track_sequence(black_box(&dets), &TrackerConfig::default()).unwrap())
    });
    g.bench_function("run_end_to_end_20_frames", |b| {
        let cfg = PipelineConfig {
            workers: Some(1),
            ..Default::default()
        };
        b.iter(|| run_frames(&fx.frames, None, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
