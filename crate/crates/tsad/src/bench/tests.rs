use super::*;
use crate::detector::{
    fuse_param_shapes, head_param_shapes, init_params, stream_param_shapes, DetectorConfig,
    StreamKind,
};
use crate::flow::ClassicalFlowParams;

fn tiny_model() -> DetectorModel {
    let cfg = DetectorConfig::desk(6);
    let shapes: Vec<_> = stream_param_shapes(&cfg, StreamKind::Spatial)
        .into_iter()
        .chain(stream_param_shapes(&cfg, StreamKind::Temporal))
        .chain(fuse_param_shapes(&cfg))
        .chain(head_param_shapes(&cfg))
        .collect();
    DetectorModel {
        cfg,
        flow: FlowSource::Classical(ClassicalFlowParams {
            iterations: 5,
            levels: 2,
            ..Default::default()
        }),
        params: init_params(&shapes, 17),
    }
}

#[test]
fn bench_frames_are_deterministic() {
    let a = bench_frames(20);
    let b = bench_frames(20);
    assert_eq!(a.len(), 20);
    for ((a0, a1), (b0, b1)) in a.iter().zip(&b) {
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
    }
}

#[test]
fn measure_reports_populated_fields() {
    let model = tiny_model();
    let opts = BenchOptions { warmup_frames: 2, repeats: 2, conf_threshold: 0.0 };
    let report =
        measure(&model, &PipelineMode::Integrated { overlap: false }, 2, 8, &opts).unwrap();
    assert!(report.fps > 0.0);
    assert_eq!(report.batch, 2);
    assert!(report.frames >= 8);
    assert!(report.p95_ms >= report.p50_ms && report.p50_ms >= 0.0);
    assert!(!report.overlap_enabled);
    assert_eq!(report.mode, "integrated");
}

#[test]
fn overlap_mode_produces_identical_detections() {
    let model = tiny_model();
    let opts = BenchOptions { warmup_frames: 2, repeats: 1, conf_threshold: 0.0 };
    let plain =
        measure(&model, &PipelineMode::Integrated { overlap: false }, 2, 6, &opts).unwrap();
    let overlapped =
        measure(&model, &PipelineMode::Integrated { overlap: true }, 2, 6, &opts).unwrap();
    assert_eq!(plain.detections_digest, overlapped.detections_digest);
    assert!(overlapped.overlap_enabled);
}

#[test]
fn batch_digest_is_batch_size_invariant() {
    let model = tiny_model();
    let opts = BenchOptions { warmup_frames: 4, repeats: 1, conf_threshold: 0.0 };
    let b1 = measure(&model, &PipelineMode::Integrated { overlap: false }, 1, 8, &opts).unwrap();
    let b4 = measure(&model, &PipelineMode::Integrated { overlap: false }, 4, 8, &opts).unwrap();
    assert_eq!(b1.detections_digest, b4.detections_digest);
}

#[test]
fn table_formatting() {
    let mk = |flow: &str, batch: usize, fps: f64| BenchReport {
        mode: "integrated".into(),
        flow: flow.into(),
        batch,
        frames: 100,
        wall_seconds: 100.0 / fps,
        fps,
        p50_ms: 1.0,
        p95_ms: 2.0,
        overlap_enabled: false,
        detections_digest: 0,
    };
    let variants = vec!["flownet-full".to_string(), "flownet-css".into(), "flownet-sd".into()];
    let reports = vec![
        mk("flownet-full", 1, 12.04),
        mk("flownet-full", 4, 15.0),
        mk("flownet-css", 1, 17.0),
        mk("flownet-css", 4, 21.0),
        mk("flownet-sd", 1, 25.0),
        mk("flownet-sd", 4, 31.06),
    ];
    let csv = emit_table_csv(&reports, &variants, &[1, 4]);
    assert_eq!(csv.lines().count(), 4); // header + 3 variants
    assert!(csv.contains("flownet-full,12.0,15.0"));
    assert!(csv.contains("flownet-sd,25.0,31.1"));
    // re-emit is byte-identical
    assert_eq!(csv, emit_table_csv(&reports, &variants, &[1, 4]));

    // missing cells are explicit
    let partial = emit_table_csv(&reports[..1].to_vec(), &variants, &[1, 4]);
    assert!(partial.contains("flownet-css,-,-"));

    let md = emit_table_markdown(&reports, &variants, &[1, 4]);
    assert!(md.contains("| flownet-sd | 25.0 | 31.1 |"));
}
