//! Cross-process pipeline checks: the external flow worker must return
//! bit-identical flow, and both pipeline modes must produce identical
//! detections.

use std::path::PathBuf;

use tsad::bench::{
    bench_frames, compare_modes, measure, BenchOptions, ExternalFlow, PipelineMode, WorkerConfig,
};
use tsad::detector::{
    fuse_param_shapes, head_param_shapes, init_params, stream_param_shapes, DetectorConfig,
    DetectorModel, FlowSource, StreamKind,
};
use tsad::flow::{ClassicalFlowParams, FlowNetSpec, FlowVariant};

fn worker_config() -> WorkerConfig {
    WorkerConfig {
        program: PathBuf::from(env!("CARGO_BIN_EXE_tsad-flow-worker")),
        prefix_args: vec![],
    }
}

fn model(flow: FlowSource) -> DetectorModel {
    let cfg = DetectorConfig::desk(6);
    let mut shapes: Vec<_> = stream_param_shapes(&cfg, StreamKind::Spatial)
        .into_iter()
        .chain(stream_param_shapes(&cfg, StreamKind::Temporal))
        .chain(fuse_param_shapes(&cfg))
        .chain(head_param_shapes(&cfg))
        .collect();
    if let FlowSource::Learned(v) = &flow {
        shapes.extend(FlowNetSpec::new(*v).param_shapes());
    }
    DetectorModel { cfg, flow, params: init_params(&shapes, 99) }
}

#[test]
fn external_worker_returns_bit_identical_flow() {
    for flow in [
        FlowSource::Learned(FlowVariant::Sd),
        FlowSource::Classical(ClassicalFlowParams { iterations: 15, levels: 2, ..Default::default() }),
    ] {
        let m = model(flow);
        let pairs = bench_frames(3);
        let (f0, f1) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (x, y) in &pairs {
                a.extend_from_slice(x);
                b.extend_from_slice(y);
            }
            (
                tsad::autodiff::Tensor::new(vec![3, 3, 64, 64], a).unwrap(),
                tsad::autodiff::Tensor::new(vec![3, 3, 64, 64], b).unwrap(),
            )
        };
        let local = m.compute_flow(&f0, &f1).unwrap();
        let mut worker = ExternalFlow::spawn(&m, &worker_config()).unwrap();
        let remote = worker.flow(&f0, &f1).unwrap();
        assert_eq!(local.shape(), remote.shape());
        let identical = local
            .data()
            .iter()
            .zip(remote.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(identical, "worker flow differs from in-process flow");
    }
}

#[test]
fn modes_agree_and_report_speedup_fields() {
    let m = model(FlowSource::Learned(FlowVariant::Sd));
    let opts = BenchOptions { warmup_frames: 2, repeats: 1, conf_threshold: 0.0 };
    let cmp = compare_modes(&m, &worker_config(), 2, 6, &opts).unwrap();
    assert_eq!(cmp.integrated.detections_digest, cmp.external.detections_digest);
    assert!(cmp.speedup > 0.0);
    assert_eq!(cmp.integrated.mode, "integrated");
    assert_eq!(cmp.external.mode, "external");
}

#[test]
fn digest_stable_across_modes_and_batches() {
    let m = model(FlowSource::Learned(FlowVariant::Sd));
    let opts = BenchOptions { warmup_frames: 4, repeats: 1, conf_threshold: 0.0 };
    let worker = worker_config();
    let mut digests = Vec::new();
    for batch in [1usize, 4] {
        for mode in [
            PipelineMode::Integrated { overlap: false },
            PipelineMode::External { worker: worker.clone() },
        ] {
            digests.push(measure(&m, &mode, batch, 8, &opts).unwrap().detections_digest);
        }
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]), "digests {digests:?}");
}
