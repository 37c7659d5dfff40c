//! Calibration probe: pretraining pipeline + two contrasting detection
//! cells at candidate grid budgets, with learning-curve prints.

use std::time::Instant;

use tsad::data::*;
use tsad::detector::*;
use tsad::eval::*;
use tsad::flow::*;
use tsad::train::*;

fn quick_fmap(model: &DetectorModel, test: &Dataset, n: usize) -> (f64, f64, f64) {
    let ecfg = EvalConfig { alphas: vec![0.5], ..Default::default() };
    let mut sub = Vec::new();
    for i in 0..n.min(test.len()) {
        let s = test.video(i).unwrap();
        let fl = 3 * SIDE * SIDE;
        let pairs = s.frame_count - 1;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for t in 0..pairs {
            a.extend_from_slice(&s.frames[t * fl..(t + 1) * fl]);
            b.extend_from_slice(&s.frames[(t + 1) * fl..(t + 2) * fl]);
        }
        let f0 = tsad::autodiff::Tensor::new(vec![pairs, 3, SIDE, SIDE], a).unwrap();
        let f1 = tsad::autodiff::Tensor::new(vec![pairs, 3, SIDE, SIDE], b).unwrap();
        let dets = model.detect(&f0, &f1, ecfg.confidence).unwrap();
        for (t, frame_dets) in dets.into_iter().enumerate() {
            let best =
                frame_dets.into_iter().max_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
            sub.push(FrameDetections {
                dets: best.into_iter().collect(),
                gts: vec![(s.boxes.as_ref().unwrap()[t], s.class_id as usize)],
            });
        }
    }
    let report = score_frames(&sub, &test.manifest.classes, &ecfg, vec![]).unwrap();
    let (acc, miou) = top1_class_accuracy_and_iou(&sub);
    (report.per_alpha[0].fmap, acc, miou)
}

fn main() {
    let t0 = Instant::now();
    let root = std::env::temp_dir().join("tsad-grid-probe2");
    let _ = std::fs::remove_dir_all(&root);
    for (kind, count, split) in [
        (DatasetKind::Detection, 480usize, "train"),
        (DatasetKind::Detection, 120, "test"),
        (DatasetKind::Recognition, 960, "train"),
        (DatasetKind::Static, 360, "train"),
    ] {
        let dir = root.join(format!("{kind:?}-{split}"));
        generate_dataset(&dir, &DatasetSpec { kind, count, seed: 7, split: split.into() })
            .unwrap();
    }
    let det_train = Dataset::load(&root.join("Detection-train")).unwrap();
    let det_test = Dataset::load(&root.join("Detection-test")).unwrap();
    let recog = Dataset::load(&root.join("Recognition-train")).unwrap();
    let statics = Dataset::load(&root.join("Static-train")).unwrap();
    println!("[{:.0}s] datasets ready", t0.elapsed().as_secs_f64());

    let budget = GridBudget {
        detect_steps: 500,
        detect_batch: 6,
        detect_lr: 1e-3,
        flow_lr_divisor: 20.0,
        flow_steps: 500,
        flow_batch: 8,
        recog_steps: 500,
        recog_batch: 8,
        static_steps: 400,
        static_batch: 8,
    };
    let data = GridDatasets {
        detection_train: &det_train,
        detection_test: &det_test,
        recognition_train: &recog,
        static_train: &statics,
    };
    let mut pipeline = PretrainPipeline::new(&data, budget.clone(), 1000).unwrap();
    let mut log = |msg: &str| println!("[{:.0}s] {msg}", t0.elapsed().as_secs_f64());

    // flow ladder after equal-budget pretraining
    let mut zero_aee = 0.0;
    {
        let spec = FlowNetSpec::new(FlowVariant::Sd);
        let zero_params: tsad::params::Params<f32> =
            spec.param_shapes().into_iter().map(|(n, s)| (n, tsad::autodiff::Tensor::zeros(s))).collect();
        zero_aee = aee_of_params(&spec, &zero_params, &det_test, 200).unwrap();
    }
    println!("zero-flow AEE baseline: {zero_aee:.4}");
    for variant in FlowVariant::ALL {
        let ckpt = pipeline.flow_checkpoint(variant, &mut log).unwrap();
        let aee = aee_of_params(&FlowNetSpec::new(variant), &ckpt.params, &det_test, 200).unwrap();
        println!("[{:.0}s] {} AEE: {aee:.4}", t0.elapsed().as_secs_f64(), variant.name());
    }

    // recognition transfer quality
    let recog_ckpt = pipeline.recognition_checkpoint(&mut log).unwrap();
    let rcfg = TrainConfig::recognition(
        pipeline.detector_config().clone(),
        FlowSource::Learned(FlowVariant::Full),
    );
    let acc = recognition_accuracy(&rcfg, &recog_ckpt.params, &det_test, 120).unwrap();
    println!("[{:.0}s] recognition holdout accuracy: {acc:.3}", t0.elapsed().as_secs_f64());

    // two contrasting cells with learning curves
    for cell in [
        CellSpec {
            name: "classical+static".into(),
            flow: FlowSource::Classical(ClassicalFlowParams::default()),
            pretrain: PretrainKind::Static,
            freeze_flow: true,
        },
        CellSpec {
            name: "full-tuned+recog".into(),
            flow: FlowSource::Learned(FlowVariant::Full),
            pretrain: PretrainKind::Recognition,
            freeze_flow: false,
        },
    ] {
        let (cfg, inits) = pipeline.cell_run(&cell, 0, &mut log).unwrap();
        let mut trainer = Trainer::fresh(cfg.clone(), &[]).unwrap();
        for (ckpt, strip) in &inits {
            apply_transfer_with(&mut trainer.params, ckpt, Stage::Detection, |n| {
                !(*strip && n.starts_with("flow."))
            })
            .unwrap();
        }
        let phase = Instant::now();
        for block in 0..4 {
            for _ in 0..125 {
                trainer.step(&det_train).unwrap();
            }
            let model = DetectorModel {
                cfg: cfg.detector.clone(),
                flow: cfg.flow.clone(),
                params: trainer.params.clone(),
            };
            let (fmap, acc, miou) = quick_fmap(&model, &det_test, 40);
            println!(
                "[{:.0}s] {} step {}: fmap {fmap:.3} acc {acc:.3} mIoU {miou:.3} ({:.0}s)",
                t0.elapsed().as_secs_f64(),
                cell.name,
                (block + 1) * 125,
                phase.elapsed().as_secs_f64()
            );
        }
    }
    println!("total {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
}
