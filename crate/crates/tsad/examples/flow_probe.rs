//! Flow pretraining probe: when does endpoint error dip below the
//! zero-flow baseline, per learning rate and variant?

use std::time::Instant;
use tsad::data::*;
use tsad::detector::{DetectorConfig, FlowSource};
use tsad::flow::*;
use tsad::train::*;

fn main() {
    let root = std::env::temp_dir().join("tsad-flow-probe");
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(
        &root.join("train"),
        &DatasetSpec { kind: DatasetKind::Detection, count: 480, seed: 7, split: "train".into() },
    )
    .unwrap();
    generate_dataset(
        &root.join("test"),
        &DatasetSpec { kind: DatasetKind::Detection, count: 60, seed: 7, split: "test".into() },
    )
    .unwrap();
    let train = Dataset::load(&root.join("train")).unwrap();
    let test = Dataset::load(&root.join("test")).unwrap();

    let zero: tsad::params::Params<f32> = FlowNetSpec::new(FlowVariant::Sd)
        .param_shapes()
        .into_iter()
        .map(|(n, s)| (n, tsad::autodiff::Tensor::zeros(s)))
        .collect();
    let base = aee_of_params(&FlowNetSpec::new(FlowVariant::Sd), &zero, &test, 150).unwrap();
    println!("zero-flow baseline AEE {base:.4}");

    for (variant, lr, batch) in [
        (FlowVariant::Sd, 1e-3, 8usize),
        (FlowVariant::Sd, 3e-3, 8),
        (FlowVariant::Sd, 3e-3, 16),
        (FlowVariant::Css, 3e-3, 8),
    ] {
        let det = DetectorConfig::desk(6);
        let mut cfg = TrainConfig::flow_pretrain(det, FlowSource::Learned(variant));
        cfg.batch_size = batch;
        cfg.base_lr = lr;
        cfg.flow_lr = lr;
        cfg.steps = 1_000_000;
        cfg.seed = 11;
        let mut t = Trainer::fresh(cfg, &[]).unwrap();
        let start = Instant::now();
        println!("--- {} lr {lr} batch {batch}", variant.name());
        for block in 0..8 {
            let mut acc = 0.0;
            for _ in 0..250 {
                acc += t.step(&train).unwrap();
            }
            let aee = holdout_aee(&t, &test, 150).unwrap();
            println!(
                "step {}: loss {:.4} AEE {:.4} [{:.0}s]",
                (block + 1) * 250,
                acc / 250.0,
                aee,
                start.elapsed().as_secs_f64()
            );
            if aee < 0.55 * base {
                break;
            }
        }
    }
}
