use std::time::Instant;
use tsad::data::*;
use tsad::detector::*;
use tsad::flow::*;
use tsad::train::*;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &DatasetSpec { kind: DatasetKind::Detection, count: 24, seed: 1, split: "train".into() }).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let mut boxes = Vec::new();
    for i in 0..ds.len() { boxes.extend(ds.video(i).unwrap().boxes.unwrap()); }
    let mut det = DetectorConfig::desk(6);
    det.anchors = anchors_kmeans(&boxes, 3, det.grid).unwrap();

    for (label, flow, batch) in [
        ("detect full b8", FlowSource::Learned(FlowVariant::Full), 8usize),
        ("detect css  b8", FlowSource::Learned(FlowVariant::Css), 8),
        ("detect sd   b8", FlowSource::Learned(FlowVariant::Sd), 8),
        ("detect classical b8", FlowSource::Classical(ClassicalFlowParams::default()), 8),
        ("detect full b4", FlowSource::Learned(FlowVariant::Full), 4),
    ] {
        let mut cfg = TrainConfig::detection(det.clone(), flow.clone());
        cfg.batch_size = batch; cfg.steps = 1000; cfg.seed = 3;
        if matches!(flow, FlowSource::Classical(_)) { cfg.freeze_flow = true; }
        let mut t = Trainer::fresh(cfg, &[]).unwrap();
        t.step(&ds).unwrap(); // warm
        let n = 6;
        let start = Instant::now();
        for _ in 0..n { t.step(&ds).unwrap(); }
        println!("{label}: {:.0} ms/step", start.elapsed().as_secs_f64()*1000.0/n as f64);
    }

    // frozen vs tuned cost
    let mut cfg = TrainConfig::detection(det.clone(), FlowSource::Learned(FlowVariant::Full));
    cfg.batch_size = 8; cfg.steps = 1000; cfg.freeze_flow = true;
    let mut t = Trainer::fresh(cfg, &[]).unwrap();
    t.step(&ds).unwrap();
    let start = Instant::now();
    for _ in 0..6 { t.step(&ds).unwrap(); }
    println!("detect full b8 frozen: {:.0} ms/step", start.elapsed().as_secs_f64()*1000.0/6.0);

    // flow pretrain step
    let mut cfg = TrainConfig::flow_pretrain(det.clone(), FlowSource::Learned(FlowVariant::Full));
    cfg.batch_size = 8;
    let mut t = Trainer::fresh(cfg, &[]).unwrap();
    t.step(&ds).unwrap();
    let start = Instant::now();
    for _ in 0..6 { t.step(&ds).unwrap(); }
    println!("flow-epe full b8: {:.0} ms/step", start.elapsed().as_secs_f64()*1000.0/6.0);

    // recognition step
    let rdir = tempfile::tempdir().unwrap();
    generate_dataset(rdir.path(), &DatasetSpec { kind: DatasetKind::Recognition, count: 24, seed: 2, split: "train".into() }).unwrap();
    let rds = Dataset::load(rdir.path()).unwrap();
    let mut cfg = TrainConfig::recognition(det.clone(), FlowSource::Learned(FlowVariant::Full));
    cfg.batch_size = 8;
    let mut t = Trainer::fresh(cfg, &[]).unwrap();
    t.step(&rds).unwrap();
    let start = Instant::now();
    for _ in 0..6 { t.step(&rds).unwrap(); }
    println!("recognition full-frozen b8: {:.0} ms/step", start.elapsed().as_secs_f64()*1000.0/6.0);

    // static step
    let sdir = tempfile::tempdir().unwrap();
    generate_dataset(sdir.path(), &DatasetSpec { kind: DatasetKind::Static, count: 24, seed: 3, split: "train".into() }).unwrap();
    let sds = Dataset::load(sdir.path()).unwrap();
    let mut sdet = DetectorConfig::desk(3);
    let mut sboxes = Vec::new();
    for i in 0..sds.len() { sboxes.extend(sds.video(i).unwrap().boxes.unwrap()); }
    sdet.anchors = anchors_kmeans(&sboxes, 3, sdet.grid).unwrap();
    let mut cfg = TrainConfig::static_pretrain(sdet);
    cfg.batch_size = 8;
    let mut t = Trainer::fresh(cfg, &[]).unwrap();
    t.step(&sds).unwrap();
    let start = Instant::now();
    for _ in 0..6 { t.step(&sds).unwrap(); }
    println!("static b8: {:.0} ms/step", start.elapsed().as_secs_f64()*1000.0/6.0);

    // inference fps rough
    let shapes: Vec<_> = stream_param_shapes(&det, StreamKind::Spatial).into_iter()
        .chain(stream_param_shapes(&det, StreamKind::Temporal))
        .chain(fuse_param_shapes(&det)).chain(head_param_shapes(&det))
        .chain(FlowNetSpec::new(FlowVariant::Sd).param_shapes()).collect();
    let model = DetectorModel { cfg: det.clone(), flow: FlowSource::Learned(FlowVariant::Sd), params: init_params(&shapes, 5) };
    let pairs = tsad::bench::bench_frames(32);
    let (f0, f1) = {
        let mut a = Vec::new(); let mut b = Vec::new();
        for (x, y) in &pairs[..4] { a.extend_from_slice(x); b.extend_from_slice(y); }
        (tsad::autodiff::Tensor::new(vec![4,3,64,64], a).unwrap(), tsad::autodiff::Tensor::new(vec![4,3,64,64], b).unwrap())
    };
    model.detect(&f0, &f1, 0.0).unwrap();
    let start = Instant::now();
    for _ in 0..10 { model.detect(&f0, &f1, 0.0).unwrap(); }
    println!("inference sd batch4: {:.1} ms/frame", start.elapsed().as_secs_f64()*1000.0/40.0);
}
