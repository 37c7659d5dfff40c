//! Command-line front end: dataset generation, staged training, evaluation,
//! sweeps, the ablation grid, throughput benchmarking and qualitative
//! inference, all driven by one JSON config with dotted-flag overrides.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use tsad::data::{generate_dataset, Dataset, DatasetKind, DatasetSpec};
use tsad::detector::{anchors_kmeans, DetectorConfig, DetectorModel, FlowSource};
use tsad::eval::{self, EvalConfig};
use tsad::flow::FlowVariant;
use tsad::train::{
    self, apply_transfer_with, load_checkpoint, run_stage, save_checkpoint, Stage,
    StageData, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "tsad", disable_version_flag = true)]
/// Two-stream action detection on synthetic video with trainable flow.
struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print version as JSON and exit.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic datasets under the data root.
    Gen {
        /// detection | recognition | static | all
        #[arg(long, default_value = "all")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain one learned flow variant on endpoint error.
    PretrainFlow {
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value = "runs/flow")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain both streams on video recognition.
    PretrainRecog {
        /// Static-stage checkpoint for the spatial stream.
        #[arg(long)]
        init_static: Option<PathBuf>,
        /// Flow checkpoint for the temporal front end.
        #[arg(long)]
        init_flow: Option<PathBuf>,
        #[arg(long, default_value = "runs/recog")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the spatial stream on static shape detection.
    PretrainStatic {
        #[arg(long, default_value = "runs/static")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the detector (optionally from pretraining checkpoints).
    Train {
        /// Checkpoints applied in order (strict transfer).
        #[arg(long)]
        init: Vec<PathBuf>,
        /// Checkpoints applied without their flow parameters.
        #[arg(long)]
        init_streams_only: Vec<PathBuf>,
        #[arg(long, default_value = "runs/detect")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        freeze_flow: Option<bool>,
    },
    /// Evaluate a detection checkpoint: f-mAP report + PR curves.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// f-mAP vs IoU-threshold sweep.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Run the ablation grid and emit its table.
    Ablate {
        /// Grid spec JSON; the standard 8-cell grid when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Throughput/latency benchmark (integrated vs external flow).
    Bench {
        /// Detection checkpoint; a fresh-initialized model when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// integrated | external | compare
        #[arg(long, default_value = "compare")]
        mode: String,
        /// Flow variants to ladder over (default: full,css,sd).
        #[arg(long, value_delimiter = ',', default_values_t = ["full".to_string(), "css".to_string(), "sd".to_string()])]
        variants: Vec<String>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        batch: Vec<usize>,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
    },
    /// Detect on one stored video; writes per-frame JSON + annotated PNGs.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample index within the detection test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value = "runs/infer")]
        out: PathBuf,
    },
    /// Print the full default config JSON (machine-readable schema).
    Schema,
    /// Internal: external flow worker over stdin/stdout.
    #[command(hide = true)]
    FlowWorker { ckpt: PathBuf },
}

fn main() -> ExitCode {
    let (args, overrides) = config::split_dotted_args(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help itself; print and classify
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    if cli.version {
        println!(
            "{}",
            serde_json::json!({"name": "tsad", "version": env!("CARGO_PKG_VERSION")})
        );
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.cmd else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    let cfg = match config::load(cli.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(cmd, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage_like = e.downcast_ref::<tsad::Error>().map(|te| {
                matches!(
                    te,
                    tsad::Error::Config(_)
                        | tsad::Error::Usage(_)
                        | tsad::Error::Input(_)
                        | tsad::Error::Format(_)
                )
            });
            match usage_like {
                Some(true) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn detection_dir(cfg: &ExperimentConfig, split: &str) -> PathBuf {
    cfg.data.root.join("detection").join(split)
}

fn load_split(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn detector_with_anchors(train: &Dataset, classes: usize) -> Result<DetectorConfig> {
    let mut boxes = Vec::new();
    for i in 0..train.len() {
        if let Some(bs) = train.video(i)?.boxes {
            boxes.extend(bs);
        }
    }
    let mut det = DetectorConfig::desk(classes);
    det.anchors = anchors_kmeans(&boxes, det.num_anchors(), det.grid)?;
    Ok(det)
}

fn progress(msg: &str) {
    eprintln!("[tsad] {msg}");
}

fn run(cmd: Cmd, cfg: ExperimentConfig) -> Result<()> {
    match cmd {
        Cmd::Gen { preset, seed, out } => {
            let root = out.unwrap_or_else(|| cfg.data.root.clone());
            let seed = seed.unwrap_or(cfg.data.seed);
            let mut jobs: Vec<(DatasetKind, usize, &str, PathBuf)> = Vec::new();
            match preset.as_str() {
                "detection" | "all" => {
                    jobs.push((
                        DatasetKind::Detection,
                        cfg.data.detection_train,
                        "train",
                        root.join("detection/train"),
                    ));
                    jobs.push((
                        DatasetKind::Detection,
                        cfg.data.detection_test,
                        "test",
                        root.join("detection/test"),
                    ));
                }
                _ => {}
            }
            if preset == "recognition" || preset == "all" {
                jobs.push((
                    DatasetKind::Recognition,
                    cfg.data.recognition,
                    "train",
                    root.join("recognition/train"),
                ));
            }
            if preset == "static" || preset == "all" {
                jobs.push((
                    DatasetKind::Static,
                    cfg.data.static_count,
                    "train",
                    root.join("static/train"),
                ));
            }
            if jobs.is_empty() {
                bail!("unknown preset `{preset}` (detection | recognition | static | all)");
            }
            for (kind, count, split, dir) in jobs {
                progress(&format!("generating {kind:?} `{split}` x{count} -> {}", dir.display()));
                let manifest = generate_dataset(
                    &dir,
                    &DatasetSpec { kind, count, seed, split: split.into() },
                )?;
                progress(&format!("wrote {} samples", manifest.count));
            }
            Ok(())
        }

        Cmd::PretrainFlow { variant, out, seed } => {
            let variant = FlowVariant::from_name(&variant)
                .ok_or_else(|| anyhow!("unknown variant `{variant}` (full | css | sd)"))?;
            let train_ds = load_split(&detection_dir(&cfg, "train"))?;
            let test_ds = load_split(&detection_dir(&cfg, "test"))?;
            let det = detector_with_anchors(&train_ds, 6)?;
            let mut tc = TrainConfig::flow_pretrain(det, FlowSource::Learned(variant));
            tc.steps = cfg.train.flow_steps;
            tc.batch_size = cfg.train.flow_batch;
            tc.base_lr = cfg.train.flow_pretrain_lr;
            tc.flow_lr = cfg.train.flow_pretrain_lr;
            tc.seed = seed.unwrap_or(cfg.train.seed);
            tc.eval_every = cfg.train.eval_every;
            let data = StageData { train: &train_ds, holdout: Some(&test_ds) };
            let (ckpt, _) = run_stage(&tc, &data, &[], Some(&out))?;
            progress(&format!("flow `{}` pretrained; checkpoint under {}", variant.name(), out.display()));
            let aee = train::aee_of_params(
                &tsad::flow::FlowNetSpec::new(variant),
                &ckpt.params,
                &test_ds,
                300,
            )?;
            progress(&format!("held-out AEE: {aee:.4} px"));
            Ok(())
        }

        Cmd::PretrainStatic { out, seed } => {
            let static_ds = load_split(&cfg.data.root.join("static/train"))?;
            let det = detector_with_anchors(&static_ds, 3)?;
            let mut tc = TrainConfig::static_pretrain(det);
            tc.steps = cfg.train.static_steps;
            tc.batch_size = cfg.train.static_batch;
            tc.seed = seed.unwrap_or(cfg.train.seed);
            let data = StageData { train: &static_ds, holdout: None };
            run_stage(&tc, &data, &[], Some(&out))?;
            progress(&format!("static pretraining done -> {}", out.display()));
            Ok(())
        }

        Cmd::PretrainRecog { init_static, init_flow, out, seed } => {
            let recog_ds = load_split(&cfg.data.root.join("recognition/train"))?;
            let det_train = load_split(&detection_dir(&cfg, "train"))?;
            let det = detector_with_anchors(&det_train, 6)?;
            let mut tc = TrainConfig::recognition(det, cfg.flow.source()?);
            tc.steps = cfg.train.recog_steps;
            tc.batch_size = cfg.train.recog_batch;
            tc.base_lr = cfg.train.recog_lr;
            tc.flow_lr = cfg.train.recog_lr / cfg.train.flow_lr_divisor;
            tc.seed = seed.unwrap_or(cfg.train.seed);
            let mut inits = Vec::new();
            for path in [init_static, init_flow].into_iter().flatten() {
                inits.push(load_checkpoint(&path)?);
            }
            let data = StageData { train: &recog_ds, holdout: None };
            let (ckpt, _) = run_stage(&tc, &data, &inits, Some(&out))?;
            let acc = train::recognition_accuracy(&tc, &ckpt.params, &recog_ds, 200)?;
            progress(&format!("recognition pretraining done; train accuracy {acc:.3}"));
            Ok(())
        }

        Cmd::Train { init, init_streams_only, out, seed, freeze_flow } => {
            let train_ds = load_split(&detection_dir(&cfg, "train"))?;
            let test_ds = load_split(&detection_dir(&cfg, "test"))?;
            let det = detector_with_anchors(&train_ds, 6)?;
            let mut tc = TrainConfig::detection(det, cfg.flow.source()?);
            tc.optimizer = cfg.train.optimizer()?;
            tc.base_lr = cfg.train.base_lr;
            tc.flow_lr = cfg.train.base_lr / cfg.train.flow_lr_divisor;
            tc.batch_size = cfg.train.batch;
            tc.steps = cfg.train.steps;
            tc.seed = seed.unwrap_or(cfg.train.seed);
            tc.freeze_flow = freeze_flow.unwrap_or(cfg.train.freeze_flow);
            tc.eval_every = cfg.train.eval_every;

            let mut trainer = Trainer::fresh(tc.clone(), &[])?;
            for path in &init {
                let ckpt = load_checkpoint(path)?;
                let report =
                    apply_transfer_with(&mut trainer.params, &ckpt, Stage::Detection, |_| true)?;
                progress(&format!(
                    "{}: copied {} parameters, {} fresh",
                    path.display(),
                    report.copied.len(),
                    report.fresh
                ));
            }
            for path in &init_streams_only {
                let ckpt = load_checkpoint(path)?;
                let report = apply_transfer_with(&mut trainer.params, &ckpt, Stage::Detection, |n| {
                    !n.starts_with("flow.")
                })?;
                progress(&format!(
                    "{} (streams only): copied {} parameters",
                    path.display(),
                    report.copied.len()
                ));
            }
            let total = tc.steps;
            let mut curves = Vec::new();
            while trainer.step < total as u64 {
                let loss = trainer.step(&train_ds)?;
                let step = trainer.step;
                curves.push(train::CurveRow {
                    step,
                    split: "train".into(),
                    metric: "loss".into(),
                    value: loss,
                });
                if cfg.train.eval_every > 0 && step % cfg.train.eval_every as u64 == 0 {
                    let holdout = train::holdout_detection_loss(&trainer, &test_ds, 32)?;
                    curves.push(train::CurveRow {
                        step,
                        split: "holdout".into(),
                        metric: "loss".into(),
                        value: holdout,
                    });
                    progress(&format!("step {step}/{total} loss {loss:.4} holdout {holdout:.4}"));
                }
            }
            std::fs::create_dir_all(&out)?;
            let mut provenance: Vec<String> = Vec::new();
            for path in init.iter().chain(&init_streams_only) {
                let ckpt = load_checkpoint(path)?;
                for s in ckpt.provenance {
                    if !provenance.contains(&s) {
                        provenance.push(s);
                    }
                }
            }
            provenance.push("detection".into());
            let ckpt = trainer.to_checkpoint(provenance)?;
            save_checkpoint(&ckpt, &out.join("detection.ckpt"))?;
            std::fs::write(out.join("curves.csv"), train::curves_csv(&curves))?;
            progress(&format!("detection checkpoint -> {}", out.join("detection.ckpt").display()));
            Ok(())
        }

        Cmd::Eval { ckpt, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = train::model_from_checkpoint(&ckpt)?;
            let test_ds = load_split(&detection_dir(&cfg, "test"))?;
            let eval_cfg: EvalConfig = cfg.eval.eval_config()?;
            let report =
                eval::evaluate_with_provenance(&model, &test_ds, &eval_cfg, ckpt.provenance)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(out.join("pr_curves.csv"), eval::report_pr_csv(&report))?;
            std::fs::write(out.join("ap.csv"), eval::report_ap_csv(&report))?;
            for alpha in &report.per_alpha {
                progress(&format!("f-mAP@{:.2} = {:.4}", alpha.alpha, alpha.fmap));
            }
            Ok(())
        }

        Cmd::Sweep { ckpt, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = train::model_from_checkpoint(&ckpt)?;
            let test_ds = load_split(&detection_dir(&cfg, "test"))?;
            let rows = eval::threshold_sweep(&model, &test_ds, &eval::default_alpha_grid())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.csv"), eval::sweep_csv(&rows))?;
            progress(&format!("{} sweep rows -> {}", rows.len(), out.display()));
            Ok(())
        }

        Cmd::Ablate { spec, seeds, out } => {
            let det_train = load_split(&detection_dir(&cfg, "train"))?;
            let det_test = load_split(&detection_dir(&cfg, "test"))?;
            let recog = load_split(&cfg.data.root.join("recognition/train"))?;
            let static_ds = load_split(&cfg.data.root.join("static/train"))?;
            let mut grid_spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<eval::AblationSpec>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => {
                    let mut budget = eval::GridBudget::default();
                    budget.detect_steps = cfg.ablate.detect_steps;
                    budget.detect_batch = cfg.ablate.detect_batch;
                    budget.flow_steps = cfg.train.flow_steps;
                    budget.recog_steps = cfg.train.recog_steps;
                    budget.static_steps = cfg.train.static_steps;
                    eval::AblationSpec::standard(
                        (0..cfg.ablate.seeds as u64).collect(),
                        budget,
                    )
                }
            };
            if let Some(n) = seeds {
                grid_spec.seeds = (0..n as u64).collect();
            }
            let data = eval::GridDatasets {
                detection_train: &det_train,
                detection_test: &det_test,
                recognition_train: &recog,
                static_train: &static_ds,
            };
            let results = eval::run_grid(&data, &grid_spec, &mut progress_cb())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("ablation.csv"),
                eval::ablation_csv(&results, &grid_spec.eval_alphas),
            )?;
            std::fs::write(
                out.join("ablation.md"),
                eval::ablation_markdown(&results, &grid_spec.eval_alphas),
            )?;
            println!("{}", eval::ablation_markdown(&results, &grid_spec.eval_alphas));
            Ok(())
        }

        Cmd::Bench { ckpt, mode, variants, frames, batch, out } => {
            let frames = frames.unwrap_or(cfg.bench.frames);
            let batches = if batch.is_empty() { cfg.bench.batches.clone() } else { batch };
            let opts = tsad::bench::BenchOptions {
                warmup_frames: cfg.bench.warmup,
                repeats: cfg.bench.repeats,
                conf_threshold: 0.0,
            };
            let worker = tsad::bench::WorkerConfig {
                program: std::env::current_exe()?,
                prefix_args: vec!["flow-worker".into()],
            };
            let models: Vec<DetectorModel> = match &ckpt {
                Some(path) => vec![train::model_from_checkpoint(&load_checkpoint(path)?)?],
                None => variants
                    .iter()
                    .map(|v| -> Result<DetectorModel> {
                        let variant = FlowVariant::from_name(v)
                            .ok_or_else(|| anyhow!("unknown variant `{v}`"))?;
                        Ok(fresh_model(FlowSource::Learned(variant)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            std::fs::create_dir_all(&out)?;
            let mut reports = Vec::new();
            let mut comparisons = Vec::new();
            for model in &models {
                for &b in &batches {
                    match mode.as_str() {
                        "integrated" => {
                            let r = tsad::bench::measure(
                                model,
                                &tsad::bench::PipelineMode::Integrated { overlap: cfg.bench.overlap },
                                b,
                                frames,
                                &opts,
                            )?;
                            progress(&format!("{} batch {b}: {:.1} fps", r.flow, r.fps));
                            reports.push(r);
                        }
                        "external" => {
                            let r = tsad::bench::measure(
                                model,
                                &tsad::bench::PipelineMode::External { worker: worker.clone() },
                                b,
                                frames,
                                &opts,
                            )?;
                            progress(&format!("{} batch {b} external: {:.1} fps", r.flow, r.fps));
                            reports.push(r);
                        }
                        "compare" => {
                            let c = tsad::bench::compare_modes(model, &worker, b, frames, &opts)?;
                            progress(&format!(
                                "{} batch {b}: integrated {:.1} fps, external {:.1} fps, speedup {:.3}x",
                                c.integrated.flow, c.integrated.fps, c.external.fps, c.speedup
                            ));
                            reports.push(c.integrated.clone());
                            comparisons.push(c);
                        }
                        other => bail!("unknown mode `{other}` (integrated | external | compare)"),
                    }
                }
            }
            let variant_labels: Vec<String> =
                models.iter().map(|m| m.flow.label()).collect();
            std::fs::write(
                out.join("bench.csv"),
                tsad::bench::emit_table_csv(&reports, &variant_labels, &batches),
            )?;
            std::fs::write(
                out.join("bench.md"),
                tsad::bench::emit_table_markdown(&reports, &variant_labels, &batches),
            )?;
            if !comparisons.is_empty() {
                std::fs::write(
                    out.join("modes.json"),
                    serde_json::to_string_pretty(&comparisons)?,
                )?;
            }
            // measurement starts at raw frames; video decode is out of scope
            println!(
                "{}",
                tsad::bench::emit_table_markdown(&reports, &variant_labels, &batches)
            );
            Ok(())
        }

        Cmd::Infer { ckpt, sample, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = train::model_from_checkpoint(&ckpt)?;
            let test_ds = load_split(&detection_dir(&cfg, "test"))?;
            if sample >= test_ds.len() {
                bail!("sample {sample} out of range ({} test samples)", test_ds.len());
            }
            let eval_cfg = cfg.eval.eval_config()?;
            infer_sample(&model, &test_ds, sample, &eval_cfg, &out)?;
            progress(&format!("annotated frames + detections.json -> {}", out.display()));
            Ok(())
        }

        Cmd::Schema => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
            Ok(())
        }

        Cmd::FlowWorker { ckpt } => {
            tsad::bench::worker_main(&ckpt)?;
            Ok(())
        }
    }
}

fn progress_cb() -> impl FnMut(&str) {
    |msg: &str| progress(msg)
}

fn fresh_model(flow: FlowSource) -> DetectorModel {
    use tsad::detector::*;
    let cfg = DetectorConfig::desk(6);
    let mut shapes: Vec<_> = stream_param_shapes(&cfg, StreamKind::Spatial)
        .into_iter()
        .chain(stream_param_shapes(&cfg, StreamKind::Temporal))
        .chain(fuse_param_shapes(&cfg))
        .chain(head_param_shapes(&cfg))
        .collect();
    if let FlowSource::Learned(v) = &flow {
        shapes.extend(tsad::flow::FlowNetSpec::new(*v).param_shapes());
    }
    DetectorModel { cfg, flow, params: init_params(&shapes, 2024) }
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 200, 80],
    [70, 110, 240],
    [240, 200, 40],
    [200, 70, 220],
    [50, 210, 210],
];

fn infer_sample(
    model: &DetectorModel,
    ds: &Dataset,
    index: usize,
    eval_cfg: &EvalConfig,
    out: &Path,
) -> Result<()> {
    use tsad::data::{CHANNELS, SIDE};
    std::fs::create_dir_all(out)?;
    let sample = ds.video(index)?;
    let frame_len = CHANNELS * SIDE * SIDE;
    let mut all = Vec::new();
    for t in 0..sample.frame_count - 1 {
        let f0 = tsad::autodiff::Tensor::new(
            vec![1, CHANNELS, SIDE, SIDE],
            sample.frames[t * frame_len..(t + 1) * frame_len].to_vec(),
        )?;
        let f1 = tsad::autodiff::Tensor::new(
            vec![1, CHANNELS, SIDE, SIDE],
            sample.frames[(t + 1) * frame_len..(t + 2) * frame_len].to_vec(),
        )?;
        let dets = model.detect(&f0, &f1, eval_cfg.confidence)?;
        let selected: Vec<tsad::detector::Detection> = match eval_cfg.selection {
            tsad::eval::SelectionMode::Top1 => dets[0]
                .iter()
                .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
                .cloned()
                .into_iter()
                .collect(),
            tsad::eval::SelectionMode::Nms => tsad::eval::nms(&dets[0], eval_cfg.nms_iou),
        };

        // annotate
        let mut img = image::RgbImage::new(SIDE as u32, SIDE as u32);
        let frame = &sample.frames[t * frame_len..(t + 1) * frame_len];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let px = |c: usize| (frame[c * SIDE * SIDE + y * SIDE + x] * 255.0) as u8;
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        for d in &selected {
            let color = image::Rgb(PALETTE[d.class_id % PALETTE.len()]);
            let (x0, y0, x1, y1) = d.rect.corners();
            let to_px = |v: f32| ((v * SIDE as f32) as i32).clamp(0, SIDE as i32 - 1) as u32;
            let (x0, y0, x1, y1) = (to_px(x0), to_px(y0), to_px(x1), to_px(y1));
            for x in x0..=x1 {
                img.put_pixel(x, y0, color);
                img.put_pixel(x, y1, color);
            }
            for y in y0..=y1 {
                img.put_pixel(x0, y, color);
                img.put_pixel(x1, y, color);
            }
        }
        img.save(out.join(format!("frame_{t:03}.png")))?;
        all.push(serde_json::json!({
            "frame": t,
            "detections": selected,
            "ground_truth": sample.boxes.as_ref().map(|b| serde_json::to_value(b[t]).unwrap()),
            "class": sample.class_id,
        }));
    }
    std::fs::write(out.join("detections.json"), serde_json::to_string_pretty(&all)?)?;
    Ok(())
}
