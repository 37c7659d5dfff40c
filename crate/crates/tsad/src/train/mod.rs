//! Staged optimization: flow pretraining on endpoint error, two-stream
//! recognition pretraining, and joint detection training with optional
//! flow freezing or weak-rate fine-tuning. Checkpoints carry parameters,
//! optimizer moments, RNG state and the stage provenance chain.

pub mod checkpoint;
mod optim;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, Checkpoint, RngState};
pub use optim::{Optimizer, OptimizerKind};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{augment, AugmentConfig, Dataset, FramePair, VideoSample, CHANNELS, SIDE};
use crate::detector::{
    detection_loss, fuse_features, fuse_predict, head_param_shapes, init_params, stream_forward,
    stream_param_shapes, DetectorConfig, FlowSource, FrameTargets, StreamKind,
};
use crate::error::{Error, Result};
use crate::flow::{epe_loss, FlowNetSpec};
use crate::params::{bind, Params};

/// Training stages, in transfer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    /// Single-frame shape detection (spatial stream only).
    #[serde(rename = "static")]
    Static,
    /// Flow network pretraining on endpoint error.
    #[serde(rename = "flow-epe")]
    FlowEpe,
    /// Video-level action recognition (two streams + pooled head).
    #[serde(rename = "recognition")]
    Recognition,
    /// Joint video action detection.
    #[serde(rename = "detection")]
    Detection,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Static => "static",
            Stage::FlowEpe => "flow-epe",
            Stage::Recognition => "recognition",
            Stage::Detection => "detection",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        [Stage::Static, Stage::FlowEpe, Stage::Recognition, Stage::Detection]
            .into_iter()
            .find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    /// Learning rate for `flow.` parameters (fine-tuning uses a weak rate).
    pub flow_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Skip gradient computation for `flow.` parameters entirely.
    pub freeze_flow: bool,
    pub flow: FlowSource,
    pub detector: DetectorConfig,
    pub augment: AugmentConfig,
    /// Holdout evaluation cadence in steps (0 disables periodic eval).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn detection(detector: DetectorConfig, flow: FlowSource) -> Self {
        TrainConfig {
            stage: Stage::Detection,
            optimizer: OptimizerKind::Adam,
            base_lr: 5e-4,
            flow_lr: 5e-4 / 500.0,
            batch_size: 32,
            steps: 4000,
            seed: 0,
            freeze_flow: false,
            flow,
            detector,
            augment: AugmentConfig::default(),
            eval_every: 0,
        }
    }

    pub fn recognition(detector: DetectorConfig, flow: FlowSource) -> Self {
        TrainConfig {
            stage: Stage::Recognition,
            optimizer: OptimizerKind::SgdMomentum,
            base_lr: 2e-3,
            flow_lr: 2e-3 / 500.0,
            batch_size: 32,
            steps: 5000,
            seed: 0,
            freeze_flow: true,
            flow,
            detector,
            augment: AugmentConfig::default(),
            eval_every: 0,
        }
    }

    pub fn flow_pretrain(detector: DetectorConfig, flow: FlowSource) -> Self {
        TrainConfig {
            stage: Stage::FlowEpe,
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            flow_lr: 1e-3,
            batch_size: 32,
            steps: 3000,
            seed: 0,
            freeze_flow: false,
            flow,
            detector,
            augment: AugmentConfig::default(),
            eval_every: 0,
        }
    }

    pub fn static_pretrain(detector: DetectorConfig) -> Self {
        TrainConfig {
            stage: Stage::Static,
            optimizer: OptimizerKind::Adam,
            base_lr: 5e-4,
            flow_lr: 5e-4,
            batch_size: 32,
            steps: 1500,
            seed: 0,
            freeze_flow: true,
            flow: FlowSource::Classical(crate::flow::ClassicalFlowParams::default()),
            detector,
            augment: AugmentConfig::default(),
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.base_lr <= 0.0 || self.flow_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.flow_lr > self.base_lr {
            return Err(Error::config(format!(
                "flow lr {} exceeds base lr {}",
                self.flow_lr, self.base_lr
            )));
        }
        if self.stage == Stage::FlowEpe {
            if self.freeze_flow {
                return Err(Error::config("flow pretraining with frozen flow trains nothing"));
            }
            if !matches!(self.flow, FlowSource::Learned(_)) {
                return Err(Error::config("flow pretraining requires a learned variant"));
            }
        }
        self.detector.validate()
    }

    fn flow_spec(&self) -> Option<FlowNetSpec> {
        match &self.flow {
            FlowSource::Learned(v) => Some(FlowNetSpec::new(*v)),
            FlowSource::Classical(_) => None,
        }
    }
}

/// Parameter inventory for a stage's model.
pub fn stage_param_shapes(cfg: &TrainConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let det = &cfg.detector;
    let mut shapes = Vec::new();
    match cfg.stage {
        Stage::Static => {
            shapes.extend(stream_param_shapes(det, StreamKind::Spatial));
            // static head reads the spatial features directly
            shapes.push((
                "head.w".into(),
                vec![det.head_channels(), det.stream_out_channels(), 1, 1],
            ));
            shapes.push(("head.b".into(), vec![det.head_channels()]));
        }
        Stage::FlowEpe => {
            let spec = cfg
                .flow_spec()
                .ok_or_else(|| Error::config("flow pretraining requires a learned variant"))?;
            shapes.extend(spec.param_shapes());
        }
        Stage::Recognition => {
            shapes.extend(stream_param_shapes(det, StreamKind::Spatial));
            shapes.extend(stream_param_shapes(det, StreamKind::Temporal));
            shapes.extend(crate::detector::fuse_param_shapes(det));
            shapes.push(("recog.w".into(), vec![det.fusion_channels, det.classes]));
            shapes.push(("recog.b".into(), vec![det.classes]));
            if let Some(spec) = cfg.flow_spec() {
                shapes.extend(spec.param_shapes());
            }
        }
        Stage::Detection => {
            shapes.extend(stream_param_shapes(det, StreamKind::Spatial));
            shapes.extend(stream_param_shapes(det, StreamKind::Temporal));
            shapes.extend(crate::detector::fuse_param_shapes(det));
            shapes.extend(head_param_shapes(det));
            if let Some(spec) = cfg.flow_spec() {
                shapes.extend(spec.param_shapes());
            }
        }
    }
    Ok(shapes)
}

pub fn fresh_params(cfg: &TrainConfig) -> Result<Params<f32>> {
    Ok(init_params(&stage_param_shapes(cfg)?, cfg.seed))
}

#[derive(Debug, Clone, Default)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub fresh: usize,
}

fn allowed_prefixes(src_stage: &str, dst: Stage) -> &'static [&'static str] {
    match (src_stage, dst) {
        (s, d) if Stage::from_name(s) == Some(d) => &[""],
        ("static", Stage::Recognition) | ("static", Stage::Detection) => &["spatial."],
        ("flow-epe", Stage::Recognition) | ("flow-epe", Stage::Detection) => &["flow."],
        ("recognition", Stage::Detection) => &["spatial.", "temporal.", "fuse.", "flow."],
        _ => &[],
    }
}

/// Copy name-matched parameters from `src` into `params` under the
/// stage-pair transfer rules. Heads are never carried across stages.
pub fn apply_transfer(
    params: &mut Params<f32>,
    src: &Checkpoint,
    dst: Stage,
) -> Result<TransferReport> {
    apply_transfer_with(params, src, dst, |_| true)
}

/// [`apply_transfer`] with an extra caller-side name filter (used when a
/// checkpoint carries parameters for a different flow variant).
pub fn apply_transfer_with(
    params: &mut Params<f32>,
    src: &Checkpoint,
    dst: Stage,
    keep: impl Fn(&str) -> bool,
) -> Result<TransferReport> {
    let src_stage = src
        .stage()
        .ok_or_else(|| Error::usage("source checkpoint has empty provenance"))?
        .to_string();
    let prefixes = allowed_prefixes(&src_stage, dst);
    if prefixes.is_empty() {
        return Err(Error::usage(format!(
            "a `{src_stage}` checkpoint cannot initialize the `{}` stage",
            dst.name()
        )));
    }
    let mut report = TransferReport::default();
    let mut mismatched = Vec::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let allowed = prefixes.iter().any(|p| name.starts_with(p)) && keep(&name);
        if !allowed {
            report.fresh += 1;
            continue;
        }
        match src.params.get(&name) {
            Some(src_tensor) => {
                let dst_tensor = params.get_mut(&name).unwrap();
                if src_tensor.shape() != dst_tensor.shape() {
                    mismatched.push(format!(
                        "{name}: {:?} vs {:?}",
                        src_tensor.shape(),
                        dst_tensor.shape()
                    ));
                } else {
                    *dst_tensor = src_tensor.clone();
                    report.copied.push(name);
                }
            }
            None => report.fresh += 1,
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::config(format!(
            "checkpoint/config shape mismatch for: {}",
            mismatched.join(", ")
        )));
    }
    if report.copied.is_empty() {
        return Err(Error::usage(format!(
            "zero parameters matched from the `{src_stage}` checkpoint (wrong checkpoint?)"
        )));
    }
    Ok(report)
}

/// Datasets for one stage.
pub struct StageData<'a> {
    pub train: &'a Dataset,
    pub holdout: Option<&'a Dataset>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,split,metric,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
    }
    out
}

/// Live training state; create with [`Trainer::fresh`] / [`Trainer::resume`].
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: Params<f32>,
    pub opt: Optimizer,
    pub rng: ChaCha8Rng,
    pub step: u64,
    flow_spec: Option<FlowNetSpec>,
}

impl Trainer {
    pub fn fresh(cfg: TrainConfig, init: &[Checkpoint]) -> Result<Trainer> {
        cfg.validate()?;
        let mut params = fresh_params(&cfg)?;
        for ckpt in init {
            apply_transfer(&mut params, ckpt, cfg.stage)?;
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let opt = Optimizer::new(cfg.optimizer);
        let flow_spec = cfg.flow_spec();
        Ok(Trainer { cfg, params, opt, rng, step: 0, flow_spec })
    }

    /// Continue a run of the same stage bit-exactly from its checkpoint.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Trainer> {
        cfg.validate()?;
        if ckpt.stage() != Some(cfg.stage.name()) {
            return Err(Error::usage(format!(
                "cannot resume stage `{}` from a `{}` checkpoint",
                cfg.stage.name(),
                ckpt.stage().unwrap_or("?")
            )));
        }
        let rng = match &ckpt.rng {
            Some(state) => restore_rng(state)?,
            None => return Err(Error::usage("checkpoint has no RNG state; cannot resume")),
        };
        let opt = Optimizer::from_state(cfg.optimizer, ckpt.optimizer_step, ckpt.moments.clone());
        let flow_spec = cfg.flow_spec();
        Ok(Trainer { cfg, params: ckpt.params.clone(), opt, rng, step: ckpt.step, flow_spec })
    }

    fn trainable(&self) -> impl Fn(&str) -> bool + '_ {
        let freeze = self.cfg.freeze_flow;
        move |name: &str| !(freeze && name.starts_with("flow."))
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self, train: &Dataset) -> Result<f64> {
        let result = match self.cfg.stage {
            Stage::Detection => self.detection_like_step(train, false),
            Stage::Static => self.detection_like_step(train, true),
            Stage::Recognition => self.recognition_step(train),
            Stage::FlowEpe => self.flow_step(train),
        };
        let loss = result.map_err(|e| match e {
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: format!("{detail} (training step {})", self.step),
            },
            other => other,
        })?;
        self.step += 1;
        Ok(loss)
    }

    fn collect_and_apply(
        &mut self,
        g: &mut Graph<f32>,
        vars: &BTreeMap<String, Var>,
        loss: Var,
    ) -> Result<f64> {
        let loss_value = g.value(loss).item() as f64;
        g.backward(loss)?;
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, var) in vars {
            if let Some(grad) = g.take_grad(*var) {
                grads.insert(name.clone(), grad);
            }
        }
        let (base, flow) = (self.cfg.base_lr, self.cfg.flow_lr);
        self.opt.apply(&mut self.params, &grads, |name| {
            if name.starts_with("flow.") {
                flow
            } else {
                base
            }
        })?;
        Ok(loss_value)
    }

    fn detection_like_step(&mut self, train: &Dataset, static_stage: bool) -> Result<f64> {
        let (f0, f1, targets) = if static_stage {
            let (frames, targets) = static_batch(train, &mut self.rng, &self.cfg)?;
            (frames, None, targets)
        } else {
            let (a, b, t) = detection_batch(train, &mut self.rng, &self.cfg)?;
            (a, Some(b), t)
        };
        // classical flow runs off-tape before the graph is built
        let classical = match (&self.cfg.flow, &f1) {
            (FlowSource::Classical(_), Some(f1)) => {
                Some(crate::detector::compute_flow(&self.cfg.flow, &self.params, &f0, f1)?)
            }
            _ => None,
        };
        let mut g: Graph<f32> = Graph::new();
        let vars = bind(&mut g, &self.params, self.trainable());
        let a = g.constant(f0);
        let pred = if static_stage {
            let feats = stream_forward(&mut g, &vars, &self.cfg.detector, StreamKind::Spatial, a)?;
            static_head_forward(&mut g, &vars, &self.cfg.detector, feats)?
        } else {
            let b = g.constant(f1.expect("detection batch has a second frame"));
            let flow_var = match classical {
                Some(t) => g.constant(t),
                None => {
                    let spec = self.flow_spec.as_ref().expect("learned flow");
                    spec.forward(&mut g, &vars, a, b)?
                }
            };
            let sp = stream_forward(&mut g, &vars, &self.cfg.detector, StreamKind::Spatial, a)?;
            let tp =
                stream_forward(&mut g, &vars, &self.cfg.detector, StreamKind::Temporal, flow_var)?;
            fuse_predict(&mut g, &vars, &self.cfg.detector, sp, tp)?
        };
        let loss = detection_loss(&mut g, pred, &targets, &self.cfg.detector)?;
        self.collect_and_apply(&mut g, &vars, loss)
    }

    fn recognition_step(&mut self, train: &Dataset) -> Result<f64> {
        let (f0, f1, labels) = recognition_batch(train, &mut self.rng, &self.cfg)?;
        let classical = match &self.cfg.flow {
            FlowSource::Classical(_) => {
                Some(crate::detector::compute_flow(&self.cfg.flow, &self.params, &f0, &f1)?)
            }
            _ => None,
        };
        let mut g: Graph<f32> = Graph::new();
        let vars = bind(&mut g, &self.params, self.trainable());
        let a = g.constant(f0);
        let b = g.constant(f1);
        let flow_var = match classical {
            Some(t) => g.constant(t),
            None => {
                let spec = self.flow_spec.as_ref().expect("learned flow");
                spec.forward(&mut g, &vars, a, b)?
            }
        };
        let sp = stream_forward(&mut g, &vars, &self.cfg.detector, StreamKind::Spatial, a)?;
        let tp = stream_forward(&mut g, &vars, &self.cfg.detector, StreamKind::Temporal, flow_var)?;
        let logits = recognition_head_forward(&mut g, &vars, &self.cfg.detector, sp, tp)?;
        let loss = g.softmax_ce(logits, &labels)?;
        self.collect_and_apply(&mut g, &vars, loss)
    }

    fn flow_step(&mut self, train: &Dataset) -> Result<f64> {
        let (f0, f1, gt) = flow_batch(train, &mut self.rng, &self.cfg)?;
        let mut g: Graph<f32> = Graph::new();
        let vars = bind(&mut g, &self.params, self.trainable());
        let a = g.constant(f0);
        let b = g.constant(f1);
        let spec = self.flow_spec.as_ref().expect("validated learned flow");
        let pred = spec.forward(&mut g, &vars, a, b)?;
        let gtv = g.constant(gt);
        let loss = epe_loss(&mut g, pred, gtv)?;
        self.collect_and_apply(&mut g, &vars, loss)
    }

    pub fn rng_state(&self) -> RngState {
        let seed = self.rng.get_seed();
        let pos = self.rng.get_word_pos();
        RngState {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn to_checkpoint(&self, provenance: Vec<String>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(&self.cfg).map_err(|e| Error::format(e.to_string()))?,
            provenance,
            step: self.step,
            optimizer_step: self.opt.step,
            rng: Some(self.rng_state()),
            params: self.params.clone(),
            moments: self.opt.moments.clone(),
        })
    }
}

/// Rebuild an inference-ready detector from a detection-stage checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<crate::detector::DetectorModel> {
    let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    if cfg.stage != Stage::Detection {
        return Err(Error::usage(format!(
            "checkpoint is from stage `{}`, not a detection model",
            cfg.stage.name()
        )));
    }
    Ok(crate::detector::DetectorModel {
        cfg: cfg.detector,
        flow: cfg.flow,
        params: ckpt.params.clone(),
    })
}

fn restore_rng(state: &RngState) -> Result<ChaCha8Rng> {
    if state.seed_hex.len() != 64 {
        return Err(Error::format("rng seed must be 32 bytes of hex"));
    }
    let mut seed = [0u8; 32];
    for i in 0..32 {
        seed[i] = u8::from_str_radix(&state.seed_hex[2 * i..2 * i + 2], 16)
            .map_err(|e| Error::format(format!("rng seed: {e}")))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
    Ok(rng)
}

/// The static stage's head: a 1x1 conv over the spatial features alone.
pub fn static_head_forward(
    g: &mut Graph<f32>,
    vars: &BTreeMap<String, Var>,
    det: &DetectorConfig,
    feats: Var,
) -> Result<Var> {
    let spec = crate::autodiff::ConvSpec::new(det.stream_out_channels(), det.head_channels(), (1, 1));
    let w = vars.get("head.w").copied().ok_or_else(|| Error::usage("head.w not bound"))?;
    let b = vars.get("head.b").copied().ok_or_else(|| Error::usage("head.b not bound"))?;
    g.conv2d(feats, w, b, &spec)
}

/// Recognition head: fused features -> global average pool -> linear logits.
pub fn recognition_head_forward<S: crate::autodiff::Scalar>(
    g: &mut Graph<S>,
    vars: &BTreeMap<String, Var>,
    det: &DetectorConfig,
    spatial: Var,
    temporal: Var,
) -> Result<Var> {
    let fused = fuse_features(g, vars, det, spatial, temporal)?;
    let pooled = g.global_avg_pool(fused)?;
    let w = vars.get("recog.w").copied().ok_or_else(|| Error::usage("recog.w not bound"))?;
    let b = vars.get("recog.b").copied().ok_or_else(|| Error::usage("recog.b not bound"))?;
    g.linear(pooled, w, b)
}

// ---- batch assembly ----------------------------------------------------

pub fn frame_slice(sample: &VideoSample, t: usize) -> &[f32] {
    let len = CHANNELS * SIDE * SIDE;
    &sample.frames[t * len..(t + 1) * len]
}

fn stack_frames(frames: Vec<Vec<f32>>) -> Result<Tensor<f32>> {
    let n = frames.len();
    let mut data = Vec::with_capacity(n * CHANNELS * SIDE * SIDE);
    for f in frames {
        data.extend_from_slice(&f);
    }
    Tensor::new(vec![n, CHANNELS, SIDE, SIDE], data)
}

fn detection_batch(
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<FrameTargets>)> {
    let mut f0 = Vec::with_capacity(cfg.batch_size);
    let mut f1 = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.gen_range(0..ds.len());
        let sample = ds.video(idx)?;
        let t = rng.gen_range(0..sample.frame_count - 1);
        let boxes = sample
            .boxes
            .as_ref()
            .ok_or_else(|| Error::usage("detection training needs boxes"))?;
        let pair = FramePair {
            frame_a: frame_slice(&sample, t).to_vec(),
            frame_b: frame_slice(&sample, t + 1).to_vec(),
            rect: boxes[t],
            class_id: sample.class_id,
            flow: None,
        };
        let aug = augment(&pair, &cfg.augment, rng);
        f0.push(aug.frame_a);
        f1.push(aug.frame_b);
        targets.push(FrameTargets { boxes: vec![(aug.rect, aug.class_id as usize)] });
    }
    Ok((stack_frames(f0)?, stack_frames(f1)?, targets))
}

fn recognition_batch(
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>)> {
    // no boxes here, so cropping cannot keep the actor in frame; restrict
    // augmentation to flip + photometric
    let aug_cfg = AugmentConfig { crop_min_scale: 1.0, ..cfg.augment.clone() };
    let mut f0 = Vec::with_capacity(cfg.batch_size);
    let mut f1 = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.gen_range(0..ds.len());
        let sample = ds.video(idx)?;
        let t = rng.gen_range(0..sample.frame_count - 1);
        let pair = FramePair {
            frame_a: frame_slice(&sample, t).to_vec(),
            frame_b: frame_slice(&sample, t + 1).to_vec(),
            rect: crate::detector::BBox::new(0.5, 0.5, 0.5, 0.5),
            class_id: sample.class_id,
            flow: None,
        };
        let aug = augment(&pair, &aug_cfg, rng);
        f0.push(aug.frame_a);
        f1.push(aug.frame_b);
        labels.push(sample.class_id as usize);
    }
    Ok((stack_frames(f0)?, stack_frames(f1)?, labels))
}

fn flow_batch(
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let plane = SIDE * SIDE;
    let mut f0 = Vec::with_capacity(cfg.batch_size);
    let mut f1 = Vec::with_capacity(cfg.batch_size);
    let mut flows = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.gen_range(0..ds.len());
        let sample = ds.video(idx)?;
        let flow = sample
            .flow
            .as_ref()
            .ok_or_else(|| Error::usage("flow training needs ground-truth flow"))?;
        let boxes = sample
            .boxes
            .as_ref()
            .ok_or_else(|| Error::usage("flow training needs boxes for cropping"))?;
        let t = rng.gen_range(0..sample.frame_count - 1);
        let pair = FramePair {
            frame_a: frame_slice(&sample, t).to_vec(),
            frame_b: frame_slice(&sample, t + 1).to_vec(),
            rect: boxes[t],
            class_id: sample.class_id,
            flow: Some(flow[t * 2 * plane..(t + 1) * 2 * plane].to_vec()),
        };
        let aug = augment(&pair, &cfg.augment, rng);
        f0.push(aug.frame_a);
        f1.push(aug.frame_b);
        flows.push(aug.flow.expect("flow carried through augmentation"));
    }
    let n = cfg.batch_size;
    let mut flow_data = Vec::with_capacity(n * 2 * plane);
    for f in flows {
        flow_data.extend_from_slice(&f);
    }
    Ok((stack_frames(f0)?, stack_frames(f1)?, Tensor::new(vec![n, 2, SIDE, SIDE], flow_data)?))
}

fn static_batch(
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Vec<FrameTargets>)> {
    let mut frames = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.gen_range(0..ds.len());
        let sample = ds.video(idx)?;
        let boxes = sample
            .boxes
            .as_ref()
            .ok_or_else(|| Error::usage("static training needs boxes"))?;
        let pair = FramePair {
            frame_a: frame_slice(&sample, 0).to_vec(),
            frame_b: frame_slice(&sample, 0).to_vec(),
            rect: boxes[0],
            class_id: sample.class_id,
            flow: None,
        };
        let aug = augment(&pair, &cfg.augment, rng);
        frames.push(aug.frame_a);
        targets.push(FrameTargets { boxes: vec![(aug.rect, aug.class_id as usize)] });
    }
    Ok((stack_frames(frames)?, targets))
}

// ---- holdout metrics ---------------------------------------------------

/// Deterministic holdout metric for the stage (no RNG draws).
pub fn holdout_metric(trainer: &Trainer, holdout: &Dataset) -> Result<(String, f64)> {
    match trainer.cfg.stage {
        Stage::FlowEpe => {
            let aee = holdout_aee(trainer, holdout, 200)?;
            Ok(("aee".into(), aee))
        }
        Stage::Recognition => {
            let acc = recognition_accuracy(
                &trainer.cfg,
                &trainer.params,
                holdout,
                holdout.len().min(120),
            )?;
            Ok(("accuracy".into(), acc))
        }
        Stage::Detection | Stage::Static => {
            // cheap proxy during training; full f-mAP runs post-hoc
            let loss = holdout_detection_loss(trainer, holdout, 32)?;
            Ok(("loss".into(), loss))
        }
    }
}

/// Mean endpoint error of the current flow parameters on holdout pairs.
pub fn holdout_aee(trainer: &Trainer, holdout: &Dataset, max_pairs: usize) -> Result<f64> {
    let spec = trainer
        .flow_spec
        .clone()
        .ok_or_else(|| Error::usage("AEE evaluation needs a learned flow"))?;
    aee_of_params(&spec, &trainer.params, holdout, max_pairs)
}

pub fn aee_of_params(
    spec: &FlowNetSpec,
    params: &Params<f32>,
    holdout: &Dataset,
    max_pairs: usize,
) -> Result<f64> {
    let plane = SIDE * SIDE;
    let mut total = 0.0f64;
    let mut count = 0usize;
    'outer: for i in 0..holdout.len() {
        let sample = holdout.video(i)?;
        let flow = sample
            .flow
            .as_ref()
            .ok_or_else(|| Error::usage("holdout set has no ground-truth flow"))?;
        for t in 0..sample.frame_count - 1 {
            let f0 = Tensor::new(
                vec![1, CHANNELS, SIDE, SIDE],
                frame_slice(&sample, t).to_vec(),
            )?;
            let f1 = Tensor::new(
                vec![1, CHANNELS, SIDE, SIDE],
                frame_slice(&sample, t + 1).to_vec(),
            )?;
            let pred = crate::flow::flownet_flow_batch(spec, params, &f0, &f1)?;
            let pred_field =
                crate::flow::FlowField::new(SIDE, SIDE, pred.data().to_vec())?;
            let gt = crate::flow::FlowField::new(
                SIDE,
                SIDE,
                flow[t * 2 * plane..(t + 1) * 2 * plane].to_vec(),
            )?;
            total += crate::flow::epe(&pred_field, &gt)?;
            count += 1;
            if count >= max_pairs {
                break 'outer;
            }
        }
    }
    if count == 0 {
        return Err(Error::usage("no holdout pairs available"));
    }
    Ok(total / count as f64)
}

/// Detection/static loss over the first `limit` holdout samples at the
/// deterministic middle frame, without augmentation or updates.
pub fn holdout_detection_loss(trainer: &Trainer, holdout: &Dataset, limit: usize) -> Result<f64> {
    let cfg = &trainer.cfg;
    let n = holdout.len().min(limit);
    let mut total = 0.0f64;
    let mut batches = 0usize;
    let chunk = 8usize;
    let mut i = 0usize;
    while i < n {
        let end = (i + chunk).min(n);
        let mut f0 = Vec::new();
        let mut f1 = Vec::new();
        let mut targets = Vec::new();
        for idx in i..end {
            let sample = holdout.video(idx)?;
            let boxes = sample
                .boxes
                .as_ref()
                .ok_or_else(|| Error::usage("holdout set has no boxes"))?;
            let t = if sample.frame_count > 1 { sample.frame_count / 2 } else { 0 };
            f0.push(frame_slice(&sample, t).to_vec());
            if cfg.stage == Stage::Detection {
                f1.push(frame_slice(&sample, t + 1).to_vec());
            }
            targets.push(FrameTargets { boxes: vec![(boxes[t], sample.class_id as usize)] });
        }
        let f0 = stack_frames(f0)?;
        let mut g: Graph<f32> = Graph::new();
        let vars = bind(&mut g, &trainer.params, |_| false);
        let a = g.constant(f0.clone());
        let pred = if cfg.stage == Stage::Static {
            let feats = stream_forward(&mut g, &vars, &cfg.detector, StreamKind::Spatial, a)?;
            static_head_forward(&mut g, &vars, &cfg.detector, feats)?
        } else {
            let f1 = stack_frames(f1)?;
            let flow = crate::detector::compute_flow(&cfg.flow, &trainer.params, &f0, &f1)?;
            let fl = g.constant(flow);
            let sp = stream_forward(&mut g, &vars, &cfg.detector, StreamKind::Spatial, a)?;
            let tp = stream_forward(&mut g, &vars, &cfg.detector, StreamKind::Temporal, fl)?;
            fuse_predict(&mut g, &vars, &cfg.detector, sp, tp)?
        };
        let loss = detection_loss(&mut g, pred, &targets, &cfg.detector)?;
        total += g.value(loss).item() as f64;
        batches += 1;
        i = end;
    }
    Ok(total / batches.max(1) as f64)
}

/// Top-1 accuracy of the recognition head over the first `limit` samples,
/// using the deterministic middle frame pair.
pub fn recognition_accuracy(
    cfg: &TrainConfig,
    params: &Params<f32>,
    ds: &Dataset,
    limit: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut count = 0usize;
    let batch = 16usize;
    let mut pending: Vec<(Vec<f32>, Vec<f32>, usize)> = Vec::new();
    let flush = |pending: &mut Vec<(Vec<f32>, Vec<f32>, usize)>,
                     correct: &mut usize|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let n = pending.len();
        let mut f0 = Vec::new();
        let mut f1 = Vec::new();
        let mut labels = Vec::new();
        for (a, b, l) in pending.drain(..) {
            f0.push(a);
            f1.push(b);
            labels.push(l);
        }
        let f0 = stack_frames(f0)?;
        let f1 = stack_frames(f1)?;
        let flow = crate::detector::compute_flow(&cfg.flow, params, &f0, &f1)?;
        let mut g: Graph<f32> = Graph::new();
        let vars = bind(&mut g, params, |_| false);
        let a = g.constant(f0);
        let fl = g.constant(flow);
        let sp = stream_forward(&mut g, &vars, &cfg.detector, StreamKind::Spatial, a)?;
        let tp = stream_forward(&mut g, &vars, &cfg.detector, StreamKind::Temporal, fl)?;
        let logits = recognition_head_forward(&mut g, &vars, &cfg.detector, sp, tp)?;
        let out = g.value(logits);
        let k = cfg.detector.classes;
        for (row, &label) in labels.iter().enumerate() {
            let row_vals = &out.data()[row * k..(row + 1) * k];
            let pred = row_vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                *correct += 1;
            }
        }
        let _ = n;
        Ok(())
    };
    for i in 0..ds.len().min(limit) {
        let sample = ds.video(i)?;
        let t = sample.frame_count / 2;
        pending.push((
            frame_slice(&sample, t).to_vec(),
            frame_slice(&sample, t + 1).to_vec(),
            sample.class_id as usize,
        ));
        count += 1;
        if pending.len() == batch {
            flush(&mut pending, &mut correct)?;
        }
    }
    flush(&mut pending, &mut correct)?;
    Ok(correct as f64 / count.max(1) as f64)
}

/// Run a full stage: fresh-or-transferred init (or a bit-exact resume when
/// the single init checkpoint is from this same stage), `cfg.steps` steps,
/// periodic holdout metrics, loss curves, final checkpoint with provenance.
pub fn run_stage(
    cfg: &TrainConfig,
    data: &StageData,
    init: &[Checkpoint],
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<CurveRow>)> {
    let resume = init.len() == 1 && init[0].stage() == Some(cfg.stage.name());
    let mut trainer = if resume {
        Trainer::resume(cfg.clone(), &init[0])?
    } else {
        Trainer::fresh(cfg.clone(), init)?
    };
    let mut provenance: Vec<String> = if resume {
        init[0].provenance.clone()
    } else {
        let mut chain: Vec<String> = Vec::new();
        for ckpt in init {
            for stage in &ckpt.provenance {
                if !chain.contains(stage) {
                    chain.push(stage.clone());
                }
            }
        }
        chain.push(cfg.stage.name().to_string());
        chain
    };
    if resume && provenance.last().map(|s| s.as_str()) != Some(cfg.stage.name()) {
        provenance.push(cfg.stage.name().to_string());
    }

    let mut curves = Vec::new();
    while trainer.step < cfg.steps as u64 {
        let loss = trainer.step(data.train)?;
        let step = trainer.step;
        curves.push(CurveRow { step, split: "train".into(), metric: "loss".into(), value: loss });
        if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
            if let Some(holdout) = data.holdout {
                let (metric, value) = holdout_metric(&trainer, holdout)?;
                curves.push(CurveRow { step, split: "holdout".into(), metric, value });
            }
        }
    }

    let ckpt = trainer.to_checkpoint(provenance)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        save_checkpoint(&ckpt, &dir.join(format!("{}.ckpt", cfg.stage.name())))?;
        let path = dir.join("curves.csv");
        std::fs::write(&path, curves_csv(&curves)).map_err(|e| Error::io(path, e))?;
    }
    Ok((ckpt, curves))
}
