//! Experiment configuration: a JSON document with documented defaults,
//! deep-merged from an optional file and overridable with dotted flags
//! (`--train.base_lr=2e-4`). Unknown keys are rejected.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root: <root>/detection/{train,test}, <root>/recognition/train,
    /// <root>/static/train.
    pub root: PathBuf,
    pub detection_train: usize,
    pub detection_test: usize,
    pub recognition: usize,
    #[serde(rename = "static")]
    pub static_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            detection_train: 480,
            detection_test: 120,
            recognition: 4000,
            static_count: 600,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// "full", "css" or "sd"; ignored when `classical` is set.
    pub variant: String,
    pub classical: bool,
    pub lambda: f32,
    pub iterations: usize,
    pub levels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { variant: "full".into(), classical: false, lambda: 0.5, iterations: 100, levels: 3 }
    }
}

impl FlowConfig {
    pub fn source(&self) -> Result<tsad::detector::FlowSource> {
        if self.classical {
            Ok(tsad::detector::FlowSource::Classical(tsad::flow::ClassicalFlowParams {
                lambda: self.lambda,
                iterations: self.iterations,
                levels: self.levels,
            }))
        } else {
            let variant = tsad::flow::FlowVariant::from_name(&self.variant)
                .with_context(|| format!("unknown flow variant `{}`", self.variant))?;
            Ok(tsad::detector::FlowSource::Learned(variant))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: String,
    pub base_lr: f64,
    pub flow_lr_divisor: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub freeze_flow: bool,
    pub eval_every: usize,
    pub flow_steps: usize,
    pub flow_batch: usize,
    pub flow_pretrain_lr: f64,
    pub recog_steps: usize,
    pub recog_batch: usize,
    pub recog_lr: f64,
    pub static_steps: usize,
    pub static_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            optimizer: "adam".into(),
            base_lr: 5e-4,
            flow_lr_divisor: 500.0,
            batch: 32,
            steps: 4000,
            seed: 0,
            freeze_flow: false,
            eval_every: 200,
            flow_steps: 3000,
            flow_batch: 32,
            flow_pretrain_lr: 1e-3,
            recog_steps: 5000,
            recog_batch: 32,
            recog_lr: 2e-3,
            static_steps: 1500,
            static_batch: 32,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> Result<tsad::train::OptimizerKind> {
        match self.optimizer.as_str() {
            "adam" => Ok(tsad::train::OptimizerKind::Adam),
            "sgd-momentum" => Ok(tsad::train::OptimizerKind::SgdMomentum),
            other => bail!("unknown optimizer `{other}` (adam | sgd-momentum)"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    pub selection: String,
    pub nms_iou: f64,
    pub confidence: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { alphas: vec![0.2, 0.5, 0.75], selection: "top1".into(), nms_iou: 0.45, confidence: 1e-3 }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> Result<tsad::eval::EvalConfig> {
        let selection = match self.selection.as_str() {
            "top1" => tsad::eval::SelectionMode::Top1,
            "nms" => tsad::eval::SelectionMode::Nms,
            other => bail!("unknown selection mode `{other}` (top1 | nms)"),
        };
        let cfg = tsad::eval::EvalConfig {
            alphas: self.alphas.clone(),
            selection,
            nms_iou: self.nms_iou,
            confidence: self.confidence,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub frames: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub batches: Vec<usize>,
    pub overlap: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { frames: 200, warmup: 50, repeats: 3, batches: vec![1, 4], overlap: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: usize,
    pub pretrain_seed: u64,
    pub detect_steps: usize,
    pub detect_batch: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { seeds: 3, pretrain_seed: 1000, detect_steps: 4000, detect_batch: 32 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub ablate: AblateSection,
}

fn deep_merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .with_context(|| format!("config key `{key}`: `{part}` is not an object"))?;
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Build the effective config: defaults <- optional file <- dotted overrides.
pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        deep_merge(&mut value, &patch);
    }
    for (key, raw) in overrides {
        set_dotted(&mut value, key, raw)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value.clone())
        .with_context(|| format!("invalid configuration: {value}"))?;
    Ok(cfg)
}

/// Extract `--a.b=c` style overrides; everything else passes through to clap.
pub fn split_dotted_args(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        if let Some(body) = arg.strip_prefix("--") {
            let dotted = body.split('=').next().map(|k| k.contains('.')).unwrap_or(false);
            if dotted {
                match body.split_once('=') {
                    Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                    None => {
                        let value = it.next().unwrap_or_default();
                        overrides.push((body.to_string(), value));
                    }
                }
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}
