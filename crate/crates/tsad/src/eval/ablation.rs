//! Ablation grid: {flow method} x {pretraining} x {frozen|tuned} cells,
//! each trained over N seeds and scored with f-mAP on the held-out split.
//! Pretraining checkpoints are built once and shared across cells, the way
//! the original comparison was run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_with_provenance, EvalConfig, EvalReport};
use crate::data::Dataset;
use crate::detector::{anchors_kmeans, DetectorConfig, FlowSource};
use crate::error::{Error, Result};
use crate::flow::{ClassicalFlowParams, FlowVariant};
use crate::train::{
    apply_transfer_with, run_stage, Checkpoint, Stage, StageData, TrainConfig, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PretrainKind {
    /// Initialize from single-frame shape detection (spatial stream only).
    #[serde(rename = "static")]
    Static,
    /// Initialize from video recognition pretraining (both streams + fusion).
    #[serde(rename = "recognition")]
    Recognition,
    /// No pretraining at all.
    #[serde(rename = "fresh")]
    Fresh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub flow: FlowSource,
    pub pretrain: PretrainKind,
    pub freeze_flow: bool,
}

/// The standard 8-cell grid: classical vs learned flow, static vs
/// recognition pretraining, frozen vs fine-tuned flow, plus the capacity
/// ladder under the best configuration.
pub fn standard_cells() -> Vec<CellSpec> {
    let classical = FlowSource::Classical(ClassicalFlowParams::default());
    vec![
        CellSpec {
            name: "classical+static".into(),
            flow: classical.clone(),
            pretrain: PretrainKind::Static,
            freeze_flow: true,
        },
        CellSpec {
            name: "classical+recog".into(),
            flow: classical,
            pretrain: PretrainKind::Recognition,
            freeze_flow: true,
        },
        CellSpec {
            name: "full+static".into(),
            flow: FlowSource::Learned(FlowVariant::Full),
            pretrain: PretrainKind::Static,
            freeze_flow: true,
        },
        CellSpec {
            name: "full+recog".into(),
            flow: FlowSource::Learned(FlowVariant::Full),
            pretrain: PretrainKind::Recognition,
            freeze_flow: true,
        },
        CellSpec {
            name: "full-tuned+static".into(),
            flow: FlowSource::Learned(FlowVariant::Full),
            pretrain: PretrainKind::Static,
            freeze_flow: false,
        },
        CellSpec {
            name: "full-tuned+recog".into(),
            flow: FlowSource::Learned(FlowVariant::Full),
            pretrain: PretrainKind::Recognition,
            freeze_flow: false,
        },
        CellSpec {
            name: "css-tuned+recog".into(),
            flow: FlowSource::Learned(FlowVariant::Css),
            pretrain: PretrainKind::Recognition,
            freeze_flow: false,
        },
        CellSpec {
            name: "sd-tuned+recog".into(),
            flow: FlowSource::Learned(FlowVariant::Sd),
            pretrain: PretrainKind::Recognition,
            freeze_flow: false,
        },
    ]
}

/// Step/batch/learning-rate budgets for every stage of the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridBudget {
    pub detect_steps: usize,
    pub detect_batch: usize,
    pub detect_lr: f64,
    /// Fine-tuned cells use detect_lr / flow_lr_divisor for flow weights.
    pub flow_lr_divisor: f64,
    pub flow_steps: usize,
    pub flow_batch: usize,
    pub recog_steps: usize,
    pub recog_batch: usize,
    pub static_steps: usize,
    pub static_batch: usize,
}

impl Default for GridBudget {
    fn default() -> Self {
        GridBudget {
            detect_steps: 4000,
            detect_batch: 32,
            detect_lr: 5e-4,
            flow_lr_divisor: 500.0,
            flow_steps: 3000,
            flow_batch: 32,
            recog_steps: 5000,
            recog_batch: 32,
            static_steps: 1500,
            static_batch: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub cells: Vec<CellSpec>,
    pub seeds: Vec<u64>,
    pub pretrain_seed: u64,
    pub budget: GridBudget,
    pub eval_alphas: Vec<f64>,
}

impl AblationSpec {
    pub fn standard(seeds: Vec<u64>, budget: GridBudget) -> Self {
        AblationSpec {
            cells: standard_cells(),
            seeds,
            pretrain_seed: 1000,
            budget,
            eval_alphas: vec![0.2, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub name: String,
    /// f-mAP per alpha key per seed.
    pub per_seed: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    pub sd: BTreeMap<String, f64>,
    /// Populated instead of numbers when the cell could not run.
    pub absent: Option<String>,
}

impl CellResult {
    pub fn mean_at(&self, alpha: f64) -> Option<f64> {
        self.mean.get(&super::alpha_key(alpha)).copied()
    }
}

pub struct GridDatasets<'a> {
    pub detection_train: &'a Dataset,
    pub detection_test: &'a Dataset,
    pub recognition_train: &'a Dataset,
    pub static_train: &'a Dataset,
}

fn detector_config(train: &Dataset, classes: usize) -> Result<DetectorConfig> {
    let mut boxes = Vec::new();
    for i in 0..train.len() {
        let s = train.video(i)?;
        if let Some(bs) = &s.boxes {
            boxes.extend_from_slice(bs);
        }
    }
    let mut det = DetectorConfig::desk(classes);
    det.anchors = anchors_kmeans(&boxes, det.num_anchors(), det.grid)?;
    Ok(det)
}

/// Builds and caches the shared pretraining checkpoints.
pub struct PretrainPipeline<'a> {
    data: &'a GridDatasets<'a>,
    budget: GridBudget,
    seed: u64,
    detect_cfg: DetectorConfig,
    static_cfg: DetectorConfig,
    flow_ckpts: BTreeMap<String, Checkpoint>,
    static_ckpt: Option<Checkpoint>,
    recog_ckpt: Option<Checkpoint>,
}

impl<'a> PretrainPipeline<'a> {
    pub fn new(data: &'a GridDatasets<'a>, budget: GridBudget, seed: u64) -> Result<Self> {
        Ok(PretrainPipeline {
            detect_cfg: detector_config(data.detection_train, 6)?,
            static_cfg: detector_config(data.static_train, 3)?,
            data,
            budget,
            seed,
            flow_ckpts: BTreeMap::new(),
            static_ckpt: None,
            recog_ckpt: None,
        })
    }

    pub fn detector_config(&self) -> &DetectorConfig {
        &self.detect_cfg
    }

    pub fn flow_checkpoint(
        &mut self,
        variant: FlowVariant,
        progress: &mut dyn FnMut(&str),
    ) -> Result<Checkpoint> {
        let key = variant.name().to_string();
        if !self.flow_ckpts.contains_key(&key) {
            progress(&format!("pretraining flow variant `{key}` on endpoint error"));
            let mut cfg =
                TrainConfig::flow_pretrain(self.detect_cfg.clone(), FlowSource::Learned(variant));
            cfg.steps = self.budget.flow_steps;
            cfg.batch_size = self.budget.flow_batch;
            cfg.seed = self.seed ^ crate::data::mix64(variant.name().len() as u64 + 101);
            let data =
                StageData { train: self.data.detection_train, holdout: Some(self.data.detection_test) };
            let (ckpt, _) = run_stage(&cfg, &data, &[], None)?;
            self.flow_ckpts.insert(key.clone(), ckpt);
        }
        Ok(self.flow_ckpts[&key].clone())
    }

    pub fn static_checkpoint(&mut self, progress: &mut dyn FnMut(&str)) -> Result<Checkpoint> {
        if self.static_ckpt.is_none() {
            progress("pretraining the spatial stream on static shape detection");
            let mut cfg = TrainConfig::static_pretrain(self.static_cfg.clone());
            cfg.steps = self.budget.static_steps;
            cfg.batch_size = self.budget.static_batch;
            cfg.seed = self.seed ^ 0x5741;
            let data = StageData { train: self.data.static_train, holdout: None };
            let (ckpt, _) = run_stage(&cfg, &data, &[], None)?;
            self.static_ckpt = Some(ckpt);
        }
        Ok(self.static_ckpt.clone().unwrap())
    }

    /// Recognition pretraining runs once, with the full learned variant
    /// (frozen), initialized from the static checkpoint.
    pub fn recognition_checkpoint(
        &mut self,
        progress: &mut dyn FnMut(&str),
    ) -> Result<Checkpoint> {
        if self.recog_ckpt.is_none() {
            let static_ckpt = self.static_checkpoint(progress)?;
            let flow_ckpt = self.flow_checkpoint(FlowVariant::Full, progress)?;
            progress("pretraining both streams on video recognition");
            let mut cfg = TrainConfig::recognition(
                self.detect_cfg.clone(),
                FlowSource::Learned(FlowVariant::Full),
            );
            cfg.steps = self.budget.recog_steps;
            cfg.batch_size = self.budget.recog_batch;
            cfg.seed = self.seed ^ 0x4b49;
            let data = StageData { train: self.data.recognition_train, holdout: None };
            let (ckpt, _) = run_stage(&cfg, &data, &[static_ckpt, flow_ckpt], None)?;
            self.recog_ckpt = Some(ckpt);
        }
        Ok(self.recog_ckpt.clone().unwrap())
    }

    /// Detection training config + init checkpoints for one cell and seed.
    pub fn cell_run(
        &mut self,
        cell: &CellSpec,
        seed: u64,
        progress: &mut dyn FnMut(&str),
    ) -> Result<(TrainConfig, Vec<(Checkpoint, bool)>)> {
        let mut cfg = TrainConfig::detection(self.detect_cfg.clone(), cell.flow.clone());
        cfg.steps = self.budget.detect_steps;
        cfg.batch_size = self.budget.detect_batch;
        cfg.base_lr = self.budget.detect_lr;
        cfg.flow_lr = self.budget.detect_lr / self.budget.flow_lr_divisor;
        cfg.freeze_flow = cell.freeze_flow;
        cfg.seed = seed;

        // (checkpoint, strip_flow): recognition carries the full variant's
        // flow weights, which only apply when the cell runs that variant
        let mut inits: Vec<(Checkpoint, bool)> = Vec::new();
        match cell.pretrain {
            PretrainKind::Fresh => {}
            PretrainKind::Static => {
                inits.push((self.static_checkpoint(progress)?, false));
            }
            PretrainKind::Recognition => {
                let strip_flow = !matches!(cell.flow, FlowSource::Learned(FlowVariant::Full));
                inits.push((self.recognition_checkpoint(progress)?, strip_flow));
            }
        }
        if let FlowSource::Learned(variant) = &cell.flow {
            let needs_own_flow = !matches!(
                (&cell.pretrain, variant),
                (PretrainKind::Recognition, FlowVariant::Full)
            );
            if needs_own_flow {
                inits.push((self.flow_checkpoint(*variant, progress)?, false));
            }
        }
        Ok((cfg, inits))
    }
}

/// Train one detection model per the cell recipe; returns the model and
/// its test report.
pub fn train_cell_model(
    pipeline: &mut PretrainPipeline,
    cell: &CellSpec,
    seed: u64,
    alphas: &[f64],
    progress: &mut dyn FnMut(&str),
) -> Result<(crate::detector::DetectorModel, EvalReport)> {
    let (cfg, inits) = pipeline.cell_run(cell, seed, progress)?;
    progress(&format!("training cell `{}` seed {seed}", cell.name));
    let mut trainer = Trainer::fresh(cfg.clone(), &[])?;
    // apply inits with optional flow stripping
    for (ckpt, strip_flow) in &inits {
        apply_transfer_with(&mut trainer.params, ckpt, Stage::Detection, |name| {
            !(*strip_flow && name.starts_with("flow."))
        })?;
    }
    for _ in 0..cfg.steps {
        trainer.step(pipeline.data.detection_train)?;
    }
    let model = crate::detector::DetectorModel {
        cfg: cfg.detector.clone(),
        flow: cfg.flow.clone(),
        params: trainer.params.clone(),
    };
    let eval_cfg = EvalConfig { alphas: alphas.to_vec(), ..EvalConfig::default() };
    let mut provenance: Vec<String> = inits
        .iter()
        .flat_map(|(c, _)| c.provenance.clone())
        .collect();
    provenance.push("detection".into());
    let report =
        evaluate_with_provenance(&model, pipeline.data.detection_test, &eval_cfg, provenance)?;
    Ok((model, report))
}

/// Train one detection model per the cell recipe and return its test report.
pub fn run_cell(
    pipeline: &mut PretrainPipeline,
    cell: &CellSpec,
    seed: u64,
    alphas: &[f64],
    progress: &mut dyn FnMut(&str),
) -> Result<EvalReport> {
    train_cell_model(pipeline, cell, seed, alphas, progress).map(|(_, report)| report)
}

/// Run the whole grid; cells that fail are marked absent with the cause.
pub fn run_grid(
    data: &GridDatasets,
    spec: &AblationSpec,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<CellResult>> {
    let mut pipeline = PretrainPipeline::new(data, spec.budget.clone(), spec.pretrain_seed)?;
    run_grid_with(&mut pipeline, spec, progress)
}

/// [`run_grid`] against an externally owned pipeline, so callers can reuse
/// its cached pretraining checkpoints afterwards.
pub fn run_grid_with(
    pipeline: &mut PretrainPipeline,
    spec: &AblationSpec,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for cell in &spec.cells {
        let mut per_seed = Vec::new();
        let mut failure: Option<String> = None;
        for &seed in &spec.seeds {
            match run_cell(pipeline, cell, seed, &spec.eval_alphas, progress) {
                Ok(report) => {
                    let mut by_alpha = BTreeMap::new();
                    for a in &report.per_alpha {
                        by_alpha.insert(super::alpha_key(a.alpha), a.fmap);
                    }
                    per_seed.push(by_alpha);
                }
                Err(e) => {
                    failure = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let result = match failure {
            Some(reason) => CellResult {
                name: cell.name.clone(),
                per_seed,
                mean: BTreeMap::new(),
                sd: BTreeMap::new(),
                absent: Some(reason),
            },
            None => {
                let mut mean = BTreeMap::new();
                let mut sd = BTreeMap::new();
                for alpha in &spec.eval_alphas {
                    let key = super::alpha_key(*alpha);
                    let vals: Vec<f64> =
                        per_seed.iter().map(|m| m[&key]).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                        / vals.len() as f64;
                    mean.insert(key.clone(), m);
                    sd.insert(key, var.sqrt());
                }
                CellResult { name: cell.name.clone(), per_seed, mean, sd, absent: None }
            }
        };
        progress(&format!(
            "cell `{}`: {}",
            result.name,
            result
                .absent
                .clone()
                .unwrap_or_else(|| format!("f-mAP@0.50 = {:?}", result.mean.get("0.50"))),
        ));
        results.push(result);
    }
    Ok(results)
}

pub fn ablation_csv(results: &[CellResult], alphas: &[f64]) -> String {
    let mut out = String::from("cell");
    for a in alphas {
        out.push_str(&format!(",fmap_mean@{a:.2},fmap_sd@{a:.2}"));
    }
    out.push_str(",status\n");
    for r in results {
        out.push_str(&r.name);
        for a in alphas {
            let key = super::alpha_key(*a);
            match (&r.absent, r.mean.get(&key), r.sd.get(&key)) {
                (None, Some(m), Some(s)) => out.push_str(&format!(",{m:.4},{s:.4}")),
                _ => out.push_str(",absent,absent"),
            }
        }
        out.push_str(&format!(",{}\n", r.absent.as_deref().unwrap_or("ok")));
    }
    out
}

pub fn ablation_markdown(results: &[CellResult], alphas: &[f64]) -> String {
    let mut out = String::from("| cell |");
    for a in alphas {
        out.push_str(&format!(" f-mAP@{a:.2} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in alphas {
        out.push_str("---|");
    }
    out.push('\n');
    for r in results {
        out.push_str(&format!("| {} |", r.name));
        for a in alphas {
            let key = super::alpha_key(*a);
            match (&r.absent, r.mean.get(&key), r.sd.get(&key)) {
                (None, Some(m), Some(s)) => out.push_str(&format!(" {m:.3} +- {s:.3} |")),
                _ => out.push_str(" absent |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Convenience accessor used by ordering checks.
pub fn result_by_name<'a>(results: &'a [CellResult], name: &str) -> Result<&'a CellResult> {
    results
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::usage(format!("cell `{name}` missing from the grid")))
}
