//! Frame-level detection evaluation: IoU, greedy TP/FP matching,
//! all-point-interpolated average precision, NMS, frame-mAP reports and
//! threshold sweeps.

mod ablation;

pub use ablation::{
    ablation_csv, ablation_markdown, result_by_name, run_grid, run_grid_with, standard_cells, train_cell_model,
    AblationSpec, CellResult, CellSpec, GridBudget, GridDatasets, PretrainKind, PretrainPipeline,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, CHANNELS, SIDE};
use crate::detector::{decode, BBox, Detection, DetectorModel};
use crate::error::{Error, Result};

/// Intersection over union of two boxes; degenerate extents are an error.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(Error::input(format!("degenerate box in iou: {a:?} vs {b:?}")));
    }
    // corner form in f64 throughout; areas come from the same corner
    // extents so identical boxes score exactly 1
    let corner = |r: &BBox| {
        let (cx, cy, w, h) = (r.cx as f64, r.cy as f64, r.w as f64, r.h as f64);
        (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    };
    let (ax0, ay0, ax1, ay1) = corner(a);
    let (bx0, by0, bx1, by1) = corner(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    Ok(if union <= 0.0 { 0.0 } else { inter / union })
}

/// Selection applied to each frame's decoded detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// Keep only the highest-scoring detection per frame.
    #[serde(rename = "top1")]
    Top1,
    /// Per-class non-maximum suppression.
    #[serde(rename = "nms")]
    Nms,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// IoU thresholds, ascending.
    pub alphas: Vec<f64>,
    pub selection: SelectionMode,
    pub nms_iou: f64,
    /// Decoder confidence threshold.
    pub confidence: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alphas: vec![0.2, 0.5, 0.75],
            selection: SelectionMode::Top1,
            nms_iou: 0.45,
            confidence: 1e-3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::config("need at least one IoU threshold"));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::config("IoU thresholds must lie in (0, 1]"));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("IoU thresholds must be sorted ascending"));
        }
        Ok(())
    }
}

/// Greedy TP/FP matching for one frame. `dets` must be ranked by
/// non-increasing score; each ground truth matches at most once, the class
/// must agree, and a detection takes the highest-IoU free ground truth at
/// or above `alpha`.
pub fn match_frame(dets: &[Detection], gts: &[(BBox, usize)], alpha: f64) -> Result<Vec<bool>> {
    for w in dets.windows(2) {
        if w[0].score < w[1].score {
            return Err(Error::usage("match_frame expects detections ranked by score"));
        }
    }
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt_rect, gt_class)) in gts.iter().enumerate() {
            if used[gi] || *gt_class != det.class_id {
                continue;
            }
            let overlap = iou(&det.rect, gt_rect)?;
            if overlap >= alpha {
                let better = match best {
                    Some((_, b)) => overlap > b,
                    None => true,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                used[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(flags)
}

/// One scored detection outcome for AP accumulation. `id` breaks score
/// ties deterministically.
#[derive(Debug, Clone, Copy)]
pub struct ScoredFlag {
    pub score: f32,
    pub tp: bool,
    pub id: u64,
}

/// All-point interpolated average precision:
/// AP = sum_k (r_k - r_{k-1}) * max{precision at recall >= r_k}.
pub fn average_precision(flags: &[ScoredFlag], positives: usize) -> Result<f64> {
    if positives == 0 {
        return Err(Error::usage("average_precision needs at least one positive"));
    }
    let mut ranked: Vec<ScoredFlag> = flags.to_vec();
    ranked.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
    });
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len()); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    for f in &ranked {
        if f.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope from the right, then integrate recall increments
    let mut ap = 0.0;
    let mut max_prec = 0.0f64;
    let mut prev_recall = if let Some(&(r, _)) = curve.last() { r } else { return Ok(0.0) };
    for &(recall, precision) in curve.iter().rev() {
        max_prec = max_prec.max(precision);
        if recall < prev_recall {
            ap += (prev_recall - recall) * max_prec;
            prev_recall = recall;
        }
    }
    ap += prev_recall * max_prec;
    Ok(ap)
}

/// Per-class greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<Detection> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = keep.iter().any(|k| {
            k.class_id == candidate.class_id
                && iou(&k.rect, &candidate.rect).map(|v| v > iou_threshold).unwrap_or(false)
        });
        if !suppressed {
            keep.push(candidate.clone());
        }
    }
    keep
}

#[derive(Debug, Clone, Serialize)]
pub struct PrPoint {
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub class_name: String,
    pub ap: f64,
    pub positives: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaEval {
    pub alpha: f64,
    pub fmap: f64,
    pub per_class: Vec<ClassEval>,
    /// Classes with zero positives, excluded from the mean.
    pub skipped_classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_alpha: Vec<AlphaEval>,
    pub detections_total: usize,
    pub frames_total: usize,
    pub config: EvalConfig,
    pub model_provenance: Vec<String>,
}

impl EvalReport {
    pub fn fmap_at(&self, alpha: f64) -> Option<f64> {
        self.per_alpha.iter().find(|a| (a.alpha - alpha).abs() < 1e-9).map(|a| a.fmap)
    }
}

/// One frame's worth of evaluation input.
#[derive(Debug, Clone)]
pub struct FrameDetections {
    pub dets: Vec<Detection>,
    pub gts: Vec<(BBox, usize)>,
}

/// Run the full pipeline over every evaluable frame of the dataset.
/// Frame t (0..T-1) pairs with frame t+1 for flow.
pub fn collect_detections(
    model: &DetectorModel,
    ds: &Dataset,
    cfg: &EvalConfig,
) -> Result<Vec<FrameDetections>> {
    cfg.validate()?;
    if ds.class_count() != model.cfg.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model expects {}",
            ds.class_count(),
            model.cfg.classes
        )));
    }
    if !ds.manifest.has_boxes {
        return Err(Error::config("evaluation dataset has no boxes"));
    }
    let mut frames = Vec::new();
    for i in 0..ds.len() {
        let sample = ds.video(i)?;
        let boxes = sample.boxes.as_ref().expect("has_boxes checked");
        if sample.frame_count < 2 {
            continue;
        }
        let pairs = sample.frame_count - 1;
        let frame_len = CHANNELS * SIDE * SIDE;
        let mut f0 = Vec::with_capacity(pairs * frame_len);
        let mut f1 = Vec::with_capacity(pairs * frame_len);
        for t in 0..pairs {
            f0.extend_from_slice(&sample.frames[t * frame_len..(t + 1) * frame_len]);
            f1.extend_from_slice(&sample.frames[(t + 1) * frame_len..(t + 2) * frame_len]);
        }
        let f0 = Tensor::new(vec![pairs, CHANNELS, SIDE, SIDE], f0)?;
        let f1 = Tensor::new(vec![pairs, CHANNELS, SIDE, SIDE], f1)?;
        let grid = model.forward_grid(&f0, &f1)?;
        let decoded = decode(&grid, &model.cfg.anchors, cfg.confidence)?;
        for (t, dets) in decoded.into_iter().enumerate() {
            let selected = match cfg.selection {
                SelectionMode::Top1 => {
                    let best = dets.iter().enumerate().max_by(|a, b| {
                        a.1.score
                            .partial_cmp(&b.1.score)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.0.cmp(&a.0))
                    });
                    best.map(|(_, d)| vec![d.clone()]).unwrap_or_default()
                }
                SelectionMode::Nms => nms(&dets, cfg.nms_iou),
            };
            frames.push(FrameDetections {
                dets: selected,
                gts: vec![(boxes[t], sample.class_id as usize)],
            });
        }
    }
    Ok(frames)
}

/// Score collected frames at every alpha.
pub fn score_frames(
    frames: &[FrameDetections],
    class_names: &[String],
    cfg: &EvalConfig,
    provenance: Vec<String>,
) -> Result<EvalReport> {
    let k = class_names.len();
    let mut positives = vec![0usize; k];
    for f in frames {
        for (_, class) in &f.gts {
            positives[*class] += 1;
        }
    }
    let mut per_alpha = Vec::new();
    for &alpha in &cfg.alphas {
        let mut per_class_flags: Vec<Vec<ScoredFlag>> = vec![Vec::new(); k];
        for (fi, frame) in frames.iter().enumerate() {
            let mut ranked = frame.dets.clone();
            ranked.sort_by(|a, b| {
                b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal)
            });
            let flags = match_frame(&ranked, &frame.gts, alpha)?;
            for (di, (det, tp)) in ranked.iter().zip(flags).enumerate() {
                per_class_flags[det.class_id].push(ScoredFlag {
                    score: det.score,
                    tp,
                    id: (fi as u64) << 16 | di as u64,
                });
            }
        }
        let mut per_class = Vec::new();
        let mut skipped = Vec::new();
        let mut ap_sum = 0.0;
        let mut ap_n = 0usize;
        for class_id in 0..k {
            if positives[class_id] == 0 {
                skipped.push(class_id);
                continue;
            }
            let flags = &per_class_flags[class_id];
            let ap = if flags.is_empty() {
                0.0
            } else {
                average_precision(flags, positives[class_id])?
            };
            let curve = pr_curve(flags, positives[class_id]);
            per_class.push(ClassEval {
                class_id,
                class_name: class_names[class_id].clone(),
                ap,
                positives: positives[class_id],
                curve,
            });
            ap_sum += ap;
            ap_n += 1;
        }
        let fmap = if ap_n > 0 { ap_sum / ap_n as f64 } else { 0.0 };
        per_alpha.push(AlphaEval { alpha, fmap, per_class, skipped_classes: skipped });
    }
    Ok(EvalReport {
        per_alpha,
        detections_total: frames.iter().map(|f| f.dets.len()).sum(),
        frames_total: frames.len(),
        config: cfg.clone(),
        model_provenance: provenance,
    })
}

fn pr_curve(flags: &[ScoredFlag], positives: usize) -> Vec<PrPoint> {
    let mut ranked: Vec<ScoredFlag> = flags.to_vec();
    ranked.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
    });
    let mut tp = 0usize;
    let mut out = Vec::with_capacity(ranked.len());
    for (rank, f) in ranked.iter().enumerate() {
        if f.tp {
            tp += 1;
        }
        out.push(PrPoint {
            rank: rank + 1,
            precision: tp as f64 / (rank + 1) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    out
}

/// Full evaluation: inference, selection, per-class AP and f-mAP per alpha.
pub fn evaluate(model: &DetectorModel, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_with_provenance(model, ds, cfg, Vec::new())
}

pub fn evaluate_with_provenance(
    model: &DetectorModel,
    ds: &Dataset,
    cfg: &EvalConfig,
    provenance: Vec<String>,
) -> Result<EvalReport> {
    let frames = collect_detections(model, ds, cfg)?;
    score_frames(&frames, &ds.manifest.classes, cfg, provenance)
}

/// f-mAP as a function of the IoU threshold over a fixed detection set;
/// must be monotone non-increasing.
pub fn threshold_sweep(
    model: &DetectorModel,
    ds: &Dataset,
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let base = EvalConfig::default();
    let frames = collect_detections(model, ds, &base)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = EvalConfig { alphas: vec![alpha], ..base.clone() };
        let report = score_frames(&frames, &ds.manifest.classes, &cfg, Vec::new())?;
        rows.push((alpha, report.per_alpha[0].fmap));
    }
    for w in rows.windows(2) {
        assert!(
            w[1].1 <= w[0].1 + 1e-12,
            "f-mAP rose with alpha: {} -> {} at alpha {}",
            w[0].1,
            w[1].1,
            w[1].0
        );
    }
    Ok(rows)
}

/// Default alpha grid 0.05..0.95 step 0.05.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("alpha,fmap\n");
    for (a, f) in rows {
        out.push_str(&format!("{a:.2},{f:.6}\n"));
    }
    out
}

pub fn report_pr_csv(report: &EvalReport) -> String {
    let mut out = String::from("alpha,class,rank,precision,recall\n");
    for alpha in &report.per_alpha {
        for class in &alpha.per_class {
            for p in &class.curve {
                out.push_str(&format!(
                    "{:.2},{},{},{:.6},{:.6}\n",
                    alpha.alpha, class.class_name, p.rank, p.precision, p.recall
                ));
            }
        }
    }
    out
}

/// Per-alpha AP summary CSV.
pub fn report_ap_csv(report: &EvalReport) -> String {
    let mut out = String::from("alpha,class,ap\n");
    for alpha in &report.per_alpha {
        for class in &alpha.per_class {
            out.push_str(&format!("{:.2},{},{:.6}\n", alpha.alpha, class.class_name, class.ap));
        }
        out.push_str(&format!("{:.2},f-mAP,{:.6}\n", alpha.alpha, alpha.fmap));
    }
    out
}

/// Classification accuracy of the top detection per frame (motion ablation
/// checks): fraction of frames whose best detection carries the true class,
/// plus the mean IoU of those best boxes against ground truth.
pub fn top1_class_accuracy_and_iou(frames: &[FrameDetections]) -> (f64, f64) {
    let mut correct = 0usize;
    let mut iou_sum = 0.0f64;
    let mut counted = 0usize;
    for f in frames {
        let best = f.dets.iter().max_by(|a, b| {
            a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal)
        });
        if let (Some(det), Some((gt_rect, gt_class))) = (best, f.gts.first()) {
            counted += 1;
            if det.class_id == *gt_class {
                correct += 1;
            }
            iou_sum += iou(&det.rect, gt_rect).unwrap_or(0.0);
        }
    }
    if counted == 0 {
        (0.0, 0.0)
    } else {
        (correct as f64 / counted as f64, iou_sum / counted as f64)
    }
}

/// The representation of `BTreeMap` keys in reports.
pub fn alpha_key(alpha: f64) -> String {
    format!("{alpha:.2}")
}

pub type AlphaMap = BTreeMap<String, f64>;
