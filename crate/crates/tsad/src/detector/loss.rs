//! Target assignment and the multi-task grid loss: coordinate SSE at
//! responsible slots, objectness regressed toward the decoded-box IoU,
//! a down-weighted no-object term, and class cross-entropy.

use super::anchors::shape_iou;
use super::{decode_slot, encode_box, Anchor, BBox, DetectorConfig};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
    /// Non-responsible slots whose decoded box overlaps a ground truth at
    /// or above this IoU are exempt from the no-object penalty.
    pub ignore_iou: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { coord: 5.0, noobj: 0.5, ignore_iou: 0.6 }
    }
}

/// Ground truth for one image: (box, class) pairs.
#[derive(Debug, Clone, Default)]
pub struct FrameTargets {
    pub boxes: Vec<(BBox, usize)>,
}

/// One responsible (cell, anchor) slot.
#[derive(Debug, Clone)]
pub struct RespSlot {
    pub ix: usize,
    pub iy: usize,
    pub anchor: usize,
    pub rect: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub slots: Vec<RespSlot>,
    /// Ground-truth boxes displaced by a larger box wanting the same slot.
    pub collisions: usize,
}

/// Plain box IoU in corner form; 0 for empty intersection.
pub fn box_iou(a: &BBox, b: &BBox) -> f32 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Assign each ground-truth box to the cell containing its center and the
/// anchor with the highest shape IoU (ties to the lowest anchor index).
/// Two boxes claiming the same slot keep the larger area and count a
/// collision.
pub fn assign_targets(
    gts: &[(BBox, usize)],
    anchors: &[Anchor],
    grid: usize,
) -> Result<Assignment> {
    let mut out = Assignment::default();
    let s = grid as f32;
    for (rect, class) in gts {
        rect.validate()?;
        let ix = ((rect.cx * s).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let iy = ((rect.cy * s).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let (bw, bh) = (rect.w * s, rect.h * s);
        let mut best = 0usize;
        let mut best_iou = -1.0f32;
        for (a, anchor) in anchors.iter().enumerate() {
            let iou = shape_iou(bw, bh, anchor.pw, anchor.ph);
            if iou > best_iou {
                best_iou = iou;
                best = a;
            }
        }
        if let Some(existing) =
            out.slots.iter_mut().find(|sl| sl.ix == ix && sl.iy == iy && sl.anchor == best)
        {
            out.collisions += 1;
            if rect.area() > existing.rect.area() {
                existing.rect = *rect;
                existing.class = *class;
            }
        } else {
            out.slots.push(RespSlot { ix, iy, anchor: best, rect: *rect, class: *class });
        }
    }
    Ok(out)
}

/// Multi-task detection loss over a batch grid prediction, averaged over
/// the batch (each image contributes the sum over its slots).
pub fn detection_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    targets: &[FrameTargets],
    cfg: &DetectorConfig,
) -> Result<Var> {
    let (n, c, sy, sx) = g.value(pred).dims4()?;
    let grid = cfg.grid;
    let b = cfg.num_anchors();
    let k = cfg.classes;
    if c != b * (5 + k) || sy != grid || sx != grid {
        return Err(Error::config(format!(
            "loss: prediction {:?} inconsistent with S={grid} B={b} K={k}",
            g.value(pred).shape()
        )));
    }
    if targets.len() != n {
        return Err(Error::input(format!("{} target frames for batch of {}", targets.len(), n)));
    }
    let plane = grid * grid;
    let ch = |img: usize, anchor: usize, f: usize, iy: usize, ix: usize| {
        ((img * c + anchor * (5 + k) + f) * grid + iy) * grid + ix
    };

    // responsible-slot gathers
    let mut xy_idx = Vec::new();
    let mut xy_tgt: Vec<S> = Vec::new();
    let mut wh_idx = Vec::new();
    let mut wh_tgt: Vec<S> = Vec::new();
    let mut obj_idx = Vec::new();
    let mut obj_tgt: Vec<S> = Vec::new();
    let mut cls_idx = Vec::new();
    let mut cls_tgt: Vec<usize> = Vec::new();
    let mut noobj_idx = Vec::new();

    let raw = g.value(pred).data().to_vec(); // detached snapshot for IoU targets

    for (img, frame) in targets.iter().enumerate() {
        let assignment = assign_targets(&frame.boxes, &cfg.anchors, grid)?;
        let mut responsible = vec![false; b * plane];
        for slot in &assignment.slots {
            responsible[(slot.anchor * grid + slot.iy) * grid + slot.ix] = true;
        }
        for slot in &assignment.slots {
            let anchor = &cfg.anchors[slot.anchor];
            let (ix, iy, _, _, tw, th) = encode_box(&slot.rect, anchor, grid);
            debug_assert_eq!((ix, iy), (slot.ix, slot.iy));
            let s = grid as f32;
            let off_x = (slot.rect.cx * s - ix as f32).clamp(0.0, 1.0);
            let off_y = (slot.rect.cy * s - iy as f32).clamp(0.0, 1.0);
            xy_idx.push(ch(img, slot.anchor, 0, iy, ix));
            xy_tgt.push(S::from_f64(off_x as f64));
            xy_idx.push(ch(img, slot.anchor, 1, iy, ix));
            xy_tgt.push(S::from_f64(off_y as f64));
            wh_idx.push(ch(img, slot.anchor, 2, iy, ix));
            wh_tgt.push(S::from_f64(tw as f64));
            wh_idx.push(ch(img, slot.anchor, 3, iy, ix));
            wh_tgt.push(S::from_f64(th as f64));

            // objectness target: IoU of the currently decoded box vs gt
            let dec = decode_slot(
                raw[ch(img, slot.anchor, 0, iy, ix)].to_f64() as f32,
                raw[ch(img, slot.anchor, 1, iy, ix)].to_f64() as f32,
                raw[ch(img, slot.anchor, 2, iy, ix)].to_f64() as f32,
                raw[ch(img, slot.anchor, 3, iy, ix)].to_f64() as f32,
                ix,
                iy,
                anchor,
                grid,
            );
            obj_idx.push(ch(img, slot.anchor, 4, iy, ix));
            obj_tgt.push(S::from_f64(box_iou(&dec, &slot.rect) as f64));

            for j in 0..k {
                cls_idx.push(ch(img, slot.anchor, 5 + j, iy, ix));
            }
            cls_tgt.push(slot.class);
        }

        // no-object slots, minus those overlapping any gt above the ignore IoU
        for anchor in 0..b {
            for iy in 0..grid {
                for ix in 0..grid {
                    if responsible[(anchor * grid + iy) * grid + ix] {
                        continue;
                    }
                    let dec = decode_slot(
                        raw[ch(img, anchor, 0, iy, ix)].to_f64() as f32,
                        raw[ch(img, anchor, 1, iy, ix)].to_f64() as f32,
                        raw[ch(img, anchor, 2, iy, ix)].to_f64() as f32,
                        raw[ch(img, anchor, 3, iy, ix)].to_f64() as f32,
                        ix,
                        iy,
                        &cfg.anchors[anchor],
                        grid,
                    );
                    let best = frame
                        .boxes
                        .iter()
                        .map(|(gt, _)| box_iou(&dec, gt))
                        .fold(0.0f32, f32::max);
                    if best < cfg.loss.ignore_iou {
                        noobj_idx.push(ch(img, anchor, 4, iy, ix));
                    }
                }
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut total: Option<Var> = None;
    let add_term = |g: &mut Graph<S>, term: Var, total: &mut Option<Var>| -> Result<()> {
        *total = Some(match *total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        Ok(())
    };

    let n_resp = obj_idx.len();
    if n_resp > 0 {
        // coordinate SSE over (sigmoid(tx), sigmoid(ty), tw, th)
        let len = xy_idx.len();
        let picked = g.gather(pred, xy_idx, vec![len])?;
        let sig = g.sigmoid(picked)?;
        let tgt = g.constant(Tensor::new(vec![len], xy_tgt)?);
        let d = g.sub(sig, tgt)?;
        let sq = g.mul(d, d)?;
        let sum = g.sum(sq)?;
        let xy_term = g.scale(sum, cfg.loss.coord * inv_n)?;
        add_term(g, xy_term, &mut total)?;

        let len = wh_idx.len();
        let picked = g.gather(pred, wh_idx, vec![len])?;
        let tgt = g.constant(Tensor::new(vec![len], wh_tgt)?);
        let d = g.sub(picked, tgt)?;
        let sq = g.mul(d, d)?;
        let sum = g.sum(sq)?;
        let wh_term = g.scale(sum, cfg.loss.coord * inv_n)?;
        add_term(g, wh_term, &mut total)?;

        // objectness toward decoded-box IoU
        let picked = g.gather(pred, obj_idx, vec![n_resp])?;
        let sig = g.sigmoid(picked)?;
        let tgt = g.constant(Tensor::new(vec![n_resp], obj_tgt)?);
        let d = g.sub(sig, tgt)?;
        let sq = g.mul(d, d)?;
        let sum = g.sum(sq)?;
        let obj_term = g.scale(sum, inv_n)?;
        add_term(g, obj_term, &mut total)?;

        // class cross-entropy (softmax_ce averages rows; rescale to a sum)
        let picked = g.gather(pred, cls_idx, vec![n_resp, k])?;
        let ce = g.softmax_ce(picked, &cls_tgt)?;
        let cls_term = g.scale(ce, n_resp as f64 * inv_n)?;
        add_term(g, cls_term, &mut total)?;
    }

    if !noobj_idx.is_empty() {
        let len = noobj_idx.len();
        let picked = g.gather(pred, noobj_idx, vec![len])?;
        let sig = g.sigmoid(picked)?;
        let sq = g.mul(sig, sig)?;
        let sum = g.sum(sq)?;
        let noobj_term = g.scale(sum, cfg.loss.noobj * inv_n)?;
        add_term(g, noobj_term, &mut total)?;
    }

    total.ok_or_else(|| Error::usage("detection loss over an empty grid"))
}
