//! Anchor prior selection: k-means over box shapes with 1 - shapeIoU
//! distance, deterministic quantile-of-area initialization.

use super::{Anchor, BBox};
use crate::error::{Error, Result};

/// IoU of two (w, h) shapes placed at a common center, in cell units.
pub fn shape_iou(w1: f32, h1: f32, w2: f32, h2: f32) -> f32 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Cluster training-box shapes into `b` anchors (grid-cell units).
/// Initialization takes the boxes at evenly spaced area quantiles, so the
/// result is fully deterministic; duplicates are permitted when the data
/// has fewer distinct shapes than `b`.
pub fn anchors_kmeans(boxes: &[BBox], b: usize, grid: usize) -> Result<Vec<Anchor>> {
    if b == 0 {
        return Err(Error::config("need at least one anchor"));
    }
    if boxes.len() < b {
        return Err(Error::input(format!("{} boxes for {} anchors", boxes.len(), b)));
    }
    let s = grid as f32;
    let shapes: Vec<(f32, f32)> = boxes.iter().map(|bx| (bx.w * s, bx.h * s)).collect();

    // init: sort by area, pick quantile midpoints
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&i, &j| {
        let ai = shapes[i].0 * shapes[i].1;
        let aj = shapes[j].0 * shapes[j].1;
        ai.partial_cmp(&aj).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut centers: Vec<(f32, f32)> = (0..b)
        .map(|i| {
            let q = (i as f64 + 0.5) / b as f64;
            shapes[order[((q * shapes.len() as f64) as usize).min(shapes.len() - 1)]]
        })
        .collect();

    let mut assign = vec![usize::MAX; shapes.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &(w, h)) in shapes.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f32::MAX;
            for (ci, &(cw, ch)) in centers.iter().enumerate() {
                let d = 1.0 - shape_iou(w, h, cw, ch);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for ci in 0..b {
            let mut n = 0usize;
            let (mut sw, mut sh) = (0.0f64, 0.0f64);
            for (i, &a) in assign.iter().enumerate() {
                if a == ci {
                    n += 1;
                    sw += shapes[i].0 as f64;
                    sh += shapes[i].1 as f64;
                }
            }
            if n > 0 {
                centers[ci] = ((sw / n as f64) as f32, (sh / n as f64) as f32);
            }
        }
    }
    // stable ordering: ascending area
    centers.sort_by(|a, b| {
        (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(centers.into_iter().map(|(pw, ph)| Anchor { pw, ph }).collect())
}
