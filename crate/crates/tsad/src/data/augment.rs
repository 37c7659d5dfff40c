//! Training-time augmentation for consecutive frame pairs: one geometric
//! transform (flip, crop+zoom) applied identically to both frames, the box
//! and the flow, plus photometric jitter applied identically to both frames.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CHANNELS, SIDE};
use crate::detector::BBox;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Lower bound of the square crop scale; 1.0 disables cropping.
    pub crop_min_scale: f32,
    /// Relative brightness jitter half-range.
    pub brightness: f32,
    /// Saturation jitter half-range.
    pub saturation: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, crop_min_scale: 0.8, brightness: 0.2, saturation: 0.2 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { flip_prob: 0.0, crop_min_scale: 1.0, brightness: 0.0, saturation: 0.0 }
    }
}

/// A consecutive frame pair with the frame-t annotation.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub frame_a: Vec<f32>,
    pub frame_b: Vec<f32>,
    pub rect: BBox,
    pub class_id: u16,
    /// Optional exact flow for the pair (2 planes, px units).
    pub flow: Option<Vec<f32>>,
}

fn hflip_frame(frame: &[f32]) -> Vec<f32> {
    let plane = SIDE * SIDE;
    let mut out = vec![0.0f32; frame.len()];
    for c in 0..frame.len() / plane {
        for y in 0..SIDE {
            for x in 0..SIDE {
                out[c * plane + y * SIDE + x] = frame[c * plane + y * SIDE + (SIDE - 1 - x)];
            }
        }
    }
    out
}

/// Mirror the pair horizontally: frames and flow planes mirrored, u negated,
/// box center reflected. An exact involution.
pub fn hflip_pair(p: &FramePair) -> FramePair {
    let flow = p.flow.as_ref().map(|f| {
        let plane = SIDE * SIDE;
        let mut out = hflip_frame(f);
        for v in &mut out[..plane] {
            *v = -*v;
        }
        out
    });
    FramePair {
        frame_a: hflip_frame(&p.frame_a),
        frame_b: hflip_frame(&p.frame_b),
        rect: BBox { cx: 1.0 - p.rect.cx, ..p.rect },
        class_id: p.class_id,
        flow,
    }
}

fn sample_plane(plane_data: &[f32], x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (SIDE - 1) as f32);
    let y = y.clamp(0.0, (SIDE - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(SIDE - 1);
    let y1 = (y0 + 1).min(SIDE - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    plane_data[y0 * SIDE + x0] * (1.0 - fx) * (1.0 - fy)
        + plane_data[y0 * SIDE + x1] * fx * (1.0 - fy)
        + plane_data[y1 * SIDE + x0] * (1.0 - fx) * fy
        + plane_data[y1 * SIDE + x1] * fx * fy
}

fn resample(data: &[f32], planes: usize, x0: f32, y0: f32, win: f32, value_scale: f32) -> Vec<f32> {
    let plane = SIDE * SIDE;
    let mut out = vec![0.0f32; planes * plane];
    let step = win / SIDE as f32;
    for c in 0..planes {
        let src = &data[c * plane..(c + 1) * plane];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let sx = x0 + (x as f32 + 0.5) * step - 0.5;
                let sy = y0 + (y as f32 + 0.5) * step - 0.5;
                out[c * plane + y * SIDE + x] = sample_plane(src, sx, sy) * value_scale;
            }
        }
    }
    out
}

/// Crop a `win`-px square window at (x0, y0) and zoom back to full size.
/// Boxes remap exactly; flow is resampled and rescaled by the zoom.
pub fn crop_zoom_pair(p: &FramePair, x0: f32, y0: f32, win: f32) -> FramePair {
    let zoom = SIDE as f32 / win;
    let side = SIDE as f32;
    let flow = p.flow.as_ref().map(|f| resample(f, 2, x0, y0, win, zoom));
    FramePair {
        frame_a: resample(&p.frame_a, CHANNELS, x0, y0, win, 1.0),
        frame_b: resample(&p.frame_b, CHANNELS, x0, y0, win, 1.0),
        rect: BBox {
            cx: (p.rect.cx * side - x0) / win,
            cy: (p.rect.cy * side - y0) / win,
            w: p.rect.w * side / win,
            h: p.rect.h * side / win,
        },
        class_id: p.class_id,
        flow,
    }
}

fn photometric(frame: &[f32], brightness: f32, saturation: f32) -> Vec<f32> {
    let plane = SIDE * SIDE;
    let mut out = vec![0.0f32; frame.len()];
    for i in 0..plane {
        let mut luma = 0.0f32;
        for c in 0..CHANNELS {
            luma += frame[c * plane + i];
        }
        luma /= CHANNELS as f32;
        for c in 0..CHANNELS {
            let v = luma + saturation * (frame[c * plane + i] - luma);
            out[c * plane + i] = (v * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// Identical brightness/saturation jitter on both frames; geometry untouched.
pub fn photometric_pair(p: &FramePair, brightness: f32, saturation: f32) -> FramePair {
    FramePair {
        frame_a: photometric(&p.frame_a, brightness, saturation),
        frame_b: photometric(&p.frame_b, brightness, saturation),
        rect: p.rect,
        class_id: p.class_id,
        flow: p.flow.clone(),
    }
}

/// Apply the full augmentation chain. The crop is retried up to 10 times to
/// keep the actor box fully visible, then falls back to identity.
pub fn augment(p: &FramePair, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> FramePair {
    let mut out = if rng.gen_bool(cfg.flip_prob) { hflip_pair(p) } else { p.clone() };

    if cfg.crop_min_scale < 1.0 {
        let side = SIDE as f32;
        let (bx0, by0, bx1, by1) = out.rect.corners();
        for _attempt in 0..10 {
            let scale = rng.gen_range(cfg.crop_min_scale..1.0);
            let win = (scale * side).round().max(8.0);
            let x0 = rng.gen_range(0.0..=(side - win));
            let y0 = rng.gen_range(0.0..=(side - win));
            let fits = bx0 * side >= x0
                && by0 * side >= y0
                && bx1 * side <= x0 + win
                && by1 * side <= y0 + win;
            if fits {
                out = crop_zoom_pair(&out, x0, y0, win);
                break;
            }
        }
    }

    if cfg.brightness > 0.0 || cfg.saturation > 0.0 {
        let b = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
        let s = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
        out = photometric_pair(&out, b, s);
    }
    out
}
