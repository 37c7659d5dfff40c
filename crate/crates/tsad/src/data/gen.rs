//! Dataset generation. Each sample is a pure function of
//! (dataset seed, split, index), so parallel generation is byte-identical
//! to serial and any record can be regenerated in isolation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::format::{encode_record, Dataset, Manifest, MANIFEST_VERSION};
use super::render::{render_video, SampleParamsInner, ShapeKind};
use super::{sample_seed, MotionClass, FRAMES, SIDE};
use crate::error::Result;

pub use super::render::SampleParamsInner as SampleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DatasetKind {
    /// Video detection: boxes + exact flow (the small annotated set).
    Detection,
    /// Video recognition: video-level labels only, wider visual variation
    /// (the large pretraining set).
    Recognition,
    /// Single frames labeled by shape identity (static pretraining set).
    Static,
}

impl DatasetKind {
    fn tag(self) -> u64 {
        match self {
            DatasetKind::Detection => 1,
            DatasetKind::Recognition => 2,
            DatasetKind::Static => 3,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            DatasetKind::Static => ShapeKind::class_names(),
            _ => MotionClass::class_names(),
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            DatasetKind::Static => ShapeKind::COUNT,
            _ => MotionClass::COUNT,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
    pub split: String,
}

fn split_tag(split: &str) -> u64 {
    super::mix64(split.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)))
}

/// Per-axis maximum distance from the shape center to its box edges (px).
/// The triangle's box is asymmetric about the center (apex extends a full
/// `r` upward), so this is the safe covering extent, not the half-size.
fn half_extents(shape: ShapeKind, r: f32) -> (f32, f32) {
    match shape {
        ShapeKind::Disc => (r, r),
        ShapeKind::Square => (0.9 * r, 0.9 * r),
        ShapeKind::Triangle => (0.866_025_4 * r, r),
    }
}

fn gen_range_safe(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draw sample parameters for one (kind, class, shape) triple. The
/// trajectory anchor and speeds are constrained so the actor box stays
/// inside the canvas with a 1 px margin for every frame.
pub fn random_params(
    rng: &mut ChaCha8Rng,
    kind: DatasetKind,
    class: MotionClass,
    shape: ShapeKind,
) -> SampleParamsInner {
    let side = SIDE as f32;
    let margin = 1.0f32;
    let wide = kind == DatasetKind::Recognition;
    let radius = if wide {
        gen_range_safe(rng, 7.0, 14.0)
    } else {
        gen_range_safe(rng, 8.0, 13.0)
    };
    let pulse_amp = gen_range_safe(rng, 0.25, 0.4);
    let horizon = (FRAMES - 1) as f32;

    // effective extents over the whole trajectory
    let size_scale = if class == MotionClass::ExpandContract { 1.0 + pulse_amp } else { 1.0 };
    let (hw, hh) = half_extents(shape, radius * size_scale);

    let max_speed = if wide { 3.0 } else { 2.5 };
    let (speed, orbit_radius, start, phase) = match class {
        MotionClass::MoveRight | MotionClass::MoveLeft => {
            let cap = ((side - 2.0 * margin - 2.0 * hw) / horizon).min(max_speed);
            let speed = gen_range_safe(rng, 0.8f32.min(cap), cap);
            let travel = speed * horizon;
            let x = gen_range_safe(rng, margin + hw, side - margin - hw - travel);
            let y = gen_range_safe(rng, margin + hh, side - margin - hh);
            let x0 = if class == MotionClass::MoveRight { x } else { x + travel };
            (speed, 0.0, (x0, y), 0.0)
        }
        MotionClass::CircleCw | MotionClass::CircleCcw => {
            let orbit_cap = 0.5 * (side - 2.0 * margin) - hw.max(hh) - 1.0;
            let orbit = gen_range_safe(rng, 4.0, orbit_cap.min(9.0));
            let speed = gen_range_safe(rng, 1.0, max_speed.min(0.6 * orbit));
            let cx = gen_range_safe(rng, margin + orbit + hw, side - margin - orbit - hw);
            let cy = gen_range_safe(rng, margin + orbit + hh, side - margin - orbit - hh);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            (speed, orbit, (cx, cy), phase)
        }
        MotionClass::Zigzag => {
            let cap = ((side - 2.0 * margin - 2.0 * hw) / horizon).min(max_speed);
            let speed = gen_range_safe(rng, 0.8f32.min(cap), cap);
            let travel = speed * horizon;
            let bounce = 0.8 * speed * 4.0;
            let x0 = gen_range_safe(rng, margin + hw, side - margin - hw - travel);
            let y0 = gen_range_safe(rng, margin + hh, side - margin - hh - bounce);
            (speed, 0.0, (x0, y0), 0.0)
        }
        MotionClass::ExpandContract => {
            let x = gen_range_safe(rng, margin + hw, side - margin - hw);
            let y = gen_range_safe(rng, margin + hh, side - margin - hh);
            (0.0, 0.0, (x, y), 0.0)
        }
    };

    // background texture and actor color with guaranteed luma contrast
    let bg_seed = rng.gen::<u64>();
    let bg_blur = if wide { rng.gen_range(1..=3) } else { 2 };
    let lo = gen_range_safe(rng, 0.10, 0.25);
    let hi = gen_range_safe(rng, 0.60, 0.85);
    let bg_tint = [
        gen_range_safe(rng, 0.6, 1.0),
        gen_range_safe(rng, 0.6, 1.0),
        gen_range_safe(rng, 0.6, 1.0),
    ];
    let bg_luma = 0.5 * (lo + hi) * (bg_tint[0] + bg_tint[1] + bg_tint[2]) / 3.0;
    let sign: f32 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let target_luma = (bg_luma + sign * gen_range_safe(rng, 0.35, 0.50)).clamp(0.05, 0.95);
    let actor_color = [
        (target_luma + gen_range_safe(rng, -0.08, 0.08)).clamp(0.0, 1.0),
        (target_luma + gen_range_safe(rng, -0.08, 0.08)).clamp(0.0, 1.0),
        (target_luma + gen_range_safe(rng, -0.08, 0.08)).clamp(0.0, 1.0),
    ];

    SampleParamsInner {
        class,
        shape,
        radius,
        speed,
        start,
        orbit_radius,
        phase,
        pulse_amp,
        actor_color,
        bg_seed,
        bg_tint,
        bg_blur,
        bg_range: (lo, hi),
    }
}

/// Render the record bytes for one (spec, index); pure and order-free.
fn build_record(spec: &DatasetSpec, index: usize) -> (Vec<u8>, u16, u16) {
    let seed = sample_seed(spec.seed, split_tag(&spec.split) ^ spec.kind.tag(), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.kind {
        DatasetKind::Static => {
            let shape = ShapeKind::ALL[index % ShapeKind::COUNT];
            // motion class is irrelevant for a single frame; still draw
            // params through the shared path for identical distributions
            let class = MotionClass::ALL[rng.gen_range(0..MotionClass::COUNT)];
            let params = random_params(&mut rng, spec.kind, class, shape);
            let r = render_video(&params, 1);
            let rec = encode_record(&r.frames, 1, shape.id(), Some(&r.boxes), None);
            (rec, shape.id(), shape.id())
        }
        DatasetKind::Detection => {
            let class = MotionClass::ALL[index % MotionClass::COUNT];
            let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::COUNT)];
            let params = random_params(&mut rng, spec.kind, class, shape);
            let r = render_video(&params, FRAMES);
            let rec =
                encode_record(&r.frames, FRAMES, class.id(), Some(&r.boxes), Some(&r.flow));
            (rec, class.id(), shape.id())
        }
        DatasetKind::Recognition => {
            let class = MotionClass::ALL[index % MotionClass::COUNT];
            let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::COUNT)];
            let params = random_params(&mut rng, spec.kind, class, shape);
            let r = render_video(&params, FRAMES);
            let rec = encode_record(&r.frames, FRAMES, class.id(), None, None);
            (rec, class.id(), shape.id())
        }
    }
}

/// Generate a split directory; returns the manifest. Records are built in
/// parallel and concatenated in index order.
pub fn generate_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    let built: Vec<(Vec<u8>, u16, u16)> =
        (0..spec.count).into_par_iter().map(|i| build_record(spec, i)).collect();
    let mut records = Vec::with_capacity(built.len());
    let mut class_ids = Vec::with_capacity(built.len());
    let mut shape_ids = Vec::with_capacity(built.len());
    for (rec, class, shape) in built {
        records.push(rec);
        class_ids.push(class);
        shape_ids.push(shape);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        split: spec.split.clone(),
        count: spec.count,
        classes: spec.kind.class_names(),
        seed: spec.seed,
        offsets: Vec::new(),
        has_boxes: spec.kind != DatasetKind::Recognition,
        has_flow: spec.kind == DatasetKind::Detection,
        class_ids,
        shape_ids,
    };
    Dataset::write(dir, manifest, &records)?;
    let reloaded = Dataset::load(dir)?;
    Ok(reloaded.manifest)
}
