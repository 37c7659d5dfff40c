//! Synthetic video generator with exact ground truth.
//!
//! Every sample is one textured-noise background plus one moving actor
//! (disc, square or triangle — shape is drawn independently of the motion
//! class, so appearance alone cannot separate the classes). Ground-truth
//! boxes come from the shape geometry and ground-truth flow from the
//! analytic trajectory, so flow labels are exact inside the actor mask and
//! zero on the static background.

mod augment;
mod format;
mod gen;
mod render;

pub use augment::{augment, AugmentConfig, FramePair};
pub use format::{load_external, Dataset, Manifest, VideoSample};
pub use gen::{generate_dataset, DatasetKind, DatasetSpec, SampleParams};
pub use render::{render_video, shape_tight_box, ShapeKind};

/// Canvas side in pixels (desk-scale geometry).
pub const SIDE: usize = 64;
/// Image channels.
pub const CHANNELS: usize = 3;
/// Frames per video sample.
pub const FRAMES: usize = 16;

/// The six motion classes. Trajectories are chosen so the actor's box stays
/// fully inside the canvas for every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MotionClass {
    MoveRight,
    MoveLeft,
    CircleCw,
    CircleCcw,
    Zigzag,
    ExpandContract,
}

impl MotionClass {
    pub const COUNT: usize = 6;
    pub const ALL: [MotionClass; 6] = [
        MotionClass::MoveRight,
        MotionClass::MoveLeft,
        MotionClass::CircleCw,
        MotionClass::CircleCcw,
        MotionClass::Zigzag,
        MotionClass::ExpandContract,
    ];

    pub fn id(self) -> u16 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u16
    }

    pub fn from_id(id: u16) -> Option<MotionClass> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::MoveRight => "move-right",
            MotionClass::MoveLeft => "move-left",
            MotionClass::CircleCw => "circle-cw",
            MotionClass::CircleCcw => "circle-ccw",
            MotionClass::Zigzag => "zigzag",
            MotionClass::ExpandContract => "expand-contract",
        }
    }

    pub fn class_names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

/// splitmix64 finalizer; used to derive independent per-sample RNG seeds
/// from (dataset seed, split, index) so generation is order-independent.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn sample_seed(dataset_seed: u64, split_tag: u64, index: u64) -> u64 {
    mix64(dataset_seed ^ mix64(split_tag ^ mix64(index)))
}

#[cfg(test)]
mod tests;
