//! Procedural scene synthesis standing in for a web corpus plus an expert
//! model zoo: rendered shapes with exact class masks, disparity planes, and
//! surface normals, captioned by a closed grammar, and corrupted into noisy
//! pseudo-labels by a configurable oracle.

pub mod oracle;
pub mod render;
pub mod scene;
pub mod text;

pub use oracle::{make_pseudo_labels, OracleConfig, PseudoLabelSet};
pub use render::render_scene;
pub use scene::{sample_scene, GenConfig, ObjectSpec, SceneSpec, Skew};
pub use text::{tokenize, Vocab};

use alloc::string::String;
use alloc::vec::Vec;

/// Shape classes (mask ids are shifted by one; 0 is background).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Plus,
    Ring,
    Hexagon,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Plus,
        ShapeKind::Ring,
        ShapeKind::Hexagon,
        ShapeKind::Star,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Plus => "plus",
            ShapeKind::Ring => "ring",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Star => "star",
        }
    }

    pub fn from_index(i: usize) -> ShapeKind {
        ShapeKind::ALL[i]
    }

    pub fn index(&self) -> usize {
        ShapeKind::ALL.iter().position(|s| s == self).unwrap()
    }

    /// Mask class id (background is 0).
    pub fn class_id(&self) -> u8 {
        self.index() as u8 + 1
    }
}

pub const NUM_SHAPES: usize = 8;
/// Background plus the eight shape classes.
pub const NUM_SEG_CLASSES: usize = NUM_SHAPES + 1;

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const COLOR_RGB: [[f64; 3]; 6] = [
    [0.88, 0.12, 0.12],
    [0.10, 0.78, 0.18],
    [0.14, 0.25, 0.92],
    [0.92, 0.86, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.82, 0.85],
];

/// Constant disparity of the background far plane.
pub const BACKGROUND_DISPARITY: f64 = 0.1;
/// Scales the in-plane disparity gradient derived from an object's normal.
pub const DISPARITY_TILT_SCALE: f64 = 0.1;
/// Objects hidden below this many visible pixels are never captioned.
pub const MIN_CAPTION_PIXELS: usize = 10;

/// One rendered scene with exact dense ground truth. Dense maps are stored
/// f32-quantized and images as 8-bit RGB so shard round-trips are bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_size: usize,
    /// 8-bit RGB, channel-major `[3, S, S]`.
    pub image: Vec<u8>,
    pub caption: String,
    /// Class ids, 0 = background.
    pub gt_mask: Vec<u8>,
    /// Disparity in [0,1].
    pub gt_disparity: Vec<f32>,
    /// Unit normals, channel-major `[3, S, S]`.
    pub gt_normals: Vec<f32>,
    /// Shape class id of the most visible object (0 when background only).
    pub dominant_class: u8,
    /// Seed of the scene spec this sample was rendered from.
    pub scene_seed: u64,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Image as f64 in [0,1], channel-major.
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

/// Render the scene drawn by `sample_scene(gen, seed)`.
pub fn generate_sample(gen: &GenConfig, seed: u64) -> Sample {
    render_scene(&sample_scene(gen, seed), gen.image_size)
}
