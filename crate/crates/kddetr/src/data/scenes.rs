//! Scene generator: small RGB images of colored shapes on a noisy gray
//! background. Every sample is a pure function of `(dataset seed, index)`,
//! and the per-sample draw order below is part of the format contract, so an
//! independent implementation reproduces the pixels bit for bit:
//!
//! 1. `n = below(max_objects + 1)` object slots.
//! 2. Per slot, up to 50 placement attempts, each drawing in order: class
//!    (`below(k)`), side (`uniform(0.15, 0.5)`), center x then y
//!    (`uniform(side/2, 1 - side/2)`). The first attempt whose box overlaps
//!    every accepted box with IoU at most 0.3 is kept; a slot that exhausts
//!    its attempts is dropped.
//! 3. Shapes are painted opaquely in acceptance order.
//! 4. Per pixel in row-major order, per RGB channel, one `normal()` draw adds
//!    noise (sigma 0.05); the result is clamped to [0, 1] and rounded through
//!    f32, which is the stored precision.

use crate::boxes::{cxcywh_to_xyxy, iou, BoxCxCyWH};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

use super::GroundTruth;

pub const SIDE_MIN: f64 = 0.15;
pub const SIDE_MAX: f64 = 0.5;
pub const NOISE_SIGMA: f64 = 0.05;
pub const MAX_OVERLAP_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 50;
const BACKGROUND: [f64; 3] = [0.10, 0.10, 0.10];
/// Class palette; class identity is carried by both hue and shape
/// (0: square, 1: disk, 2: cross).
const COLORS: [[f64; 3]; 3] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.35, 0.90],
];
const CROSS_BAR_RATIO: f64 = 0.15;

/// Generation parameters. `k` is the number of foreground classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub k: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 32,
            k: 3,
            max_objects: 5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > COLORS.len() {
            return Err(Error::Param(format!(
                "class count must be 1..={}, got {}",
                COLORS.len(),
                self.k
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Param("image_size must be positive".into()));
        }
        Ok(())
    }
}

/// One image with its annotations. Pixels are stored at f32 precision in
/// row-major height x width x RGB order; `seed` is the derived per-sample
/// stream seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Vec<f32>,
    pub objects: Vec<(usize, BoxCxCyWH)>,
    pub seed: u64,
}

impl SceneSample {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            classes: self.objects.iter().map(|&(c, _)| c).collect(),
            boxes: self.objects.iter().map(|&(_, b)| b).collect(),
        }
    }

    /// Image as f64 values for model input.
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}

fn covered(class: usize, b: BoxCxCyWH, x: f64, y: f64) -> bool {
    let half = b.w / 2.0;
    let inside =
        x >= b.cx - half && x <= b.cx + half && y >= b.cy - b.h / 2.0 && y <= b.cy + b.h / 2.0;
    if !inside {
        return false;
    }
    match class {
        0 => true,
        1 => {
            let dx = x - b.cx;
            let dy = y - b.cy;
            dx * dx + dy * dy <= half * half
        }
        _ => {
            let bar = CROSS_BAR_RATIO * b.w;
            (x - b.cx).abs() <= bar || (y - b.cy).abs() <= bar
        }
    }
}

pub fn generate_one(dataset_seed: u64, index: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let sample_seed = derive_seed(dataset_seed, index);
    let mut rng = Rng::seeded(sample_seed);

    let n_slots = rng.below(cfg.max_objects as u64 + 1) as usize;
    let mut objects: Vec<(usize, BoxCxCyWH)> = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let class = rng.below(cfg.k as u64) as usize;
            let side = rng.uniform(SIDE_MIN, SIDE_MAX);
            let cx = rng.uniform(side / 2.0, 1.0 - side / 2.0);
            let cy = rng.uniform(side / 2.0, 1.0 - side / 2.0);
            let candidate = BoxCxCyWH::new(cx, cy, side, side);
            let cxy = cxcywh_to_xyxy(candidate);
            let ok = objects
                .iter()
                .all(|&(_, b)| iou(cxy, cxcywh_to_xyxy(b)) <= MAX_OVERLAP_IOU);
            if ok {
                objects.push((class, candidate));
                break;
            }
        }
    }

    let s = cfg.image_size;
    let mut image = vec![0f32; s * s * 3];
    for py in 0..s {
        let y = (py as f64 + 0.5) / s as f64;
        for px in 0..s {
            let x = (px as f64 + 0.5) / s as f64;
            let mut color = BACKGROUND;
            for &(class, b) in &objects {
                if covered(class, b, x, y) {
                    color = COLORS[class];
                }
            }
            let base = (py * s + px) * 3;
            for ch in 0..3 {
                let v = (color[ch] + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
                image[base + ch] = v as f32;
            }
        }
    }

    Ok(SceneSample {
        image,
        objects,
        seed: sample_seed,
    })
}

pub fn generate(dataset_seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<SceneSample>> {
    (0..count as u64)
        .map(|i| generate_one(dataset_seed, i, cfg))
        .collect()
}
