//! Samples, dataset I/O, lane-annotation preprocessing, resizing,
//! augmentation and the synthetic scene generator.

mod bdd;
mod dataset;
mod lanes;
mod synth;
mod transform;

pub use bdd::{ingest_bdd, BddLabel, BddRecord};
pub use dataset::{load_image, load_split, save_split, write_overlay};
pub use lanes::{center_lines, rasterize_lanes, Polyline};
pub use synth::{synth_scene, SceneParams};
pub use transform::{augment, resize_sample, AugmentParams};

use ndarray::{Array2, Array3};

use crate::config::ImageSize;
use crate::error::{Error, Result};

/// Binary label grid, H×W, values 0 or 1.
pub type Mask = Array2<u8>;

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
}

impl BBox {
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One training/eval record: image plus detection boxes and the two binary
/// masks. Lane polylines are kept alongside the rasterized mask so evaluation
/// can re-rasterize ground truth at the test-set width.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// H×W×3, channel values in [0,1].
    pub image: Array3<f32>,
    pub boxes: Vec<BBox>,
    pub da_mask: Mask,
    pub ll_mask: Mask,
    /// Center-line polylines behind `ll_mask`, when known.
    pub ll_lines: Vec<Polyline>,
}

impl Sample {
    pub fn size(&self) -> ImageSize {
        ImageSize {
            height: self.image.shape()[0],
            width: self.image.shape()[1],
        }
    }

    /// Check the cross-field shape invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.shape()[0], self.image.shape()[1]);
        if self.da_mask.dim() != (h, w) || self.ll_mask.dim() != (h, w) {
            return Err(Error::Data(format!(
                "sample {}: mask shape does not match image {h}x{w}",
                self.id
            )));
        }
        for b in &self.boxes {
            if !b.is_valid() {
                return Err(Error::Data(format!("sample {}: degenerate box {b:?}", self.id)));
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w as f32 || b.y2 > h as f32 {
                return Err(Error::Data(format!("sample {}: box out of bounds {b:?}", self.id)));
            }
        }
        Ok(())
    }
}

/// Stable 64-bit mix of a base seed and a string id, used to derive
/// per-sample RNG streams.
pub fn derive_seed(seed: u64, id: &str, salt: u64) -> u64 {
    // FNV-1a over the id, then splitmix-style finalization.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e3779b97f4a7c15) ^ salt.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
