//! Lane-line geometry: center-line computation from two-line annotations and
//! distance-based rasterization.

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::config::ImageSize;
use crate::error::{Error, Result};

/// An ordered sequence of (x, y) pixel points; at least 2 to be usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline(pub Vec<(f32, f32)>);

impl Polyline {
    pub fn new(points: Vec<(f32, f32)>) -> Self {
        Polyline(points)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn arclength(&self) -> f32 {
        self.0
            .windows(2)
            .map(|w| {
                let (x0, y0) = w[0];
                let (x1, y1) = w[1];
                ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
            })
            .sum()
    }

    /// Resample to `n` points equally spaced in arclength, keeping both
    /// endpoints.
    pub fn resample(&self, n: usize) -> Result<Polyline> {
        if self.0.len() < 2 {
            return Err(Error::Data("polyline needs >= 2 points".into()));
        }
        let total = self.arclength();
        if total <= 0.0 {
            return Err(Error::Data("degenerate polyline (all points identical)".into()));
        }
        let n = n.max(2);
        let mut out = Vec::with_capacity(n);
        let mut seg = 0usize;
        let mut seg_start_len = 0.0f32;
        let seg_len = |i: usize| -> f32 {
            let (x0, y0) = self.0[i];
            let (x1, y1) = self.0[i + 1];
            ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
        };
        for i in 0..n {
            let target = total * i as f32 / (n - 1) as f32;
            while seg + 2 < self.0.len() && seg_start_len + seg_len(seg) < target {
                seg_start_len += seg_len(seg);
                seg += 1;
            }
            let l = seg_len(seg);
            let t = if l > 0.0 { ((target - seg_start_len) / l).clamp(0.0, 1.0) } else { 0.0 };
            let (x0, y0) = self.0[seg];
            let (x1, y1) = self.0[seg + 1];
            out.push((x0 + (x1 - x0) * t, y0 + (y1 - y0) * t));
        }
        Ok(Polyline(out))
    }
}

/// Midline of a two-line lane annotation: both lines are resampled to the
/// same number of equal-arclength points and averaged pointwise.
pub fn center_lines(left: &Polyline, right: &Polyline) -> Result<Polyline> {
    let n = left.len().max(right.len());
    let l = left.resample(n)?;
    let r = right.resample(n)?;
    Ok(Polyline(
        l.0.iter()
            .zip(r.0.iter())
            .map(|(&(lx, ly), &(rx, ry))| ((lx + rx) * 0.5, (ly + ry) * 0.5))
            .collect(),
    ))
}

fn dist2_point_segment(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

/// Rasterize polylines into a mask: a pixel is 1 iff its center lies within
/// `width / 2` (Euclidean) of any segment. Lines outside the bounds simply
/// contribute nothing.
pub fn rasterize_lanes(lines: &[Polyline], width: u32, size: ImageSize) -> Mask {
    let mut mask = Mask::zeros((size.height, size.width));
    let r = width as f32 / 2.0;
    let r2 = r * r;
    for line in lines {
        for seg in line.0.windows(2) {
            let (ax, ay) = seg[0];
            let (bx, by) = seg[1];
            let x_lo = ((ax.min(bx) - r - 0.5).floor().max(0.0)) as usize;
            let x_hi = ((ax.max(bx) + r + 0.5).ceil().min(size.width as f32)) as usize;
            let y_lo = ((ay.min(by) - r - 0.5).floor().max(0.0)) as usize;
            let y_hi = ((ay.max(by) + r + 0.5).ceil().min(size.height as f32)) as usize;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    if dist2_point_segment(px, py, ax, ay, bx, by) <= r2 {
                        mask[(y, x)] = 1;
                    }
                }
            }
        }
    }
    mask
}
