//! Decoding raw detection grids into boxes, confidence filtering + NMS, and
//! converting segmentation logits to masks.
//!
//! The box parameterization is defined here, in one place, and reused by the
//! loss: for cell `(cx, cy)` and anchor `(aw, ah)` at stride `s`,
//!
//! ```text
//! bx = (2*sigmoid(tx) - 0.5 + cx) * s      bw = aw * (2*sigmoid(tw))^2
//! by = (2*sigmoid(ty) - 0.5 + cy) * s      bh = ah * (2*sigmoid(th))^2
//! ```
//!
//! so the center can move half a cell outside its grid cell and the size is
//! bounded by 4x the anchor.

use candle_core::Tensor;

use crate::config::{ImageSize, ANCHORS_PER_SCALE};
use crate::data::{BBox, Mask};
use crate::error::Result;

/// One decoded candidate: box, score = objectness x class probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decoded center/size for one cell, before clipping.
pub fn decode_cell(
    raw: [f32; 4],
    cx: usize,
    cy: usize,
    stride: usize,
    anchor: (f64, f64),
) -> (f32, f32, f32, f32) {
    let [tx, ty, tw, th] = raw;
    let bx = (2.0 * sigmoid(tx) - 0.5 + cx as f32) * stride as f32;
    let by = (2.0 * sigmoid(ty) - 0.5 + cy as f32) * stride as f32;
    let bw = anchor.0 as f32 * (2.0 * sigmoid(tw)).powi(2);
    let bh = anchor.1 as f32 * (2.0 * sigmoid(th)).powi(2);
    (bx, by, bw, bh)
}

/// Inverse of [`decode_cell`] for targets within the decodable range;
/// returns the raw `[tx, ty, tw, th]` reproducing the given center/size.
pub fn encode_cell(
    bx: f32,
    by: f32,
    bw: f32,
    bh: f32,
    cx: usize,
    cy: usize,
    stride: usize,
    anchor: (f64, f64),
) -> Option<[f32; 4]> {
    let logit = |p: f32| -> Option<f32> {
        if p <= 0.0 || p >= 1.0 {
            None
        } else {
            Some((p / (1.0 - p)).ln())
        }
    };
    let sx = (bx / stride as f32 - cx as f32 + 0.5) / 2.0;
    let sy = (by / stride as f32 - cy as f32 + 0.5) / 2.0;
    let sw = (bw / anchor.0 as f32).sqrt() / 2.0;
    let sh = (bh / anchor.1 as f32).sqrt() / 2.0;
    Some([logit(sx)?, logit(sy)?, logit(sw)?, logit(sh)?])
}

/// Decode one raw grid (`N x 3 x Hg x Wg x (5+nc)`) at its stride into
/// per-image candidate lists; boxes are clipped to the image.
pub fn decode(
    grid: &Tensor,
    stride: usize,
    anchors: &[(f64, f64)],
    size: ImageSize,
) -> Result<Vec<Vec<Detection>>> {
    let (n, na, hg, wg, no) = grid.dims5()?;
    debug_assert_eq!(na, ANCHORS_PER_SCALE);
    let nc = no - 5;
    let flat: Vec<f32> = grid.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let mut dets = Vec::new();
        for a in 0..na {
            for gy in 0..hg {
                for gx in 0..wg {
                    let base = (((img * na + a) * hg + gy) * wg + gx) * no;
                    let raw = [flat[base], flat[base + 1], flat[base + 2], flat[base + 3]];
                    let (bx, by, bw, bh) = decode_cell(raw, gx, gy, stride, anchors[a]);
                    let obj = sigmoid(flat[base + 4]);
                    // Best class and its probability (single-class: p = 1).
                    let (cls, pcls) = if nc == 0 {
                        (0usize, 1.0f32)
                    } else {
                        let mut best = (0usize, f32::NEG_INFINITY);
                        for c in 0..nc {
                            let v = flat[base + 5 + c];
                            if v > best.1 {
                                best = (c, v);
                            }
                        }
                        (best.0, sigmoid(best.1))
                    };
                    let score = obj * pcls;
                    let bbox = BBox {
                        x1: (bx - bw / 2.0).clamp(0.0, size.width as f32),
                        y1: (by - bh / 2.0).clamp(0.0, size.height as f32),
                        x2: (bx + bw / 2.0).clamp(0.0, size.width as f32),
                        y2: (by + bh / 2.0).clamp(0.0, size.height as f32),
                        class_id: cls,
                    };
                    if bbox.is_valid() {
                        dets.push(Detection { bbox, score });
                    }
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Greedy per-class NMS. Output is sorted by score descending; ties break
/// toward the smaller box area, then input order.
pub fn nms(dets: &[Detection], iou_thr: f32, conf_thr: f32) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= conf_thr)
        .collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(
                dets[a]
                    .bbox
                    .area()
                    .partial_cmp(&dets[b].bbox.area())
                    .unwrap(),
            )
            .then(a.cmp(&b))
    });
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for &i in &idx {
        for k in &keep {
            if k.bbox.class_id == dets[i].bbox.class_id && k.bbox.iou(&dets[i].bbox) > iou_thr {
                continue 'outer;
            }
        }
        keep.push(dets[i]);
    }
    keep
}

/// Per-pixel argmax over the 2 channels; ties go to background.
pub fn seg_to_mask(logits: &Tensor) -> Result<Vec<Mask>> {
    let (n, c, h, w) = logits.dims4()?;
    debug_assert_eq!(c, 2);
    let flat: Vec<f32> = logits.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let mut m = Mask::zeros((h, w));
        let bg_base = img * 2 * h * w;
        let fg_base = bg_base + h * w;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                m[(y, x)] = u8::from(flat[fg_base + i] > flat[bg_base + i]);
            }
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn zero_raw_decodes_to_anchor_at_half_cell() {
        let (bx, by, bw, bh) = decode_cell([0.0; 4], 0, 0, 8, (16.0, 16.0));
        assert!((bx - 4.0).abs() < 1e-6);
        assert!((by - 4.0).abs() < 1e-6);
        assert!((bw - 16.0).abs() < 1e-5);
        assert!((bh - 16.0).abs() < 1e-5);
    }

    #[test]
    fn size_saturates_at_four_anchors() {
        let (_, _, bw, _) = decode_cell([0.0, 0.0, 50.0, 0.0], 0, 0, 8, (16.0, 16.0));
        assert!((bw - 64.0).abs() < 1e-3);
    }

    #[test]
    fn encode_inverts_decode() {
        for &(bx, by, bw, bh) in &[(37.0f32, 21.0, 20.0, 14.0), (12.5, 60.0, 30.0, 50.0)] {
            let (cx, cy, s, a) = ((bx / 8.0) as usize, (by / 8.0) as usize, 8, (16.0, 24.0));
            let raw = encode_cell(bx, by, bw, bh, cx, cy, s, a).unwrap();
            let (dx, dy, dw, dh) = decode_cell(raw, cx, cy, s, a);
            assert!((dx - bx).abs() < 1e-4, "{dx} vs {bx}");
            assert!((dy - by).abs() < 1e-4);
            assert!((dw - bw).abs() < 1e-3);
            assert!((dh - bh).abs() < 1e-3);
        }
    }

    #[test]
    fn decode_matches_per_cell_oracle() {
        let dev = Device::Cpu;
        let size = ImageSize { width: 64, height: 64 };
        let anchors = [(10.0, 14.0), (20.0, 20.0), (30.0, 12.0)];
        let grid = Tensor::rand(-3f32, 3f32, (2, 3, 8, 8, 6), &dev).unwrap();
        let decoded = decode(&grid, 8, &anchors, size).unwrap();
        let flat: Vec<f32> = grid.flatten_all().unwrap().to_vec1().unwrap();
        let mut count = 0;
        for img in 0..2 {
            let mut k = 0;
            for a in 0..3 {
                for gy in 0..8 {
                    for gx in 0..8 {
                        let base = (((img * 3 + a) * 8 + gy) * 8 + gx) * 6;
                        let (bx, by, bw, bh) = decode_cell(
                            [flat[base], flat[base + 1], flat[base + 2], flat[base + 3]],
                            gx,
                            gy,
                            8,
                            anchors[a],
                        );
                        let score = sigmoid(flat[base + 4]) * sigmoid(flat[base + 5]);
                        let x1 = (bx - bw / 2.0).clamp(0.0, 64.0);
                        let x2 = (bx + bw / 2.0).clamp(0.0, 64.0);
                        let y1 = (by - bh / 2.0).clamp(0.0, 64.0);
                        let y2 = (by + bh / 2.0).clamp(0.0, 64.0);
                        if x1 < x2 && y1 < y2 {
                            let d = decoded[img][k];
                            assert!((d.score - score).abs() < 1e-6);
                            assert!((d.bbox.x1 - x1).abs() < 1e-5);
                            k += 1;
                            count += 1;
                        }
                    }
                }
            }
            assert_eq!(k, decoded[img].len());
        }
        assert!(count > 0);
    }

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, score: f32) -> Detection {
        Detection { bbox: BBox { x1, y1, x2, y2, class_id: 0 }, score }
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.45, 0.25).is_empty());
    }

    #[test]
    fn nms_keeps_higher_score_of_identical_boxes() {
        let dets = [det(0.0, 0.0, 10.0, 10.0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0.8)];
        let keep = nms(&dets, 0.45, 0.0);
        assert_eq!(keep.len(), 1);
        assert_eq!(keep[0].score, 0.9);
    }

    /// O(n^2) reference implementation used as oracle.
    fn nms_reference(dets: &[Detection], iou_thr: f32, conf_thr: f32) -> Vec<Detection> {
        let mut cand: Vec<(usize, Detection)> = dets
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, d)| d.score >= conf_thr)
            .collect();
        cand.sort_by(|(ai, a), (bi, b)| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.bbox.area().partial_cmp(&b.bbox.area()).unwrap())
                .then(ai.cmp(bi))
        });
        let mut keep: Vec<Detection> = Vec::new();
        for (_, d) in cand {
            let suppressed = keep
                .iter()
                .any(|k| k.bbox.class_id == d.bbox.class_id && k.bbox.iou(&d.bbox) > iou_thr);
            if !suppressed {
                keep.push(d);
            }
        }
        keep
    }

    #[test]
    fn nms_matches_quadratic_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(0..12);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..50.0f32);
                    let y1 = rng.gen_range(0.0..50.0f32);
                    det(
                        x1,
                        y1,
                        x1 + rng.gen_range(1.0..30.0f32),
                        y1 + rng.gen_range(1.0..30.0f32),
                        rng.gen_range(0.0..1.0f32),
                    )
                })
                .collect();
            assert_eq!(nms(&dets, 0.45, 0.1), nms_reference(&dets, 0.45, 0.1));
        }
    }

    #[test]
    fn nms_idempotent_and_no_overlapping_survivors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let dets: Vec<Detection> = (0..30)
            .map(|_| {
                let x1 = rng.gen_range(0.0..40.0f32);
                let y1 = rng.gen_range(0.0..40.0f32);
                det(
                    x1,
                    y1,
                    x1 + rng.gen_range(2.0..25.0f32),
                    y1 + rng.gen_range(2.0..25.0f32),
                    rng.gen_range(0.0..1.0f32),
                )
            })
            .collect();
        let once = nms(&dets, 0.45, 0.05);
        let twice = nms(&once, 0.45, 0.05);
        assert_eq!(once, twice);
        for (i, a) in once.iter().enumerate() {
            for b in once.iter().skip(i + 1) {
                assert!(a.bbox.iou(&b.bbox) <= 0.45);
            }
            assert!(dets.iter().any(|d| d.score == a.score));
        }
    }

    #[test]
    fn seg_argmax_and_tie_rule() {
        let dev = Device::Cpu;
        // Foreground strictly larger everywhere -> all ones.
        let bg = Tensor::zeros(&[1, 1, 4, 4], candle_core::DType::F32, &dev).unwrap();
        let fg = Tensor::full(1.0f32, &[1, 1, 4, 4], &dev).unwrap();
        let logits = Tensor::cat(&[&bg, &fg], 1).unwrap();
        let m = seg_to_mask(&logits).unwrap();
        assert_eq!(m[0].sum(), 16);
        // Equal channels -> background by the tie rule.
        let logits = Tensor::cat(&[&fg, &fg], 1).unwrap();
        let m = seg_to_mask(&logits).unwrap();
        assert_eq!(m[0].sum(), 0);
    }

    #[test]
    fn seg_matches_pixel_oracle() {
        let dev = Device::Cpu;
        let logits = Tensor::rand(-2f32, 2f32, (2, 2, 5, 7), &dev).unwrap();
        let masks = seg_to_mask(&logits).unwrap();
        let flat: Vec<f32> = logits.flatten_all().unwrap().to_vec1().unwrap();
        for img in 0..2 {
            for y in 0..5 {
                for x in 0..7 {
                    let bg = flat[img * 2 * 35 + y * 7 + x];
                    let fg = flat[img * 2 * 35 + 35 + y * 7 + x];
                    assert_eq!(masks[img][(y, x)] == 1, fg > bg);
                }
            }
        }
    }
}
