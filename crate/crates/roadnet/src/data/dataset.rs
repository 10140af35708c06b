//! Native on-disk dataset layout:
//!
//! ```text
//! <root>/images/<split>/<id>.png     RGB image
//! <root>/det/<split>/<id>.json       [{"class_id": 0, "x1": .., "y1": .., "x2": .., "y2": ..}]
//! <root>/da_seg/<split>/<id>.png     8-bit grayscale, binarized at 128 on read
//! <root>/ll_seg/<split>/<id>.png     8-bit grayscale, binarized at 128 on read
//! <root>/ll_lines/<split>/<id>.json  optional lane center polylines
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{BBox, Mask, Polyline, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct DetRecord {
    class_id: usize,
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn image_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

fn array_to_image(a: &Array3<f32>) -> RgbImage {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (a[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn mask_to_image(m: &Mask) -> GrayImage {
    let (h, w) = m.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if m[(y as usize, x as usize)] != 0 { 255 } else { 0 }])
    })
}

fn image_to_mask(img: &GrayImage) -> Mask {
    let (w, h) = img.dimensions();
    let mut out = Mask::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = u8::from(p.0[0] >= 128);
    }
    out
}

/// Read one RGB image into an H×W×3 array in [0,1].
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(io_err(path))?.into_rgb8();
    Ok(image_to_array(&img))
}

/// Write samples under `<root>/<...>/<split>/`.
pub fn save_split(root: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    for dir in ["images", "det", "da_seg", "ll_seg", "ll_lines"] {
        fs::create_dir_all(root.join(dir).join(split))
            .map_err(io_err(root))?;
    }
    for s in samples {
        s.validate()?;
        let img_path = root.join("images").join(split).join(format!("{}.png", s.id));
        array_to_image(&s.image).save(&img_path).map_err(io_err(&img_path))?;
        let det: Vec<DetRecord> = s
            .boxes
            .iter()
            .map(|b| DetRecord { class_id: b.class_id, x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 })
            .collect();
        let det_path = root.join("det").join(split).join(format!("{}.json", s.id));
        fs::write(&det_path, serde_json::to_string_pretty(&det).unwrap())
            .map_err(io_err(&det_path))?;
        let da_path = root.join("da_seg").join(split).join(format!("{}.png", s.id));
        mask_to_image(&s.da_mask).save(&da_path).map_err(io_err(&da_path))?;
        let ll_path = root.join("ll_seg").join(split).join(format!("{}.png", s.id));
        mask_to_image(&s.ll_mask).save(&ll_path).map_err(io_err(&ll_path))?;
        if !s.ll_lines.is_empty() {
            let lines_path = root.join("ll_lines").join(split).join(format!("{}.json", s.id));
            fs::write(&lines_path, serde_json::to_string(&s.ll_lines).unwrap())
                .map_err(io_err(&lines_path))?;
        }
    }
    Ok(())
}

/// Load every sample of a split, sorted by id.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let img_dir = root.join("images").join(split);
    let mut ids: Vec<String> = fs::read_dir(&img_dir)
        .map_err(io_err(&img_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".png").map(str::to_string)
        })
        .collect();
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = img_dir.join(format!("{id}.png"));
        let img = image::open(&img_path).map_err(io_err(&img_path))?.into_rgb8();
        let image = image_to_array(&img);
        let det_path = root.join("det").join(split).join(format!("{id}.json"));
        let det_text = fs::read_to_string(&det_path).map_err(io_err(&det_path))?;
        let det: Vec<DetRecord> =
            serde_json::from_str(&det_text).map_err(io_err(&det_path))?;
        let boxes = det
            .into_iter()
            .map(|d| BBox { x1: d.x1, y1: d.y1, x2: d.x2, y2: d.y2, class_id: d.class_id })
            .collect();
        let da_path = root.join("da_seg").join(split).join(format!("{id}.png"));
        let da_mask =
            image_to_mask(&image::open(&da_path).map_err(io_err(&da_path))?.into_luma8());
        let ll_path = root.join("ll_seg").join(split).join(format!("{id}.png"));
        let ll_mask =
            image_to_mask(&image::open(&ll_path).map_err(io_err(&ll_path))?.into_luma8());
        let lines_path = root.join("ll_lines").join(split).join(format!("{id}.json"));
        let ll_lines: Vec<Polyline> = if lines_path.exists() {
            let text = fs::read_to_string(&lines_path).map_err(io_err(&lines_path))?;
            serde_json::from_str(&text).map_err(io_err(&lines_path))?
        } else {
            Vec::new()
        };
        let s = Sample { id, image, boxes, da_mask, ll_mask, ll_lines };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Render an annotated copy of the image: green drivable overlay, blue lane
/// overlay, red box outlines.
pub fn write_overlay(
    path: &Path,
    image: &Array3<f32>,
    boxes: &[BBox],
    da_mask: &Mask,
    ll_mask: &Mask,
) -> Result<()> {
    let mut out = image.clone();
    let (h, w) = (out.shape()[0], out.shape()[1]);
    for y in 0..h {
        for x in 0..w {
            if da_mask[(y, x)] != 0 {
                out[(y, x, 1)] = out[(y, x, 1)] * 0.4 + 0.6;
            }
            if ll_mask[(y, x)] != 0 {
                out[(y, x, 2)] = out[(y, x, 2)] * 0.2 + 0.8;
                out[(y, x, 0)] *= 0.4;
                out[(y, x, 1)] *= 0.4;
            }
        }
    }
    for b in boxes {
        let (x1, y1) = (b.x1.max(0.0) as usize, b.y1.max(0.0) as usize);
        let (x2, y2) = ((b.x2 as usize).min(w - 1), (b.y2 as usize).min(h - 1));
        for x in x1..=x2 {
            for y in [y1, y2] {
                out[(y, x, 0)] = 1.0;
                out[(y, x, 1)] = 0.1;
                out[(y, x, 2)] = 0.1;
            }
        }
        for y in y1..=y2 {
            for x in [x1, x2] {
                out[(y, x, 0)] = 1.0;
                out[(y, x, 1)] = 0.1;
                out[(y, x, 2)] = 0.1;
            }
        }
    }
    array_to_image(&out).save(path).map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ImageSize;
    use crate::data::synth::{synth_scene, SceneParams};

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = SceneParams {
            size: ImageSize { width: 96, height: 64 },
            lane_width: 4,
            ..SceneParams::default()
        };
        let samples: Vec<Sample> = (0..3).map(|s| synth_scene(s, &params)).collect();
        save_split(dir.path(), "train", &samples).unwrap();
        let loaded = load_split(dir.path(), "train").unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.da_mask, b.da_mask);
            assert_eq!(a.ll_mask, b.ll_mask);
            assert_eq!(a.boxes.len(), b.boxes.len());
            assert_eq!(a.ll_lines.len(), b.ll_lines.len());
            // Image survives 8-bit quantization within half a step.
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn missing_split_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_split(dir.path(), "nope").is_err());
    }
}
