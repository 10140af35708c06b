//! Ingestion of a documented subset of the BDD label schema.
//!
//! Supported record shape (JSON):
//!
//! ```json
//! {
//!   "name": "img0",
//!   "labels": [
//!     {"category": "car", "box2d": {"x1": 0, "y1": 0, "x2": 10, "y2": 10}},
//!     {"category": "area/drivable", "poly2d": [{"vertices": [[x, y], ...]}]},
//!     {"category": "lane", "poly2d": [{"vertices": [[x, y], ...]}]}
//!   ]
//! }
//! ```
//!
//! Vehicle categories map to class 0. `area/drivable` and `area/alternative`
//! polygons are unioned into the drivable mask. Lane polylines are paired in
//! file order (the two-line annotation); each pair is reduced to its center
//! line and rasterized at the training width. An unpaired trailing lane line
//! is used as its own center line.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::lanes::{center_lines, rasterize_lanes, Polyline};
use super::{BBox, Mask, Sample};
use crate::config::{DataConfig, ImageSize};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BddRecord {
    pub name: String,
    pub labels: Vec<BddLabel>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BddLabel {
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box2d: Option<BddBox2d>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly2d: Option<Vec<BddPoly2d>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BddBox2d {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BddPoly2d {
    pub vertices: Vec<[f32; 2]>,
}

/// Even-odd scanline polygon fill, ORed into `mask`.
fn fill_polygon(mask: &mut Mask, vertices: &[[f32; 2]]) {
    if vertices.len() < 3 {
        return;
    }
    let (h, w) = mask.dim();
    for y in 0..h {
        let py = y as f32 + 0.5;
        let mut xs: Vec<f32> = Vec::new();
        for i in 0..vertices.len() {
            let [x0, y0] = vertices[i];
            let [x1, y1] = vertices[(i + 1) % vertices.len()];
            if (y0 <= py && py < y1) || (y1 <= py && py < y0) {
                xs.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                continue;
            }
            let x0 = pair[0].max(0.0) as usize;
            let x1 = (pair[1].min(w as f32).ceil() as usize).min(w);
            for x in x0..x1 {
                if (x as f32 + 0.5) >= pair[0] && (x as f32 + 0.5) <= pair[1] {
                    mask[(y, x)] = 1;
                }
            }
        }
    }
}

/// Convert one BDD-style record plus its image into a [`Sample`].
pub fn ingest_bdd(record: &BddRecord, image: Array3<f32>, data_cfg: &DataConfig) -> Result<Sample> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let size = ImageSize { width: w, height: h };
    let mut boxes = Vec::new();
    let mut da_mask = Mask::zeros((h, w));
    let mut lane_lines: Vec<Polyline> = Vec::new();

    for label in &record.labels {
        let cat = label.category.as_str();
        if data_cfg.vehicle_categories.iter().any(|c| c == cat) {
            let b = label.box2d.ok_or_else(|| {
                Error::Data(format!("{}: vehicle label without box2d", record.name))
            })?;
            let bb = BBox {
                x1: b.x1.clamp(0.0, w as f32),
                y1: b.y1.clamp(0.0, h as f32),
                x2: b.x2.clamp(0.0, w as f32),
                y2: b.y2.clamp(0.0, h as f32),
                class_id: 0,
            };
            if bb.is_valid() {
                boxes.push(bb);
            }
        } else if cat == "area/drivable" || cat == "area/alternative" {
            let polys = label.poly2d.as_ref().ok_or_else(|| {
                Error::Data(format!("{}: area label without poly2d", record.name))
            })?;
            for p in polys {
                fill_polygon(&mut da_mask, &p.vertices);
            }
        } else if cat == "lane" || cat.starts_with("lane/") {
            let polys = label.poly2d.as_ref().ok_or_else(|| {
                Error::Data(format!("{}: lane label without poly2d", record.name))
            })?;
            for p in polys {
                if p.vertices.len() >= 2 {
                    lane_lines.push(Polyline(
                        p.vertices.iter().map(|v| (v[0], v[1])).collect(),
                    ));
                }
            }
        }
        // Other categories of the full schema are ignored.
    }

    // Two-line lane annotations: consecutive pairs reduce to a center line.
    let mut centers = Vec::new();
    for pair in lane_lines.chunks(2) {
        if pair.len() == 2 {
            centers.push(center_lines(&pair[0], &pair[1])?);
        } else {
            centers.push(pair[0].clone());
        }
    }
    let ll_mask = rasterize_lanes(&centers, data_cfg.ll_train_width, size);

    let sample = Sample {
        id: record.name.clone(),
        image,
        boxes,
        da_mask,
        ll_mask,
        ll_lines: centers,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use ndarray::Array3;

    fn cfg() -> DataConfig {
        ExperimentConfig::default().data
    }

    fn img(w: usize, h: usize) -> Array3<f32> {
        Array3::zeros((h, w, 3))
    }

    fn parse(json: &str) -> BddRecord {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn drivable_and_alternative_union() {
        let rec = parse(
            r#"{"name":"a","labels":[
                {"category":"area/drivable","poly2d":[{"vertices":[[0,0],[16,0],[16,16],[0,16]]}]},
                {"category":"area/alternative","poly2d":[{"vertices":[[16,0],[32,0],[32,16],[16,16]]}]}
            ]}"#,
        );
        let s = ingest_bdd(&rec, img(32, 32), &cfg()).unwrap();
        // Union of the two half-rows.
        let top: i64 = s.da_mask.slice(ndarray::s![0..16, ..]).map(|&v| v as i64).sum();
        assert!(top as f64 > 0.9 * 32.0 * 16.0, "union fill covers the top half, got {top}");
        let bottom: i64 = s.da_mask.slice(ndarray::s![16.., ..]).map(|&v| v as i64).sum();
        assert_eq!(bottom, 0);
    }

    #[test]
    fn empty_record_gives_empty_sample() {
        let rec = parse(r#"{"name":"a","labels":[]}"#);
        let s = ingest_bdd(&rec, img(16, 16), &cfg()).unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s.da_mask.sum(), 0);
        assert_eq!(s.ll_mask.sum(), 0);
    }

    #[test]
    fn car_maps_to_class_zero() {
        let rec = parse(
            r#"{"name":"a","labels":[{"category":"car","box2d":{"x1":2,"y1":3,"x2":10,"y2":9}}]}"#,
        );
        let s = ingest_bdd(&rec, img(16, 16), &cfg()).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.boxes[0].class_id, 0);
        assert_eq!(s.boxes[0].x1, 2.0);
    }

    #[test]
    fn paired_lanes_become_center_line() {
        let rec = parse(
            r#"{"name":"a","labels":[
                {"category":"lane","poly2d":[{"vertices":[[0,10],[31,10]]}]},
                {"category":"lane","poly2d":[{"vertices":[[0,14],[31,14]]}]}
            ]}"#,
        );
        let s = ingest_bdd(&rec, img(32, 32), &cfg()).unwrap();
        assert_eq!(s.ll_lines.len(), 1);
        // Center at y = 12.
        for &(_, y) in &s.ll_lines[0].0 {
            assert!((y - 12.0).abs() < 1e-5);
        }
        assert!(s.ll_mask.iter().any(|&v| v != 0));
    }

    #[test]
    fn vehicle_without_box_is_schema_error() {
        let rec = parse(r#"{"name":"a","labels":[{"category":"car"}]}"#);
        assert!(ingest_bdd(&rec, img(16, 16), &cfg()).is_err());
    }
}
