//! Run the inference pipeline on one synthetic scene and write the
//! annotated overlay (green drivable area, blue lanes, red boxes).
//!
//! Usage: cargo run --example infer_overlay -- [out.png]

use roadnet::config::ImageSize;
use roadnet::data::{synth_scene, write_overlay, SceneParams};
use roadnet::model::{batch_images, build_model};
use roadnet::nn::ForwardMode;
use roadnet::postprocess::seg_to_mask;
use roadnet::trainer::detect_one;
use roadnet::{AnchorSet, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "overlay.png".into());

    let mut cfg = ExperimentConfig::default();
    cfg.image_size = ImageSize { width: 320, height: 192 };
    let model = build_model(&cfg, AnchorSet::from_pairs(cfg.anchors.clone())?)?;

    let params = SceneParams { size: cfg.image_size, ..SceneParams::default() };
    let s = synth_scene(42, &params);

    // An untrained model: expect garbage masks and few confident boxes, but
    // the full pipeline runs.
    let dets = detect_one(&model, &s, cfg.eval.infer_conf_thr as f32)?;
    let refs = [&s];
    let batch = batch_images(&refs, &model.store.device)?;
    let raw = model.forward(&batch, &ForwardMode::eval())?;
    let da = seg_to_mask(raw.da_logits()?)?.remove(0);
    let ll = seg_to_mask(raw.ll_logits()?)?.remove(0);

    let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
    write_overlay(std::path::Path::new(&out), &s.image, &boxes, &da, &ll)?;
    println!("{} detections above {:.2}; overlay written to {out}", dets.len(), cfg.eval.infer_conf_thr);
    Ok(())
}
