//! Median single-image latency of the full pipeline (forward + decode +
//! NMS + both masks) at a couple of input sizes.

use roadnet::config::ImageSize;
use roadnet::data::{synth_scene, SceneParams};
use roadnet::model::build_model;
use roadnet::trainer::benchmark_model;
use roadnet::{AnchorSet, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    for (w, h) in [(320, 192), (640, 384)] {
        let mut cfg = ExperimentConfig::default();
        cfg.image_size = ImageSize { width: w, height: h };
        let model = build_model(&cfg, AnchorSet::from_pairs(cfg.anchors.clone())?)?;
        let params = SceneParams { size: cfg.image_size, ..SceneParams::default() };
        let sample = synth_scene(0, &params);
        let report = benchmark_model(&model, &sample, 3, 10)?;
        println!("{w}x{h}:");
        print!("{}", report.to_text());
    }
    Ok(())
}
