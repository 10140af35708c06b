//! Overfit a tiny model on a handful of synthetic scenes, end to end, and
//! watch every loss term fall. Runs on CPU in a few minutes.

use roadnet::config::ImageSize;
use roadnet::data::{synth_scene, SceneParams};
use roadnet::model::build_model;
use roadnet::trainer::train;
use roadnet::{AnchorSet, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.image_size = ImageSize { width: 96, height: 96 };
    cfg.stage_epochs = vec![30];
    cfg.optim.batch_size = 4;
    cfg.optim.lr0 = 0.005;
    cfg.optim.warmup_epochs = 2;
    cfg.data.augment = false;

    let params = SceneParams { size: cfg.image_size, ..SceneParams::default() };
    let samples: Vec<_> = (0..8).map(|i| synth_scene(i, &params)).collect();

    let model = build_model(&cfg, AnchorSet::from_pairs(cfg.anchors.clone())?)?;
    println!("model: {} parameters", model.store.num_params());

    let history = train(&model, &samples, None, |e| {
        println!("epoch {:>2} lr {:.2e}  {}", e.epoch_in_stage, e.lr, e.loss.log_line());
    })?;

    let first = history.epochs.first().unwrap().loss.l_all;
    let last = history.final_loss().unwrap().l_all;
    println!("L_all {first:.4} -> {last:.4} over {} epochs", history.epochs.len());
    Ok(())
}
