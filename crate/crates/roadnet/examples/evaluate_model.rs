//! Train briefly on synthetic scenes, then run the full evaluation loop
//! (decode + NMS + matching + mAP50, mIoU, lane accuracy/IoU) on held-out
//! scenes and print the report.

use roadnet::config::ImageSize;
use roadnet::data::{synth_scene, SceneParams};
use roadnet::model::build_model;
use roadnet::trainer::{evaluate, train};
use roadnet::{AnchorSet, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.image_size = ImageSize { width: 96, height: 96 };
    cfg.stage_epochs = vec![15];
    cfg.optim.batch_size = 4;
    cfg.optim.lr0 = 0.005;
    cfg.optim.warmup_epochs = 2;
    cfg.data.augment = false;
    // Train lanes at the same 2 px width the evaluation rasterizes at, so
    // the lane IoU ceiling is 1.0 rather than ~0.25.
    cfg.data.ll_train_width = 2;

    let params = SceneParams {
        size: cfg.image_size,
        lane_width: cfg.data.ll_train_width,
        ..SceneParams::default()
    };
    let train_set: Vec<_> = (0..8).map(|i| synth_scene(i, &params)).collect();
    let val_set: Vec<_> = (100..104).map(|i| synth_scene(i, &params)).collect();

    let model = build_model(&cfg, AnchorSet::from_pairs(cfg.anchors.clone())?)?;
    train(&model, &train_set, None, |e| {
        if e.epoch_in_stage % 5 == 0 {
            println!("epoch {:>2}  {}", e.epoch_in_stage, e.loss.log_line());
        }
    })?;

    let report = evaluate(&model, &val_set)?;
    print!("{}", report.table());
    Ok(())
}
