//! Generate a small deterministic synthetic dataset and write it in the
//! native on-disk layout, plus one annotated overlay to eyeball.
//!
//! Usage: cargo run --example synth_dataset -- [out_dir]

use roadnet::config::ImageSize;
use roadnet::data::{save_split, synth_scene, write_overlay, SceneParams};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_data".into());
    let out = std::path::PathBuf::from(out);

    let params = SceneParams {
        size: ImageSize { width: 640, height: 384 },
        ..SceneParams::default()
    };
    let train: Vec<_> = (0..16).map(|i| synth_scene(i, &params)).collect();
    let val: Vec<_> = (100..108).map(|i| synth_scene(i, &params)).collect();
    save_split(&out, "train", &train)?;
    save_split(&out, "val", &val)?;

    let s = &train[0];
    write_overlay(&out.join("preview.png"), &s.image, &s.boxes, &s.da_mask, &s.ll_mask)?;
    println!(
        "wrote {} train / {} val scenes under {} (see preview.png)",
        train.len(),
        val.len(),
        out.display()
    );
    println!(
        "scene 0: {} vehicles, {} lane lines",
        s.boxes.len(),
        s.ll_lines.len()
    );
    Ok(())
}
