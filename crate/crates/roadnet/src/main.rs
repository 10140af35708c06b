//! Thin CLI over the roadnet library. Every subcommand accepts a `--config`
//! file plus any number of `--<dotted.key> <value>` overrides; run
//! `roadnet <cmd> --help` for the rest.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use roadnet::anchors::kmeans_anchors;
use roadnet::config::anchor_list_to_string;
use roadnet::data::{
    load_image, load_split, resize_sample, save_split, synth_scene, write_overlay, SceneParams,
    Sample,
};
use roadnet::model::{build_model, load_checkpoint, Model};
use roadnet::postprocess::seg_to_mask;
use roadnet::trainer::{benchmark_model, detect_one, evaluate, train};
use roadnet::{AnchorSet, ExperimentConfig};

#[derive(Parser)]
#[command(name = "roadnet", about = "Joint detection + segmentation road perception")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (flat `key: value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing `--<dotted.key> <value>` config overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the trailing overrides onto an existing config (used both for
    /// fresh configs and for configs restored from a checkpoint).
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let mut it = self.overrides.iter();
        while let Some(flag) = it.next() {
            let Some(stripped) = flag.strip_prefix("--") else {
                bail!("expected `--<dotted.key>`, got {flag:?}");
            };
            let (key, value) = match stripped.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .with_context(|| format!("missing value for --{stripped}"))?;
                    (stripped.to_string(), v.clone())
                }
            };
            cfg.set(&key, &value)?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset.
    Synth {
        /// Dataset root to write.
        #[arg(long)]
        out: PathBuf,
        /// Training scenes.
        #[arg(long, default_value_t = 16)]
        train_count: usize,
        /// Validation scenes.
        #[arg(long, default_value_t = 8)]
        val_count: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit 9 anchor priors to a split with IoU k-means.
    Anchors {
        /// Dataset root (defaults to data.root from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write checkpoints.
    Train {
        /// Dataset root (defaults to data.root from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints, config echo and the loss log.
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a checkpoint on images and write overlays + detection JSON.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PNG images.
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        #[arg(long, default_value = "infer_out")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Median single-image latency of the full pipeline.
    Benchmark {
        /// Checkpoint to time; a freshly initialized model when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn fresh_model(cfg: &ExperimentConfig) -> Result<Model> {
    let anchors = AnchorSet::from_pairs(cfg.anchors.clone())?;
    Ok(build_model(cfg, anchors)?)
}

fn model_from_ckpt(path: &PathBuf, cfg_args: &ConfigArgs) -> Result<Model> {
    let (mut model, _) = load_checkpoint(path)?;
    // Overrides on a checkpointed model may touch eval/data settings only;
    // anything that changes the architecture is rejected.
    let mut cfg = model.config.clone();
    cfg_args.apply(&mut cfg)?;
    cfg.validate()?;
    if cfg.scale != model.config.scale || cfg.image_size != model.config.image_size {
        bail!("cannot override model architecture keys on a checkpoint");
    }
    model.config = cfg;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, train_count, val_count, cfg } => {
            let cfg = cfg.build()?;
            let params = SceneParams {
                size: cfg.image_size,
                lane_width: cfg.data.ll_train_width,
                ..SceneParams::default()
            };
            for (split, count, salt) in [("train", train_count, 0u64), ("val", val_count, 1)] {
                let samples: Vec<Sample> = (0..count)
                    .map(|i| synth_scene(cfg.seed ^ (salt << 32) ^ i as u64, &params))
                    .collect();
                save_split(&out, split, &samples)?;
                println!("wrote {count} scenes to {}/images/{split}", out.display());
            }
        }
        Cmd::Anchors { data, split, cfg } => {
            let cfg = cfg.build()?;
            let root = data.unwrap_or_else(|| cfg.data.root.clone());
            let samples = load_split(&root, &split)?;
            let dims: Vec<(f64, f64)> = samples
                .iter()
                .map(|s| resize_sample(s, cfg.image_size))
                .flat_map(|s| {
                    s.boxes
                        .iter()
                        .map(|b| (b.width() as f64, b.height() as f64))
                        .collect::<Vec<_>>()
                })
                .collect();
            let anchors = kmeans_anchors(&dims, 9, cfg.seed)?;
            println!("anchors.set: {}", anchor_list_to_string(&anchors.anchors));
        }
        Cmd::Train { data, out, cfg } => {
            let mut cfg = cfg.build()?;
            if let Some(d) = data {
                cfg.data.root = d;
            }
            let samples = load_split(&cfg.data.root, "train")?;
            let model = fresh_model(&cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            let mut log = String::new();
            let history = train(&model, &samples, Some(&out), |e| {
                let line = format!(
                    "stage {} epoch {:>3} lr {:.2e}  {}",
                    e.stage, e.epoch_in_stage, e.lr, e.loss.log_line()
                );
                println!("{line}");
                log.push_str(&line);
                log.push('\n');
            })?;
            std::fs::write(out.join("train_log.txt"), log)?;
            model.save_checkpoint(
                &out.join("final.safetensors"),
                &[("epochs", history.epochs.len().to_string())],
            )?;
            if let Ok(val) = load_split(&cfg.data.root, "val") {
                let report = evaluate(&model, &val)?;
                print!("{}", report.table());
                std::fs::write(out.join("metrics.txt"), report.to_text())?;
            }
        }
        Cmd::Eval { ckpt, data, split, cfg } => {
            let model = model_from_ckpt(&ckpt, &cfg)?;
            let root = data.unwrap_or_else(|| model.config.data.root.clone());
            let samples = load_split(&root, &split)?;
            let report = evaluate(&model, &samples)?;
            print!("{}", report.table());
            print!("{}", report.to_text());
        }
        Cmd::Infer { ckpt, image, out, cfg } => {
            let model = model_from_ckpt(&ckpt, &cfg)?;
            std::fs::create_dir_all(&out)?;
            for path in &image {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                let img = load_image(path)?;
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let raw = Sample {
                    id: stem.clone(),
                    image: img,
                    boxes: Vec::new(),
                    da_mask: roadnet::data::Mask::zeros((h, w)),
                    ll_mask: roadnet::data::Mask::zeros((h, w)),
                    ll_lines: Vec::new(),
                };
                let s = resize_sample(&raw, model.config.image_size);
                let dets =
                    detect_one(&model, &s, model.config.eval.infer_conf_thr as f32)?;
                let refs = [&s];
                let batch = roadnet::model::batch_images(&refs, &model.store.device)?;
                let outp = model.forward(&batch, &roadnet::nn::ForwardMode::eval())?;
                let da = seg_to_mask(outp.da_logits()?)?.remove(0);
                let ll = seg_to_mask(outp.ll_logits()?)?.remove(0);
                let boxes: Vec<roadnet::data::BBox> = dets.iter().map(|d| d.bbox).collect();
                write_overlay(&out.join(format!("{stem}_overlay.png")), &s.image, &boxes, &da, &ll)?;
                let json: Vec<serde_json::Value> = dets
                    .iter()
                    .map(|d| {
                        serde_json::json!({
                            "class_id": d.bbox.class_id,
                            "score": d.score,
                            "x1": d.bbox.x1, "y1": d.bbox.y1,
                            "x2": d.bbox.x2, "y2": d.bbox.y2,
                        })
                    })
                    .collect();
                std::fs::write(
                    out.join(format!("{stem}_det.json")),
                    serde_json::to_string_pretty(&json)?,
                )?;
                println!("{stem}: {} detections", dets.len());
            }
        }
        Cmd::Benchmark { ckpt, warmup, iters, cfg } => {
            let model = match &ckpt {
                Some(p) => model_from_ckpt(p, &cfg)?,
                None => fresh_model(&cfg.build()?)?,
            };
            let params = SceneParams {
                size: model.config.image_size,
                ..SceneParams::default()
            };
            let sample = synth_scene(model.config.seed, &params);
            let report = benchmark_model(&model, &sample, warmup, iters)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successful exits.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
