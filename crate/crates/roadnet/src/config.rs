//! Experiment configuration: a flat `key: value` text format with dotted keys.
//!
//! Every key has a default, every key can be overridden from the CLI with
//! `--<dotted.key> <value>`, and unknown keys are rejected so typos surface
//! immediately.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Input resolution. Both sides must be divisible by the largest stride (32).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        let s = Self { width, height };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        if self.width % 32 != 0 {
            return Err(Error::Validation(format!(
                "W not divisible by 32 (got {})",
                self.width
            )));
        }
        if self.height % 32 != 0 {
            return Err(Error::Validation(format!(
                "H not divisible by 32 (got {})",
                self.height
            )));
        }
        Ok(())
    }
}

/// Weights of the total loss: detection sub-weights (alpha) and task weights (gamma).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Focusing exponent of the focal loss.
    pub focal_gamma: f64,
    /// Positive-class balance of the focal loss.
    pub focal_alpha: f64,
    /// Anchor-matching ratio bound used by target assignment.
    pub assign_ratio: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.alpha1", self.alpha1),
            ("loss.alpha2", self.alpha2),
            ("loss.alpha3", self.alpha3),
            ("loss.gamma1", self.gamma1),
            ("loss.gamma2", self.gamma2),
            ("loss.gamma3", self.gamma3),
        ] {
            if v < 0.0 {
                return Err(Error::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.gamma1 == 0.0 && self.gamma2 == 0.0 && self.gamma3 == 0.0 {
            return Err(Error::Validation(
                "at least one of loss.gamma1..3 must be > 0".into(),
            ));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Validation("loss.focal_gamma must be >= 0".into()));
        }
        if self.focal_alpha <= 0.0 || self.focal_alpha > 1.0 {
            return Err(Error::Validation("loss.focal_alpha must be in (0,1]".into()));
        }
        if self.assign_ratio <= 1.0 {
            return Err(Error::Validation("loss.assign_ratio must be > 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_epochs: usize,
    pub final_lr_fraction: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Validation("optim.lr0 must be > 0".into()));
        }
        for (name, v) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if v <= 0.0 || v >= 1.0 {
                return Err(Error::Validation(format!("{name} must be in (0,1), got {v}")));
            }
        }
        if self.beta1 >= self.beta2 {
            return Err(Error::Validation("optim.beta1 must be < optim.beta2".into()));
        }
        if self.final_lr_fraction <= 0.0 || self.final_lr_fraction > 1.0 {
            return Err(Error::Validation(
                "optim.final_lr_fraction must be in (0,1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("optim.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Detection strides, fixed by the three-scale head structure.
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Anchors per detection scale.
pub const ANCHORS_PER_SCALE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelScaleConfig {
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub num_classes: usize,
}

impl ModelScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_multiple <= 0.0 || self.width_multiple > 1.0 {
            return Err(Error::Validation("scale.width_multiple must be in (0,1]".into()));
        }
        if self.depth_multiple <= 0.0 || self.depth_multiple > 1.0 {
            return Err(Error::Validation("scale.depth_multiple must be in (0,1]".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Validation("scale.nc must be >= 1".into()));
        }
        Ok(())
    }

    /// Scaled channel count, floored at 8 and rounded to a multiple of 8.
    pub fn width(&self, base: usize) -> usize {
        let c = (base as f64 * self.width_multiple).round() as usize;
        ((c + 7) / 8 * 8).max(8)
    }

    /// Scaled block repeat count, always at least 1.
    pub fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_multiple).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    EndToEnd,
    EsW,
    EdW,
    EsDW,
    EdSW,
}

impl Paradigm {
    pub const ALL: [Paradigm; 5] = [
        Paradigm::EndToEnd,
        Paradigm::EsW,
        Paradigm::EdW,
        Paradigm::EsDW,
        Paradigm::EdSW,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::EndToEnd => "end_to_end",
            Paradigm::EsW => "ES_W",
            Paradigm::EdW => "ED_W",
            Paradigm::EsDW => "ES_D_W",
            Paradigm::EdSW => "ED_S_W",
        }
    }

    pub fn num_stages(&self) -> usize {
        match self {
            Paradigm::EndToEnd => 1,
            Paradigm::EsW | Paradigm::EdW => 2,
            Paradigm::EsDW | Paradigm::EdSW => 3,
        }
    }
}

impl FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown paradigm {s:?}")))
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Det,
    Da,
    Ll,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Det, Head::Da, Head::Ll];

    pub fn name(&self) -> &'static str {
        match self {
            Head::Det => "det",
            Head::Da => "da",
            Head::Ll => "ll",
        }
    }
}

/// A set of active heads, stored canonically ordered.
pub type HeadSet = std::collections::BTreeSet<Head>;

pub fn parse_heads(s: &str) -> Result<HeadSet> {
    let mut out = HeadSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let h = match part {
            "det" => Head::Det,
            "da" => Head::Da,
            "ll" => Head::Ll,
            _ => return Err(Error::Validation(format!("unknown head {part:?}"))),
        };
        out.insert(h);
    }
    Ok(out)
}

pub fn heads_to_string(h: &HeadSet) -> String {
    h.iter().map(|h| h.name()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub augment: bool,
    /// Lane rasterization width used for training masks.
    pub ll_train_width: u32,
    /// Lane rasterization width used for evaluation ground truth.
    pub ll_eval_width: u32,
    /// BDD categories mapped to the single vehicle class.
    pub vehicle_categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub conf_thr: f64,
    pub nms_iou: f64,
    pub infer_conf_thr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub image_size: ImageSize,
    pub scale: ModelScaleConfig,
    pub loss: LossWeights,
    pub optim: OptimizerConfig,
    pub paradigm: Paradigm,
    pub active_heads: HeadSet,
    /// Epoch budget per paradigm stage. A single entry is broadcast to all stages.
    pub stage_epochs: Vec<usize>,
    /// Optional early-stop loss threshold; 0 disables it.
    pub loss_threshold: f64,
    pub deterministic: bool,
    pub seed: u64,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// 9 anchor (w,h) pairs; area-ascending, 3 per stride.
    pub anchors: Vec<(f64, f64)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_size: ImageSize { width: 640, height: 384 },
            scale: ModelScaleConfig {
                width_multiple: 0.25,
                depth_multiple: 0.33,
                num_classes: 1,
            },
            loss: LossWeights {
                alpha1: 0.5,
                alpha2: 1.0,
                alpha3: 0.05,
                gamma1: 1.0,
                gamma2: 1.0,
                gamma3: 1.0,
                focal_gamma: 2.0,
                focal_alpha: 0.25,
                assign_ratio: 4.0,
            },
            optim: OptimizerConfig {
                lr0: 0.001,
                beta1: 0.937,
                beta2: 0.999,
                warmup_epochs: 3,
                final_lr_fraction: 0.01,
                grad_clip: 10.0,
                batch_size: 8,
            },
            paradigm: Paradigm::EndToEnd,
            active_heads: Head::ALL.into_iter().collect(),
            stage_epochs: vec![100],
            loss_threshold: 0.0,
            deterministic: true,
            seed: 0,
            data: DataConfig {
                root: PathBuf::from("data"),
                augment: true,
                ll_train_width: 8,
                ll_eval_width: 2,
                vehicle_categories: ["car", "bus", "truck", "train", "motorcycle", "trailer"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            },
            eval: EvalConfig {
                conf_thr: 0.001,
                nms_iou: 0.45,
                infer_conf_thr: 0.25,
            },
            anchors: DEFAULT_ANCHORS.to_vec(),
        }
    }
}

/// Default priors before k-means is run on an actual dataset, expressed for a
/// 640-wide input and used as-is.
pub const DEFAULT_ANCHORS: [(f64, f64); 9] = [
    (10.0, 13.0),
    (16.0, 30.0),
    (33.0, 23.0),
    (30.0, 61.0),
    (62.0, 45.0),
    (59.0, 119.0),
    (116.0, 90.0),
    (156.0, 198.0),
    (373.0, 326.0),
];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.image_size.validate()?;
        self.scale.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.active_heads.is_empty() {
            return Err(Error::Validation("train.active_heads must be nonempty".into()));
        }
        if self.stage_epochs.is_empty() {
            return Err(Error::Validation("train.stage_epochs must be nonempty".into()));
        }
        let n = self.paradigm.num_stages();
        if self.stage_epochs.len() != 1 && self.stage_epochs.len() != n {
            return Err(Error::Validation(format!(
                "train.stage_epochs has {} entries but paradigm {} has {} stages",
                self.stage_epochs.len(),
                self.paradigm.name(),
                n
            )));
        }
        if self.anchors.len() != 9 {
            return Err(Error::Validation(format!(
                "anchors.set must hold 9 pairs, got {}",
                self.anchors.len()
            )));
        }
        for &(w, h) in &self.anchors {
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::Validation("anchor sizes must be positive".into()));
            }
        }
        if self.data.ll_train_width < 1 || self.data.ll_eval_width < 1 {
            return Err(Error::Validation("lane widths must be >= 1".into()));
        }
        for (name, v) in [
            ("eval.conf_thr", self.eval.conf_thr),
            ("eval.nms_iou", self.eval.nms_iou),
            ("eval.infer_conf_thr", self.eval.infer_conf_thr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }

    /// Epoch budget for a given stage index.
    pub fn epochs_for_stage(&self, stage: usize) -> usize {
        if self.stage_epochs.len() == 1 {
            self.stage_epochs[0]
        } else {
            self.stage_epochs[stage]
        }
    }

    /// Parse the text format, starting from defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `key: value`, got {line:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Apply one `key: value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Parse(format!("key {key}: cannot parse {value:?}")))
        }
        match key {
            "image.w" => self.image_size.width = num(key, value)?,
            "image.h" => self.image_size.height = num(key, value)?,
            "scale.width_multiple" => self.scale.width_multiple = num(key, value)?,
            "scale.depth_multiple" => self.scale.depth_multiple = num(key, value)?,
            "scale.nc" => self.scale.num_classes = num(key, value)?,
            "loss.alpha1" => self.loss.alpha1 = num(key, value)?,
            "loss.alpha2" => self.loss.alpha2 = num(key, value)?,
            "loss.alpha3" => self.loss.alpha3 = num(key, value)?,
            "loss.gamma1" => self.loss.gamma1 = num(key, value)?,
            "loss.gamma2" => self.loss.gamma2 = num(key, value)?,
            "loss.gamma3" => self.loss.gamma3 = num(key, value)?,
            "loss.focal_gamma" => self.loss.focal_gamma = num(key, value)?,
            "loss.focal_alpha" => self.loss.focal_alpha = num(key, value)?,
            "loss.assign_ratio" => self.loss.assign_ratio = num(key, value)?,
            "optim.lr0" => self.optim.lr0 = num(key, value)?,
            "optim.beta1" => self.optim.beta1 = num(key, value)?,
            "optim.beta2" => self.optim.beta2 = num(key, value)?,
            "optim.warmup_epochs" => self.optim.warmup_epochs = num(key, value)?,
            "optim.final_lr_fraction" => self.optim.final_lr_fraction = num(key, value)?,
            "optim.grad_clip" => self.optim.grad_clip = num(key, value)?,
            "optim.batch_size" => self.optim.batch_size = num(key, value)?,
            "train.paradigm" => self.paradigm = value.parse()?,
            "train.active_heads" => self.active_heads = parse_heads(value)?,
            "train.stage_epochs" => {
                self.stage_epochs = value
                    .split(',')
                    .map(|p| num("train.stage_epochs", p.trim()))
                    .collect::<Result<_>>()?;
            }
            "train.loss_threshold" => self.loss_threshold = num(key, value)?,
            "train.deterministic" => self.deterministic = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data.root" => self.data.root = PathBuf::from(value),
            "data.augment" => self.data.augment = num(key, value)?,
            "data.ll_train_width" => self.data.ll_train_width = num(key, value)?,
            "data.ll_eval_width" => self.data.ll_eval_width = num(key, value)?,
            "data.vehicle_categories" => {
                self.data.vehicle_categories = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "eval.conf_thr" => self.eval.conf_thr = num(key, value)?,
            "eval.nms_iou" => self.eval.nms_iou = num(key, value)?,
            "eval.infer_conf_thr" => self.eval.infer_conf_thr = num(key, value)?,
            "anchors.set" => self.anchors = parse_anchor_list(value)?,
            _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Serialize to the same text format `from_text` reads.
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("image.w", self.image_size.width.to_string());
        kv.insert("image.h", self.image_size.height.to_string());
        kv.insert("scale.width_multiple", self.scale.width_multiple.to_string());
        kv.insert("scale.depth_multiple", self.scale.depth_multiple.to_string());
        kv.insert("scale.nc", self.scale.num_classes.to_string());
        kv.insert("loss.alpha1", self.loss.alpha1.to_string());
        kv.insert("loss.alpha2", self.loss.alpha2.to_string());
        kv.insert("loss.alpha3", self.loss.alpha3.to_string());
        kv.insert("loss.gamma1", self.loss.gamma1.to_string());
        kv.insert("loss.gamma2", self.loss.gamma2.to_string());
        kv.insert("loss.gamma3", self.loss.gamma3.to_string());
        kv.insert("loss.focal_gamma", self.loss.focal_gamma.to_string());
        kv.insert("loss.focal_alpha", self.loss.focal_alpha.to_string());
        kv.insert("loss.assign_ratio", self.loss.assign_ratio.to_string());
        kv.insert("optim.lr0", self.optim.lr0.to_string());
        kv.insert("optim.beta1", self.optim.beta1.to_string());
        kv.insert("optim.beta2", self.optim.beta2.to_string());
        kv.insert("optim.warmup_epochs", self.optim.warmup_epochs.to_string());
        kv.insert("optim.final_lr_fraction", self.optim.final_lr_fraction.to_string());
        kv.insert("optim.grad_clip", self.optim.grad_clip.to_string());
        kv.insert("optim.batch_size", self.optim.batch_size.to_string());
        kv.insert("train.paradigm", self.paradigm.name().to_string());
        kv.insert("train.active_heads", heads_to_string(&self.active_heads));
        kv.insert(
            "train.stage_epochs",
            self.stage_epochs
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("train.loss_threshold", self.loss_threshold.to_string());
        kv.insert("train.deterministic", self.deterministic.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("data.root", self.data.root.display().to_string());
        kv.insert("data.augment", self.data.augment.to_string());
        kv.insert("data.ll_train_width", self.data.ll_train_width.to_string());
        kv.insert("data.ll_eval_width", self.data.ll_eval_width.to_string());
        kv.insert("data.vehicle_categories", self.data.vehicle_categories.join(","));
        kv.insert("eval.conf_thr", self.eval.conf_thr.to_string());
        kv.insert("eval.nms_iou", self.eval.nms_iou.to_string());
        kv.insert("eval.infer_conf_thr", self.eval.infer_conf_thr.to_string());
        kv.insert("anchors.set", anchor_list_to_string(&self.anchors));
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

pub fn parse_anchor_list(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (w, h) = pair
                .split_once('x')
                .ok_or_else(|| Error::Parse(format!("anchor pair {pair:?} is not WxH")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad anchor width {w:?}")))?;
            let h: f64 = h
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad anchor height {h:?}")))?;
            Ok((w, h))
        })
        .collect()
}

pub fn anchor_list_to_string(anchors: &[(f64, f64)]) -> String {
    anchors
        .iter()
        .map(|(w, h)| format!("{w}x{h}"))
        .collect::<Vec<_>>()
        .join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_text("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.optim.lr0, 0.001);
        assert_eq!(cfg.optim.beta1, 0.937);
        assert_eq!(cfg.optim.beta2, 0.999);
        assert_eq!(cfg.image_size.width, 640);
        assert_eq!(cfg.image_size.height, 384);
    }

    #[test]
    fn bad_width_names_invariant() {
        let err = ExperimentConfig::from_text("image.w: 100").unwrap_err();
        assert!(err.to_string().contains("W not divisible by 32"), "{err}");
    }

    #[test]
    fn override_changes_only_that_key() {
        let cfg = ExperimentConfig::from_text("loss.gamma3: 0.7").unwrap();
        let mut expect = ExperimentConfig::default();
        expect.loss.gamma3 = 0.7;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_text("loss.gama3: 0.7").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn text_round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.paradigm", "ED_S_W").unwrap();
        cfg.set("train.stage_epochs", "5,6,7").unwrap();
        cfg.set("image.w", "320").unwrap();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let reloaded = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(cfg, reloaded);
        assert_eq!(text, reloaded.to_text());
    }

    #[test]
    fn stage_epochs_must_match_paradigm() {
        let err =
            ExperimentConfig::from_text("train.paradigm: ED_S_W\ntrain.stage_epochs: 5,6")
                .unwrap_err();
        assert!(err.to_string().contains("stages"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::from_text("# comment\n\nseed: 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }
}
