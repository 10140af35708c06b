//! The shared-encoder multi-task network: CSP backbone with SPP, FPN neck,
//! PAN detect head over three scales, and two full-resolution segmentation
//! heads fed from the bottom FPN level.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::anchors::AnchorSet;
use crate::config::{ExperimentConfig, Head, ANCHORS_PER_SCALE, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{
    upsample2, ConvBlock, ConvPred, CspBlock, ForwardMode, Group, ParamStore, Spp,
};

/// Raw forward results. Detection grids are pre-activation values laid out
/// `N x 3 x H/s x W/s x (5+nc)` ordered `[tx, ty, tw, th, tobj, tcls...]`;
/// segmentation logits are `N x 2 x H x W`. Heads that were inactive in the
/// forward mode are `None`.
pub struct RawOutputs {
    pub det: Option<Vec<Tensor>>,
    pub da_logits: Option<Tensor>,
    pub ll_logits: Option<Tensor>,
}

impl RawOutputs {
    pub fn det(&self) -> Result<&Vec<Tensor>> {
        self.det.as_ref().ok_or_else(|| Error::Shape("detect head not computed".into()))
    }

    pub fn da_logits(&self) -> Result<&Tensor> {
        self.da_logits.as_ref().ok_or_else(|| Error::Shape("da head not computed".into()))
    }

    pub fn ll_logits(&self) -> Result<&Tensor> {
        self.ll_logits.as_ref().ok_or_else(|| Error::Shape("ll head not computed".into()))
    }
}

struct SegHead {
    c1: ConvBlock,
    c2: ConvBlock,
    c3: ConvBlock,
    out: ConvPred,
    group: Group,
}

impl SegHead {
    fn new(store: &mut ParamStore, name: &str, cin: usize, w: impl Fn(usize) -> usize) -> Result<Self> {
        let g = Group::Seg;
        Ok(SegHead {
            c1: ConvBlock::new(store, g, &format!("{name}.c1"), cin, w(128), 3, 1)?,
            c2: ConvBlock::new(store, g, &format!("{name}.c2"), w(128), w(64), 3, 1)?,
            c3: ConvBlock::new(store, g, &format!("{name}.c3"), w(64), w(32), 3, 1)?,
            out: ConvPred::new(store, g, &format!("{name}.out"), w(32), 2, 1)?,
            group: g,
        })
    }

    /// Three [conv + nearest 2x upsample] steps, then the 2-channel conv.
    fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let _ = self.group;
        let y = upsample2(&self.c1.forward(x, mode)?)?;
        let y = upsample2(&self.c2.forward(&y, mode)?)?;
        let y = upsample2(&self.c3.forward(&y, mode)?)?;
        self.out.forward(&y)
    }
}

pub struct Model {
    pub store: ParamStore,
    pub anchors: AnchorSet,
    pub num_classes: usize,
    pub config: ExperimentConfig,

    // Backbone.
    stem: ConvBlock,
    down1: ConvBlock,
    csp1: CspBlock,
    down2: ConvBlock,
    csp2: CspBlock,
    down3: ConvBlock,
    csp3: CspBlock,
    down4: ConvBlock,
    csp4: CspBlock,
    spp: Spp,

    // FPN (top-down).
    fpn_lat5: ConvBlock,
    fpn_csp4: CspBlock,
    fpn_lat4: ConvBlock,
    fpn_csp3: CspBlock,

    // PAN (bottom-up) + prediction convs.
    pan_down3: ConvBlock,
    pan_csp4: CspBlock,
    pan_down4: ConvBlock,
    pan_csp5: CspBlock,
    pred3: ConvPred,
    pred4: ConvPred,
    pred5: ConvPred,

    // Segment heads.
    da_head: SegHead,
    ll_head: SegHead,
}

/// Construct the network for a config. Two builds with the same config seed
/// produce bit-identical initial parameters.
pub fn build_model(cfg: &ExperimentConfig, anchors: AnchorSet) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed, Device::Cpu);
    let sc = &cfg.scale;
    let w = |c: usize| sc.width(c);
    let nc = sc.num_classes;
    let no = ANCHORS_PER_SCALE * (5 + nc);

    let g = Group::Enc;
    let stem = ConvBlock::new(&mut store, g, "backbone.stem", 3, w(64), 3, 2)?;
    let down1 = ConvBlock::new(&mut store, g, "backbone.down1", w(64), w(128), 3, 2)?;
    let csp1 = CspBlock::new(&mut store, g, "backbone.csp1", w(128), w(128), sc.depth(1), true)?;
    let down2 = ConvBlock::new(&mut store, g, "backbone.down2", w(128), w(256), 3, 2)?;
    let csp2 = CspBlock::new(&mut store, g, "backbone.csp2", w(256), w(256), sc.depth(2), true)?;
    let down3 = ConvBlock::new(&mut store, g, "backbone.down3", w(256), w(512), 3, 2)?;
    let csp3 = CspBlock::new(&mut store, g, "backbone.csp3", w(512), w(512), sc.depth(3), true)?;
    let down4 = ConvBlock::new(&mut store, g, "backbone.down4", w(512), w(1024), 3, 2)?;
    let csp4 = CspBlock::new(&mut store, g, "backbone.csp4", w(1024), w(1024), sc.depth(1), true)?;
    let spp = Spp::new(&mut store, g, "neck.spp", w(1024), w(1024))?;

    let fpn_lat5 = ConvBlock::new(&mut store, g, "neck.lat5", w(1024), w(512), 1, 1)?;
    let fpn_csp4 = CspBlock::new(&mut store, g, "neck.csp4", w(512) * 2, w(512), sc.depth(1), false)?;
    let fpn_lat4 = ConvBlock::new(&mut store, g, "neck.lat4", w(512), w(256), 1, 1)?;
    let fpn_csp3 = CspBlock::new(&mut store, g, "neck.csp3", w(256) * 2, w(256), sc.depth(1), false)?;

    let d = Group::Det;
    let pan_down3 = ConvBlock::new(&mut store, d, "pan.down3", w(256), w(256), 3, 2)?;
    let pan_csp4 = CspBlock::new(&mut store, d, "pan.csp4", w(256) * 2, w(512), sc.depth(1), false)?;
    let pan_down4 = ConvBlock::new(&mut store, d, "pan.down4", w(512), w(512), 3, 2)?;
    let pan_csp5 = CspBlock::new(&mut store, d, "pan.csp5", w(512) * 2, w(1024), sc.depth(1), false)?;
    let pred3 = ConvPred::new(&mut store, d, "pred.s8", w(256), no, 1)?;
    let pred4 = ConvPred::new(&mut store, d, "pred.s16", w(512), no, 1)?;
    let pred5 = ConvPred::new(&mut store, d, "pred.s32", w(1024), no, 1)?;
    // Start with low objectness so early training is not swamped by
    // background false positives, and with small prediction weights so the
    // decoded boxes begin as the anchor centered in its cell (near-zero
    // logits) instead of saturating the decode sigmoids.
    for pred in [&pred3, &pred4, &pred5] {
        let w = pred.weight.var.as_tensor();
        pred.weight.var.set(&(w * 0.03)?)?;
        let mut bias: Vec<f32> = pred.bias.var.as_tensor().to_vec1()?;
        for a in 0..ANCHORS_PER_SCALE {
            bias[a * (5 + nc) + 4] = -4.0;
        }
        pred.bias
            .var
            .set(&Tensor::from_vec(bias, &[no], &store.device)?)?;
    }

    let da_head = SegHead::new(&mut store, "seg.da", w(256), w)?;
    let ll_head = SegHead::new(&mut store, "seg.ll", w(256), w)?;

    Ok(Model {
        store,
        anchors,
        num_classes: nc,
        config: cfg.clone(),
        stem,
        down1,
        csp1,
        down2,
        csp2,
        down3,
        csp3,
        down4,
        csp4,
        spp,
        fpn_lat5,
        fpn_csp4,
        fpn_lat4,
        fpn_csp3,
        pan_down3,
        pan_csp4,
        pan_down4,
        pan_csp5,
        pred3,
        pred4,
        pred5,
        da_head,
        ll_head,
    })
}

impl Model {
    /// Forward pass. Input is `N x 3 x H x W` with H and W divisible by 32.
    pub fn forward(&self, batch: &Tensor, mode: &ForwardMode) -> Result<RawOutputs> {
        let (_, c, h, ww) = batch.dims4()?;
        if c != 3 || h % 32 != 0 || ww % 32 != 0 {
            return Err(Error::Shape(format!(
                "expected N x 3 x H x W with H, W divisible by 32, got {:?}",
                batch.dims()
            )));
        }
        let n = batch.dim(0)?;
        let nc = self.num_classes;

        // Backbone.
        let x = self.stem.forward(batch, mode)?;
        let x = self.csp1.forward(&self.down1.forward(&x, mode)?, mode)?;
        let p3 = self.csp2.forward(&self.down2.forward(&x, mode)?, mode)?;
        let p4 = self.csp3.forward(&self.down3.forward(&p3, mode)?, mode)?;
        let p5 = self.csp4.forward(&self.down4.forward(&p4, mode)?, mode)?;
        let p5 = self.spp.forward(&p5, mode)?;

        // FPN top-down with concatenation fusion.
        let lat5 = self.fpn_lat5.forward(&p5, mode)?;
        let f4 = self
            .fpn_csp4
            .forward(&Tensor::cat(&[&upsample2(&lat5)?, &p4], 1)?, mode)?;
        let lat4 = self.fpn_lat4.forward(&f4, mode)?;
        let f3 = self
            .fpn_csp3
            .forward(&Tensor::cat(&[&upsample2(&lat4)?, &p3], 1)?, mode)?;

        // Detect head: PAN bottom-up, then per-scale prediction convs.
        let det = if mode.active_heads.contains(&Head::Det) {
            let d4 = self
                .pan_csp4
                .forward(&Tensor::cat(&[&self.pan_down3.forward(&f3, mode)?, &lat4], 1)?, mode)?;
            let d5 = self
                .pan_csp5
                .forward(&Tensor::cat(&[&self.pan_down4.forward(&d4, mode)?, &lat5], 1)?, mode)?;
            let mut grids = Vec::with_capacity(3);
            for (feat, pred) in [(&f3, &self.pred3), (&d4, &self.pred4), (&d5, &self.pred5)] {
                let y = pred.forward(feat)?;
                let (hg, wg) = (y.dim(2)?, y.dim(3)?);
                let y = y
                    .reshape(&[n, ANCHORS_PER_SCALE, 5 + nc, hg, wg])?
                    .permute([0, 1, 3, 4, 2])?
                    .contiguous()?;
                grids.push(y);
            }
            Some(grids)
        } else {
            None
        };

        let da_logits = if mode.active_heads.contains(&Head::Da) {
            Some(self.da_head.forward(&f3, mode)?)
        } else {
            None
        };
        let ll_logits = if mode.active_heads.contains(&Head::Ll) {
            Some(self.ll_head.forward(&f3, mode)?)
        } else {
            None
        };

        Ok(RawOutputs { det, da_logits, ll_logits })
    }

    pub fn param_groups(&self) -> [&'static str; 3] {
        [Group::Enc.name(), Group::Det.name(), Group::Seg.name()]
    }

    /// Save parameters, running stats and run metadata to one file.
    pub fn save_checkpoint(&self, path: &Path, extra_meta: &[(&str, String)]) -> Result<()> {
        use safetensors::serialize_to_file;
        let mut tensors: Vec<(String, safetensors::tensor::TensorView)> = Vec::new();
        let mut owned: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::new();
        for p in &self.store.params {
            let name = format!("{}/{}", p.group.name(), p.name);
            let data: Vec<f32> = p.var.as_tensor().flatten_all()?.to_vec1()?;
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((name, bytes, p.var.as_tensor().dims().to_vec()));
        }
        for b in &self.store.buffers {
            let name = format!("{}/{}", b.group.name(), b.name);
            let t = b.value.borrow();
            let data: Vec<f32> = t.flatten_all()?.to_vec1()?;
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((name, bytes, t.dims().to_vec()));
        }
        for (name, bytes, dims) in &owned {
            tensors.push((
                name.clone(),
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, dims.clone(), bytes)
                    .map_err(|e| Error::Io(format!("checkpoint tensor {name}: {e}")))?,
            ));
        }
        let mut meta: HashMap<String, String> = HashMap::new();
        meta.insert("config".into(), self.config.to_text());
        meta.insert(
            "anchors".into(),
            crate::config::anchor_list_to_string(&self.anchors.anchors),
        );
        for (k, v) in extra_meta {
            meta.insert((*k).into(), v.clone());
        }
        serialize_to_file(tensors, &Some(meta), path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// Rebuild a model from a checkpoint file. Returns the model plus the stored
/// metadata.
pub fn load_checkpoint(path: &Path) -> Result<(Model, HashMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let (_, meta_opt) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let meta = meta_opt
        .metadata()
        .clone()
        .ok_or_else(|| Error::Io("checkpoint has no metadata".into()))?;
    let cfg_text = meta
        .get("config")
        .ok_or_else(|| Error::Io("checkpoint missing config echo".into()))?;
    let cfg = ExperimentConfig::from_text(cfg_text)?;
    let anchor_text = meta
        .get("anchors")
        .ok_or_else(|| Error::Io("checkpoint missing anchors".into()))?;
    let anchors = AnchorSet::from_pairs(crate::config::parse_anchor_list(anchor_text)?)?;
    let model = build_model(&cfg, anchors)?;
    let read_tensor = |name: &str| -> Result<Tensor> {
        let view = st
            .tensor(name)
            .map_err(|e| Error::Io(format!("checkpoint missing tensor {name}: {e}")))?;
        let vals: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::from_vec(vals, view.shape(), &model.store.device)?)
    };
    for p in &model.store.params {
        let t = read_tensor(&format!("{}/{}", p.group.name(), p.name))?;
        p.var.set(&t)?;
    }
    for b in &model.store.buffers {
        let t = read_tensor(&format!("{}/{}", b.group.name(), b.name))?;
        *b.value.borrow_mut() = t;
    }
    Ok((model, meta))
}

/// Expected detection grid shapes for an image size: `(3, H/s, W/s, 5+nc)`
/// per stride.
pub fn expected_det_shapes(cfg: &ExperimentConfig) -> Vec<[usize; 4]> {
    STRIDES
        .iter()
        .map(|&s| {
            [
                ANCHORS_PER_SCALE,
                cfg.image_size.height / s,
                cfg.image_size.width / s,
                5 + cfg.scale.num_classes,
            ]
        })
        .collect()
}

pub fn groups_from_names(names: &[&str]) -> BTreeSet<Group> {
    names
        .iter()
        .filter_map(|n| match *n {
            "enc" => Some(Group::Enc),
            "det" => Some(Group::Det),
            "seg" => Some(Group::Seg),
            _ => None,
        })
        .collect()
}

pub fn default_device() -> Device {
    Device::Cpu
}

/// Stack samples' images into an `N x 3 x H x W` tensor in [0,1].
pub fn batch_images(samples: &[&crate::data::Sample], device: &Device) -> Result<Tensor> {
    let n = samples.len();
    let (h, w) = (samples[0].image.shape()[0], samples[0].image.shape()[1]);
    let mut buf = vec![0f32; n * 3 * h * w];
    for (i, s) in samples.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    buf[((i * 3 + c) * h + y) * w + x] = s.image[(y, x, c)];
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, &[n, 3, h, w], device)?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(w: usize, h: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.image_size = crate::config::ImageSize { width: w, height: h };
        cfg.scale.width_multiple = 0.25;
        cfg.scale.depth_multiple = 0.33;
        cfg
    }

    fn anchors() -> AnchorSet {
        AnchorSet::from_pairs(crate::config::DEFAULT_ANCHORS.to_vec()).unwrap()
    }

    #[test]
    fn forward_shapes_default_desk_config() {
        let cfg = tiny_cfg(640, 384);
        let m = build_model(&cfg, anchors()).unwrap();
        let x = Tensor::zeros(&[1, 3, 384, 640], DType::F32, &m.store.device).unwrap();
        let out = m.forward(&x, &ForwardMode::eval()).unwrap();
        let det = out.det().unwrap();
        assert_eq!(det[0].dims(), &[1, 3, 48, 80, 6]);
        assert_eq!(det[1].dims(), &[1, 3, 24, 40, 6]);
        assert_eq!(det[2].dims(), &[1, 3, 12, 20, 6]);
        assert_eq!(out.da_logits().unwrap().dims(), &[1, 2, 384, 640]);
        assert_eq!(out.ll_logits().unwrap().dims(), &[1, 2, 384, 640]);
        for g in det {
            let v: Vec<f32> = g.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = tiny_cfg(64, 64);
        let a = build_model(&cfg, anchors()).unwrap();
        let b = build_model(&cfg, anchors()).unwrap();
        for (pa, pb) in a.store.params.iter().zip(b.store.params.iter()) {
            assert_eq!(pa.name, pb.name);
            let va: Vec<f32> = pa.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f32> = pb.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb, "param {} differs", pa.name);
        }
    }

    #[test]
    fn groups_partition_all_parameters() {
        let cfg = tiny_cfg(64, 64);
        let m = build_model(&cfg, anchors()).unwrap();
        let total = m.store.params.len();
        let mut sum = 0;
        for g in Group::ALL {
            sum += m
                .store
                .params_of(&[g].into_iter().collect())
                .len();
        }
        assert_eq!(sum, total);
        assert!(total > 0);
    }

    #[test]
    fn batch_rows_independent() {
        let cfg = tiny_cfg(64, 64);
        let m = build_model(&cfg, anchors()).unwrap();
        let one = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &m.store.device).unwrap();
        let two = Tensor::cat(&[&one, &one], 0).unwrap();
        let out = m.forward(&two, &ForwardMode::eval()).unwrap();
        let det = out.det().unwrap();
        let a: Vec<f32> = det[0].get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = det[0].get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg(64, 64);
        let m = build_model(&cfg, anchors()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        m.save_checkpoint(&path, &[("stage", "0".into())]).unwrap();
        let (m2, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.get("stage").map(String::as_str), Some("0"));
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &m.store.device).unwrap();
        let o1 = m.forward(&x, &ForwardMode::eval()).unwrap();
        let o2 = m2.forward(&x, &ForwardMode::eval()).unwrap();
        let v1: Vec<f32> = o1.det().unwrap()[2].flatten_all().unwrap().to_vec1().unwrap();
        let v2: Vec<f32> = o2.det().unwrap()[2].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v1, v2);
    }
}
