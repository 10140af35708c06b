//! The multi-task loss: focal classification/objectness, CIoU box
//! regression, segmentation cross-entropy, lane soft-IoU, and the weighted
//! total
//!
//! ```text
//! L_det = alpha1*L_class + alpha2*L_obj + alpha3*L_box
//! L_da_seg = L_ce
//! L_ll_seg = L_ce + L_IoU
//! L_all = gamma1*L_det + gamma2*L_da_seg + gamma3*L_ll_seg
//! ```

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::anchors::AnchorSet;
use crate::config::{Head, HeadSet, ImageSize, LossWeights, ANCHORS_PER_SCALE, STRIDES};
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::model::RawOutputs;

/// Elementwise arctangent with an analytic backward pass.
struct Atan;

impl CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("atan requires contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.atan()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.atan()).collect()),
            _ => return Err(candle_core::Error::Msg("atan supports f32/f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Some(grad_res.div(&(arg.sqr()? + 1.0)?)).transpose()
    }
}

pub fn atan(t: &Tensor) -> Result<Tensor> {
    Ok(t.contiguous()?.apply_op1(Atan)?)
}

/// Focal loss over probabilities `p` and binary targets `y`:
/// mean of `-alpha_t * (1 - p_t)^gamma * ln(p_t)` with
/// `p_t = p` where `y = 1` and `1 - p` elsewhere.
pub fn focal_loss(p: &Tensor, y: &Tensor, gamma: f64, alpha_bal: f64) -> Result<Tensor> {
    let one = 1.0f64;
    let p_t = (p.mul(y)? + ((one - p)?.mul(&(one - y)?))?)?;
    let alpha_t = ((y * alpha_bal)? + ((one - y)? * (one - alpha_bal))?)?;
    let log_pt = p_t.clamp(1e-12, 1.0)?.log()?;
    let focal = if gamma == 0.0 {
        // (1 - p_t)^0 is identically 1; skip the powf so its backward cannot
        // produce 0 * inf at p_t = 1.
        alpha_t
    } else {
        ((one - &p_t)?.powf(gamma)?.mul(&alpha_t))?
    };
    Ok(focal.mul(&log_pt)?.neg()?.mean_all()?)
}

/// Elementwise CIoU loss `1 - CIoU` for boxes given as corner tensors of
/// equal length. The aspect-ratio coefficient is detached from the gradient.
#[allow(clippy::too_many_arguments)]
pub fn ciou_loss_elems(
    px1: &Tensor,
    py1: &Tensor,
    px2: &Tensor,
    py2: &Tensor,
    gx1: &Tensor,
    gy1: &Tensor,
    gx2: &Tensor,
    gy2: &Tensor,
) -> Result<Tensor> {
    let eps = 1e-9f64;
    let pw = (px2 - px1)?;
    let ph = (py2 - py1)?;
    let gw = (gx2 - gx1)?;
    let gh = (gy2 - gy1)?;

    let ix = (px2.minimum(gx2)? - px1.maximum(gx1)?)?.relu()?;
    let iy = (py2.minimum(gy2)? - py1.maximum(gy1)?)?.relu()?;
    let inter = ix.mul(&iy)?;
    let union = ((pw.mul(&ph)? + gw.mul(&gh)?)? - &inter)?;
    let iou = inter.div(&(union + eps)?)?;

    // Normalized center distance.
    let pcx = ((px1 + px2)? * 0.5)?;
    let pcy = ((py1 + py2)? * 0.5)?;
    let gcx = ((gx1 + gx2)? * 0.5)?;
    let gcy = ((gy1 + gy2)? * 0.5)?;
    let rho2 = ((pcx - gcx)?.sqr()? + (pcy - gcy)?.sqr()?)?;
    let cw = (px2.maximum(gx2)? - px1.minimum(gx1)?)?;
    let ch = (py2.maximum(gy2)? - py1.minimum(gy1)?)?;
    let c2 = ((cw.sqr()? + ch.sqr()?)? + eps)?;

    // Aspect-ratio consistency.
    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let d_atan = (atan(&gw.div(&(gh + eps)?)?)? - atan(&pw.div(&(ph + eps)?)?)?)?;
    let v = (d_atan.sqr()? * four_over_pi2)?;
    let alpha = v.div(&(((1.0 - &iou)? + &v)? + eps)?)?.detach();

    let ciou = ((iou - rho2.div(&c2)?)? - alpha.mul(&v)?)?;
    Ok((1.0 - ciou)?)
}

/// Scalar convenience wrapper over [`ciou_loss_elems`].
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if !pred.is_valid() || !gt.is_valid() {
        return Err(Error::Validation("ciou_loss: degenerate box".into()));
    }
    let dev = candle_core::Device::Cpu;
    let t = |v: f32| Tensor::from_vec(vec![v as f64], &[1], &dev);
    let out = ciou_loss_elems(
        &t(pred.x1)?,
        &t(pred.y1)?,
        &t(pred.x2)?,
        &t(pred.y2)?,
        &t(gt.x1)?,
        &t(gt.y1)?,
        &t(gt.x2)?,
        &t(gt.y2)?,
    )?;
    Ok(out.reshape(&[] as &[usize])?.to_scalar::<f64>()?)
}

/// Per-pixel two-class cross-entropy from logits `N x 2 x H x W` against a
/// binary mask `N x H x W`, with log-sum-exp stabilization.
pub fn seg_ce_loss(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 2 || mask.dims() != [n, h, w] {
        return Err(Error::Shape(format!(
            "seg_ce_loss: logits {:?} vs mask {:?}",
            logits.dims(),
            mask.dims()
        )));
    }
    let l0 = logits.narrow(1, 0, 1)?.squeeze(1)?;
    let l1 = logits.narrow(1, 1, 1)?.squeeze(1)?;
    let m = l0.maximum(&l1)?;
    let lse = ((&l0 - &m)?.exp()? + (&l1 - &m)?.exp()?)?.log()?.add(&m)?;
    let ly = (l1.mul(mask)? + l0.mul(&(1.0 - mask)?)?)?;
    Ok((lse - ly)?.mean_all()?)
}

/// Soft-count IoU loss `1 - TP/(TP+FP+FN)` over a batch of foreground
/// probabilities and binary masks.
pub fn soft_iou_loss(probs: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if probs.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "soft_iou_loss: probs {:?} vs mask {:?}",
            probs.dims(),
            mask.dims()
        )));
    }
    let tp = probs.mul(mask)?.sum_all()?;
    let fp = probs.mul(&(1.0 - mask)?)?.sum_all()?;
    let fn_ = (1.0 - probs)?.mul(mask)?.sum_all()?;
    let denom = ((&tp + fp)? + fn_)?.clamp(1e-7, f64::INFINITY)?;
    Ok((1.0 - tp.div(&denom)?)?)
}

/// One positive cell of the target assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub image: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    pub gt: BBox,
}

/// Per-scale positives and objectness targets, plus diagnostics for ground
/// truth that matched no anchor at any scale.
pub struct AssignedTargets {
    /// Positives per detection scale (index 0 → stride 8).
    pub positives: Vec<Vec<Positive>>,
    /// Flattened objectness target per scale, length `n * 3 * Hg * Wg`.
    pub obj_targets: Vec<Vec<f32>>,
    /// (image index, box) pairs that matched no anchor anywhere.
    pub unmatched: Vec<(usize, BBox)>,
}

/// Assign ground-truth boxes to anchors and cells.
///
/// A box is a positive for anchor `a` at a scale iff
/// `max(w/aw, aw/w, h/ah, ah/h) < ratio_thr`, at the cell containing the box
/// center. The first box claiming a `(anchor, cell)` slot wins.
pub fn assign_targets(
    boxes_per_image: &[Vec<BBox>],
    anchors: &AnchorSet,
    size: ImageSize,
    ratio_thr: f64,
) -> AssignedTargets {
    let n = boxes_per_image.len();
    let mut positives: Vec<Vec<Positive>> = vec![Vec::new(); STRIDES.len()];
    let mut obj_targets: Vec<Vec<f32>> = STRIDES
        .iter()
        .map(|&s| vec![0f32; n * ANCHORS_PER_SCALE * (size.height / s) * (size.width / s)])
        .collect();
    let mut unmatched = Vec::new();
    for (img, boxes) in boxes_per_image.iter().enumerate() {
        for b in boxes {
            let (bw, bh) = (b.width() as f64, b.height() as f64);
            let (bcx, bcy) = b.center();
            let mut matched_any = false;
            for (si, &stride) in STRIDES.iter().enumerate() {
                let (hg, wg) = (size.height / stride, size.width / stride);
                if hg == 0 || wg == 0 {
                    continue;
                }
                let gx = ((bcx / stride as f32) as usize).min(wg - 1);
                let gy = ((bcy / stride as f32) as usize).min(hg - 1);
                for (a, &(aw, ah)) in anchors.for_scale(si).iter().enumerate() {
                    let r = (bw / aw).max(aw / bw).max(bh / ah).max(ah / bh);
                    if r < ratio_thr {
                        matched_any = true;
                        let flat = ((img * ANCHORS_PER_SCALE + a) * hg + gy) * wg + gx;
                        if obj_targets[si][flat] == 0.0 {
                            obj_targets[si][flat] = 1.0;
                            positives[si].push(Positive {
                                image: img,
                                anchor: a,
                                gy,
                                gx,
                                class_id: b.class_id,
                                gt: *b,
                            });
                        }
                    }
                }
            }
            if !matched_any {
                unmatched.push((img, *b));
            }
        }
    }
    AssignedTargets { positives, obj_targets, unmatched }
}

/// Unweighted detection loss terms (L_class, L_obj, L_box).
///
/// L_obj is a focal loss over every cell of every scale; L_box is the mean
/// CIoU loss over positives with boxes decoded by the shared grid
/// parameterization; L_class is a focal loss over positives only and is
/// identically zero for single-class models.
pub fn detection_loss(
    det_grids: &[Tensor],
    targets: &AssignedTargets,
    weights: &LossWeights,
    anchors: &AnchorSet,
) -> Result<(Tensor, Tensor, Tensor)> {
    let device = det_grids[0].device();
    let dtype = det_grids[0].dtype();
    let zero = || Tensor::zeros((), dtype, device).map_err(Error::from);

    let mut obj_logits = Vec::new();
    let mut obj_ys = Vec::new();
    let mut box_losses = Vec::new();
    let mut cls_probs = Vec::new();
    let mut cls_ys = Vec::new();

    for (si, grid) in det_grids.iter().enumerate() {
        let (n, na, hg, wg, no) = grid.dims5()?;
        let nc = no - 5;
        let flat = grid.reshape(&[n * na * hg * wg, no])?;

        // Objectness over all cells of this scale.
        obj_logits.push(flat.narrow(1, 4, 1)?.squeeze(1)?);
        obj_ys.push(Tensor::from_slice(
            &targets.obj_targets[si],
            &[n * na * hg * wg],
            device,
        )?.to_dtype(dtype)?);

        let pos = &targets.positives[si];
        if pos.is_empty() {
            continue;
        }
        let stride = STRIDES[si] as f64;
        let scale_anchors = anchors.for_scale(si);
        let idx: Vec<u32> = pos
            .iter()
            .map(|p| (((p.image * na + p.anchor) * hg + p.gy) * wg + p.gx) as u32)
            .collect();
        let rows = flat.index_select(&Tensor::from_slice(&idx, &[idx.len()], device)?, 0)?;
        let col = |i: usize| rows.narrow(1, i, 1)?.squeeze(1).map_err(Error::from);

        // Decode positives with the shared box parameterization.
        let cxs: Vec<f32> = pos.iter().map(|p| p.gx as f32).collect();
        let cys: Vec<f32> = pos.iter().map(|p| p.gy as f32).collect();
        let aws: Vec<f32> = pos.iter().map(|p| scale_anchors[p.anchor].0 as f32).collect();
        let ahs: Vec<f32> = pos.iter().map(|p| scale_anchors[p.anchor].1 as f32).collect();
        let cst = |v: Vec<f32>| {
            Tensor::from_slice(&v, &[pos.len()], device)?.to_dtype(dtype).map_err(Error::from)
        };
        let (cxs, cys, aws, ahs) = (cst(cxs)?, cst(cys)?, cst(aws)?, cst(ahs)?);
        let sig = |t: &Tensor| candle_nn::ops::sigmoid(t).map_err(Error::from);
        let bx = ((((sig(&col(0)?)? * 2.0)? - 0.5)? + cxs)? * stride)?;
        let by = ((((sig(&col(1)?)? * 2.0)? - 0.5)? + cys)? * stride)?;
        let bw = (sig(&col(2)?)? * 2.0)?.sqr()?.mul(&aws)?;
        let bh = (sig(&col(3)?)? * 2.0)?.sqr()?.mul(&ahs)?;
        let half = 0.5f64;
        let px1 = (&bx - (&bw * half)?)?;
        let px2 = (&bx + (&bw * half)?)?;
        let py1 = (&by - (&bh * half)?)?;
        let py2 = (&by + (&bh * half)?)?;
        let g = |f: fn(&BBox) -> f32| cst(pos.iter().map(|p| f(&p.gt)).collect());
        let (gx1, gy1, gx2, gy2) = (
            g(|b| b.x1)?,
            g(|b| b.y1)?,
            g(|b| b.x2)?,
            g(|b| b.y2)?,
        );
        box_losses.push(ciou_loss_elems(&px1, &py1, &px2, &py2, &gx1, &gy1, &gx2, &gy2)?);

        // Classification over positives (multi-class only).
        if nc > 1 {
            let logits = rows.narrow(1, 5, nc)?;
            let probs = candle_nn::ops::sigmoid(&logits)?;
            let mut onehot = vec![0f32; pos.len() * nc];
            for (i, p) in pos.iter().enumerate() {
                onehot[i * nc + p.class_id] = 1.0;
            }
            cls_probs.push(probs.flatten_all()?);
            cls_ys.push(Tensor::from_slice(&onehot, &[pos.len() * nc], device)?.to_dtype(dtype)?);
        }
    }

    let obj_p = candle_nn::ops::sigmoid(&Tensor::cat(&obj_logits, 0)?)?;
    let obj_y = Tensor::cat(&obj_ys, 0)?;
    let l_obj = focal_loss(&obj_p, &obj_y, weights.focal_gamma, weights.focal_alpha)?;

    let l_box = if box_losses.is_empty() {
        zero()?
    } else {
        Tensor::cat(&box_losses, 0)?.mean_all()?
    };
    let l_class = if cls_probs.is_empty() {
        zero()?
    } else {
        focal_loss(
            &Tensor::cat(&cls_probs, 0)?,
            &Tensor::cat(&cls_ys, 0)?,
            weights.focal_gamma,
            weights.focal_alpha,
        )?
    };
    Ok((l_class, l_obj, l_box))
}

/// Every loss term plus the weighted total, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_obj: f64,
    pub l_box: f64,
    pub l_det: f64,
    pub l_da_seg: f64,
    pub l_ll_seg_ce: f64,
    pub l_ll_iou: f64,
    pub l_ll_seg: f64,
    pub l_all: f64,
}

impl LossBreakdown {
    pub fn zeros() -> Self {
        LossBreakdown {
            l_class: 0.0,
            l_obj: 0.0,
            l_box: 0.0,
            l_det: 0.0,
            l_da_seg: 0.0,
            l_ll_seg_ce: 0.0,
            l_ll_iou: 0.0,
            l_ll_seg: 0.0,
            l_all: 0.0,
        }
    }

    /// Verify the arithmetic identities between the terms (1e-6 relative).
    pub fn check_identities(&self, w: &LossWeights) -> Result<()> {
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
        let det = w.alpha1 * self.l_class + w.alpha2 * self.l_obj + w.alpha3 * self.l_box;
        if !rel(self.l_det, det) {
            return Err(Error::Validation(format!("L_det identity violated: {} vs {det}", self.l_det)));
        }
        if !rel(self.l_ll_seg, self.l_ll_seg_ce + self.l_ll_iou) {
            return Err(Error::Validation("L_ll_seg identity violated".into()));
        }
        let all = w.gamma1 * self.l_det + w.gamma2 * self.l_da_seg + w.gamma3 * self.l_ll_seg;
        if !rel(self.l_all, all) {
            return Err(Error::Validation(format!("L_all identity violated: {} vs {all}", self.l_all)));
        }
        Ok(())
    }

    pub fn log_line(&self) -> String {
        format!(
            "class={:.5} obj={:.5} box={:.5} det={:.5} da={:.5} ll_ce={:.5} ll_iou={:.5} ll={:.5} all={:.5}",
            self.l_class,
            self.l_obj,
            self.l_box,
            self.l_det,
            self.l_da_seg,
            self.l_ll_seg_ce,
            self.l_ll_iou,
            self.l_ll_seg,
            self.l_all
        )
    }
}

/// Ground-truth side of a batch for the total loss.
pub struct BatchTargets {
    pub boxes: Vec<Vec<BBox>>,
    /// `N x H x W` binary drivable-area target.
    pub da: Tensor,
    /// `N x H x W` binary lane target.
    pub ll: Tensor,
}

impl BatchTargets {
    pub fn from_samples(samples: &[&crate::data::Sample], device: &candle_core::Device) -> Result<Self> {
        let n = samples.len();
        let (h, w) = samples[0].da_mask.dim();
        let mut da = vec![0f32; n * h * w];
        let mut ll = vec![0f32; n * h * w];
        for (i, s) in samples.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    da[(i * h + y) * w + x] = s.da_mask[(y, x)] as f32;
                    ll[(i * h + y) * w + x] = s.ll_mask[(y, x)] as f32;
                }
            }
        }
        Ok(BatchTargets {
            boxes: samples.iter().map(|s| s.boxes.clone()).collect(),
            da: Tensor::from_vec(da, &[n, h, w], device)?,
            ll: Tensor::from_vec(ll, &[n, h, w], device)?,
        })
    }
}

pub struct LossOutput {
    /// Scalar tensor to backpropagate.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// Boxes that matched no anchor at any scale.
    pub unmatched_gt: usize,
}

/// The weighted multi-task total. Inactive heads contribute exactly zero and
/// receive no gradient (their terms never enter the graph).
pub fn total_loss(
    raw: &RawOutputs,
    targets: &BatchTargets,
    weights: &LossWeights,
    active_heads: &HeadSet,
    anchors: &AnchorSet,
    size: ImageSize,
) -> Result<LossOutput> {
    let mut breakdown = LossBreakdown::zeros();
    let mut total: Option<Tensor> = None;
    let mut unmatched_gt = 0;
    let add = |t: Tensor, acc: &mut Option<Tensor>| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(prev) => (prev + t)?,
            None => t,
        });
        Ok(())
    };

    let scalar = |t: &Tensor| -> Result<f64> {
        Ok(t.to_dtype(candle_core::DType::F64)?.reshape(&[] as &[usize])?.to_scalar::<f64>()?)
    };

    if active_heads.contains(&Head::Det) {
        let grids = raw.det()?;
        let assigned = assign_targets(&targets.boxes, anchors, size, weights.assign_ratio);
        unmatched_gt = assigned.unmatched.len();
        let (l_class, l_obj, l_box) = detection_loss(grids, &assigned, weights, anchors)?;
        breakdown.l_class = scalar(&l_class)?;
        breakdown.l_obj = scalar(&l_obj)?;
        breakdown.l_box = scalar(&l_box)?;
        breakdown.l_det = weights.alpha1 * breakdown.l_class
            + weights.alpha2 * breakdown.l_obj
            + weights.alpha3 * breakdown.l_box;
        let l_det = (((l_class * weights.alpha1)? + (l_obj * weights.alpha2)?)?
            + (l_box * weights.alpha3)?)?;
        add((l_det * weights.gamma1)?, &mut total)?;
    }

    if active_heads.contains(&Head::Da) {
        let l_da = seg_ce_loss(raw.da_logits()?, &targets.da)?;
        breakdown.l_da_seg = scalar(&l_da)?;
        add((l_da * weights.gamma2)?, &mut total)?;
    }

    if active_heads.contains(&Head::Ll) {
        let logits = raw.ll_logits()?;
        let l_ce = seg_ce_loss(logits, &targets.ll)?;
        // Foreground softmax probability: sigmoid(l1 - l0).
        let l0 = logits.narrow(1, 0, 1)?.squeeze(1)?;
        let l1 = logits.narrow(1, 1, 1)?.squeeze(1)?;
        let fg = candle_nn::ops::sigmoid(&(l1 - l0)?)?;
        let l_iou = soft_iou_loss(&fg, &targets.ll)?;
        breakdown.l_ll_seg_ce = scalar(&l_ce)?;
        breakdown.l_ll_iou = scalar(&l_iou)?;
        breakdown.l_ll_seg = breakdown.l_ll_seg_ce + breakdown.l_ll_iou;
        add(((l_ce + l_iou)? * weights.gamma3)?, &mut total)?;
    }

    breakdown.l_all = weights.gamma1 * breakdown.l_det
        + weights.gamma2 * breakdown.l_da_seg
        + weights.gamma3 * breakdown.l_ll_seg;
    debug_assert!(breakdown.check_identities(weights).is_ok());

    let total = match total {
        Some(t) => t,
        None => return Err(Error::Validation("no active heads".into())),
    };
    Ok(LossOutput { total, breakdown, unmatched_gt })
}
