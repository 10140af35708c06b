//! Evaluation metrics: detection mAP50/recall, drivable-area mIoU, lane
//! accuracy and IoU, and a wall-clock benchmark helper.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::postprocess::Detection;

/// Pixel confusion counts for one binary class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn accumulate(&mut self, pred: &crate::data::Mask, gt: &crate::data::Mask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "confusion: pred {:?} vs gt {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (p, g) in pred.iter().zip(gt.iter()) {
            match (*p != 0, *g != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    /// Pixel recall TP / (TP + FN).
    pub fn recall(&self) -> Option<f64> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// One scored prediction matched (or not) against ground truth.
#[derive(Debug, Clone, Copy)]
pub struct MatchRecord {
    pub score: f32,
    pub class_id: usize,
    pub is_tp: bool,
}

/// Greedy one-to-one matching at an IoU threshold: predictions in
/// descending score order each claim the unmatched same-class GT of highest
/// IoU >= `iou_thr`.
pub fn match_detections(
    preds: &[Detection],
    gts: &[BBox],
    iou_thr: f32,
) -> (Vec<MatchRecord>, usize) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f32)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != p.bbox.class_id {
                continue;
            }
            let iou = p.bbox.iou(g);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let is_tp = match best {
            Some((gi, _)) => {
                taken[gi] = true;
                true
            }
            None => false,
        };
        records.push(MatchRecord { score: p.score, class_id: p.bbox.class_id, is_tp });
    }
    (records, gts.len())
}

/// All-point average precision for one class from match records and the
/// number of ground-truth boxes: sort by score, accumulate the
/// precision-recall curve, apply the monotone precision envelope, and sum
/// precision * recall increments.
fn ap_one_class(records: &mut Vec<MatchRecord>, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    records.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(records.len());
    for r in records.iter() {
        if r.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = tp as f64 / num_gt as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    // Monotone non-increasing precision envelope, right to left.
    let mut env = points.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i].1 = env[i].1.max(env[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in env {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// mAP at IoU 0.5: AP per class averaged over classes that have ground
/// truth. Errors if there is no ground truth at all.
pub fn ap50(records: &[MatchRecord], gt_per_class: &BTreeMap<usize, usize>) -> Result<f64> {
    let classes: Vec<usize> = gt_per_class
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&c, _)| c)
        .collect();
    if classes.is_empty() {
        return Err(Error::Metric("ap50: no ground-truth boxes".into()));
    }
    let mut sum = 0.0;
    for c in &classes {
        let mut recs: Vec<MatchRecord> =
            records.iter().filter(|r| r.class_id == *c).copied().collect();
        sum += ap_one_class(&mut recs, gt_per_class[c]);
    }
    Ok(sum / classes.len() as f64)
}

/// Fraction of ground-truth boxes matched by some prediction at IoU 0.5.
pub fn recall50(records: &[MatchRecord], total_gt: usize) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::Metric("recall50: no ground-truth boxes".into()));
    }
    let tp = records.iter().filter(|r| r.is_tp).count();
    Ok(tp as f64 / total_gt as f64)
}

/// Mean IoU over {background, foreground} from dataset-accumulated counts.
/// A class absent from both prediction and ground truth is excluded.
pub fn miou(counts: &ConfusionCounts) -> Result<f64> {
    let fg = counts.iou();
    let bg_denom = counts.tn + counts.fp + counts.fn_;
    let bg = (bg_denom > 0).then(|| counts.tn as f64 / bg_denom as f64);
    let present: Vec<f64> = [bg, fg].into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Metric("miou: no pixels".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Lane metrics from accumulated counts: (accuracy, IoU) where accuracy is
/// pixel recall TP/(TP+FN).
pub fn lane_metrics(counts: &ConfusionCounts) -> Result<(f64, f64)> {
    let acc = counts
        .recall()
        .ok_or_else(|| Error::Metric("lane_metrics: no ground-truth lane pixels".into()))?;
    let iou = counts
        .iou()
        .ok_or_else(|| Error::Metric("lane_metrics: no lane pixels".into()))?;
    Ok((acc, iou))
}

/// The full evaluation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub map50: f64,
    pub recall50: f64,
    pub da_miou: f64,
    pub ll_accuracy: f64,
    pub ll_iou: f64,
    pub images: usize,
}

impl MetricsReport {
    /// Flat `key: value` lines, fixed order and formatting, so equal reports
    /// serialize byte-identically.
    pub fn to_text(&self) -> String {
        format!(
            "det.map50: {:.6}\ndet.recall50: {:.6}\nda.miou: {:.6}\nll.accuracy: {:.6}\nll.iou: {:.6}\nimages: {}\n",
            self.map50, self.recall50, self.da_miou, self.ll_accuracy, self.ll_iou, self.images
        )
    }

    pub fn table(&self) -> String {
        format!(
            "{:<14} {:>10}\n{:-<25}\n{:<14} {:>10.4}\n{:<14} {:>10.4}\n{:<14} {:>10.4}\n{:<14} {:>10.4}\n{:<14} {:>10.4}\n{:<14} {:>10}\n",
            "metric", "value", "",
            "det mAP50", self.map50,
            "det recall50", self.recall50,
            "da mIoU", self.da_miou,
            "ll accuracy", self.ll_accuracy,
            "ll IoU", self.ll_iou,
            "images", self.images
        )
    }
}

/// Latency summary from [`benchmark`].
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkReport {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
    pub iters: usize,
    pub warmup: usize,
}

impl BenchmarkReport {
    pub fn to_text(&self) -> String {
        format!(
            "latency.median_ms: {:.3}\nlatency.mean_ms: {:.3}\nlatency.min_ms: {:.3}\nlatency.max_ms: {:.3}\nfps: {:.2}\niters: {}\nwarmup: {}\n",
            self.median_ms, self.mean_ms, self.min_ms, self.max_ms, self.fps, self.iters, self.warmup
        )
    }
}

/// Time `f` for `warmup + iters` calls, discarding the warmup; the reported
/// fps is `1000 / median_ms`.
pub fn benchmark<F: FnMut() -> Result<()>>(
    mut f: F,
    warmup: usize,
    iters: usize,
) -> Result<BenchmarkReport> {
    if iters == 0 {
        return Err(Error::Validation("benchmark: iters must be positive".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut ms: Vec<f64> = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1000.0);
    }
    let mut sorted = ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if iters % 2 == 1 {
        sorted[iters / 2]
    } else {
        (sorted[iters / 2 - 1] + sorted[iters / 2]) / 2.0
    };
    Ok(BenchmarkReport {
        median_ms: median,
        mean_ms: ms.iter().sum::<f64>() / iters as f64,
        min_ms: sorted[0],
        max_ms: sorted[iters - 1],
        fps: 1000.0 / median,
        iters,
        warmup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, score: f32) -> Detection {
        Detection { bbox: BBox { x1, y1, x2, y2, class_id: 0 }, score }
    }

    #[test]
    fn matching_greedy_one_to_one() {
        let gts = vec![
            BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0, class_id: 0 },
            BBox { x1: 20.0, y1: 0.0, x2: 30.0, y2: 10.0, class_id: 0 },
        ];
        let preds = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(1.0, 0.0, 11.0, 10.0, 0.8), // same GT already taken -> FP
            det(20.0, 0.0, 30.0, 10.0, 0.7),
        ];
        let (recs, n) = match_detections(&preds, &gts, 0.5);
        assert_eq!(n, 2);
        let flags: Vec<bool> = recs.iter().map(|r| r.is_tp).collect();
        assert_eq!(flags, vec![true, false, true]);
    }

    #[test]
    fn matching_prefers_highest_iou() {
        let gts = vec![
            BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0, class_id: 0 },
            BBox { x1: 2.0, y1: 0.0, x2: 12.0, y2: 10.0, class_id: 0 },
        ];
        // Exactly equal to the second GT: must claim it despite both passing.
        let preds = vec![det(2.0, 0.0, 12.0, 10.0, 0.9)];
        let (recs, _) = match_detections(&preds, &gts, 0.5);
        assert!(recs[0].is_tp);
        let preds2 = vec![det(2.0, 0.0, 12.0, 10.0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0.8)];
        let (recs2, _) = match_detections(&preds2, &gts, 0.5);
        assert!(recs2.iter().all(|r| r.is_tp));
    }

    #[test]
    fn matching_respects_class() {
        let gts = vec![BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0, class_id: 1 }];
        let preds = vec![det(0.0, 0.0, 10.0, 10.0, 0.9)]; // class 0
        let (recs, _) = match_detections(&preds, &gts, 0.5);
        assert!(!recs[0].is_tp);
    }

    #[test]
    fn ap50_hand_oracle_five_sixths() {
        // Scores descending: TP, FP, TP over 2 GT.
        // PR points: (0.5, 1), (0.5, 0.5), (1.0, 2/3).
        // Envelope: (0.5, 1), (0.5, 2/3), (1.0, 2/3) -> AP = 0.5*1 + 0.5*2/3 = 5/6.
        let records = vec![
            MatchRecord { score: 0.9, class_id: 0, is_tp: true },
            MatchRecord { score: 0.8, class_id: 0, is_tp: false },
            MatchRecord { score: 0.7, class_id: 0, is_tp: true },
        ];
        let mut gt = BTreeMap::new();
        gt.insert(0, 2);
        let ap = ap50(&records, &gt).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn ap50_perfect_is_one_and_empty_errors() {
        let records = vec![
            MatchRecord { score: 0.9, class_id: 0, is_tp: true },
            MatchRecord { score: 0.8, class_id: 0, is_tp: true },
        ];
        let mut gt = BTreeMap::new();
        gt.insert(0, 2);
        assert!((ap50(&records, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!(ap50(&records, &BTreeMap::new()).is_err());
        let mut zero = BTreeMap::new();
        zero.insert(0, 0usize);
        assert!(ap50(&records, &zero).is_err());
    }

    #[test]
    fn ap50_averages_over_classes() {
        // Class 0 perfect (AP 1), class 1 all missed (AP 0) -> mAP 0.5.
        let records = vec![MatchRecord { score: 0.9, class_id: 0, is_tp: true }];
        let mut gt = BTreeMap::new();
        gt.insert(0, 1);
        gt.insert(1, 1);
        assert!((ap50(&records, &gt).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn recall_counts_matched_gt() {
        let records = vec![
            MatchRecord { score: 0.9, class_id: 0, is_tp: true },
            MatchRecord { score: 0.8, class_id: 0, is_tp: false },
        ];
        assert!((recall50(&records, 4).unwrap() - 0.25).abs() < 1e-12);
        assert!(recall50(&records, 0).is_err());
    }

    fn mask_from(rows: &[&[u8]]) -> Array2<u8> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y][x])
    }

    #[test]
    fn miou_hand_oracle() {
        // pred fg = left half, gt fg = top half on 2x2:
        // fg: tp=1 fp=1 fn=1 -> 1/3; bg: tn=1 fp=1 fn=1 -> 1/3; mIoU = 1/3.
        let pred = mask_from(&[&[1, 0], &[1, 0]]);
        let gt = mask_from(&[&[1, 1], &[0, 0]]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&pred, &gt).unwrap();
        assert!((miou(&c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_excludes_absent_class() {
        // No foreground anywhere: only background contributes, mIoU = 1.
        let zero = mask_from(&[&[0, 0], &[0, 0]]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&zero, &zero).unwrap();
        assert!((miou(&c).unwrap() - 1.0).abs() < 1e-12);
        // All foreground everywhere, predicted perfectly: mIoU = 1.
        let one = mask_from(&[&[1, 1], &[1, 1]]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&one, &one).unwrap();
        assert!((miou(&c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miou_accumulates_across_images() {
        let mut c = ConfusionCounts::default();
        c.accumulate(&mask_from(&[&[1, 0]]), &mask_from(&[&[1, 1]])).unwrap();
        c.accumulate(&mask_from(&[&[0, 1]]), &mask_from(&[&[0, 0]])).unwrap();
        // fg: tp=1 fp=1 fn=1 -> 1/3; bg: tn=1 fp=1 fn=1 -> 1/3.
        assert!((miou(&c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lane_metrics_hand_oracle() {
        // pred covers all gt plus extra: acc = 1.0, iou = 2/(2+2) = 0.5.
        let pred = mask_from(&[&[1, 1, 1, 1]]);
        let gt = mask_from(&[&[1, 1, 0, 0]]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&pred, &gt).unwrap();
        let (acc, iou) = lane_metrics(&c).unwrap();
        assert!((acc - 1.0).abs() < 1e-12);
        assert!((iou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lane_metrics_no_gt_errors() {
        let pred = mask_from(&[&[0, 0]]);
        let gt = mask_from(&[&[0, 0]]);
        let mut c = ConfusionCounts::default();
        c.accumulate(&pred, &gt).unwrap();
        assert!(lane_metrics(&c).is_err());
    }

    #[test]
    fn report_text_is_stable() {
        let r = MetricsReport {
            map50: 0.5,
            recall50: 0.75,
            da_miou: 0.9,
            ll_accuracy: 0.8,
            ll_iou: 0.4,
            images: 3,
        };
        assert_eq!(r.to_text(), r.to_text());
        assert!(r.to_text().contains("det.map50: 0.500000"));
        assert!(r.to_text().contains("images: 3"));
    }

    #[test]
    fn benchmark_counts_and_fps() {
        let mut calls = 0;
        let rep = benchmark(
            || {
                calls += 1;
                std::thread::sleep(std::time::Duration::from_millis(1));
                Ok(())
            },
            3,
            5,
        )
        .unwrap();
        assert_eq!(calls, 8);
        assert_eq!(rep.iters, 5);
        assert!(rep.median_ms >= 1.0);
        assert!((rep.fps - 1000.0 / rep.median_ms).abs() < 1e-9);
        assert!(rep.min_ms <= rep.median_ms && rep.median_ms <= rep.max_ms);
    }
}
