//! Prior-box computation: k-means over ground-truth (w, h) pairs under the
//! 1 − IoU distance between origin-aligned boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ANCHORS_PER_SCALE, STRIDES};
use crate::error::{Error, Result};

/// 9 prior (w, h) pairs, area-ascending, grouped 3 per stride {8, 16, 32}.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.len() != STRIDES.len() * ANCHORS_PER_SCALE {
            return Err(Error::Validation(format!(
                "anchor set needs 9 pairs, got {}",
                pairs.len()
            )));
        }
        if pairs.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
            return Err(Error::Validation("anchor sizes must be positive".into()));
        }
        pairs.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
        Ok(AnchorSet { anchors: pairs })
    }

    /// The 3 anchors of a scale index (0 → stride 8, 2 → stride 32).
    pub fn for_scale(&self, scale_idx: usize) -> &[(f64, f64)] {
        &self.anchors[scale_idx * ANCHORS_PER_SCALE..(scale_idx + 1) * ANCHORS_PER_SCALE]
    }
}

/// 1 − IoU of two boxes anchored at the origin.
pub fn iou_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    1.0 - inter / union
}

/// Mean 1 − IoU from each dim to its nearest centroid.
pub fn mean_assignment_distance(dims: &[(f64, f64)], centroids: &[(f64, f64)]) -> f64 {
    dims.iter()
        .map(|&d| {
            centroids
                .iter()
                .map(|&c| iou_distance(d, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / dims.len() as f64
}

fn nearest(dim: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = iou_distance(dim, c);
        // Ties break toward the lowest index.
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding under the IoU distance; lowest index wins ties.
fn kmeans_pp_init(dims: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(dims[rng.gen_range(0..dims.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = dims
            .iter()
            .map(|&d| {
                let dd = centroids
                    .iter()
                    .map(|&c| iou_distance(d, c))
                    .fold(f64::INFINITY, f64::min);
                dd * dd
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All points already covered: reuse an arbitrary point.
            centroids.push(dims[centroids.len() % dims.len()]);
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = 0;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
            pick = i;
        }
        centroids.push(dims[pick]);
    }
    centroids
}

/// Cluster box dimensions into `k` prior anchors.
///
/// Deterministic given `seed`. Iteration stops when assignments are stable or
/// after 300 rounds; empty clusters are reseeded with the point farthest from
/// its current centroid.
pub fn kmeans_anchors(dims: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    kmeans_centroids(dims, k, seed).and_then(AnchorSet::from_pairs)
}

/// The raw k-means, usable for any `k` (the anchor-set wrapper requires 9).
pub fn kmeans_centroids(dims: &[(f64, f64)], k: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if dims.len() < k {
        return Err(Error::Validation(format!(
            "need at least {k} boxes, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
        return Err(Error::Validation("box dimensions must be positive".into()));
    }
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &d in dims {
        if !distinct.contains(&d) {
            distinct.push(d);
        }
    }
    if distinct.len() < k {
        return Err(Error::Validation(format!(
            "need at least {k} distinct box dimensions, got {}",
            distinct.len()
        )));
    }

    // Permutation invariance: cluster over sorted input.
    let mut sorted = dims.to_vec();
    sorted.sort_by(|a, b| {
        (a.0 * a.1, a.0)
            .partial_cmp(&(b.0 * b.1, b.0))
            .unwrap()
    });

    // Restart Lloyd's algorithm from several seeded kmeans++ initializations
    // and keep the clustering with the lowest mean IoU distance; a single run
    // can settle in a poor local optimum.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<(f64, f64)>)> = None;
    for _ in 0..10 {
        let centroids = kmeans_single(&sorted, k, &mut rng);
        let d = mean_assignment_distance(&sorted, &centroids);
        if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
            best = Some((d, centroids));
        }
    }
    Ok(best.unwrap().1)
}

fn kmeans_single(sorted: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = kmeans_pp_init(sorted, k, rng);
    let mut assignment = vec![usize::MAX; sorted.len()];
    for _ in 0..300 {
        let new_assignment: Vec<usize> =
            sorted.iter().map(|&d| nearest(d, &centroids)).collect();
        if new_assignment == assignment {
            break;
        }
        assignment = new_assignment;
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for (&d, &a) in sorted.iter().zip(assignment.iter()) {
            sums[a].0 += d.0;
            sums[a].1 += d.1;
            sums[a].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(sums.iter()) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        // Reseed empty clusters with the point farthest from its centroid.
        for ci in 0..k {
            if sums[ci].2 == 0 {
                let far = sorted
                    .iter()
                    .enumerate()
                    .max_by(|(_, &a), (_, &b)| {
                        iou_distance(a, centroids[nearest(a, &centroids)])
                            .partial_cmp(&iou_distance(b, centroids[nearest(b, &centroids)]))
                            .unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[ci] = sorted[far];
            }
        }
    }
    centroids
}
