//! Triplet selection: semihard mining and distance-weighted sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DistanceMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// For every (anchor, positive) pair, the negative with the smallest
/// `d_an > d_ap`; if no negative lies beyond the positive, the farthest
/// negative. Ties go to the lowest index. A single-class batch yields no
/// triplets.
pub fn mine_semihard(dists: &DistanceMatrix, labels: &[usize]) -> Vec<Triplet> {
    let n = dists.len().min(labels.len());
    let mut out = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if negatives.is_empty() {
            continue;
        }
        for p in (0..n).filter(|&j| j != a && labels[j] == labels[a]) {
            let d_ap = dists.get(a, p);
            let mut semihard: Option<(usize, f64)> = None;
            let mut hardest: Option<(usize, f64)> = None;
            for &k in &negatives {
                let d = dists.get(a, k);
                if d > d_ap && semihard.is_none_or(|(_, best)| d < best) {
                    semihard = Some((k, d));
                }
                if hardest.is_none_or(|(_, best)| d > best) {
                    hardest = Some((k, d));
                }
            }
            let (negative, _) = semihard.or(hardest).expect("negatives non-empty");
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    out
}

/// `ln q(d)` for the density of distances between two independent uniform
/// points on the unit sphere in `dim` dimensions:
/// `q(d) = d^{dim−2} (1 − d²/4)^{(dim−3)/2} / Z` on `[0, 2]`,
/// `Z = 2^{dim−2} B((dim−1)/2, (dim−1)/2)`.
pub fn log_sphere_distance_density(d: f64, dim: usize) -> f64 {
    let n = dim as f64;
    let half = (n - 1.0) / 2.0;
    let log_z = (n - 2.0) * std::f64::consts::LN_2 + 2.0 * libm::lgamma(half) - libm::lgamma(2.0 * half);
    let radial = if dim == 2 { 0.0 } else { (n - 2.0) * d.ln() };
    let inner = 1.0 - d * d / 4.0;
    let angular = if dim == 3 {
        0.0
    } else if inner <= 0.0 {
        f64::NEG_INFINITY
    } else {
        (n - 3.0) / 2.0 * inner.ln()
    };
    radial + angular - log_z
}

/// Unnormalized selection weight `min(1/q(d), 1/λ)` of a negative at
/// Euclidean distance `d`.
pub fn negative_weight(d: f64, dim: usize, clip: f64) -> f64 {
    let lq = log_sphere_distance_density(d, dim);
    let lq = if lq.is_nan() { f64::NEG_INFINITY } else { lq };
    (-(lq.max(clip.ln()))).exp()
}

/// Exact probability of selecting each negative for `anchor`, as
/// `(index, probability)` pairs in index order.
pub fn negative_distribution(
    dists: &DistanceMatrix,
    labels: &[usize],
    anchor: usize,
    dim: usize,
    clip: f64,
) -> Vec<(usize, f64)> {
    let weights: Vec<(usize, f64)> = (0..labels.len())
        .filter(|&j| labels[j] != labels[anchor])
        .map(|j| (j, negative_weight(dists.get(anchor, j).sqrt(), dim, clip)))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    weights.into_iter().map(|(j, w)| (j, w / total)).collect()
}

/// One triplet per anchor: a uniform positive from the anchor's class and a
/// negative drawn with probability proportional to [`negative_weight`].
/// Anchors without a positive or without any negative are skipped.
pub fn sample_distance_weighted<R: Rng + ?Sized>(
    dists: &DistanceMatrix,
    labels: &[usize],
    dim: usize,
    clip: f64,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if dim < 3 {
        return Err(Error::invalid(format!(
            "distance-weighted sampling needs embedding dim >= 3, got {dim}"
        )));
    }
    if !(clip > 0.0) {
        return Err(Error::invalid("distance-weighted clip must be > 0"));
    }
    let n = dists.len().min(labels.len());
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let probs = negative_distribution(dists, &labels[..n], a, dim, clip);
        if probs.is_empty() {
            continue;
        }
        let positive = positives[rng.random_range(0..positives.len())];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut negative = probs[probs.len() - 1].0;
        for &(j, p) in &probs {
            acc += p;
            if u < acc {
                negative = j;
                break;
            }
        }
        out.push(Triplet {
            anchor: a,
            positive,
            negative,
        });
    }
    Ok(out)
}
