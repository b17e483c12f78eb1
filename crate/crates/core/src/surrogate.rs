//! Surrogate labels: per-class standardization, clustering and label
//! switching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::group_by_label;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, ClusterModel, KMeansConfig};
use crate::matrix::Matrix;
use crate::model::ModelParams;

/// Lower bound on the per-dimension standard deviation used as divisor.
pub const STD_EPS: f64 = 1e-8;

/// Population statistics of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

/// `z_i = (x_i − μ_{y_i}) / max(σ_{y_i}, ε)` per dimension, with population
/// statistics of each class.
pub fn class_standardize(features: &Matrix, labels: &[usize]) -> Result<(Matrix, Vec<ClassStats>)> {
    if features.rows() == 0 {
        return Err(Error::invalid("cannot standardize an empty feature set"));
    }
    if labels.len() != features.rows() {
        return Err(Error::shape("class_standardize", "label count differs from rows"));
    }
    let dim = features.cols();
    let mut z = Matrix::zeros(features.rows(), dim);
    let mut stats = Vec::new();
    for (label, members) in group_by_label(labels).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let count = members.len() as f64;
        let mut mean = vec![0.0; dim];
        for &i in &members {
            mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for &i in &members {
            for (k, v) in features.row(i).iter().enumerate() {
                var[k] += (v - mean[k]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        for &i in &members {
            for (k, out) in z.row_mut(i).iter_mut().enumerate() {
                *out = (features.get(i, k) - mean[k]) / std[k].max(STD_EPS);
            }
        }
        stats.push(ClassStats {
            label,
            mean,
            std,
            count: members.len(),
        });
    }
    Ok((z, stats))
}

/// Order of rows under lexicographic comparison (index breaks ties).
pub fn canonical_order(z: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.rows()).collect();
    order.sort_by(|&a, &b| {
        z.row(a)
            .iter()
            .zip(z.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// k-means on the rows of `z` taken in canonical order, so the resulting
/// partition does not depend on how the samples happen to be ordered.
/// Assignments are reported in the original order.
pub fn cluster_canonical(z: &Matrix, c: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let order = canonical_order(z);
    let sorted = z.select_rows(&order);
    let mut model = kmeans(&sorted, c, seed, cfg)?;
    let mut assignments = vec![0; z.rows()];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = model.assignments[pos];
    }
    model.assignments = assignments;
    Ok(model)
}

/// How surrogate labels are computed from features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub clusters: usize,
    pub standardize: bool,
    pub kmeans: KMeansConfig,
}

/// Initial labeling: optionally class-standardize, then cluster.
pub fn mine_surrogate_labels(
    features: &Matrix,
    labels: &[usize],
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<ClusterModel> {
    let z = if cfg.standardize {
        class_standardize(features, labels)?.0
    } else {
        features.clone()
    };
    cluster_canonical(&z, cfg.clusters, seed, &cfg.kmeans)
}

/// Relabeling from the auxiliary embedding of `x`; standardization only
/// when `cfg.standardize` is set.
pub fn update_surrogate_labels(
    params: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<ClusterModel> {
    if !params.dims.has_aux() {
        return Err(Error::invalid("surrogate update needs an auxiliary encoder (d_beta > 0)"));
    }
    let e_beta = params.embed(x)?.e_beta;
    mine_surrogate_labels(&e_beta, labels, cfg, seed)
}

/// Label noise by pairwise swaps.
///
/// Every sample is chosen as an initiator with probability `p`. In index
/// order, each initiator not yet involved in a swap exchanges labels with a
/// uniformly drawn untouched sample of a different label, preferring
/// non-initiators. The label histogram is preserved.
pub fn switch_labels<R: Rng + ?Sized>(labels: &[usize], p: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("switch probability {p} outside [0, 1]")));
    }
    let mut out = labels.to_vec();
    let n = labels.len();
    if p == 0.0 || labels.iter().all(|&l| l == labels.first().copied().unwrap_or(0)) {
        return Ok(out);
    }
    let initiator: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
    let mut touched = vec![false; n];
    for i in 0..n {
        if !initiator[i] || touched[i] {
            continue;
        }
        let candidates = |want_initiator: bool| -> Vec<usize> {
            (0..n)
                .filter(|&j| !touched[j] && j != i && initiator[j] == want_initiator && labels[j] != labels[i])
                .collect()
        };
        let mut pool = candidates(false);
        if pool.is_empty() {
            pool = candidates(true);
        }
        if pool.is_empty() {
            continue;
        }
        let j = pool[rng.random_range(0..pool.len())];
        out.swap(i, j);
        touched[i] = true;
        touched[j] = true;
    }
    Ok(out)
}

/// Fraction of samples whose label differs between two labelings after
/// matching each new cluster to the old cluster it overlaps most.
pub fn label_churn(old: &[usize], new: &[usize]) -> f64 {
    if old.is_empty() {
        return 0.0;
    }
    let k_old = old.iter().max().map_or(0, |&m| m + 1);
    let k_new = new.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0usize; k_old]; k_new];
    for (&a, &b) in old.iter().zip(new) {
        table[b][a] += 1;
    }
    let agree: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    1.0 - agree as f64 / old.len() as f64
}
