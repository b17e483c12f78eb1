//! Seeded k-means: k-means++ initialization followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent seedings; the run with the lowest inertia wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

/// Result of clustering: centroids, zero-based assignments and inertia.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `C × dim`
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    /// Writes centroids and assignments as one CSV. Columns are
    /// `kind,index,cluster,x0..x{dim-1}`; `kind` is `centroid` (coordinates
    /// filled) or `sample` (coordinates empty).
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let dim = self.centroids.cols();
        let mut header = vec!["kind".to_string(), "index".into(), "cluster".into()];
        header.extend((0..dim).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for (c, row) in self.centroids.row_iter().enumerate() {
            let mut rec = vec!["centroid".to_string(), c.to_string(), c.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        for (i, &c) in self.assignments.iter().enumerate() {
            let mut rec = vec!["sample".to_string(), i.to_string(), c.to_string()];
            rec.extend(std::iter::repeat_n(String::new(), dim));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
pub fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.row_iter().enumerate() {
        let d = squared_distance(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(z: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = z
        .row_iter()
        .map(|p| {
            let (c, d) = nearest(p, centroids);
            inertia += d;
            c
        })
        .collect();
    (labels, inertia)
}

/// Inertia of a fixed assignment under the given centroids.
pub fn inertia_of(z: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    z.row_iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, centroids.row(c)))
        .sum()
}

fn plus_plus_init(z: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = z.rows();
    let mut centroids = Matrix::zeros(c, z.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(z.row(first));
    let mut d2: Vec<f64> = z.row_iter().map(|p| squared_distance(p, z.row(first))).collect();
    for k in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(k).copy_from_slice(z.row(pick));
        for (i, p) in z.row_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, z.row(pick)));
        }
    }
    centroids
}

/// Cluster means for `assignments`; empty clusters take over the point
/// farthest from its own centroid, drawn from clusters with at least two
/// members.
fn update_centroids(z: &Matrix, c: usize, assignments: &mut [usize], previous: &Matrix) -> Matrix {
    let dim = z.cols();
    let means = |assignments: &[usize]| {
        let mut sums = Matrix::zeros(c, dim);
        let mut counts = vec![0usize; c];
        for (p, &k) in z.row_iter().zip(assignments.iter()) {
            counts[k] += 1;
            for (s, v) in sums.row_mut(k).iter_mut().zip(p) {
                *s += v;
            }
        }
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                sums.row_mut(k).iter_mut().for_each(|s| *s *= inv);
            } else {
                sums.row_mut(k).copy_from_slice(previous.row(k));
            }
        }
        (sums, counts)
    };
    let (mut centroids, mut counts) = means(assignments);
    while let Some(empty) = counts.iter().position(|&n| n == 0) {
        let donor = (0..z.rows())
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, squared_distance(z.row(i), centroids.row(assignments[i]))))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = donor else { break };
        assignments[i] = empty;
        (centroids, counts) = means(assignments);
    }
    centroids
}

/// Clusters the rows of `z` into `c` groups, keeping the best of
/// `cfg.restarts` seedings (the first one on equal inertia).
pub fn kmeans(z: &Matrix, c: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let m = lloyd(z, c, &mut rng, cfg)?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(z: &Matrix, c: usize, rng: &mut ChaCha8Rng, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let n = z.rows();
    if c == 0 {
        return Err(Error::invalid("number of clusters must be >= 1"));
    }
    if c > n {
        return Err(Error::invalid(format!("{c} clusters requested for {n} points")));
    }
    if !z.is_finite() {
        return Err(Error::invalid("k-means input contains non-finite values"));
    }
    let mut centroids = plus_plus_init(z, c, rng);
    let (mut assignments, mut inertia) = assign(z, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let updated = update_centroids(z, c, &mut assignments, &centroids);
        let shift = centroids
            .row_iter()
            .zip(updated.row_iter())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let (next, next_inertia) = assign(z, &centroids);
        let changed = next != assignments;
        assignments = next;
        inertia = next_inertia;
        history.push(inertia);
        if !changed || shift < cfg.tol {
            break;
        }
    }
    Ok(ClusterModel {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    })
}
