//! Metric-learning losses and the encoder decorrelation loss.
//!
//! Distances follow two conventions: the triplet loss and the miners work on
//! *squared* Euclidean distances, the margin loss on plain Euclidean
//! distances. Loss gradients are always taken from direct row differences,
//! so they are exact for any input, unit-norm or not.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::miners::Triplet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    TripletSemihard,
    Margin,
    ProxyNca,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::TripletSemihard => "triplet-semihard",
            LossKind::Margin => "margin",
            LossKind::ProxyNca => "proxynca",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet-semihard" | "triplet" | "semihard" => Ok(LossKind::TripletSemihard),
            "margin" => Ok(LossKind::Margin),
            "proxynca" | "proxy-nca" => Ok(LossKind::ProxyNca),
            other => Err(Error::invalid(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Hinge margin `m` of the triplet loss (squared distances).
    pub triplet_margin: f64,
    /// Fixed margin `α` of the margin loss.
    pub margin_alpha: f64,
    /// Weight `γ` of the decorrelation loss.
    pub gamma: f64,
    /// Lower clip `λ` on the sphere density used by distance-weighted sampling.
    pub dw_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Margin,
            triplet_margin: 0.2,
            margin_alpha: 0.2,
            gamma: 3.0,
            dw_clip: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.triplet_margin > 0.0
            && self.margin_alpha > 0.0
            && self.gamma >= 0.0
            && self.dw_clip > 0.0;
        if !ok || !self.gamma.is_finite() {
            return Err(Error::invalid(format!(
                "loss config out of range: m={}, alpha={}, gamma={}, lambda={}",
                self.triplet_margin, self.margin_alpha, self.gamma, self.dw_clip
            )));
        }
        Ok(())
    }
}

/// Squared Euclidean distances between all rows of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    d: Matrix,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d.get(i, j)
    }

    pub fn len(&self) -> usize {
        self.d.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.rows() == 0
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.d
    }
}

/// `d[i][j] = ‖e_i‖² + ‖e_j‖² − 2⟨e_i, e_j⟩`, clamped at zero, exact zero
/// diagonal, exactly symmetric.
pub fn pairwise_distances(e: &Matrix) -> DistanceMatrix {
    let n = e.rows();
    let sq: Vec<f64> = e.row_iter().map(|r| crate::matrix::dot(r, r)).collect();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (sq[i] + sq[j] - 2.0 * crate::matrix::dot(e.row(i), e.row(j))).max(0.0);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    DistanceMatrix { d }
}

/// `max(d_ij − d_ik + m, 0)`
pub fn triplet_loss(d_ij: f64, d_ik: f64, m: f64) -> f64 {
    (d_ij - d_ik + m).max(0.0)
}

/// Positive and negative hinge terms of the margin loss:
/// `((α + d_ap − β)₊, (α + β − d_an)₊)`.
pub fn margin_terms(d_ap: f64, d_an: f64, alpha: f64, beta: f64) -> (f64, f64) {
    ((alpha + d_ap - beta).max(0.0), (alpha + beta - d_an).max(0.0))
}

/// Scalar loss recorded on a tape, with bookkeeping for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub node: NodeId,
    pub value: f64,
    /// Number of hinge terms (or samples) that contributed.
    pub active: usize,
    /// Set when there was nothing to average over; the loss is then 0.
    pub empty: bool,
}

fn check_triplets(triplets: &[Triplet], n: usize) -> Result<()> {
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
    {
        return Err(Error::invalid(format!(
            "triplet {t:?} out of range for batch of {n}"
        )));
    }
    Ok(())
}

/// Adds `scale · ∂‖a − b‖²/∂a` to row `ia` and its negation to row `ib`.
fn add_sq_dist_grad(g: &mut Matrix, e: &Matrix, ia: usize, ib: usize, scale: f64) {
    for k in 0..e.cols() {
        let diff = 2.0 * scale * (e.get(ia, k) - e.get(ib, k));
        g.set(ia, k, g.get(ia, k) + diff);
        g.set(ib, k, g.get(ib, k) - diff);
    }
}

/// Mean triplet hinge over the given triplets, squared distances.
pub fn triplet_loss_on_tape(
    tape: &mut Tape,
    e: NodeId,
    triplets: &[Triplet],
    margin: f64,
) -> Result<LossOutput> {
    let emb = tape.value(e).clone();
    check_triplets(triplets, emb.rows())?;
    let mut grad = Matrix::zeros(emb.rows(), emb.cols());
    let mut total = 0.0;
    let mut active = 0;
    let scale = if triplets.is_empty() {
        0.0
    } else {
        1.0 / triplets.len() as f64
    };
    for t in triplets {
        let d_ap = squared_distance(emb.row(t.anchor), emb.row(t.positive));
        let d_an = squared_distance(emb.row(t.anchor), emb.row(t.negative));
        let l = triplet_loss(d_ap, d_an, margin);
        if l > 0.0 {
            total += l;
            active += 1;
            add_sq_dist_grad(&mut grad, &emb, t.anchor, t.positive, scale);
            add_sq_dist_grad(&mut grad, &emb, t.anchor, t.negative, -scale);
        }
    }
    let value = total * scale;
    let node = tape.scalar_op(value, vec![(e, grad)])?;
    Ok(LossOutput {
        node,
        value,
        active,
        empty: triplets.is_empty(),
    })
}

/// Value and gradients of the margin loss, computed off-tape.
#[derive(Clone, Debug)]
pub struct MarginEval {
    pub value: f64,
    pub grad_e: Matrix,
    pub grad_beta: f64,
    pub active_pos: usize,
    pub active_neg: usize,
}

/// Mean over non-zero hinge terms of `(α + d_ap − β)₊ + (α + β − d_an)₊`
/// with plain Euclidean distances.
pub fn margin_loss_eval(e: &Matrix, triplets: &[Triplet], alpha: f64, beta: f64) -> Result<MarginEval> {
    check_triplets(triplets, e.rows())?;
    // (i, j, sign) contributions collected first: the normalizer depends on
    // the final count of active terms.
    let mut total = 0.0;
    let mut active_pos = 0;
    let mut active_neg = 0;
    let mut contribs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for t in triplets {
        let d_ap = squared_distance(e.row(t.anchor), e.row(t.positive)).sqrt();
        let d_an = squared_distance(e.row(t.anchor), e.row(t.negative)).sqrt();
        let (pos, neg) = margin_terms(d_ap, d_an, alpha, beta);
        if pos > 0.0 {
            total += pos;
            active_pos += 1;
            contribs.push((t.anchor, t.positive, d_ap, 1.0));
        }
        if neg > 0.0 {
            total += neg;
            active_neg += 1;
            contribs.push((t.anchor, t.negative, d_an, -1.0));
        }
    }
    let count = active_pos + active_neg;
    let mut grad_e = Matrix::zeros(e.rows(), e.cols());
    if count == 0 {
        return Ok(MarginEval {
            value: 0.0,
            grad_e,
            grad_beta: 0.0,
            active_pos,
            active_neg,
        });
    }
    let inv = 1.0 / count as f64;
    for (i, j, d, sign) in contribs {
        // ∂‖e_i − e_j‖/∂e_i = (e_i − e_j)/d; undefined at d = 0, where we use 0.
        if d <= 1e-12 {
            continue;
        }
        let s = sign * inv / d;
        for k in 0..e.cols() {
            let diff = s * (e.get(i, k) - e.get(j, k));
            grad_e.set(i, k, grad_e.get(i, k) + diff);
            grad_e.set(j, k, grad_e.get(j, k) - diff);
        }
    }
    Ok(MarginEval {
        value: total * inv,
        grad_e,
        grad_beta: (active_neg as f64 - active_pos as f64) * inv,
        active_pos,
        active_neg,
    })
}

/// Margin loss on the tape; `beta` is the learnable boundary (a 1×1 node).
pub fn margin_loss(
    tape: &mut Tape,
    e: NodeId,
    beta: NodeId,
    triplets: &[Triplet],
    alpha: f64,
) -> Result<LossOutput> {
    let eval = margin_loss_eval(tape.value(e), triplets, alpha, tape.scalar(beta))?;
    let node = tape.scalar_op(
        eval.value,
        vec![(e, eval.grad_e), (beta, Matrix::scalar(eval.grad_beta))],
    )?;
    Ok(LossOutput {
        node,
        value: eval.value,
        active: eval.active_pos + eval.active_neg,
        empty: eval.active_pos + eval.active_neg == 0,
    })
}

/// ProxyNCA: mean over samples of `d(e, p_y) + log Σ_{z≠y} exp(−d(e, p_z))`
/// with squared distances to the row-normalized proxies.
///
/// `proxies` is the raw learnable parameter node; it is normalized here.
pub fn proxynca_loss(
    tape: &mut Tape,
    e: NodeId,
    proxies: NodeId,
    labels: &[usize],
) -> Result<LossOutput> {
    let n_proxies = tape.value(proxies).rows();
    if labels.len() != tape.value(e).rows() {
        return Err(Error::shape(
            "proxynca",
            format!("{} labels for {} embeddings", labels.len(), tape.value(e).rows()),
        ));
    }
    if tape.value(proxies).cols() != tape.value(e).cols() {
        return Err(Error::shape("proxynca", "proxy and embedding widths differ"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_proxies) {
        return Err(Error::invalid(format!(
            "label {bad} has no proxy ({n_proxies} proxies)"
        )));
    }
    if n_proxies < 2 {
        return Err(Error::invalid("proxynca needs at least two proxies"));
    }
    let pn = tape.l2_normalize(proxies);
    let (value, grad_e, grad_p) = proxynca_eval(tape.value(e), tape.value(pn), labels);
    let node = tape.scalar_op(value, vec![(e, grad_e), (pn, grad_p)])?;
    Ok(LossOutput {
        node,
        value,
        active: labels.len(),
        empty: labels.is_empty(),
    })
}

/// Value and gradients w.r.t. embeddings and (already normalized) proxies.
pub fn proxynca_eval(e: &Matrix, p: &Matrix, labels: &[usize]) -> (f64, Matrix, Matrix) {
    let n = e.rows();
    let mut grad_e = Matrix::zeros(e.rows(), e.cols());
    let mut grad_p = Matrix::zeros(p.rows(), p.cols());
    if n == 0 {
        return (0.0, grad_e, grad_p);
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let d: Vec<f64> = p.row_iter().map(|pr| squared_distance(e.row(i), pr)).collect();
        let max_neg = d
            .iter()
            .enumerate()
            .filter(|(z, _)| *z != y)
            .map(|(_, v)| -v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = d
            .iter()
            .enumerate()
            .filter(|(z, _)| *z != y)
            .map(|(_, v)| (-v - max_neg).exp())
            .sum();
        total += d[y] + max_neg + sum.ln();
        // ∂/∂d_y = 1, ∂/∂d_z = −softmax_z(−d), z ≠ y.
        for (z, &dz) in d.iter().enumerate() {
            let w = if z == y {
                1.0
            } else {
                -(-dz - max_neg).exp() / sum
            };
            let s = 2.0 * w * inv;
            for k in 0..e.cols() {
                let diff = s * (e.get(i, k) - p.get(z, k));
                grad_e.set(i, k, grad_e.get(i, k) + diff);
                grad_p.set(z, k, grad_p.get(z, k) - diff);
            }
        }
    }
    (total * inv, grad_e, grad_p)
}

/// Initial proxies: the normalized mean embedding of each class. A class
/// with no samples gets `e₁`.
pub fn init_proxies(e: &Matrix, labels: &[usize], num_classes: usize) -> Matrix {
    let mut sums = Matrix::zeros(num_classes, e.cols());
    for (i, &y) in labels.iter().enumerate() {
        for (s, v) in sums.row_mut(y).iter_mut().zip(e.row(i)) {
            *s += v;
        }
    }
    sums.l2_normalize_rows().0
}

/// Decorrelation loss between class embeddings and projected auxiliary
/// embeddings: per sample `−Σ_k (a_k · r_k)²`, averaged over the batch.
///
/// Callers pass nodes that already went through [`Tape::grad_reverse`], so
/// minimizing this drives the encoders apart while the projection tries to
/// align them.
pub fn mutual_info_loss(tape: &mut Tape, e_alpha: NodeId, r_beta: NodeId) -> Result<NodeId> {
    let n = tape.value(e_alpha).rows();
    let prod = tape.mul(e_alpha, r_beta)?;
    let sq = tape.mul(prod, prod)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, -1.0 / n.max(1) as f64))
}

/// Off-tape value of [`mutual_info_loss`].
pub fn mutual_info_value(a: &Matrix, r: &Matrix) -> Result<f64> {
    let prod = a.zip_map(r, |x, y| (x * y) * (x * y))?;
    Ok(-prod.sum() / a.rows().max(1) as f64)
}

/// `l_α + l_β + γ·l_d`
pub fn total_loss(l_alpha: f64, l_beta: f64, l_d: f64, gamma: f64) -> f64 {
    l_alpha + l_beta + gamma * l_d
}

/// Loss of one alternating step: `l_branch + γ·l_d`.
pub fn step_loss(l_branch: f64, l_d: f64, gamma: f64) -> f64 {
    l_branch + gamma * l_d
}
