//! Central-difference gradient verification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{margin_loss, mutual_info_loss, pairwise_distances};
use crate::matrix::Matrix;
use crate::miners::{sample_distance_weighted, Triplet};
use crate::model::{ModelDims, ModelParams, ParamGroup};

/// Relative error used throughout: `|a − n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the gradients returned by `f` against central differences of
/// its value, entry by entry, and returns the maximum relative error.
///
/// `f` maps parameter matrices to `(loss, gradients)`, one gradient per
/// parameter with matching shape.
pub fn finite_diff_check<F>(params: &[Matrix], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} gradients for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::shape("finite_diff_check", "gradient shape differs from parameter"));
        }
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let (up, _) = f(&work)?;
            work[p].data_mut()[k] = orig - eps;
            let (down, _) = f(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of the full-graph check over several seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

struct Instance {
    params: ModelParams,
    x: Matrix,
    triplets_alpha: Vec<Triplet>,
    triplets_beta: Vec<Triplet>,
    alpha: f64,
    gamma: f64,
}

struct Evaluated {
    margin: f64,
    mutual: f64,
    grads: Vec<Matrix>,
}

impl Instance {
    fn new(seed: u64) -> Result<Self> {
        let dims = ModelDims {
            input_dim: 6,
            feature_dim: 5,
            d_alpha: 4,
            d_beta: 4,
            hidden: vec![8],
        };
        let mut params = ModelParams::init(dims, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // Move the learnable margins off their init so both hinge sides are exercised.
        params.margin_beta = 0.4 + 0.8 * rand::Rng::random::<f64>(&mut rng);
        params.margin_beta_aux = 0.4 + 0.8 * rand::Rng::random::<f64>(&mut rng);
        let n = 8;
        let x = Matrix::from_vec(
            n,
            6,
            (0..n * 6).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )?;
        let classes = [0, 0, 1, 1, 2, 2, 3, 3];
        let surrogate = [0, 1, 0, 1, 0, 1, 0, 1];
        let emb = params.embed(&x)?;
        let triplets_alpha =
            sample_distance_weighted(&pairwise_distances(&emb.e_alpha), &classes, 4, 0.5, &mut rng)?;
        let triplets_beta =
            sample_distance_weighted(&pairwise_distances(&emb.e_beta), &surrogate, 4, 0.5, &mut rng)?;
        Ok(Instance {
            params,
            x,
            triplets_alpha,
            triplets_beta,
            alpha: 0.2,
            gamma: 100.0,
        })
    }

    /// Margin losses on both heads plus `γ·l_d` with reversal on both
    /// encoder outputs; returns the two loss parts and tape gradients.
    fn evaluate(&self, params: &ModelParams) -> Result<Evaluated> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(self.x.clone());
        let emb = bound.embed(&mut tape, x, true)?;
        let e_beta = emb.beta.expect("aux branch enabled");
        let la = margin_loss(&mut tape, emb.alpha, bound.margin_beta, &self.triplets_alpha, self.alpha)?;
        let lb = margin_loss(&mut tape, e_beta, bound.margin_beta_aux, &self.triplets_beta, self.alpha)?;
        let ra = tape.grad_reverse(emb.alpha);
        let rb = tape.grad_reverse(e_beta);
        let r = bound.project(&mut tape, rb)?;
        let ld = mutual_info_loss(&mut tape, ra, r)?;
        let margins = tape.add(la.node, lb.node)?;
        let weighted = tape.scale(ld, self.gamma);
        let total = tape.add(margins, weighted)?;
        let mut g = tape.backward(total)?;
        let grads = bound
            .slot_nodes()
            .into_iter()
            .map(|id| {
                let v = tape.value(id);
                g.take(id).unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()))
            })
            .collect();
        Ok(Evaluated {
            margin: la.value + lb.value,
            mutual: tape.scalar(ld),
            grads,
        })
    }
}

/// Checks every parameter gradient of the full training graph against
/// central differences of the unreversed losses.
///
/// Parameters upstream of the reversal (backbone and both heads) must carry
/// `∂l_margin − γ·∂l_d`; the projection and margins carry the plain
/// derivative.
pub fn full_graph_check(seed: u64, eps: f64) -> Result<f64> {
    let inst = Instance::new(seed)?;
    let base = inst.evaluate(&inst.params)?;
    let groups = inst.params.slot_groups();
    let mut work = inst.params.clone();
    let mut worst = 0.0f64;
    for (slot, group) in groups.iter().enumerate() {
        let sign = match group {
            ParamGroup::Projection | ParamGroup::MarginAlpha | ParamGroup::MarginAux => 1.0,
            _ => -1.0,
        };
        let len = base.grads[slot].len();
        for k in 0..len {
            let orig = work.slots()[slot][k];
            work.slots_mut()[slot][k] = orig + eps;
            let up = inst.evaluate(&work)?;
            work.slots_mut()[slot][k] = orig - eps;
            let down = inst.evaluate(&work)?;
            work.slots_mut()[slot][k] = orig;
            let numeric = (up.margin - down.margin) / (2.0 * eps)
                + sign * inst.gamma * (up.mutual - down.mutual) / (2.0 * eps);
            worst = worst.max(relative_error(base.grads[slot].data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Runs [`full_graph_check`] for each seed.
pub fn run_gradcheck(seeds: impl IntoIterator<Item = u64>, eps: f64) -> Result<GradcheckReport> {
    let per_seed = seeds
        .into_iter()
        .map(|s| full_graph_check(s, eps).map(|e| (s, e)))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = per_seed.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    Ok(GradcheckReport {
        eps,
        per_seed,
        max_rel_error,
    })
}
