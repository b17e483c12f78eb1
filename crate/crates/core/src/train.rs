//! The alternating training loop: a class step and an auxiliary step per
//! batch, coupled through the decorrelation loss, with scheduled surrogate
//! relabeling.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::config::{InitialSpace, TrainConfig};
use crate::data::{next_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{intra_class_variance_ratio, nmi, recall_at_k, EncoderTag, EvalReport, InterClassNorm};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::losses::{
    init_proxies, margin_loss, mutual_info_loss, pairwise_distances, proxynca_loss,
    triplet_loss_on_tape, LossConfig, LossKind, LossOutput,
};
use crate::matrix::Matrix;
use crate::miners::{mine_semihard, sample_distance_weighted, Triplet};
use crate::model::{ModelDims, ModelParams, ParamGroup};
use crate::optim::{Adam, AdamConfig};
use crate::surrogate::{
    label_churn, mine_surrogate_labels, switch_labels, update_surrogate_labels, SurrogateConfig,
};

/// Floor applied to the learnable margins after each update.
const MARGIN_FLOOR: f64 = 1e-3;

const STREAM_BATCH: u64 = 1;
const STREAM_MINE: u64 = 2;
const STREAM_SWITCH: u64 = 3;

/// Which encoder a step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Alpha,
    Beta,
}

/// Per-step diagnostics.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub branch_loss: f64,
    pub mutual_info: Option<f64>,
    /// Parameter groups that received a gradient.
    pub touched: Vec<ParamGroup>,
    pub empty_batch: bool,
}

/// Learnable class proxies for ProxyNCA and their optimizer.
#[derive(Clone, Debug)]
pub struct Proxies {
    pub values: Matrix,
    adam: Adam,
}

impl Proxies {
    pub fn new(values: Matrix, lr: f64) -> Self {
        Proxies {
            values,
            adam: Adam::new(AdamConfig::with_lr(lr)),
        }
    }
}

/// Optimizer and proxy state for one branch.
#[derive(Clone, Debug)]
pub struct BranchState {
    adam: Adam,
    pub proxies: Option<Proxies>,
}

impl BranchState {
    pub fn new(lr: f64) -> Self {
        BranchState {
            adam: Adam::new(AdamConfig::with_lr(lr)),
            proxies: None,
        }
    }
}

fn mine(
    kind: LossKind,
    loss: &LossConfig,
    e: &Matrix,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    match kind {
        LossKind::TripletSemihard => Ok(mine_semihard(&pairwise_distances(e), labels)),
        LossKind::Margin => sample_distance_weighted(&pairwise_distances(e), labels, e.cols(), loss.dw_clip, rng),
        LossKind::ProxyNca => Ok(Vec::new()),
    }
}

fn branch_loss(
    tape: &mut Tape,
    loss: &LossConfig,
    e: NodeId,
    margin: NodeId,
    proxies: Option<NodeId>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    let emb = tape.value(e).clone();
    let triplets = mine(loss.kind, loss, &emb, labels, rng)?;
    match loss.kind {
        LossKind::TripletSemihard => triplet_loss_on_tape(tape, e, &triplets, loss.triplet_margin),
        LossKind::Margin => margin_loss(tape, e, margin, &triplets, loss.margin_alpha),
        LossKind::ProxyNca => {
            let p = proxies.ok_or_else(|| Error::invalid("proxynca step without proxies"))?;
            proxynca_loss(tape, e, p, labels)
        }
    }
}

/// One optimization step of `branch` on the batch `x` with `labels`:
/// minimizes `l_branch + γ·l_d`, where `l_d` sees both encoder outputs
/// through gradient reversal. Only the given branch's loss contributes.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    state: &mut BranchState,
    branch: Branch,
    x: &Matrix,
    labels: &[usize],
    loss: &LossConfig,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let use_mi = gamma > 0.0;
    if (use_mi || branch == Branch::Beta) && !params.dims.has_aux() {
        return Err(Error::invalid("auxiliary step or decorrelation without auxiliary encoder"));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xn = tape.leaf(x.clone());
    let emb = bound.embed(&mut tape, xn, use_mi || branch == Branch::Beta)?;
    let (e, margin) = match branch {
        Branch::Alpha => (emb.alpha, bound.margin_beta),
        Branch::Beta => (emb.beta.expect("beta embedded"), bound.margin_beta_aux),
    };
    let proxy_node = state.proxies.as_ref().map(|p| tape.leaf(p.values.clone()));
    let l = branch_loss(&mut tape, loss, e, margin, proxy_node, labels, rng)?;
    let mut total = l.node;
    let mut mi_value = None;
    if use_mi {
        let ra = tape.grad_reverse(emb.alpha);
        let rb = tape.grad_reverse(emb.beta.expect("beta embedded"));
        let r = bound.project(&mut tape, rb)?;
        let ld = mutual_info_loss(&mut tape, ra, r)?;
        mi_value = Some(tape.scalar(ld));
        let weighted = tape.scale(ld, gamma);
        total = tape.add(total, weighted)?;
    }
    let grads = tape.backward(total)?;
    let nodes = bound.slot_nodes();
    let groups = params.slot_groups();
    let slot_grads: Vec<Option<&[f64]>> = nodes.iter().map(|&id| grads.get(id).map(|g| g.data())).collect();
    let mut touched: Vec<ParamGroup> = groups
        .iter()
        .zip(&slot_grads)
        .filter(|(_, g)| g.is_some())
        .map(|(&grp, _)| grp)
        .collect();
    touched.dedup();
    state.adam.step(params.slots_mut(), &slot_grads)?;
    params.margin_beta = params.margin_beta.max(MARGIN_FLOOR);
    params.margin_beta_aux = params.margin_beta_aux.max(MARGIN_FLOOR);
    if let (Some(p), Some(id)) = (state.proxies.as_mut(), proxy_node) {
        if let Some(g) = grads.get(id) {
            p.adam.step(vec![p.values.data_mut()], &[Some(g.data())])?;
        }
    }
    Ok(StepStats {
        branch_loss: l.value,
        mutual_info: mi_value,
        touched,
        empty_batch: l.empty,
    })
}

/// Metrics for one split: `alpha`, and when present `beta` and their
/// concatenation. NMI clusters each embedding into as many groups as the
/// split has classes.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    ks: &[usize],
    norm: InterClassNorm,
    kmeans_cfg: &KMeansConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let emb = params.embed(&ds.features)?;
    let mut views = vec![(EncoderTag::Alpha, emb.e_alpha.clone())];
    if params.dims.has_aux() {
        views.push((EncoderTag::Beta, emb.e_beta.clone()));
        views.push((EncoderTag::Concatenated, emb.e_alpha.hstack(&emb.e_beta)?));
    }
    views
        .into_iter()
        .map(|(tag, e)| evaluate_embedding(tag, &e, &ds.labels, ks, norm, kmeans_cfg, seed))
        .collect()
}

/// Metrics of a precomputed embedding.
pub fn evaluate_embedding(
    encoder: EncoderTag,
    e: &Matrix,
    labels: &[usize],
    ks: &[usize],
    norm: InterClassNorm,
    kmeans_cfg: &KMeansConfig,
    seed: u64,
) -> Result<EvalReport> {
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let clusters = kmeans(e, num_classes.min(e.rows()).max(1), seed, kmeans_cfg)?;
    Ok(EvalReport {
        encoder,
        recall_at: recall_at_k(e, labels, ks)?,
        nmi: nmi(&clusters.assignments, labels)?,
        intra_class_variance_ratio: intra_class_variance_ratio(e, labels, norm)?.ratio,
    })
}

/// Quality of a surrogate labeling against known factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRecord {
    /// NMI between the mined labels and the class labels.
    pub nmi_class: f64,
    pub nmi_shared: Option<f64>,
    /// Fraction of labels changed relative to the previous labeling.
    pub churn: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_alpha: f64,
    pub l_beta: Option<f64>,
    pub l_d: Option<f64>,
    /// Batches for which the miner returned nothing.
    pub empty_batches: usize,
    /// Set when surrogate labels were refreshed after this epoch.
    pub relabel: Option<ClusteringRecord>,
    pub train_eval: Option<Vec<EvalReport>>,
    pub test_eval: Option<Vec<EvalReport>>,
    pub wall_time_s: f64,
}

/// Per-epoch log of a run, written as JSON lines.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub initial_clustering: Option<ClusteringRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LogLine {
    InitialClustering(ClusteringRecord),
    Epoch(EpochRecord),
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .initial_clustering
            .iter()
            .map(|c| LogLine::InitialClustering(c.clone()))
            .chain(self.epochs.iter().map(|e| LogLine::Epoch(e.clone())));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    /// The log with wall times zeroed; identical for identical runs.
    pub fn fingerprint(&self) -> String {
        let mut copy = self.clone();
        copy.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        copy.to_jsonl()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = RunLog::default();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            match parsed {
                LogLine::InitialClustering(c) => log.initial_clustering = Some(c),
                LogLine::Epoch(e) => log.epochs.push(e),
            }
        }
        Ok(log)
    }

    /// Test-split report for `encoder` after the final epoch.
    pub fn final_test(&self, encoder: EncoderTag) -> Option<&EvalReport> {
        self.epochs
            .iter()
            .rev()
            .find_map(|e| e.test_eval.as_ref())
            .and_then(|r| r.iter().find(|r| r.encoder == encoder))
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: RunLog,
    pub surrogate: Vec<usize>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn clustering_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (round as u64 + 1)
}

/// NMI scores use the mined labels; churn compares the labels actually
/// trained on (after switching) with the previous ones.
fn clustering_record(
    mined: &[usize],
    used: &[usize],
    ds: &Dataset,
    previous: Option<&[usize]>,
) -> Result<ClusteringRecord> {
    Ok(ClusteringRecord {
        nmi_class: nmi(mined, &ds.labels)?,
        nmi_shared: ds.shared.as_ref().map(|s| nmi(mined, s)).transpose()?,
        churn: previous.map(|p| label_churn(p, used)),
    })
}

fn check_finite(v: f64, what: &'static str, epoch: usize, iteration: usize, params: &ModelParams) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            iteration,
            what,
            params: Box::new(params.clone()),
        })
    }
}

/// Model dimensions implied by a config and an input width.
pub fn model_dims(cfg: &TrainConfig, input_dim: usize) -> ModelDims {
    ModelDims {
        input_dim,
        feature_dim: cfg.feature_dim,
        d_alpha: cfg.d_alpha,
        d_beta: cfg.d_beta,
        hidden: cfg.hidden.clone(),
    }
}

/// Trains from a fresh initialization.
pub fn train(cfg: &TrainConfig, train_ds: &Dataset, test_ds: Option<&Dataset>) -> Result<TrainOutcome> {
    let params = ModelParams::init(model_dims(cfg, train_ds.input_dim()), cfg.seed)?;
    train_from(cfg, params, train_ds, test_ds)
}

/// Trains starting from `params`.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: ModelParams,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let class_index = train_ds.class_index();
    cfg.batch.validate(class_index.iter().filter(|c| !c.is_empty()).count())?;
    let ab = cfg.ablation;
    let gamma = cfg.effective_gamma();
    let surrogate_cfg = |standardize| SurrogateConfig {
        clusters: cfg.clusters,
        standardize,
        kmeans: cfg.kmeans.clone(),
    };

    let mut rng_batch = stream(cfg.seed, STREAM_BATCH);
    let mut rng_mine = stream(cfg.seed, STREAM_MINE);
    let mut rng_switch = stream(cfg.seed, STREAM_SWITCH);
    let mut alpha = BranchState::new(cfg.learning_rate);
    let mut beta = BranchState::new(cfg.learning_rate);
    let mut log = RunLog::default();
    let mut round = 0;

    let mut surrogate = vec![0; train_ds.len()];
    if ab.clustering {
        let space = match cfg.initial_space {
            InitialSpace::Features => params.features(&train_ds.features)?,
            InitialSpace::Input => train_ds.features.clone(),
        };
        let m = mine_surrogate_labels(
            &space,
            &train_ds.labels,
            &surrogate_cfg(ab.standardize),
            clustering_seed(cfg.seed, round),
        )?;
        round += 1;
        surrogate = switch_labels(&m.assignments, cfg.label_switch_p, &mut rng_switch)?;
        log.initial_clustering = Some(clustering_record(&m.assignments, &surrogate, train_ds, None)?);
    }
    if cfg.loss.kind == LossKind::ProxyNca {
        let e = params.embed(&train_ds.features)?;
        alpha.proxies = Some(Proxies::new(
            init_proxies(&e.e_alpha, &train_ds.labels, train_ds.num_classes()),
            cfg.learning_rate,
        ));
        if ab.clustering {
            beta.proxies = Some(Proxies::new(
                init_proxies(&e.e_beta, &surrogate, cfg.clusters),
                cfg.learning_rate,
            ));
        }
    }

    let iterations = if cfg.iterations_per_epoch > 0 {
        cfg.iterations_per_epoch
    } else {
        train_ds.len().div_ceil(cfg.batch.batch_size)
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut sum_a, mut sum_b, mut sum_d, mut n_d) = (0.0, 0.0, 0.0, 0usize);
        let mut empty = 0;
        for it in 0..iterations {
            let batch = next_batch(&class_index, &cfg.batch, &mut rng_batch)?;
            let x = train_ds.features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_ds.labels[i]).collect();
            let sa = train_step(&mut params, &mut alpha, Branch::Alpha, &x, &y, &cfg.loss, gamma, &mut rng_mine)?;
            check_finite(sa.branch_loss, "class loss", epoch, it, &params)?;
            sum_a += sa.branch_loss;
            empty += usize::from(sa.empty_batch);
            if let Some(d) = sa.mutual_info {
                check_finite(d, "decorrelation loss", epoch, it, &params)?;
                sum_d += d;
                n_d += 1;
            }
            if ab.clustering {
                let s: Vec<usize> = batch.iter().map(|&i| surrogate[i]).collect();
                let sb = train_step(&mut params, &mut beta, Branch::Beta, &x, &s, &cfg.loss, gamma, &mut rng_mine)?;
                check_finite(sb.branch_loss, "auxiliary loss", epoch, it, &params)?;
                sum_b += sb.branch_loss;
                empty += usize::from(sb.empty_batch);
                if let Some(d) = sb.mutual_info {
                    check_finite(d, "decorrelation loss", epoch, it, &params)?;
                    sum_d += d;
                    n_d += 1;
                }
            }
            if params.slots().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    iteration: it,
                    what: "parameters",
                    params: Box::new(params),
                });
            }
        }

        let last = epoch + 1 == cfg.epochs;
        let mut relabel = None;
        if ab.clustering && (epoch + 1) % cfg.update_period == 0 && !last {
            let m = update_surrogate_labels(
                &params,
                &train_ds.features,
                &train_ds.labels,
                &surrogate_cfg(ab.standardize_on_update),
                clustering_seed(cfg.seed, round),
            )?;
            round += 1;
            let next = switch_labels(&m.assignments, cfg.label_switch_p, &mut rng_switch)?;
            relabel = Some(clustering_record(&m.assignments, &next, train_ds, Some(&surrogate))?);
            surrogate = next;
            if let Some(p) = beta.proxies.as_mut() {
                let e = params.embed(&train_ds.features)?.e_beta;
                *p = Proxies::new(init_proxies(&e, &surrogate, cfg.clusters), cfg.learning_rate);
            }
        }

        let due = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let eval = |ds: &Dataset| {
            evaluate(&params, ds, &cfg.recall_ks, cfg.inter_class_norm, &cfg.kmeans, cfg.seed)
        };
        let train_eval = if due && cfg.eval_train { Some(eval(train_ds)?) } else { None };
        let test_eval = match test_ds {
            Some(ds) if due => Some(eval(ds)?),
            _ => None,
        };
        let its = iterations as f64;
        log.epochs.push(EpochRecord {
            epoch,
            l_alpha: sum_a / its,
            l_beta: ab.clustering.then(|| sum_b / its),
            l_d: (n_d > 0).then(|| sum_d / n_d as f64),
            empty_batches: empty,
            relabel,
            train_eval,
            test_eval,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        params,
        log,
        surrogate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::data::{generate_synthetic, BatchSpec, SplitSpec, SyntheticConfig};

    fn tiny_data() -> (Dataset, Dataset) {
        let ds = generate_synthetic(&SyntheticConfig {
            num_classes: 8,
            per_class: 8,
            num_shared: 2,
            input_dim: 12,
            ..SyntheticConfig::default()
        })
        .unwrap();
        ds.split(&SplitSpec::first_n(8, 4)).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            feature_dim: 8,
            hidden: vec![16],
            d_alpha: 4,
            d_beta: 4,
            clusters: 2,
            batch: BatchSpec {
                batch_size: 16,
                per_class: 4,
            },
            epochs: 2,
            recall_ks: vec![1, 2],
            eval_every: 1,
            eval_train: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_is_finite_and_complete() {
        let (train_ds, test_ds) = tiny_data();
        let out = train(&tiny_cfg(), &train_ds, Some(&test_ds)).unwrap();
        assert_eq!(out.log.epochs.len(), 2);
        for e in &out.log.epochs {
            assert!(e.l_alpha.is_finite());
            assert!(e.l_beta.unwrap().is_finite());
            assert!(e.l_d.unwrap().is_finite());
            assert_eq!(e.test_eval.as_ref().unwrap().len(), 3);
            assert!(e.train_eval.is_some());
        }
        let emb = out.params.embed(&test_ds.features).unwrap();
        for m in [&emb.e_alpha, &emb.e_beta] {
            for r in m.row_iter() {
                assert!((crate::matrix::norm(r) - 1.0).abs() < 1e-12);
            }
        }
        assert!(out.log.initial_clustering.is_some());
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let (train_ds, test_ds) = tiny_data();
        let a = train(&tiny_cfg(), &train_ds, Some(&test_ds)).unwrap();
        let b = train(&tiny_cfg(), &train_ds, Some(&test_ds)).unwrap();
        assert_eq!(a.log.fingerprint(), b.log.fingerprint());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn all_off_matches_baseline_epoch_for_epoch() {
        let (train_ds, test_ds) = tiny_data();
        let mut off = tiny_cfg();
        off.ablation = Ablation::ALL_OFF;
        let base = off.baseline();
        let a = train(&off, &train_ds, Some(&test_ds)).unwrap();
        let b = train(&base, &train_ds, Some(&test_ds)).unwrap();
        for (x, y) in a.log.epochs.iter().zip(&b.log.epochs) {
            assert_eq!(x.l_alpha, y.l_alpha);
            assert_eq!(x.test_eval.as_ref().unwrap()[0], y.test_eval.as_ref().unwrap()[0]);
        }
        assert_eq!(a.params.head_alpha, b.params.head_alpha);
        assert_eq!(a.params.backbone, b.params.backbone);
    }

    #[test]
    fn relabels_only_on_schedule() {
        let (train_ds, _) = tiny_data();
        let cfg = TrainConfig {
            epochs: 7,
            update_period: 3,
            eval_every: 0,
            ..tiny_cfg()
        };
        let out = train(&cfg, &train_ds, None).unwrap();
        let relabeled: Vec<usize> = out
            .log
            .epochs
            .iter()
            .filter(|e| e.relabel.is_some())
            .map(|e| e.epoch)
            .collect();
        assert_eq!(relabeled, vec![2, 5]);
    }

    fn step_groups(gamma: f64, branch: Branch) -> Vec<ParamGroup> {
        let (train_ds, _) = tiny_data();
        let mut params = ModelParams::init(model_dims(&tiny_cfg(), 12), 0).unwrap();
        let before = params.clone();
        let mut state = BranchState::new(1e-3);
        let idx: Vec<usize> = (0..16).collect();
        let x = train_ds.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| train_ds.labels[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_step(&mut params, &mut state, branch, &x, &y, &LossConfig::default(), gamma, &mut rng).unwrap();
        // Groups without a gradient are bitwise unchanged.
        for ((grp, a), b) in params.slot_groups().iter().zip(params.slots()).zip(before.slots()) {
            if !stats.touched.contains(grp) {
                assert_eq!(a, b, "{grp:?} changed without a gradient");
            }
        }
        stats.touched
    }

    #[test]
    fn class_step_never_uses_auxiliary_loss() {
        let g = step_groups(0.0, Branch::Alpha);
        assert!(!g.contains(&ParamGroup::HeadBeta));
        assert!(!g.contains(&ParamGroup::Projection));
        assert!(!g.contains(&ParamGroup::MarginAux));
        assert!(g.contains(&ParamGroup::HeadAlpha) && g.contains(&ParamGroup::Backbone));
        let g = step_groups(100.0, Branch::Alpha);
        assert!(!g.contains(&ParamGroup::MarginAux));
        assert!(g.contains(&ParamGroup::HeadBeta) && g.contains(&ParamGroup::Projection));
    }

    #[test]
    fn auxiliary_step_never_uses_class_loss() {
        let g = step_groups(0.0, Branch::Beta);
        assert!(!g.contains(&ParamGroup::HeadAlpha));
        assert!(!g.contains(&ParamGroup::MarginAlpha));
        assert!(g.contains(&ParamGroup::HeadBeta));
        let g = step_groups(100.0, Branch::Beta);
        assert!(!g.contains(&ParamGroup::MarginAlpha));
        assert!(g.contains(&ParamGroup::HeadAlpha) && g.contains(&ParamGroup::Projection));
    }

    #[test]
    fn every_loss_kind_trains() {
        let (train_ds, test_ds) = tiny_data();
        for kind in [LossKind::TripletSemihard, LossKind::Margin, LossKind::ProxyNca] {
            let mut cfg = tiny_cfg();
            cfg.loss.kind = kind;
            let out = train(&cfg, &train_ds, Some(&test_ds)).unwrap();
            assert!(out.log.epochs.iter().all(|e| e.l_alpha.is_finite()), "{kind}");
        }
    }

    #[test]
    fn divergence_reports_params() {
        let (train_ds, _) = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.ablation = Ablation::ALL_OFF;
        let mut params = ModelParams::init(model_dims(&cfg, 12), 0).unwrap();
        params.head_alpha.weight.data_mut()[0] = f64::NAN;
        match train_from(&cfg, params, &train_ds, None) {
            Err(Error::Diverged { params, .. }) => assert!(params.head_alpha.weight.data()[0].is_nan()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let (train_ds, test_ds) = tiny_data();
        let out = train(&tiny_cfg(), &train_ds, Some(&test_ds)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.jsonl");
        out.log.write_jsonl(&p).unwrap();
        assert_eq!(RunLog::read_jsonl(&p).unwrap(), out.log);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 3);
    }

    #[test]
    fn perfect_embedding_has_full_recall() {
        let labels: Vec<usize> = (0..20).map(|i| i / 5).collect();
        let mut e = Matrix::zeros(20, 4);
        for (i, &y) in labels.iter().enumerate() {
            e.set(i, y, 1.0);
        }
        let r = evaluate_embedding(
            EncoderTag::Alpha,
            &e,
            &labels,
            &[1],
            InterClassNorm::MeanPairs,
            &KMeansConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(r.recall1(), 1.0);
        assert!((r.nmi - 1.0).abs() < 1e-12);
    }
}
