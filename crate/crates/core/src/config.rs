//! Run configuration and its `key = value` text format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_features_csv, BatchSpec, Dataset, SplitSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::InterClassNorm;
use crate::kmeans::KMeansConfig;
use crate::losses::{LossConfig, LossKind};

/// Space clustered for the first surrogate labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialSpace {
    /// Backbone features of the freshly initialized model.
    #[default]
    Features,
    /// Raw input vectors.
    Input,
}

impl fmt::Display for InitialSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitialSpace::Features => "features",
            InitialSpace::Input => "input",
        })
    }
}

impl FromStr for InitialSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(InitialSpace::Features),
            "input" => Ok(InitialSpace::Input),
            _ => Err(Error::invalid(format!("unknown initial space {s:?}"))),
        }
    }
}

/// Switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Train the auxiliary encoder on clustered surrogate labels.
    pub clustering: bool,
    /// Class-standardize before the initial clustering.
    pub standardize: bool,
    /// Add the adversarial decorrelation term.
    pub mutual_info: bool,
    /// Also class-standardize auxiliary embeddings when relabeling.
    pub standardize_on_update: bool,
}

impl Ablation {
    pub const ALL_OFF: Ablation = Ablation {
        clustering: false,
        standardize: false,
        mutual_info: false,
        standardize_on_update: false,
    };
    pub const FULL: Ablation = Ablation {
        clustering: true,
        standardize: true,
        mutual_info: true,
        standardize_on_update: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub d_alpha: usize,
    pub d_beta: usize,
    pub clusters: usize,
    /// Relabel after every `update_period` epochs.
    pub update_period: usize,
    pub batch: BatchSpec,
    pub label_switch_p: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means one pass worth of batches over the training set.
    pub iterations_per_epoch: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub initial_space: InitialSpace,
    pub inter_class_norm: InterClassNorm,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
    /// Include the training split in evaluations.
    pub eval_train: bool,
    pub recall_ks: Vec<usize>,
    pub kmeans: KMeansConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig {
                kind: LossKind::Margin,
                ..LossConfig::default()
            },
            feature_dim: 64,
            hidden: vec![256],
            d_alpha: 32,
            d_beta: 32,
            clusters: 4,
            update_period: 2,
            batch: BatchSpec {
                batch_size: 80,
                per_class: 4,
            },
            label_switch_p: 0.1,
            learning_rate: 1e-3,
            epochs: 60,
            iterations_per_epoch: 0,
            seed: 0,
            ablation: Ablation::FULL,
            initial_space: InitialSpace::Features,
            inter_class_norm: InterClassNorm::MeanPairs,
            eval_every: 0,
            eval_train: false,
            recall_ks: vec![1, 2, 4, 8],
            kmeans: KMeansConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.update_period == 0 {
            return Err(Error::invalid("update_period must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.label_switch_p) {
            return Err(Error::invalid("label_switch_p must be in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.d_alpha == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("d_alpha and feature_dim must be >= 1"));
        }
        let a = self.ablation;
        if (a.clustering || a.mutual_info) && self.d_beta == 0 {
            return Err(Error::invalid(
                "clustering and mutual_info need an auxiliary encoder (d_beta > 0)",
            ));
        }
        if a.clustering && self.clusters == 0 {
            return Err(Error::invalid("clusters must be >= 1"));
        }
        if self.loss.kind == LossKind::Margin && (self.d_alpha < 3 || (a.clustering && self.d_beta < 3)) {
            return Err(Error::invalid("margin loss sampling needs embedding dims >= 3"));
        }
        if self.recall_ks.is_empty() {
            return Err(Error::invalid("recall_ks must not be empty"));
        }
        Ok(())
    }

    /// Single-encoder metric learning: no auxiliary branch at all.
    pub fn baseline(&self) -> TrainConfig {
        TrainConfig {
            d_beta: 0,
            ablation: Ablation::ALL_OFF,
            ..self.clone()
        }
    }

    /// Weight of the decorrelation term actually applied.
    pub fn effective_gamma(&self) -> f64 {
        if self.ablation.mutual_info {
            self.loss.gamma
        } else {
            0.0
        }
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv { path: PathBuf, header: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of leading classes used for training; 0 means half.
    pub train_classes: usize,
}

impl DataConfig {
    /// Loads the data and splits it into train and test classes. `seed`
    /// replaces the generator seed of a synthetic source.
    pub fn load_split(&self, seed: Option<u64>) -> Result<(Dataset, Dataset)> {
        let ds = match &self.source {
            DataSource::Synthetic(s) => generate_synthetic(&SyntheticConfig {
                seed: seed.unwrap_or(s.seed),
                ..s.clone()
            })?,
            DataSource::Csv { path, header } => load_features_csv(path, *header)?,
        };
        let k = ds.num_classes();
        let n = if self.train_classes == 0 { k / 2 } else { self.train_classes };
        ds.split(&SplitSpec::first_n(k, n))
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SyntheticConfig::default()),
            train_classes: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl ExperimentConfig {
    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "loss" => t.loss.kind = parse(key, value)?,
            "triplet_margin" => t.loss.triplet_margin = parse(key, value)?,
            "margin_alpha" => t.loss.margin_alpha = parse(key, value)?,
            "gamma" => t.loss.gamma = parse(key, value)?,
            "dw_clip" => t.loss.dw_clip = parse(key, value)?,
            "feature_dim" => t.feature_dim = parse(key, value)?,
            "hidden" => t.hidden = parse_list(key, value)?,
            "d_alpha" => t.d_alpha = parse(key, value)?,
            "d_beta" => t.d_beta = parse(key, value)?,
            "clusters" => t.clusters = parse(key, value)?,
            "update_period" => t.update_period = parse(key, value)?,
            "batch_size" => t.batch.batch_size = parse(key, value)?,
            "per_class" => t.batch.per_class = parse(key, value)?,
            "label_switch_p" => t.label_switch_p = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "iterations_per_epoch" => t.iterations_per_epoch = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "clustering" => t.ablation.clustering = parse(key, value)?,
            "standardize" => t.ablation.standardize = parse(key, value)?,
            "mutual_info" => t.ablation.mutual_info = parse(key, value)?,
            "standardize_on_update" => t.ablation.standardize_on_update = parse(key, value)?,
            "initial_space" => t.initial_space = parse(key, value)?,
            "inter_class_norm" => t.inter_class_norm = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "eval_train" => t.eval_train = parse(key, value)?,
            "recall_ks" => t.recall_ks = parse_list(key, value)?,
            "kmeans_restarts" => t.kmeans.restarts = parse(key, value)?,
            "kmeans_max_iter" => t.kmeans.max_iter = parse(key, value)?,
            "kmeans_tol" => t.kmeans.tol = parse(key, value)?,
            "data.train_classes" => self.data.train_classes = parse(key, value)?,
            "data.csv" => {
                let header = match &self.data.source {
                    DataSource::Csv { header, .. } => *header,
                    DataSource::Synthetic(_) => false,
                };
                self.data.source = DataSource::Csv {
                    path: PathBuf::from(value),
                    header,
                };
            }
            "data.header" => {
                let h: bool = parse(key, value)?;
                match &mut self.data.source {
                    DataSource::Csv { header, .. } => *header = h,
                    DataSource::Synthetic(_) => {
                        return Err(Error::invalid("data.header must follow data.csv"))
                    }
                }
            }
            k if k.starts_with("synthetic.") => {
                let DataSource::Synthetic(s) = &mut self.data.source else {
                    return Err(Error::invalid(format!("{k} given but data source is a CSV file")));
                };
                match &k["synthetic.".len()..] {
                    "num_classes" => s.num_classes = parse(key, value)?,
                    "per_class" => s.per_class = parse(key, value)?,
                    "num_shared" => s.num_shared = parse(key, value)?,
                    "input_dim" => s.input_dim = parse(key, value)?,
                    "noise_std" => s.noise_std = parse(key, value)?,
                    "class_scale" => s.class_scale = parse(key, value)?,
                    "shared_scale" => s.shared_scale = parse(key, value)?,
                    "class_rank" => s.class_rank = parse(key, value)?,
                    "seed" => s.seed = parse(key, value)?,
                    _ => return Err(Error::invalid(format!("unknown key {k:?}"))),
                }
            }
            _ => return Err(Error::invalid(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses the text format: one `key = value` per line, `#` comments.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Serializes to the text format accepted by [`ExperimentConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("loss = {}", t.loss.kind),
            format!("triplet_margin = {}", t.loss.triplet_margin),
            format!("margin_alpha = {}", t.loss.margin_alpha),
            format!("gamma = {}", t.loss.gamma),
            format!("dw_clip = {}", t.loss.dw_clip),
            format!("feature_dim = {}", t.feature_dim),
            format!("hidden = {}", list(&t.hidden)),
            format!("d_alpha = {}", t.d_alpha),
            format!("d_beta = {}", t.d_beta),
            format!("clusters = {}", t.clusters),
            format!("update_period = {}", t.update_period),
            format!("batch_size = {}", t.batch.batch_size),
            format!("per_class = {}", t.batch.per_class),
            format!("label_switch_p = {}", t.label_switch_p),
            format!("learning_rate = {}", t.learning_rate),
            format!("epochs = {}", t.epochs),
            format!("iterations_per_epoch = {}", t.iterations_per_epoch),
            format!("seed = {}", t.seed),
            format!("clustering = {}", t.ablation.clustering),
            format!("standardize = {}", t.ablation.standardize),
            format!("mutual_info = {}", t.ablation.mutual_info),
            format!("standardize_on_update = {}", t.ablation.standardize_on_update),
            format!("initial_space = {}", t.initial_space),
            format!("inter_class_norm = {}", t.inter_class_norm),
            format!("eval_every = {}", t.eval_every),
            format!("eval_train = {}", t.eval_train),
            format!("recall_ks = {}", list(&t.recall_ks)),
            format!("kmeans_restarts = {}", t.kmeans.restarts),
            format!("kmeans_max_iter = {}", t.kmeans.max_iter),
            format!("kmeans_tol = {}", t.kmeans.tol),
            format!("data.train_classes = {}", self.data.train_classes),
        ];
        match &self.data.source {
            DataSource::Synthetic(s) => lines.extend([
                format!("synthetic.num_classes = {}", s.num_classes),
                format!("synthetic.per_class = {}", s.per_class),
                format!("synthetic.num_shared = {}", s.num_shared),
                format!("synthetic.input_dim = {}", s.input_dim),
                format!("synthetic.noise_std = {}", s.noise_std),
                format!("synthetic.class_scale = {}", s.class_scale),
                format!("synthetic.shared_scale = {}", s.shared_scale),
                format!("synthetic.class_rank = {}", s.class_rank),
                format!("synthetic.seed = {}", s.seed),
            ]),
            DataSource::Csv { path, header } => lines.extend([
                format!("data.csv = {}", path.display()),
                format!("data.header = {header}"),
            ]),
        }
        lines.join("\n") + "\n"
    }
}
