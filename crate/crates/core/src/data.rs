//! Datasets: synthetic latent-factor generation, CSV feature files,
//! zero-shot class splits and the class-balanced batch sampler.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Samples stored column-wise: one feature row, class label and surrogate
/// label per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    /// Contiguous from 0.
    pub labels: Vec<usize>,
    /// Current clustering labels; all zero until mined.
    pub surrogate: Vec<usize>,
    /// Hidden shared factor, known only for synthetic data.
    pub shared: Option<Vec<usize>>,
    /// Stable sample identifiers (row index in the originating file or
    /// generator).
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {n} feature rows", labels.len()),
            ));
        }
        if !features.is_finite() {
            return Err(Error::invalid("dataset features must be finite"));
        }
        let ds = Dataset {
            features,
            labels,
            surrogate: vec![0; n],
            shared: None,
            ids: (0..n).collect(),
        };
        ds.check_contiguous()?;
        Ok(ds)
    }

    fn check_contiguous(&self) -> Result<()> {
        let k = self.num_classes();
        let mut seen = vec![false; k];
        self.labels.iter().for_each(|&y| seen[y] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("class {missing} has no samples")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Sample indices of each class, in index order.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        group_by_label(&self.labels)
    }

    /// Rows `indices`, class labels remapped to be contiguous in order of
    /// first appearance of the sorted original labels.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut kept: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        kept.sort_unstable();
        kept.dedup();
        let labels = indices
            .iter()
            .map(|&i| kept.binary_search(&self.labels[i]).expect("label kept"))
            .collect();
        Dataset {
            features: self.features.select_rows(indices),
            labels,
            surrogate: indices.iter().map(|&i| self.surrogate[i]).collect(),
            shared: self
                .shared
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Zero-shot split by class: train and test share no class.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
        spec.validate(self.num_classes())?;
        let pick = |classes: &[usize]| -> Vec<usize> {
            (0..self.len())
                .filter(|&i| classes.contains(&self.labels[i]))
                .collect()
        };
        Ok((self.subset(&pick(&spec.train)), self.subset(&pick(&spec.test))))
    }
}

pub(crate) fn group_by_label(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(i);
    }
    out
}

/// Disjoint class sets for training and testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// The first `n_train` classes train, the rest test.
    pub fn first_n(num_classes: usize, n_train: usize) -> Self {
        SplitSpec {
            train: (0..n_train.min(num_classes)).collect(),
            test: (n_train.min(num_classes)..num_classes).collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::invalid("split needs at least one train and one test class"));
        }
        if let Some(c) = self.train.iter().chain(&self.test).find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!("split names class {c}, dataset has {num_classes}")));
        }
        if let Some(c) = self.train.iter().find(|c| self.test.contains(c)) {
            return Err(Error::invalid(format!("class {c} is in both train and test")));
        }
        Ok(())
    }
}

/// Parameters of the latent-factor generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Number of values of the class-independent shared factor.
    pub num_shared: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    /// Length of each class direction.
    pub class_scale: f64,
    /// Length of each shared-factor direction.
    pub shared_scale: f64,
    /// Dimension of the subspace holding the class directions. With
    /// `class_rank < num_classes` every class is a random unit vector in one
    /// common subspace, so held-out classes live where training classes do.
    /// 0 gives every class its own orthogonal direction.
    pub class_rank: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 40,
            per_class: 30,
            num_shared: 4,
            input_dim: 64,
            noise_std: 0.1,
            class_scale: 0.5,
            shared_scale: 1.0,
            class_rank: 8,
            seed: 0,
        }
    }
}

/// Gaussian combination of `basis`, scaled to unit length.
fn random_unit_in_span(basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; basis[0].len()];
    for b in basis {
        let c: f64 = StandardNormal.sample(rng);
        v.iter_mut().zip(b).for_each(|(a, x)| *a += c * x);
    }
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|a| *a /= n);
    v
}

/// `cols` orthonormal columns of length `rows` (Gram–Schmidt on Gaussian
/// draws), returned as column vectors.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while out.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

/// `x = class_scale·M_c[y] + shared_scale·M_s[s] + ε` with orthonormal
/// dictionaries, `s` uniform and independent of `y`, `ε ~ N(0, noise²)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.per_class == 0 || cfg.num_shared == 0 || cfg.input_dim == 0 {
        return Err(Error::invalid("synthetic counts must all be >= 1"));
    }
    let rank = if cfg.class_rank == 0 { cfg.num_classes } else { cfg.class_rank };
    if cfg.input_dim < rank + cfg.num_shared {
        return Err(Error::invalid(format!(
            "input_dim {} is smaller than class rank + num_shared = {}",
            cfg.input_dim,
            rank + cfg.num_shared
        )));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dict = orthonormal_columns(cfg.input_dim, rank + cfg.num_shared, &mut rng);
    let (basis, shared_dirs) = dict.split_at(rank);
    let class_dirs: Vec<Vec<f64>> = if cfg.class_rank == 0 {
        basis.to_vec()
    } else {
        (0..cfg.num_classes).map(|_| random_unit_in_span(basis, &mut rng)).collect()
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let n = cfg.num_classes * cfg.per_class;
    let mut features = Matrix::zeros(n, cfg.input_dim);
    let mut labels = Vec::with_capacity(n);
    let mut shared = Vec::with_capacity(n);
    for i in 0..n {
        let y = i / cfg.per_class;
        let s = rng.random_range(0..cfg.num_shared);
        for (k, v) in features.row_mut(i).iter_mut().enumerate() {
            *v = cfg.class_scale * class_dirs[y][k]
                + cfg.shared_scale * shared_dirs[s][k]
                + noise.sample(&mut rng);
        }
        labels.push(y);
        shared.push(s);
    }
    let mut ds = Dataset::new(features, labels)?;
    ds.shared = Some(shared);
    Ok(ds)
}

/// Reads `label,f0,f1,...` rows. Labels are non-negative integers and are
/// remapped to contiguous ids in sorted order.
pub fn load_features_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(parse_err(line, "expected a label and at least one feature".into()));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    line,
                    format!("row {line} has {} columns, expected {w}", record.len()),
                ))
            }
            _ => {}
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("label {:?} is not a non-negative integer", &record[0])))?;
        raw_labels.push(label);
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("cell {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("cell {cell:?} is not finite")));
            }
            data.push(v);
        }
    }
    let Some(width) = width else {
        return Err(parse_err(1, "file contains no samples".into()));
    };
    let mut distinct = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let labels = raw_labels
        .iter()
        .map(|y| distinct.binary_search(y).expect("label present"))
        .collect();
    let features = Matrix::from_vec(raw_labels.len(), width - 1, data)?;
    Dataset::new(features, labels)
}

/// Writes the dataset in the format read by [`load_features_csv`]. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn save_features_csv(ds: &Dataset, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if header {
        let mut h = vec!["label".to_string()];
        h.extend((0..ds.input_dim()).map(|k| format!("f{k}")));
        w.write_record(&h).map_err(csv_err)?;
    }
    for (row, y) in ds.features.row_iter().zip(&ds.labels) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Class-balanced batch layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub per_class: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: 112,
            per_class: 4,
        }
    }
}

impl BatchSpec {
    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.per_class
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.per_class == 0 || self.batch_size == 0 {
            return Err(Error::invalid("batch size and per-class count must be >= 1"));
        }
        if !self.batch_size.is_multiple_of(self.per_class) {
            return Err(Error::invalid(format!(
                "batch size {} is not a multiple of per-class count {}",
                self.batch_size, self.per_class
            )));
        }
        if self.classes_per_batch() > num_classes {
            return Err(Error::invalid(format!(
                "batch needs {} classes, only {num_classes} available",
                self.classes_per_batch()
            )));
        }
        Ok(())
    }
}

/// Draws `bs/m` distinct classes uniformly, then `m` samples from each:
/// without replacement when the class is large enough, with replacement
/// otherwise.
pub fn next_batch<R: Rng + ?Sized>(
    class_index: &[Vec<usize>],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<&Vec<usize>> = class_index.iter().filter(|c| !c.is_empty()).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no class has any samples"));
    }
    spec.validate(eligible.len())?;
    let m = spec.per_class;
    let mut out = Vec::with_capacity(spec.batch_size);
    for c in sample(rng, eligible.len(), spec.classes_per_batch()).into_iter() {
        let members = eligible[c];
        if members.len() >= m {
            out.extend(sample(rng, members.len(), m).into_iter().map(|k| members[k]));
        } else {
            out.extend((0..m).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}
