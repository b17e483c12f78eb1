//! The two-encoder network.
//!
//! A shared MLP backbone `f` produces features; a class head and an
//! auxiliary head map those features to separate unit-norm embeddings. A
//! small two-layer projection maps the auxiliary embedding into the class
//! embedding space so the two can be compared by the decorrelation loss.
//!
//! Setting `d_beta = 0` removes the auxiliary head and the projection; the
//! model is then a plain single-encoder metric learner.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_FORMAT: &str = "dml-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Initial value of the learnable margin boundary.
pub const MARGIN_BETA_INIT: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    /// Backbone output width `F`.
    pub feature_dim: usize,
    pub d_alpha: usize,
    /// Zero disables the auxiliary branch.
    pub d_beta: usize,
    /// Hidden widths of the backbone between input and features.
    pub hidden: Vec<usize>,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.d_alpha == 0 {
            return Err(Error::invalid(format!(
                "input_dim, feature_dim and d_alpha must be >= 1 (got {}, {}, {})",
                self.input_dim, self.feature_dim, self.d_alpha
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be >= 1"));
        }
        Ok(())
    }

    pub fn has_aux(&self) -> bool {
        self.d_beta > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Linear {
    /// He-scaled uniform weights (`std = sqrt(2 / fan_in)`), zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// Which part of the network a parameter slot belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    HeadAlpha,
    HeadBeta,
    Projection,
    MarginAlpha,
    MarginAux,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub backbone: Vec<Linear>,
    pub head_alpha: Linear,
    pub head_beta: Option<Linear>,
    /// Empty, or exactly two layers `d_beta → d_alpha → d_alpha`.
    pub projection: Vec<Linear>,
    /// Learnable margin boundary for the class loss.
    pub margin_beta: f64,
    /// Learnable margin boundary for the auxiliary loss.
    pub margin_beta_aux: f64,
}

// Independent ChaCha streams per parameter group, so the class path's
// initial weights do not depend on whether the auxiliary branch exists.
const STREAM_BACKBONE: u64 = 0;
const STREAM_HEAD_ALPHA: u64 = 100;
const STREAM_HEAD_BETA: u64 = 200;
const STREAM_PROJECTION: u64 = 300;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut widths = vec![dims.input_dim];
        widths.extend(&dims.hidden);
        widths.push(dims.feature_dim);
        let backbone = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let mut rng = stream_rng(seed, STREAM_BACKBONE + k as u64);
                Linear::init(w[0], w[1], &mut rng)
            })
            .collect();
        let head_alpha = Linear::init(
            dims.feature_dim,
            dims.d_alpha,
            &mut stream_rng(seed, STREAM_HEAD_ALPHA),
        );
        let (head_beta, projection) = if dims.has_aux() {
            let head = Linear::init(
                dims.feature_dim,
                dims.d_beta,
                &mut stream_rng(seed, STREAM_HEAD_BETA),
            );
            let proj = vec![
                Linear::init(
                    dims.d_beta,
                    dims.d_alpha,
                    &mut stream_rng(seed, STREAM_PROJECTION),
                ),
                Linear::init(
                    dims.d_alpha,
                    dims.d_alpha,
                    &mut stream_rng(seed, STREAM_PROJECTION + 1),
                ),
            ];
            (Some(head), proj)
        } else {
            (None, Vec::new())
        };
        Ok(ModelParams {
            dims,
            seed,
            backbone,
            head_alpha,
            head_beta,
            projection,
            margin_beta: MARGIN_BETA_INIT,
            margin_beta_aux: MARGIN_BETA_INIT,
        })
    }

    /// Backbone features `f(x)`: ReLU between layers, linear output.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dims.input_dim {
            return Err(Error::shape(
                "embed",
                format!(
                    "input has {} columns, model expects {}",
                    x.cols(),
                    self.dims.input_dim
                ),
            ));
        }
        let mut h = x.clone();
        let last = self.backbone.len() - 1;
        for (k, layer) in self.backbone.iter().enumerate() {
            h = layer.forward(&h)?;
            if k < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// One backbone pass feeding both heads.
    pub fn embed(&self, x: &Matrix) -> Result<EmbedBatch> {
        let features = self.features(x)?;
        let e_alpha = self.head_alpha.forward(&features)?.l2_normalize_rows().0;
        let e_beta = match &self.head_beta {
            Some(head) => head.forward(&features)?.l2_normalize_rows().0,
            None => Matrix::zeros(x.rows(), 0),
        };
        Ok(EmbedBatch {
            e_alpha,
            e_beta,
            features,
        })
    }

    /// Maps auxiliary embeddings into the class embedding space, unit rows.
    pub fn project(&self, e_beta: &Matrix) -> Result<Matrix> {
        if !self.dims.has_aux() {
            return Err(Error::invalid("projection requires d_beta > 0"));
        }
        let h = self.projection[0].forward(e_beta)?.relu();
        Ok(self.projection[1].forward(&h)?.l2_normalize_rows().0)
    }

    /// Parameter storage in a fixed order shared with [`BoundParams::slot_nodes`]
    /// and [`ModelParams::slot_groups`].
    pub fn slots(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self.layers() {
            out.push(l.weight.data());
            out.push(l.bias.data());
        }
        out.push(std::slice::from_ref(&self.margin_beta));
        out.push(std::slice::from_ref(&self.margin_beta_aux));
        out
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.head_alpha))
            .chain(self.head_beta.iter())
            .chain(self.projection.iter())
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let layers = self
            .backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.head_alpha))
            .chain(self.head_beta.iter_mut())
            .chain(self.projection.iter_mut());
        for l in layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.data_mut());
        }
        out.push(std::slice::from_mut(&mut self.margin_beta));
        out.push(std::slice::from_mut(&mut self.margin_beta_aux));
        out
    }

    pub fn slot_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        out.extend(std::iter::repeat_n(ParamGroup::Backbone, 2 * self.backbone.len()));
        out.extend([ParamGroup::HeadAlpha; 2]);
        if self.head_beta.is_some() {
            out.extend([ParamGroup::HeadBeta; 2]);
        }
        out.extend(std::iter::repeat_n(
            ParamGroup::Projection,
            2 * self.projection.len(),
        ));
        out.push(ParamGroup::MarginAlpha);
        out.push(ParamGroup::MarginAux);
        out
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            backbone: self.backbone.iter().map(|l| l.bind(tape)).collect(),
            head_alpha: self.head_alpha.bind(tape),
            head_beta: self.head_beta.as_ref().map(|l| l.bind(tape)),
            projection: self.projection.iter().map(|l| l.bind(tape)).collect(),
            margin_beta: tape.leaf(Matrix::scalar(self.margin_beta)),
            margin_beta_aux: tape.leaf(Matrix::scalar(self.margin_beta_aux)),
        }
    }

    /// Checks layer shapes against `dims` (used after loading).
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let mut widths = vec![self.dims.input_dim];
        widths.extend(&self.dims.hidden);
        widths.push(self.dims.feature_dim);
        if self.backbone.len() != widths.len() - 1 {
            return Err(Error::invalid("backbone depth does not match dims"));
        }
        let check = |l: &Linear, i: usize, o: usize, what: &str| -> Result<()> {
            if l.weight.shape() != (i, o) || l.bias.shape() != (1, o) {
                return Err(Error::invalid(format!(
                    "{what}: weight {:?} / bias {:?}, expected ({i}, {o})",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            Ok(())
        };
        for (l, w) in self.backbone.iter().zip(widths.windows(2)) {
            check(l, w[0], w[1], "backbone")?;
        }
        check(
            &self.head_alpha,
            self.dims.feature_dim,
            self.dims.d_alpha,
            "head_alpha",
        )?;
        match (&self.head_beta, self.dims.d_beta) {
            (None, 0) => {
                if !self.projection.is_empty() {
                    return Err(Error::invalid("projection present without auxiliary head"));
                }
            }
            (Some(h), d) if d > 0 => {
                check(h, self.dims.feature_dim, d, "head_beta")?;
                if self.projection.len() != 2 {
                    return Err(Error::invalid("projection must have two layers"));
                }
                check(&self.projection[0], d, self.dims.d_alpha, "projection[0]")?;
                check(
                    &self.projection[1],
                    self.dims.d_alpha,
                    self.dims.d_alpha,
                    "projection[1]",
                )?;
            }
            _ => return Err(Error::invalid("head_beta presence does not match d_beta")),
        }
        if self.slots().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite parameter value"));
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(err(format!("unknown format tag {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "format version {} (this build reads {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        file.params.validate().map_err(|e| err(e.to_string()))?;
        Ok(file.params)
    }

    /// Loads a checkpoint and checks it against the dimensions a run expects.
    pub fn load_checkpoint_expecting(path: impl AsRef<Path>, dims: &ModelDims) -> Result<Self> {
        let params = Self::load_checkpoint(path)?;
        let pairs = [
            ("input_dim", params.dims.input_dim, dims.input_dim),
            ("feature_dim", params.dims.feature_dim, dims.feature_dim),
            ("d_alpha", params.dims.d_alpha, dims.d_alpha),
            ("d_beta", params.dims.d_beta, dims.d_beta),
        ];
        for (field, found, expected) in pairs {
            if found != expected {
                return Err(Error::DimensionMismatch {
                    field,
                    found,
                    expected,
                });
            }
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: ModelParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl BoundLinear {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

/// Tape handles for every parameter of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub backbone: Vec<BoundLinear>,
    pub head_alpha: BoundLinear,
    pub head_beta: Option<BoundLinear>,
    pub projection: Vec<BoundLinear>,
    pub margin_beta: NodeId,
    pub margin_beta_aux: NodeId,
}

/// Tape handles produced by a differentiable forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EmbedNodes {
    pub features: NodeId,
    pub alpha: NodeId,
    pub beta: Option<NodeId>,
}

impl BoundParams {
    /// Tape nodes in the same order as [`ModelParams::slots`].
    pub fn slot_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let layers = self
            .backbone
            .iter()
            .chain(std::iter::once(&self.head_alpha))
            .chain(self.head_beta.iter())
            .chain(self.projection.iter());
        for l in layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.margin_beta);
        out.push(self.margin_beta_aux);
        out
    }

    pub fn features(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.backbone.len() - 1;
        for (k, layer) in self.backbone.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if k < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Differentiable version of [`ModelParams::embed`]. The auxiliary
    /// embedding is only built when `with_beta` is set and the head exists.
    pub fn embed(&self, tape: &mut Tape, x: NodeId, with_beta: bool) -> Result<EmbedNodes> {
        let features = self.features(tape, x)?;
        let a = self.head_alpha.forward(tape, features)?;
        let alpha = tape.l2_normalize(a);
        let beta = match (&self.head_beta, with_beta) {
            (Some(head), true) => {
                let b = head.forward(tape, features)?;
                Some(tape.l2_normalize(b))
            }
            _ => None,
        };
        Ok(EmbedNodes {
            features,
            alpha,
            beta,
        })
    }

    pub fn project(&self, tape: &mut Tape, e_beta: NodeId) -> Result<NodeId> {
        if self.projection.len() != 2 {
            return Err(Error::invalid("projection requires d_beta > 0"));
        }
        let h = self.projection[0].forward(tape, e_beta)?;
        let h = tape.relu(h);
        let out = self.projection[1].forward(tape, h)?;
        Ok(tape.l2_normalize(out))
    }
}

/// Embeddings of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedBatch {
    /// `batch × d_alpha`, unit rows.
    pub e_alpha: Matrix,
    /// `batch × d_beta`, unit rows; zero columns when the branch is disabled.
    pub e_beta: Matrix,
    /// `batch × F`
    pub features: Matrix,
}
