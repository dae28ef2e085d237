//! Degradation priors: a deterministic stand-in for language-model text
//! embeddings, a loader for precomputed embeddings, and the MLP that projects
//! them to the image feature width.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DegradationSpec, Weather};
use crate::error::{Error, Result};
use crate::io;
use crate::layers::{join, Linear, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub const DEFAULT_PRIOR_TOKENS: usize = 8;
pub const DEFAULT_PRIOR_CHANNELS: usize = 32;
pub const DEFAULT_PROJECTION_HIDDEN: usize = 64;

/// Row 0 coordinate holding the severity; coordinates before it hold the
/// one-hot weather block.
pub const SEVERITY_COORD: usize = 4;

/// `L × C_l` text-prior embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorEmbedding<T> {
    pub matrix: Tensor<T>,
    pub meta: Option<DegradationSpec>,
}

impl<T: Scalar> PriorEmbedding<T> {
    pub fn new(matrix: Tensor<T>, meta: Option<DegradationSpec>) -> Result<Self> {
        matrix.dims2("PriorEmbedding")?;
        if !matrix.all_finite() {
            return Err(Error::NonFinite("prior embedding".into()));
        }
        Ok(Self { matrix, meta })
    }

    pub fn tokens(&self) -> usize {
        self.matrix.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.matrix.dim(1)
    }
}

/// Prior projected to the encoder feature width, `L × C_feat`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPrior<T> {
    pub matrix: Tensor<T>,
}

/// Token and channel counts of synthetic priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorDims {
    pub tokens: usize,
    pub channels: usize,
}

impl Default for PriorDims {
    fn default() -> Self {
        Self {
            tokens: DEFAULT_PRIOR_TOKENS,
            channels: DEFAULT_PRIOR_CHANNELS,
        }
    }
}

/// Deterministic synthetic prior for `spec`.
///
/// Row 0 carries the one-hot weather type in coordinates 0–3 (rain, snow,
/// haze, mixed) and the severity in coordinate 4; every other entry is
/// pseudo-random content in `[−1, 1]` drawn from `seed` alone.
pub fn synth_prior<T: Scalar>(spec: &DegradationSpec, seed: u64, dims: PriorDims) -> Result<PriorEmbedding<T>> {
    spec.validate()?;
    if dims.tokens == 0 || dims.channels <= SEVERITY_COORD {
        return Err(Error::invalid(
            "prior dims",
            format!(
                "{}x{} cannot hold the weather/severity block",
                dims.tokens, dims.channels
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = Tensor::from_fn(&[dims.tokens, dims.channels], |_| T::of(rng.random_range(-1.0..=1.0)));
    let head = matrix.row_mut(0);
    for w in Weather::ALL {
        head[w.index()] = if w == spec.weather { T::one() } else { T::zero() };
    }
    head[SEVERITY_COORD] = T::of(spec.severity);
    PriorEmbedding::new(matrix, Some(*spec))
}

/// Reads a rank-2 MVLT file as a prior embedding.
pub fn load_prior<T: Scalar>(path: impl AsRef<Path>) -> Result<PriorEmbedding<T>> {
    let stored = io::load_mvlt(path)?;
    if stored.shape().len() != 2 {
        return Err(Error::format(
            "rank",
            format!("prior embeddings are rank 2, found rank {}", stored.shape().len()),
        ));
    }
    PriorEmbedding::new(stored.into_tensor(), None)
}

pub fn save_prior<T: Scalar>(path: impl AsRef<Path>, prior: &PriorEmbedding<T>) -> Result<()> {
    io::save_mvlt(path, &prior.matrix)
}

/// Two-layer MLP, `C_l → hidden → C_feat` with ReLU, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

pub struct ProjectionCache<T> {
    input: Tensor<T>,
    pre_activation: Tensor<T>,
    activation: Tensor<T>,
}

impl<T: Scalar> ProjectionMlp<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(in_dim, hidden, true, rng),
            output: Linear::new(hidden, out_dim, true, rng),
        }
    }

    pub fn forward(&self, prior: &PriorEmbedding<T>) -> Result<(ProjectedPrior<T>, ProjectionCache<T>)> {
        if prior.channels() != self.hidden.fan_in() {
            return Err(Error::shape(
                "project_prior",
                prior.matrix.shape(),
                self.hidden.weight.shape(),
            ));
        }
        let pre_activation = self.hidden.forward(&prior.matrix)?;
        let activation = tensor::relu(&pre_activation);
        let matrix = self.output.forward(&activation)?;
        Ok((
            ProjectedPrior { matrix },
            ProjectionCache {
                input: prior.matrix.clone(),
                pre_activation,
                activation,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the embedding.
    pub fn backward(&self, cache: &ProjectionCache<T>, dprojected: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let dact = self.output.backward(&cache.activation, dprojected, &mut grad.output)?;
        let dpre = tensor::relu_backward(&cache.pre_activation, &dact)?;
        self.hidden.backward(&cache.input, &dpre, &mut grad.hidden)
    }
}

impl<T: Scalar> Parameters<T> for ProjectionMlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// `P = MLP(T_embed)`.
pub fn project_prior<T: Scalar>(prior: &PriorEmbedding<T>, mlp: &ProjectionMlp<T>) -> Result<ProjectedPrior<T>> {
    mlp.forward(prior).map(|(p, _)| p)
}
