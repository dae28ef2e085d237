//! The full restoration network: prior projection, encoder, memory bank and decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DegradationSpec, Weather};
use crate::decoder::{decode, decode_backward, DecoderCache, DecoderParams};
use crate::encoder::{encode, encode_backward, EncoderCache, EncoderParams};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_report, GradCheckReport};
use crate::imb::{imb_backward, imb_forward, MemoryBank, Retrieval};
use crate::layers::{flatten, join, parameter_count, unflatten, zeros_like, Parameters};
use crate::loss::{total_loss, total_loss_and_grad, PerceptualProxy, CHARBONNIER_EPS, LAMBDA_PERC};
use crate::prior::{synth_prior, PriorDims, PriorEmbedding, ProjectionCache, ProjectionMlp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which optional components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Base,
    Vlm,
    Imb,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::Vlm, Ablation::Imb, Ablation::Full];

    pub fn from_flags(use_prior: bool, use_imb: bool) -> Self {
        match (use_prior, use_imb) {
            (false, false) => Ablation::Base,
            (true, false) => Ablation::Vlm,
            (false, true) => Ablation::Imb,
            (true, true) => Ablation::Full,
        }
    }

    pub fn use_prior(self) -> bool {
        matches!(self, Ablation::Vlm | Ablation::Full)
    }

    pub fn use_imb(self) -> bool {
        matches!(self, Ablation::Imb | Ablation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Vlm => "vlm",
            Ablation::Imb => "imb",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::invalid(
                "ablation",
                format!("unknown ablation '{s}', expected base|vlm|imb|full"),
            )
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub feat_dim: usize,
    pub key_dim: usize,
    pub ffn_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub prior: PriorDims,
    pub projection_hidden: usize,
    pub imb_capacity: usize,
    pub imb_topk: usize,
    pub use_prior: bool,
    pub use_imb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            feat_dim: 64,
            key_dim: 64,
            ffn_dim: 128,
            encoder_blocks: 2,
            decoder_blocks: 2,
            prior: PriorDims::default(),
            projection_hidden: crate::prior::DEFAULT_PROJECTION_HIDDEN,
            imb_capacity: crate::imb::DEFAULT_CAPACITY,
            imb_topk: crate::imb::DEFAULT_TOP_K,
            use_prior: true,
            use_imb: true,
        }
    }
}

impl ModelConfig {
    /// 16×16-scale model used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            feat_dim: 16,
            key_dim: 16,
            ffn_dim: 32,
            encoder_blocks: 1,
            decoder_blocks: 1,
            prior: PriorDims::default(),
            projection_hidden: 16,
            imb_capacity: 8,
            imb_topk: 2,
            use_prior: true,
            use_imb: true,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation::from_flags(self.use_prior, self.use_imb)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.use_prior = ablation.use_prior();
        self.use_imb = ablation.use_imb();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model.patch_size", self.patch_size),
            ("model.feat_dim", self.feat_dim),
            ("model.key_dim", self.key_dim),
            ("model.ffn_dim", self.ffn_dim),
            ("prior.tokens", self.prior.tokens),
            ("prior.channels", self.prior.channels),
            ("prior.hidden", self.projection_hidden),
            ("imb.capacity", self.imb_capacity),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.prior.channels < 5 {
            return Err(Error::invalid(
                "prior.channels",
                "need at least 5 channels for the weather block",
            ));
        }
        if self.imb_topk == 0 || self.imb_topk > self.imb_capacity {
            return Err(Error::invalid(
                "imb.topk",
                format!("k = {} must lie in [1, {}]", self.imb_topk, self.imb_capacity),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub projection: ProjectionMlp<T>,
    pub encoder: EncoderParams<T>,
    pub bank: MemoryBank<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.projection.visit(&join(prefix, "projection"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.bank.visit(&join(prefix, "bank"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.bank.visit_mut(&join(prefix, "bank"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Seed of the synthetic prior content used by [`Model::synth_prior_for`].
pub const PRIOR_SEED: u64 = 0;

/// Parameter name of the memory bank slots.
pub const BANK_SLOTS: &str = "bank.slots";

pub struct ForwardCache<T> {
    projection: Option<ProjectionCache<T>>,
    encoder: EncoderCache<T>,
    pub retrieval: Option<Retrieval<T>>,
    decoder: DecoderCache<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. The decoder starts as the identity map on its input image.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feat_dim;
        let projection = ProjectionMlp::new(config.prior.channels, config.projection_hidden, c, &mut rng);
        let encoder = EncoderParams::new(
            config.patch_size,
            c,
            config.key_dim,
            config.ffn_dim,
            config.encoder_blocks,
            &mut rng,
        );
        let bank = MemoryBank::random(config.imb_capacity, c, config.imb_topk, &mut rng)?;
        let decoder = DecoderParams::new(config.patch_size, c, config.ffn_dim, config.decoder_blocks, &mut rng);
        Ok(Self {
            config,
            projection,
            encoder,
            bank,
            decoder,
        })
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation()
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }

    pub fn forward(&self, img: &Tensor<T>, prior: Option<&PriorEmbedding<T>>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (projected, projection) = if self.config.use_prior {
            let prior = prior.ok_or_else(|| Error::invalid("forward", "prior fusion enabled but no prior given"))?;
            let (p, cache) = self.projection.forward(prior)?;
            (Some(p), Some(cache))
        } else {
            (None, None)
        };
        let (x, encoder) = encode(img, projected.as_ref(), &self.encoder, self.config.use_prior)?;
        let (xhat, retrieval) = imb_forward(&x, &self.bank, self.config.use_imb)?;
        let (out, decoder) = decode(&xhat, img, &self.decoder)?;
        Ok((
            out,
            ForwardCache {
                projection,
                encoder,
                retrieval,
                decoder,
            },
        ))
    }

    /// Inference pass; never mutates the model.
    pub fn restore(&self, img: &Tensor<T>, prior: Option<&PriorEmbedding<T>>) -> Result<Tensor<T>> {
        Ok(self.forward(img, prior)?.0)
    }

    /// Accumulates `∂loss/∂θ` into `grad` given `∂loss/∂out`.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &Tensor<T>, grad: &mut Model<T>) -> Result<()> {
        let dxhat = decode_backward(&self.decoder, &cache.decoder, dout, &mut grad.decoder)?;
        let dx = imb_backward(cache.retrieval.as_ref(), &dxhat, &mut grad.bank)?;
        let dprior = encode_backward(&self.encoder, &cache.encoder, &dx, &mut grad.encoder)?;
        if let (Some(dp), Some(pc)) = (dprior, &cache.projection) {
            self.projection.backward(pc, &dp, &mut grad.projection)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) -> Model<T> {
        zeros_like(self)
    }

    /// The synthetic prior used for `spec` during training and evaluation, or `None` when fusion is disabled.
    pub fn synth_prior_for(&self, spec: &DegradationSpec) -> Result<Option<PriorEmbedding<T>>> {
        if !self.config.use_prior {
            return Ok(None);
        }
        synth_prior(spec, PRIOR_SEED, self.config.prior).map(Some)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config, 0).expect("config already validated");
        let values: Vec<U> = flatten(self).into_iter().map(|v| U::of(v.as_f64())).collect();
        unflatten(&mut out, &values).expect("same structure");
        if self.bank.is_frozen() {
            out.bank.freeze();
        }
        out
    }
}

/// Outcome of [`tiny_gradcheck`].
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub selection_margin: f64,
    pub parameters: usize,
}

const MIN_SELECTION_MARGIN: f64 = 1e-3;

/// Checks the full-model loss gradient on a 16×16 image against central differences.
///
/// Sampling is retried until the k-th and (k+1)-th slot similarities differ by more than `1e-3`.
pub fn tiny_gradcheck(seed: u64) -> Result<ModelGradCheck> {
    let config = ModelConfig::tiny();
    let proxy = PerceptualProxy::<f64>::default();
    for attempt in 0..64u64 {
        let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(attempt);
        let mut model = Model::<f64>::new(config, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xda7a);
        // Perturb the zero-initialized head so every upstream parameter receives gradient.
        model.decoder.unpatch.weight = Tensor::randn(model.decoder.unpatch.weight.shape(), 0.01, &mut rng);
        let img = Tensor::<f64>::uniform(&[16, 16, 3], 0.25, 0.75, &mut rng);
        let target = Tensor::<f64>::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
        let spec = DegradationSpec::new(Weather::Rain, 0.5, s)?;
        let prior = model.synth_prior_for(&spec)?;
        let (out, cache) = model.forward(&img, prior.as_ref())?;
        let margin = cache.retrieval.as_ref().map_or(f64::INFINITY, |r| r.selection_margin());
        if margin <= MIN_SELECTION_MARGIN || out.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            continue;
        }
        let (_, dout) = total_loss_and_grad(&target, &out, &proxy, CHARBONNIER_EPS, LAMBDA_PERC)?;
        let mut grad = model.zero_grad();
        model.backward(&cache, &dout, &mut grad)?;
        let n = parameter_count(&model);
        let theta = Tensor::new(&[n], flatten(&model))?;
        let analytic = Tensor::new(&[n], flatten(&grad))?;
        let mut probe = model.clone();
        let report = grad_check_report(
            |t| {
                unflatten(&mut probe, t.data()).expect("same length");
                let out = probe.restore(&img, prior.as_ref()).expect("valid shapes");
                total_loss(&target, &out, &proxy, CHARBONNIER_EPS, LAMBDA_PERC)
                    .expect("same shapes")
                    .total
            },
            &theta,
            &analytic,
            1e-6,
        )?;
        return Ok(ModelGradCheck {
            report,
            selection_margin: margin,
            parameters: n,
        });
    }
    Err(Error::invalid("gradcheck", "no sample point with a clear top-k margin"))
}
