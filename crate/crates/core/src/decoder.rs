//! Transformer decoder with an unpatch head and a 3×3 convolution tail.
//!
//! The decoder predicts a residual added to the degraded input:
//! `out = clamp(img + tail(unpatchify(blocks(X̂))), 0, 1)`.

use rand::Rng;

use crate::encoder::{patchify_pixels, unpatchify_pixels};
use crate::error::{Error, Result};
use crate::layers::{
    join, run_blocks, run_blocks_backward, Linear, Parameters, TransformerBlock, TransformerBlockCache,
};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub patch_size: usize,
    pub blocks: Vec<TransformerBlock<T>>,
    /// `C_feat → patch² · 3`.
    pub unpatch: Linear<T>,
    /// `27 × 3` convolution weights, see [`tensor::conv3x3`].
    pub tail_weight: Tensor<T>,
    pub tail_bias: Tensor<T>,
}

/// Kernel that copies each channel through unchanged.
pub fn identity_kernel<T: Scalar>() -> Tensor<T> {
    Tensor::from_fn(&[27, 3], |i| {
        let (tap_channel, out) = (i / 3, i % 3);
        let (tap, channel) = (tap_channel / 3, tap_channel % 3);
        if tap == 4 && channel == out {
            T::one()
        } else {
            T::zero()
        }
    })
}

impl<T: Scalar> DecoderParams<T> {
    /// Zero unpatch head and identity tail, so the untrained decoder returns its input image.
    pub fn new<R: Rng + ?Sized>(
        patch_size: usize,
        feat_dim: usize,
        ffn_dim: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            patch_size,
            blocks: (0..blocks)
                .map(|_| TransformerBlock::new(feat_dim, ffn_dim, rng))
                .collect(),
            unpatch: Linear::zeros(feat_dim, patch_size * patch_size * 3, true),
            tail_weight: identity_kernel(),
            tail_bias: Tensor::zeros(&[3]),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.unpatch.fan_in()
    }
}

impl<T: Scalar> Parameters<T> for DecoderParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.unpatch.visit(&join(prefix, "unpatch"), f);
        f(join(prefix, "tail_weight"), &self.tail_weight);
        f(join(prefix, "tail_bias"), &self.tail_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.unpatch.visit_mut(&join(prefix, "unpatch"), f);
        f(join(prefix, "tail_weight"), &mut self.tail_weight);
        f(join(prefix, "tail_bias"), &mut self.tail_bias);
    }
}

pub struct DecoderCache<T> {
    image_shape: [usize; 3],
    blocks: Vec<TransformerBlockCache<T>>,
    features: Tensor<T>,
    residual: Tensor<T>,
    pre_clamp: Tensor<T>,
}

pub fn decode<T: Scalar>(
    xhat: &Tensor<T>,
    img: &Tensor<T>,
    params: &DecoderParams<T>,
) -> Result<(Tensor<T>, DecoderCache<T>)> {
    let (gh, gw, c) = xhat.dims3("decode")?;
    let (h, w, ch) = img.dims3("decode")?;
    let p = params.patch_size;
    if h != gh * p || w != gw * p || ch != 3 || c != params.feat_dim() {
        return Err(Error::shape("decode", xhat.shape(), img.shape()));
    }
    let (features, blocks) = run_blocks(&params.blocks, xhat.clone().reshape(&[gh * gw, c])?)?;
    let patches = params.unpatch.forward(&features)?;
    let residual = unpatchify_pixels(&patches, h, w, p)?;
    let tail = tensor::conv3x3(&residual, &params.tail_weight, &params.tail_bias)?;
    let pre_clamp = img.add(&tail)?;
    let out = pre_clamp.map(|v| v.max(T::zero()).min(T::one()));
    Ok((
        out,
        DecoderCache {
            image_shape: [h, w, 3],
            blocks,
            features,
            residual,
            pre_clamp,
        },
    ))
}

/// Accumulates parameter gradients and returns `∂/∂X̂`.
pub fn decode_backward<T: Scalar>(
    params: &DecoderParams<T>,
    cache: &DecoderCache<T>,
    dout: &Tensor<T>,
    grad: &mut DecoderParams<T>,
) -> Result<Tensor<T>> {
    cache.pre_clamp.expect_same_shape(dout, "decode_backward")?;
    let dpre = cache.pre_clamp.zip_map(dout, "decode_backward", |v, d| {
        if v >= T::zero() && v <= T::one() {
            d
        } else {
            T::zero()
        }
    })?;
    let dresidual = tensor::conv3x3_backward(
        &cache.residual,
        &params.tail_weight,
        &dpre,
        &mut grad.tail_weight,
        &mut grad.tail_bias,
    )?;
    let dpatches = patchify_pixels(&dresidual, params.patch_size)?;
    let dfeatures = params.unpatch.backward(&cache.features, &dpatches, &mut grad.unpatch)?;
    let dx = run_blocks_backward(&params.blocks, &cache.blocks, dfeatures, &mut grad.blocks)?;
    let [h, w, _] = cache.image_shape;
    let p = params.patch_size;
    dx.reshape(&[h / p, w / p, params.feat_dim()])
}
