//! Patch embedding, self-attention blocks, and prior fusion by cross-attention.
//!
//! The fusion computes `X = F + softmax(F·W_Q·(P·W_K)ᵀ / √d_k)·(P·W_V)·W_O`,
//! where `F` are the image tokens and `P` the projected prior.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    join, run_blocks, run_blocks_backward, Attention, AttentionCache, Linear, Parameters, TransformerBlock,
    TransformerBlockCache,
};
use crate::prior::ProjectedPrior;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cuts an `H×W×3` image into non-overlapping `p×p` patches, one row per patch
/// in raster order; each row is laid out as `(dy, dx, channel)`.
pub fn patchify_pixels<T: Scalar>(img: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (h, w, c) = img.dims3("patchify")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", img.shape(), &[patch, patch, c]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let mut out = Tensor::zeros(&[gh * gw, width]);
    let src = img.data();
    let dst = out.data_mut();
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            for dy in 0..patch {
                let from = ((gy * patch + dy) * w + gx * patch) * c;
                let to = token * width + dy * patch * c;
                dst[to..to + patch * c].copy_from_slice(&src[from..from + patch * c]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_pixels`].
pub fn unpatchify_pixels<T: Scalar>(
    tokens: &Tensor<T>,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let (n, row) = tokens.dims2("unpatchify")?;
    if patch == 0 || height % patch != 0 || width % patch != 0 || row % (patch * patch) != 0 {
        return Err(Error::shape("unpatchify", tokens.shape(), &[height, width, patch]));
    }
    let c = row / (patch * patch);
    let (gh, gw) = (height / patch, width / patch);
    if n != gh * gw {
        return Err(Error::shape("unpatchify", tokens.shape(), &[gh * gw, row]));
    }
    let mut img = Tensor::zeros(&[height, width, c]);
    let src = tokens.data();
    let dst = img.data_mut();
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            for dy in 0..patch {
                let to = ((gy * patch + dy) * width + gx * patch) * c;
                let from = token * row + dy * patch * c;
                dst[to..to + patch * c].copy_from_slice(&src[from..from + patch * c]);
            }
        }
    }
    Ok(img)
}

/// Fixed 2-D sinusoidal position code for a `rows × cols` token grid.
///
/// Channel quarters hold `sin`/`cos` of the row index, then of the column
/// index, at geometrically spaced frequencies; leftover channels are zero.
pub fn position_code<T: Scalar>(rows: usize, cols: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let mut out = Tensor::zeros(&[rows * cols, dim]);
    for r in 0..rows {
        for c in 0..cols {
            let token = out.row_mut(r * cols + c);
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                token[i] = T::of((r as f64 * freq).sin());
                token[quarter + i] = T::of((r as f64 * freq).cos());
                token[2 * quarter + i] = T::of((c as f64 * freq).sin());
                token[3 * quarter + i] = T::of((c as f64 * freq).cos());
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub patch_size: usize,
    pub patch_embed: Linear<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    /// `W_Q`, `W_K`, `W_V` (`C_feat × d_k`) and the output projection `W_O` (`d_k × C_feat`).
    pub fusion: Attention<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new<R: Rng + ?Sized>(
        patch_size: usize,
        feat_dim: usize,
        key_dim: usize,
        ffn_dim: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            patch_size,
            patch_embed: Linear::new(patch_size * patch_size * 3, feat_dim, true, rng),
            blocks: (0..blocks)
                .map(|_| TransformerBlock::new(feat_dim, ffn_dim, rng))
                .collect(),
            fusion: Attention::new(feat_dim, feat_dim, key_dim, rng),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.patch_embed.fan_out()
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }
}

/// Linearly embedded patches, `N × C_feat`.
pub fn patchify<T: Scalar>(img: &Tensor<T>, params: &EncoderParams<T>) -> Result<Tensor<T>> {
    params.patch_embed.forward(&patchify_pixels(img, params.patch_size)?)
}

fn check_fusion_inputs<T: Scalar>(features: &Tensor<T>, prior: &ProjectedPrior<T>) -> Result<()> {
    let (_, fc) = features.dims2("cross_attention_fuse")?;
    let (_, pc) = prior.matrix.dims2("cross_attention_fuse")?;
    if fc != pc {
        return Err(Error::shape(
            "cross_attention_fuse",
            features.shape(),
            prior.matrix.shape(),
        ));
    }
    Ok(())
}

/// Fuses the projected prior into the image tokens; returns `X` (`N × C_feat`).
pub fn cross_attention_fuse<T: Scalar>(
    features: &Tensor<T>,
    prior: &ProjectedPrior<T>,
    params: &EncoderParams<T>,
) -> Result<Tensor<T>> {
    check_fusion_inputs(features, prior)?;
    let (attended, _) = params.fusion.forward(features, &prior.matrix)?;
    features.add(&attended)
}

pub struct EncoderCache<T> {
    grid: (usize, usize),
    pixels: Tensor<T>,
    blocks: Vec<TransformerBlockCache<T>>,
    fusion: Option<AttentionCache<T>>,
}

impl<T> EncoderCache<T> {
    /// Cross-attention weights (`N × L`) when the prior was fused.
    pub fn fusion_weights(&self) -> Option<&Tensor<T>> {
        self.fusion.as_ref().map(|c| &c.weights)
    }
}

/// Encodes an image into the degradation-aware map `X` (`H' × W' × C_feat`).
///
/// With `use_prior` false the fusion is skipped and `prior` is ignored.
pub fn encode<T: Scalar>(
    img: &Tensor<T>,
    prior: Option<&ProjectedPrior<T>>,
    params: &EncoderParams<T>,
    use_prior: bool,
) -> Result<(Tensor<T>, EncoderCache<T>)> {
    let (h, w, _) = img.dims3("encode")?;
    let p = params.patch_size;
    let grid = (h / p.max(1), w / p.max(1));
    let pixels = patchify_pixels(img, p)?;
    let mut tokens = params.patch_embed.forward(&pixels)?;
    tokens.add_assign(&position_code(grid.0, grid.1, params.feat_dim()))?;
    let (features, blocks) = run_blocks(&params.blocks, tokens)?;
    let (x, fusion) = if use_prior {
        let prior = prior.ok_or_else(|| Error::invalid("encode", "prior fusion enabled but no prior given"))?;
        check_fusion_inputs(&features, prior)?;
        let (attended, cache) = params.fusion.forward(&features, &prior.matrix)?;
        (features.add(&attended)?, Some(cache))
    } else {
        (features, None)
    };
    let c = params.feat_dim();
    Ok((
        x.reshape(&[grid.0, grid.1, c])?,
        EncoderCache {
            grid,
            pixels,
            blocks,
            fusion,
        },
    ))
}

/// Accumulates parameter gradients and returns `∂/∂P` when the prior was fused.
pub fn encode_backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &EncoderCache<T>,
    dx: &Tensor<T>,
    grad: &mut EncoderParams<T>,
) -> Result<Option<Tensor<T>>> {
    let (gh, gw) = cache.grid;
    let c = params.feat_dim();
    if dx.shape() != [gh, gw, c] {
        return Err(Error::shape("encode_backward", dx.shape(), &[gh, gw, c]));
    }
    let dx = dx.clone().reshape(&[gh * gw, c])?;
    let (dfeatures, dprior) = match &cache.fusion {
        Some(fc) => {
            let (dq, dctx) = params.fusion.backward(fc, &dx, &mut grad.fusion)?;
            (dx.add(&dq)?, Some(dctx))
        }
        None => (dx, None),
    };
    let dtokens = run_blocks_backward(&params.blocks, &cache.blocks, dfeatures, &mut grad.blocks)?;
    params
        .patch_embed
        .backward(&cache.pixels, &dtokens, &mut grad.patch_embed)?;
    Ok(dprior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::layers::{flatten, parameter_count, unflatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patch_counts_and_pixel_inverse() {
        let mut r = rng(0);
        let img = Tensor::<f64>::uniform(&[8, 8, 3], 0.0, 1.0, &mut r);
        let params = EncoderParams::<f64>::new(4, 16, 16, 32, 0, &mut r);
        assert_eq!(patchify(&img, &params).unwrap().shape(), &[4, 16]);
        let pixels = patchify_pixels(&img, 4).unwrap();
        assert_eq!(unpatchify_pixels(&pixels, 8, 8, 4).unwrap(), img);
        assert!(patchify_pixels(&Tensor::<f64>::zeros(&[6, 8, 3]), 4).is_err());
    }

    #[test]
    fn first_token_embeds_top_left_patch() {
        let mut r = rng(1);
        let img = Tensor::<f64>::uniform(&[4, 4, 3], 0.0, 1.0, &mut r);
        let mut params = EncoderParams::<f64>::new(2, 5, 5, 8, 0, &mut r);
        params.patch_embed.bias = Some(Tensor::randn(&[5], 1.0, &mut r));
        let tokens = patchify(&img, &params).unwrap();
        let patch: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .flat_map(|&(y, x)| img.data()[(y * 4 + x) * 3..(y * 4 + x) * 3 + 3].to_vec())
            .collect();
        let w = &params.patch_embed.weight;
        for k in 0..5 {
            let expected: f64 = patch
                .iter()
                .enumerate()
                .map(|(i, v)| v * w.data()[i * 5 + k])
                .sum::<f64>()
                + params.patch_embed.bias.as_ref().unwrap().data()[k];
            assert!((tokens.row(0)[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_prior_row_attends_with_weight_one() {
        let mut r = rng(2);
        let params = EncoderParams::<f64>::new(4, 6, 4, 8, 0, &mut r);
        let f = Tensor::randn(&[5, 6], 1.0, &mut r);
        let p = ProjectedPrior {
            matrix: Tensor::randn(&[1, 6], 1.0, &mut r),
        };
        let x = cross_attention_fuse(&f, &p, &params).unwrap();
        let value = params.fusion.value.forward(&p.matrix).unwrap();
        let expected = params.fusion.output.forward(&value).unwrap();
        let delta = x.sub(&f).unwrap();
        for n in 0..5 {
            for (a, b) in delta.row(n).iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_leaves_features_unchanged() {
        let mut r = rng(3);
        let mut params = EncoderParams::<f64>::new(4, 6, 4, 8, 0, &mut r);
        params.fusion.value.weight.fill(0.0);
        let f = Tensor::randn(&[5, 6], 1.0, &mut r);
        let p = ProjectedPrior {
            matrix: Tensor::randn(&[3, 6], 1.0, &mut r),
        };
        assert_eq!(cross_attention_fuse(&f, &p, &params).unwrap(), f);
    }

    #[test]
    fn hand_computed_two_by_two_attention() {
        let t = |shape: &[usize], v: &[f64]| Tensor::new(shape, v.to_vec()).unwrap();
        let mut params = EncoderParams::<f64>::new(1, 2, 2, 2, 0, &mut rng(4));
        params.fusion.query.weight = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        params.fusion.key.weight = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        params.fusion.value.weight = t(&[2, 2], &[1.0, 2.0, 0.0, 1.0]);
        params.fusion.output.weight = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let f = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let p = ProjectedPrior {
            matrix: t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]),
        };
        // Scores: token 0 → [2, 0]/√2, token 1 → [0, 2]/√2.
        let s = 2.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 - hi;
        // Values: P·W_V = [[2, 4], [0, 2]].
        let expected = [
            1.0 + hi * 2.0 + lo * 0.0,
            hi * 4.0 + lo * 2.0,
            lo * 2.0 + hi * 0.0,
            1.0 + lo * 4.0 + hi * 2.0,
        ];
        let x = cross_attention_fuse(&f, &p, &params).unwrap();
        for (a, b) in x.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn prior_row_order_does_not_matter() {
        let mut r = rng(5);
        let params = EncoderParams::<f64>::new(4, 6, 4, 8, 0, &mut r);
        let f = Tensor::randn(&[5, 6], 1.0, &mut r);
        let m = Tensor::randn(&[3, 6], 1.0, &mut r);
        let perm = [2usize, 0, 1];
        let permuted = Tensor::from_fn(&[3, 6], |i| m.row(perm[i / 6])[i % 6]);
        let a = cross_attention_fuse(&f, &ProjectedPrior { matrix: m }, &params).unwrap();
        let b = cross_attention_fuse(&f, &ProjectedPrior { matrix: permuted }, &params).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn encode_shape_and_prior_ablation() {
        let mut r = rng(6);
        let params = EncoderParams::<f32>::new(4, 64, 64, 128, 2, &mut r);
        let img = Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut r);
        let p1 = ProjectedPrior {
            matrix: Tensor::randn(&[8, 64], 1.0, &mut r),
        };
        let p2 = ProjectedPrior {
            matrix: Tensor::randn(&[8, 64], 1.0, &mut r),
        };
        let (x, cache) = encode(&img, Some(&p1), &params, true).unwrap();
        assert_eq!(x.shape(), &[8, 8, 64]);
        for row in cache.fusion_weights().unwrap().data().chunks(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let (a, cache) = encode(&img, Some(&p1), &params, false).unwrap();
        let (b, _) = encode(&img, Some(&p2), &params, false).unwrap();
        assert_eq!(a, b);
        let mut grad = zeros_like(&params);
        let dprior = encode_backward(&params, &cache, &Tensor::full(&[8, 8, 64], 1.0), &mut grad).unwrap();
        assert!(dprior.is_none());
        assert!(grad.fusion.query.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_gradients_pass_grad_check() {
        let mut r = rng(7);
        let params = EncoderParams::<f64>::new(2, 4, 3, 6, 1, &mut r);
        let img = Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut r);
        let prior = ProjectedPrior {
            matrix: Tensor::randn(&[2, 4], 1.0, &mut r),
        };
        let mean =
            |p: &EncoderParams<f64>, prior: &ProjectedPrior<f64>| encode(&img, Some(prior), p, true).unwrap().0.mean();
        let (x, cache) = encode(&img, Some(&prior), &params, true).unwrap();
        let dx = Tensor::full(x.shape(), 1.0 / x.len() as f64);
        let mut grad = zeros_like(&params);
        let dprior = encode_backward(&params, &cache, &dx, &mut grad).unwrap().unwrap();

        let n = parameter_count(&params);
        let theta = Tensor::new(&[n], flatten(&params)).unwrap();
        let analytic = Tensor::new(&[n], flatten(&grad)).unwrap();
        let ep = grad_check(
            |t| {
                let mut p = params.clone();
                unflatten(&mut p, t.data()).unwrap();
                mean(&p, &prior)
            },
            &theta,
            &analytic,
            1e-6,
        )
        .unwrap();
        let eprior = grad_check(
            |m| mean(&params, &ProjectedPrior { matrix: m.clone() }),
            &prior.matrix,
            &dprior,
            1e-6,
        )
        .unwrap();
        assert!(ep < 1e-4 && eprior < 1e-4, "{ep} {eprior}");
    }
}
