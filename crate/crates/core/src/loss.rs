//! Charbonnier and perceptual losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const LAMBDA_PERC: f64 = 0.05;
pub const PERCEPTUAL_SEED: u64 = 0x5eed_0f_fea7;
pub const PERCEPTUAL_CHANNELS: [usize; 2] = [8, 8];

/// Mean over elements of `sqrt((I − Î)² + ε²)`.
///
/// Accumulated as `ε + mean(sqrt(d² + ε²) − ε)` so identical inputs give `ε` exactly.
pub fn charbonnier<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>, eps: f64) -> Result<f64> {
    target.expect_same_shape(pred, "charbonnier")?;
    let eps2 = eps * eps;
    let sum: f64 = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            (d * d + eps2).sqrt() - eps
        })
        .sum();
    Ok(eps + sum / target.len() as f64)
}

/// Gradient of [`charbonnier`] with respect to `pred`.
pub fn charbonnier_grad<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let n = T::of(target.len() as f64);
    let eps2 = T::of(eps * eps);
    pred.zip_map(target, "charbonnier", |p, t| {
        let d = p - t;
        d / (d * d + eps2).sqrt() / n
    })
}

/// Fixed stack of seeded 3×3 convolutions with ReLU, standing in for a pretrained feature network.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualProxy<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

struct ProxyTrace<T> {
    pre: Vec<Tensor<T>>,
    features: Vec<Tensor<T>>,
}

impl<T: Scalar> PerceptualProxy<T> {
    pub fn seeded(seed: u64, channels: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = channels
            .iter()
            .map(|&cout| {
                let w = Tensor::randn(&[9 * cin, cout], (2.0 / (9 * cin) as f64).sqrt(), &mut rng);
                cin = cout;
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { layers }
    }

    /// Feature maps after each ReLU.
    pub fn features(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.trace(img)?.features)
    }

    fn trace(&self, img: &Tensor<T>) -> Result<ProxyTrace<T>> {
        let mut trace = ProxyTrace {
            pre: Vec::new(),
            features: Vec::new(),
        };
        let mut x = img.clone();
        for (w, b) in &self.layers {
            let pre = tensor::conv3x3(&x, w, b)?;
            let feat = tensor::relu(&pre);
            trace.pre.push(pre);
            x = feat.clone();
            trace.features.push(feat);
        }
        Ok(trace)
    }

    /// `Σ_l mean((φ_l(I) − φ_l(Î))²)`.
    pub fn loss(&self, target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
        target.expect_same_shape(pred, "perceptual")?;
        let a = self.features(target)?;
        let b = self.features(pred)?;
        let mut total = 0.0;
        for (fa, fb) in a.iter().zip(&b) {
            let sq: f64 = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(&x, &y)| (x - y).as_f64().powi(2))
                .sum();
            total += sq / fa.len() as f64;
        }
        Ok(total)
    }

    /// Loss value and its gradient with respect to `pred`.
    pub fn loss_and_grad(&self, target: &Tensor<T>, pred: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        target.expect_same_shape(pred, "perceptual")?;
        self.loss_and_grad_from(&self.features(target)?, pred)
    }

    /// [`Self::loss_and_grad`] with the target's feature maps precomputed.
    pub fn loss_and_grad_from(&self, target_features: &[Tensor<T>], pred: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let trace = self.trace(pred)?;
        if target_features.len() != trace.features.len() {
            return Err(Error::invalid(
                "perceptual",
                "feature count differs from the layer count",
            ));
        }
        let mut total = 0.0;
        let mut upstream: Option<Tensor<T>> = None;
        for l in (0..self.layers.len()).rev() {
            let (fa, fb) = (&target_features[l], &trace.features[l]);
            let n = fa.len() as f64;
            let sq: f64 = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(&x, &y)| (x - y).as_f64().powi(2))
                .sum();
            total += sq / n;
            let scale = T::of(2.0 / n);
            let mut dfeat = fb.zip_map(fa, "perceptual", |y, x| (y - x) * scale)?;
            if let Some(u) = upstream.take() {
                dfeat.add_assign(&u)?;
            }
            let dpre = tensor::relu_backward(&trace.pre[l], &dfeat)?;
            upstream = Some(tensor::conv3x3_backward_input(&self.layers[l].0, &dpre)?);
        }
        Ok((total, upstream.unwrap_or_else(|| Tensor::zeros(pred.shape()))))
    }
}

impl<T: Scalar> Default for PerceptualProxy<T> {
    fn default() -> Self {
        Self::seeded(PERCEPTUAL_SEED, &PERCEPTUAL_CHANNELS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
}

/// `charbonnier + λ · perceptual`.
pub fn total_loss<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    proxy: &PerceptualProxy<T>,
    eps: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    let charbonnier = charbonnier(target, pred, eps)?;
    let perceptual = if lambda == 0.0 { 0.0 } else { proxy.loss(target, pred)? };
    Ok(LossBreakdown {
        total: combine(charbonnier, perceptual, lambda),
        charbonnier,
        perceptual,
    })
}

/// [`total_loss`] together with its gradient with respect to `pred`.
pub fn total_loss_and_grad<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    proxy: &PerceptualProxy<T>,
    eps: f64,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor<T>)> {
    total_loss_and_grad_cached(target, None, pred, proxy, eps, lambda)
}

/// [`total_loss_and_grad`], reusing the target's proxy features when given.
pub fn total_loss_and_grad_cached<T: Scalar>(
    target: &Tensor<T>,
    target_features: Option<&[Tensor<T>]>,
    pred: &Tensor<T>,
    proxy: &PerceptualProxy<T>,
    eps: f64,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let charbonnier = charbonnier(target, pred, eps)?;
    let mut grad = charbonnier_grad(target, pred, eps)?;
    let perceptual = if lambda == 0.0 {
        0.0
    } else {
        let (value, g) = match target_features {
            Some(f) => proxy.loss_and_grad_from(f, pred)?,
            None => proxy.loss_and_grad(target, pred)?,
        };
        grad.axpy(T::of(lambda), &g)?;
        value
    };
    Ok((
        LossBreakdown {
            total: combine(charbonnier, perceptual, lambda),
            charbonnier,
            perceptual,
        },
        grad,
    ))
}

fn combine(charbonnier: f64, perceptual: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        charbonnier
    } else {
        charbonnier + lambda * perceptual
    }
}
