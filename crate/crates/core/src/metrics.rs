//! Full-reference image quality: PSNR and SSIM.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-mode separable Gaussian filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut horizontal = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            horizontal[y * ow + x] = taps.iter().zip(&row[x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * horizontal[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions, 11×11 Gaussian window
/// with σ = 1.5, `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`, peak 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (h, w, channels) = a.dims3("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "image size",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"),
        ));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let taps = gaussian_taps();
    let plane = |t: &Tensor<T>, c: usize| -> Vec<f64> {
        t.data().iter().skip(c).step_by(channels).map(|v| v.as_f64()).collect()
    };
    let mut total = 0.0;
    for c in 0..channels {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let map_sum: f64 = (0..mx.len())
            .map(|i| {
                let (mux, muy) = (mx[i], my[i]);
                let vx = sxx[i] - mux * mux;
                let vy = syy[i] - muy * muy;
                let cov = sxy[i] - mux * muy;
                ((2.0 * mux * muy + c1) * (2.0 * cov + c2)) / ((mux * mux + muy * muy + c1) * (vx + vy + c2))
            })
            .sum();
        total += map_sum / mx.len() as f64;
    }
    Ok(total / channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[4, 4, 3], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[4, 4, 2]), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 16, 16);
        let noise = Tensor::<f64>::randn(&[16, 16, 3], 1.0, &mut rng);
        let scores: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|&amp| psnr(&img, &img.add(&noise.scale(amp)).unwrap(), 1.0).unwrap())
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn ssim_self_similarity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 20);
        let b = random_image(&mut rng, 16, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr(&b, &a, 1.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn inverted_image_has_negative_ssim() {
        let img = crate::data::gen_clean(12, 32, 32).unwrap();
        let inverted = img.map(|v| 1.0 - v);
        assert!(ssim(&img, &inverted).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[10, 32, 3]);
        assert!(matches!(ssim(&a, &a), Err(Error::Validation { .. })));
    }
}
