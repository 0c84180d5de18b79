//! Reconstruction metrics: pixel-wise MSE and SSIM.

use crate::decoder::Image;
use crate::error::{Error, Result};

/// SSIM parameters. The default 7x7 Gaussian window suits the 32x32 toy
/// images; the usual 11x11 window would leave too few valid positions.
#[derive(Debug, Clone)]
pub struct SsimConfig {
    /// Odd window side length, at most `min(height, width)`.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values (2.0 for images in (-1, 1)).
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 2.0,
        }
    }
}

impl SsimConfig {
    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::invalid("SSIM window must be odd and positive"));
        }
        if self.window > height.min(width) {
            return Err(Error::invalid(format!(
                "SSIM window {} larger than image {}x{}",
                self.window, height, width
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::invalid("SSIM sigma must be positive"));
        }
        Ok(())
    }
}

/// Mean squared elementwise difference.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let r = (side / 2) as isize;
    let mut w = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Structural similarity in [-1, 1]: Gaussian-weighted local statistics over
/// every fully contained window, averaged over positions and channels.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    cfg.validate(a.height, a.width)?;

    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let win = gaussian_window(cfg.window, cfg.sigma);
    let r = cfg.window / 2;
    let (h, w) = (a.height, a.width);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let pa = a.channel(ch);
        let pb = b.channel(ch);
        for cy in r..h - r {
            for cx in r..w - r {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                let mut wi = 0;
                for dy in 0..cfg.window {
                    let row = (cy + dy - r) * w + cx - r;
                    for dx in 0..cfg.window {
                        let g = win[wi];
                        wi += 1;
                        let x = pa[row + dx];
                        let y = pb[row + dx];
                        mu_a += g * x;
                        mu_b += g * y;
                        aa += g * x * x;
                        bb += g * y * y;
                        ab += g * x * y;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from(data: Vec<f64>) -> Image {
        Image {
            channels: 1,
            height: 8,
            width: 8,
            data,
        }
    }

    fn random_image(rng: &mut impl Rng) -> Image {
        image_from((0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn mse_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng);
        let cfg = SsimConfig::default();
        let s = ssim(&img, &img, &cfg).unwrap();
        assert!((s - 1.0).abs() <= 1e-9, "s = {s}");
    }

    #[test]
    fn ssim_constant_offset_matches_closed_form() {
        let cfg = SsimConfig::default();
        let mu1 = 0.2;
        let mu2 = 0.5;
        let a = image_from(vec![mu1; 64]);
        let b = image_from(vec![mu2; 64]);
        let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
        let expected = (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1);
        let s = ssim(&a, &b, &cfg).unwrap();
        assert!((s - expected).abs() <= 1e-9, "{s} vs {expected}");
    }

    #[test]
    fn ssim_rejects_oversized_window() {
        let a = image_from(vec![0.0; 64]);
        let cfg = SsimConfig {
            window: 9,
            ..SsimConfig::default()
        };
        assert!(ssim(&a, &a, &cfg).is_err());
    }

    #[test]
    fn ssim_detects_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng);
        let mut b = a.clone();
        b.data[20] += 1e-3;
        let s = ssim(&a, &b, &SsimConfig::default()).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn ssim_invariant_to_shared_shift() {
        // Shifting both images together through a canvas and cropping back to
        // the shared region compares the same pixel pairs, so the score is
        // unchanged: SSIM depends on values, not absolute position.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng);
        let b = random_image(&mut rng);
        let embed_and_crop = |img: &Image, oy: usize, ox: usize| -> Image {
            let mut canvas = vec![0.0; 12 * 12];
            for y in 0..8 {
                for x in 0..8 {
                    canvas[(y + oy) * 12 + x + ox] = img.data[y * 8 + x];
                }
            }
            let mut data = Vec::with_capacity(64);
            for y in 0..8 {
                for x in 0..8 {
                    data.push(canvas[(y + oy) * 12 + x + ox]);
                }
            }
            image_from(data)
        };
        let cfg = SsimConfig::default();
        let s0 = ssim(&a, &b, &cfg).unwrap();
        let s1 = ssim(&embed_and_crop(&a, 3, 2), &embed_and_crop(&b, 3, 2), &cfg).unwrap();
        assert_eq!(s0, s1);
    }

    proptest! {
        #[test]
        fn mse_is_symmetric_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let mab = mse(&a, &b).unwrap();
            let mba = mse(&b, &a).unwrap();
            prop_assert!(mab >= 0.0);
            prop_assert_eq!(mab, mba);
            prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng);
            let b = random_image(&mut rng);
            let cfg = SsimConfig::default();
            let sab = ssim(&a, &b, &cfg).unwrap();
            let sba = ssim(&b, &a, &cfg).unwrap();
            prop_assert!((sab - sba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&sab));
        }
    }
}
