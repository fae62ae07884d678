use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub n_images: usize,
}

impl ChannelStats {
    /// Statistics that leave pixel values in [0,1] unchanged.
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            n_images: 1,
        }
    }

    pub fn mean_rgb8(&self) -> [u8; 3] {
        self.mean.map(|m| (m * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

/// Streaming per-channel mean and population standard deviation. Each image
/// is reduced to (count, mean, M2) and merged with the pairwise update, so
/// only one image is held at a time.
#[derive(Debug, Clone, Default)]
pub struct ChannelStatsAccumulator {
    count: u64,
    mean: [f64; 3],
    m2: [f64; 3],
    n_images: usize,
}

impl ChannelStatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_image(&mut self, image: &RgbImage) {
        let n = u64::from(image.width()) * u64::from(image.height());
        if n == 0 {
            return;
        }
        let mut sum = [0.0f64; 3];
        for p in image.pixels() {
            for c in 0..3 {
                sum[c] += f64::from(p[c]) / 255.0;
            }
        }
        let mean_b = sum.map(|s| s / n as f64);
        let mut m2_b = [0.0f64; 3];
        for p in image.pixels() {
            for c in 0..3 {
                let d = f64::from(p[c]) / 255.0 - mean_b[c];
                m2_b[c] += d * d;
            }
        }
        let (na, nb) = (self.count as f64, n as f64);
        let total = na + nb;
        for c in 0..3 {
            let delta = mean_b[c] - self.mean[c];
            self.mean[c] += delta * nb / total;
            self.m2[c] += m2_b[c] + delta * delta * na * nb / total;
        }
        self.count += n;
        self.n_images += 1;
    }

    pub fn finish(&self) -> Result<ChannelStats> {
        if self.n_images == 0 {
            return Err(Error::NoActiveRecords);
        }
        let mut std = [0.0; 3];
        for c in 0..3 {
            let s = (self.m2[c] / self.count as f64).sqrt();
            std[c] = if s < MIN_STD {
                log::warn!("channel {c} has zero variance; std clamped to {MIN_STD}");
                MIN_STD
            } else {
                s
            };
        }
        Ok(ChannelStats {
            mean: self.mean,
            std,
            n_images: self.n_images,
        })
    }
}

pub fn compute_channel_stats<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<ChannelStats> {
    let mut acc = ChannelStatsAccumulator::new();
    for img in images {
        acc.push_image(img);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-pass oracle over every pixel of every image.
    fn two_pass(images: &[RgbImage]) -> ([f64; 3], [f64; 3]) {
        let mut mean = [0.0; 3];
        let mut n = 0.0;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    mean[c] += f64::from(p[c]) / 255.0;
                }
                n += 1.0;
            }
        }
        mean = mean.map(|m| m / n);
        let mut var = [0.0; 3];
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let d = f64::from(p[c]) / 255.0 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        (mean, var.map(|v| (v / n).sqrt()))
    }

    #[test]
    fn uniform_mid_gray_clamps_std() {
        let img = RgbImage::from_pixel(8, 8, Rgb([128, 128, 128]));
        let s = compute_channel_stats([&img]).unwrap();
        for c in 0..3 {
            assert!((s.mean[c] - 128.0 / 255.0).abs() < 1e-12);
            assert_eq!(s.std[c], MIN_STD);
        }
    }

    #[test]
    fn black_and_white_pair() {
        let black = RgbImage::from_pixel(5, 4, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(5, 4, Rgb([255, 255, 255]));
        let s = compute_channel_stats([&black, &white]).unwrap();
        for c in 0..3 {
            assert!((s.mean[c] - 0.5).abs() < 1e-12);
            assert!((s.std[c] - 0.5).abs() < 1e-12);
        }
        assert_eq!(s.n_images, 2);
    }

    #[test]
    fn matches_two_pass_oracle_on_random_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images: Vec<RgbImage> = (0..10)
            .map(|_| {
                let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
                RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
            })
            .collect();
        let s = compute_channel_stats(images.iter()).unwrap();
        let (mean, std) = two_pass(&images);
        for c in 0..3 {
            assert!((s.mean[c] - mean[c]).abs() < 1e-6);
            assert!((s.std[c] - std[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(compute_channel_stats([]), Err(Error::NoActiveRecords)));
    }
}
