//! Square padding, resizing, normalization and flip augmentation.

use image::{DynamicImage, Rgb, RgbImage};
use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::ingest::ChannelStats;

/// Placement of a `w × h` image inside its padded square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadGeometry {
    pub side: u32,
    pub left: u32,
    pub top: u32,
}

impl PadGeometry {
    pub fn new(w: u32, h: u32) -> Self {
        let side = w.max(h);
        PadGeometry {
            side,
            left: (side - w) / 2,
            top: (side - h) / 2,
        }
    }

    /// Maps a pixel-space rectangle `(x, y, w, h)` of the original image to
    /// the coordinates of a square of side `size`.
    pub fn map_box(&self, bbox: [u32; 4], size: usize) -> [f64; 4] {
        let s = size as f64 / f64::from(self.side);
        [
            f64::from(bbox[0] + self.left) * s,
            f64::from(bbox[1] + self.top) * s,
            f64::from(bbox[2]) * s,
            f64::from(bbox[3]) * s,
        ]
    }
}

/// Centers the image on a square canvas of side `max(w, h)` filled with
/// `fill`. Odd padding puts the extra pixel at the bottom or right.
pub fn pad_to_square(image: &RgbImage, fill: [u8; 3]) -> RgbImage {
    let g = PadGeometry::new(image.width(), image.height());
    if image.width() == image.height() {
        return image.clone();
    }
    let mut out = RgbImage::from_pixel(g.side, g.side, Rgb(fill));
    image::imageops::replace(&mut out, image, i64::from(g.left), i64::from(g.top));
    out
}

/// Bilinear resampling weights for half-pixel centers with edge clamping:
/// `(lower index, upper index, upper weight)` per output position.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Pads to a square with the dataset mean, resizes bilinearly to
/// `input_size`, scales to [0,1] and standardizes per channel. Grayscale
/// images are replicated to three channels.
pub fn preprocess(image: &DynamicImage, input_size: usize, stats: &ChannelStats) -> Result<Tensor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Image("zero-sized image".into()));
    }
    let rgb = image.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let g = PadGeometry::new(rgb.width(), rgb.height());
    let side = g.side as usize;
    let (left, top) = (g.left as usize, g.top as usize);
    let taps = resize_taps(side, input_size);
    let s = input_size;
    let mut out = Tensor::zeros(1, 3, s, s);
    let mut rows = vec![0.0f64; side * s];
    for c in 0..3 {
        let fill = stats.mean[c];
        let px = |x: usize, y: usize| -> f64 {
            if x < left || x >= left + w || y < top || y >= top + h {
                fill
            } else {
                f64::from(rgb.get_pixel((x - left) as u32, (y - top) as u32)[c]) / 255.0
            }
        };
        // horizontal pass over every padded row
        for y in 0..side {
            for (ox, &(x0, x1, t)) in taps.iter().enumerate() {
                rows[y * s + ox] = px(x0, y) * (1.0 - t) + px(x1, y) * t;
            }
        }
        let plane = &mut out.data[c * s * s..(c + 1) * s * s];
        for (oy, &(y0, y1, t)) in taps.iter().enumerate() {
            for ox in 0..s {
                let v = rows[y0 * s + ox] * (1.0 - t) + rows[y1 * s + ox] * t;
                plane[oy * s + ox] = ((v - stats.mean[c]) / stats.std[c]) as f32;
            }
        }
    }
    Ok(out)
}

/// Mirrors every plane left to right.
pub fn hflip(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for plane in out.data.chunks_mut(t.w) {
        plane.reverse();
    }
    out
}

/// Training-time augmentation: a horizontal mirror with probability
/// `hflip_prob`, nothing else.
pub fn augment(t: &Tensor, hflip_prob: f64, rng: &mut impl Rng) -> Tensor {
    if rng.random::<f64>() < hflip_prob {
        hflip(t)
    } else {
        t.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: [f64; 3], std: [f64; 3]) -> ChannelStats {
        ChannelStats { mean, std, n_images: 1 }
    }

    #[test]
    fn pad_geometry_examples() {
        let img = RgbImage::from_pixel(300, 200, Rgb([9, 9, 9]));
        let p = pad_to_square(&img, [1, 2, 3]);
        assert_eq!(p.dimensions(), (300, 300));
        assert_eq!(p.get_pixel(0, 49), &Rgb([1, 2, 3]));
        assert_eq!(p.get_pixel(0, 50), &Rgb([9, 9, 9]));
        assert_eq!(p.get_pixel(0, 249), &Rgb([9, 9, 9]));
        assert_eq!(p.get_pixel(0, 250), &Rgb([1, 2, 3]));

        let img = RgbImage::from_pixel(40, 100, Rgb([9, 9, 9]));
        let p = pad_to_square(&img, [0, 0, 0]);
        assert_eq!(p.dimensions(), (100, 100));
        assert_eq!(p.get_pixel(29, 0)[0], 0);
        assert_eq!(p.get_pixel(30, 0)[0], 9);
        assert_eq!(p.get_pixel(69, 0)[0], 9);
        assert_eq!(p.get_pixel(70, 0)[0], 0);

        let sq = RgbImage::from_fn(224, 224, |x, y| Rgb([x as u8, y as u8, 0]));
        assert_eq!(pad_to_square(&sq, [5, 5, 5]), sq);
    }

    #[test]
    fn mean_colored_image_normalizes_to_zero() {
        let st = stats([100.0 / 255.0, 50.0 / 255.0, 200.0 / 255.0], [0.2, 0.3, 0.1]);
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(37, 20, Rgb([100, 50, 200])));
        let t = preprocess(&img, 64, &st).unwrap();
        assert_eq!(t.shape(), [1, 3, 64, 64]);
        assert!(t.data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn grayscale_is_replicated() {
        let img = DynamicImage::ImageLuma8(image::GrayImage::from_fn(10, 10, |x, _| image::Luma([x as u8 * 20])));
        let t = preprocess(&img, 16, &ChannelStats::identity()).unwrap();
        assert_eq!(t.shape(), [1, 3, 16, 16]);
        let n = 16 * 16;
        assert_eq!(&t.data[..n], &t.data[n..2 * n]);
        assert_eq!(&t.data[..n], &t.data[2 * n..]);
    }

    #[test]
    fn zero_sized_image_is_an_error() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(0, 5));
        assert!(preprocess(&img, 64, &ChannelStats::identity()).is_err());
    }

    #[test]
    fn flip_probability_extremes() {
        let t = Tensor::from_vec(1, 2, 2, 3, (0..12).map(|v| v as f32).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&t, 0.0, &mut rng), t);
        let f = augment(&t, 1.0, &mut rng);
        assert_eq!(&f.data[..3], &[2.0, 1.0, 0.0]);
        assert_eq!(&f.data[9..], &[11.0, 10.0, 9.0]);
        assert_eq!(hflip(&f), t);
    }

    #[test]
    fn flip_fraction_at_one_half() {
        let t = Tensor::from_vec(1, 1, 1, 2, vec![0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let flips = (0..10_000).filter(|_| augment(&t, 0.5, &mut rng) != t).count();
        let frac = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }
}
