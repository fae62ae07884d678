//! Backbone pretraining on a procedurally generated texture corpus.
//!
//! The reduced-depth backbones have no published weights, so they are
//! pretrained here on a ten-way shape discrimination task (a randomly
//! colored primitive placed on a textured background) and the resulting
//! backbone is what fine-tuning starts from.

use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneArch, BackboneWeights, FreezeLevel};
use super::config::ModelConfig;
use super::train::{plan_epochs, train, InputSet};
use super::TrainedModel;
use crate::classes::IconClass;
use crate::fixture::background;
use crate::error::Result;
use crate::ingest::compute_channel_stats;

pub const PRETEXT_CLASSES: [&str; 10] = [
    "disc",
    "square",
    "triangle",
    "ring",
    "plus",
    "saltire",
    "diamond",
    "horizontal_bar",
    "vertical_bar",
    "crescent",
];

#[derive(Debug, Clone)]
pub struct PretextSample {
    pub image: RgbImage,
    pub class: usize,
}

fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let (x, y) = (u - 0.5, v - 0.5);
    let r = (x * x + y * y).sqrt();
    match class {
        0 => r < 0.45,
        1 => x.abs() < 0.38 && y.abs() < 0.38,
        2 => y > -0.42 && y < 0.4 && x.abs() < (y + 0.42) * 0.55,
        3 => r < 0.46 && r > 0.3,
        4 => (x.abs() < 0.1 && y.abs() < 0.45) || (y.abs() < 0.1 && x.abs() < 0.45),
        5 => ((x - y).abs() < 0.14 || (x + y).abs() < 0.14) && r < 0.5,
        6 => x.abs() + y.abs() < 0.45,
        7 => x.abs() < 0.46 && y.abs() < 0.13,
        8 => y.abs() < 0.46 && x.abs() < 0.13,
        _ => r < 0.45 && (x - 0.18).powi(2) + y * y > 0.33f64.powi(2),
    }
}

fn vivid_color(rng: &mut impl Rng) -> [f64; 3] {
    let mut c = [0, 1, 2].map(|_| rng.random_range(0.0..255.0));
    let k = rng.random_range(0..3);
    c[k] = if c[k] > 127.0 { 255.0 } else { 0.0 };
    c
}

fn shape_image(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let mut img = background(size, size, rng);
    let side = (f64::from(size) * rng.random_range(0.3..0.55)).round() as u32;
    let gx = rng.random_range(0..size - side);
    let gy = rng.random_range(0..size - side);
    let color = vivid_color(rng);
    for py in 0..side {
        for px in 0..side {
            let u = (f64::from(px) + 0.5) / f64::from(side);
            let v = (f64::from(py) + 0.5) / f64::from(side);
            if shape_contains(class, u, v) {
                img.put_pixel(gx + px, gy + py, Rgb(color.map(|c| c as u8)));
            }
        }
    }
    img
}

/// `n_per_class` images of every pretext shape.
pub fn pretext_corpus(n_per_class: usize, size: u32, seed: u64) -> Vec<PretextSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * PRETEXT_CLASSES.len());
    for _ in 0..n_per_class {
        for class in 0..PRETEXT_CLASSES.len() {
            out.push(PretextSample {
                image: shape_image(class, size, &mut rng),
                class,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: BackboneArch,
    pub input_size: usize,
    pub n_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            arch: BackboneArch::tiny(),
            input_size: 64,
            n_per_class: 100,
            epochs: 25,
            lr: 0.2,
            batch_size: 16,
            seed: 7,
        }
    }
}

/// Trains a backbone from random initialization on the pretext corpus and
/// returns its weights together with the pretext model.
pub fn pretrain_backbone(cfg: &PretrainConfig) -> Result<(BackboneWeights, TrainedModel)> {
    let corpus = pretext_corpus(cfg.n_per_class, cfg.input_size as u32, cfg.seed);
    let stats = compute_channel_stats(corpus.iter().map(|s| &s.image))?;
    let model_cfg = ModelConfig {
        backbone: cfg.arch.clone(),
        freeze_level: FreezeLevel::None,
        input_size: cfg.input_size,
        channel_stats: stats,
        head_lr: cfg.lr,
        backbone_lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        ..ModelConfig::default()
    };
    let mut inputs = InputSet::new(cfg.input_size);
    let mut train_set = Vec::new();
    let mut val = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        let id = format!("pretext-{i:05}");
        inputs.insert_image(id.clone(), &DynamicImage::ImageRgb8(s.image.clone()), &stats)?;
        let class = IconClass::from_index(s.class).expect("ten pretext classes");
        if (i / PRETEXT_CLASSES.len()) % 10 == 0 {
            val.push((id, class));
        } else {
            train_set.push((id, class));
        }
    }
    let backbone = Backbone::new(&cfg.arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let model = TrainedModel::from_backbone(model_cfg, backbone)?;
    let plans = plan_epochs(&train_set, cfg.epochs, cfg.seed, false)?;
    let trained = train(model, &inputs, &plans, &val)?;
    Ok((trained.backbone.weights(), trained))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let a = pretext_corpus(3, 32, 1);
        let b = pretext_corpus(3, 32, 1);
        assert_eq!(a.len(), 30);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.class == y.class));
        for c in 0..10 {
            assert_eq!(a.iter().filter(|s| s.class == c).count(), 3);
        }
    }
}
