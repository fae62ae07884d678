//! The fully-convolutional classifier: a residual backbone followed by a 1×1
//! convolution producing one spatial map per class.

mod backbone;
pub mod checkpoint;
mod config;
mod head;
mod layers;
mod preprocess;
mod pretrain;
mod tensor;
mod train;

use std::collections::BTreeMap;

use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneArch, BackboneWeights, BlockKind, FreezeLevel, StageSpec, StemSpec};
pub use config::ModelConfig;
pub use head::{bce_with_logits, sigmoid, Head, HeadOutput};
pub use layers::{BatchNorm2d, Conv2d, ConvBn, Param};
pub use preprocess::{augment, hflip, pad_to_square, preprocess, PadGeometry};
pub(crate) use preprocess::resize_taps;
pub use pretrain::{pretext_corpus, pretrain_backbone, PretextSample, PretrainConfig, PRETEXT_CLASSES};
pub use tensor::Tensor;
pub use train::{plan_epochs, train, InputSet};

use crate::classes::IconClass;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_ap: Option<f64>,
    pub val_accuracy: Option<f64>,
    #[serde(default)]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
    /// Class carried by each output channel.
    pub class_index_map: Vec<IconClass>,
    pub training_log: Vec<EpochLog>,
    /// Epoch whose weights were retained.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub map_h: usize,
    pub map_w: usize,
    /// One row-major `map_h × map_w` map per class, indexed by class index.
    pub class_maps: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub predicted: Option<IconClass>,
    pub threshold: f64,
    pub input_size: usize,
}

impl Prediction {
    fn from_output(record_id: &str, out: HeadOutput, channels: &[IconClass], threshold: f64, input_size: usize) -> Self {
        let n = channels.len();
        let mut class_maps = vec![Vec::new(); n];
        let mut logits = vec![0.0; n];
        for ((map, logit), class) in out.maps.into_iter().zip(out.logits).zip(channels) {
            class_maps[class.index()] = map;
            logits[class.index()] = logit;
        }
        let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        let predicted = (scores[best] >= threshold).then(|| IconClass::from_index(best).expect("class index"));
        Prediction {
            record_id: record_id.to_string(),
            map_h: out.h,
            map_w: out.w,
            class_maps,
            logits,
            scores,
            predicted,
            threshold,
            input_size,
        }
    }

    pub fn score(&self, class: IconClass) -> f64 {
        self.scores[class.index()]
    }

    pub fn class_map(&self, class: IconClass) -> &[f64] {
        &self.class_maps[class.index()]
    }

    /// Class with the highest score regardless of the threshold.
    pub fn top_class(&self) -> IconClass {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        IconClass::from_index(best).expect("class index")
    }
}

impl TrainedModel {
    /// Assembles a model from parts; the head is newly initialized from the
    /// configured seed.
    pub fn from_backbone(config: ModelConfig, backbone: Backbone) -> Result<Self> {
        config.validate()?;
        if backbone.arch != config.backbone {
            return Err(Error::WeightMismatch(format!(
                "backbone {} does not match configured {}",
                backbone.arch.name, config.backbone.name
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6865_6164);
        let head = Head::new(config.backbone.out_channels(), config.n_classes, &mut rng);
        Ok(TrainedModel {
            class_index_map: IconClass::ALL.to_vec(),
            config,
            backbone,
            head,
            training_log: Vec::new(),
            best_epoch: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        !self.training_log.is_empty()
    }

    pub fn channel_of(&self, class: IconClass) -> usize {
        self.class_index_map.iter().position(|&c| c == class).expect("every class has a channel")
    }

    pub fn feature_size(&self) -> usize {
        self.config.backbone.feature_size(self.config.input_size)
    }

    /// Head outputs for a batch of preprocessed inputs, in inference mode.
    pub fn forward(&self, x: &Tensor) -> Vec<HeadOutput> {
        let out = self.head.forward(&self.backbone.forward(x));
        if !self.config.mirror_average {
            return out;
        }
        let mirrored = self.head.forward(&self.backbone.forward(&hflip(x)));
        out.into_iter()
            .zip(mirrored)
            .map(|(a, b)| {
                let (h, w) = (a.h, a.w);
                let maps: Vec<Vec<f64>> = a
                    .maps
                    .iter()
                    .zip(&b.maps)
                    .map(|(ma, mb)| {
                        (0..h * w)
                            .map(|i| {
                                let (y, x) = (i / w, i % w);
                                0.5 * (ma[i] + mb[y * w + (w - 1 - x)])
                            })
                            .collect()
                    })
                    .collect();
                let logits = maps.iter().map(|m| m.iter().sum::<f64>() / (h * w) as f64).collect();
                HeadOutput { h, w, maps, logits }
            })
            .collect()
    }

    /// Predictions for preprocessed single-sample tensors.
    pub fn predict_tensors(&self, inputs: &[(&str, &Tensor)], threshold: f64) -> Vec<Prediction> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            let x = Tensor::stack(chunk.iter().map(|(_, t)| *t));
            for ((id, _), o) in chunk.iter().zip(self.forward(&x)) {
                out.push(Prediction::from_output(id, o, &self.class_index_map, threshold, self.config.input_size));
            }
        }
        out
    }

    pub fn predict_image(&self, record_id: &str, image: &DynamicImage, threshold: f64) -> Result<Prediction> {
        let x = preprocess(image, self.config.input_size, &self.config.channel_stats)?;
        Ok(self.predict_tensors(&[(record_id, &x)], threshold).remove(0))
    }

    pub fn checkpoint_id(&self) -> String {
        checkpoint::checkpoint_id(self)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        checkpoint::load(path)
    }

    /// Mean loss of a batch in training mode, leaving the model untouched.
    pub fn batch_loss(&self, x: &Tensor, targets: &[Vec<f64>]) -> f64 {
        let frozen = self.config.freeze_level.frozen_units();
        let mut probe = self.backbone.clone();
        let feats = probe.forward_train(x, frozen);
        let logits: Vec<Vec<f64>> = self.head.forward(&feats).into_iter().map(|o| o.logits).collect();
        bce_with_logits(&logits, targets).0
    }
}

/// Builds an untrained model from the configured pretrained backbone file.
pub fn build_model(config: &ModelConfig) -> Result<TrainedModel> {
    let path = config.pretrained.as_ref().ok_or_else(|| {
        Error::MissingPretrained(format!(
            "no weight file configured for backbone {}; training from scratch is not supported",
            config.backbone.name
        ))
    })?;
    if !path.exists() {
        return Err(Error::MissingPretrained(format!("{} does not exist", path.display())));
    }
    build_model_with(config, &BackboneWeights::load(path)?)
}

/// Builds an untrained model on the given pretrained backbone weights.
pub fn build_model_with(config: &ModelConfig, weights: &BackboneWeights) -> Result<TrainedModel> {
    TrainedModel::from_backbone(config.clone(), Backbone::from_weights(weights)?)
}

pub fn predict(model: &TrainedModel, record_id: &str, image: &DynamicImage, threshold: f64) -> Result<Prediction> {
    model.predict_image(record_id, image, threshold)
}

/// Per-class counts of trainable parameters, for reporting.
pub fn parameter_summary(model: &TrainedModel) -> BTreeMap<&'static str, usize> {
    let frozen = model.config.freeze_level.frozen_units();
    let mut bb = model.backbone.clone();
    let trainable: usize = bb.trainable_params(frozen).iter().map(|p| p.value.len()).sum();
    let mut m = BTreeMap::new();
    m.insert("backbone_total", model.backbone.n_params());
    m.insert("backbone_trainable", trainable);
    m.insert("head", model.head.weight.len() + model.head.bias.len());
    m
}
