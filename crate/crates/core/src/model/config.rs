use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::backbone::{BackboneArch, FreezeLevel};
use crate::classes::N_CLASSES;
use crate::error::{Error, Result};
use crate::ingest::ChannelStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneArch,
    /// Backbone weight file produced by pretraining.
    pub pretrained: Option<PathBuf>,
    pub freeze_level: FreezeLevel,
    pub input_size: usize,
    pub channel_stats: ChannelStats,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hflip_prob: f64,
    pub n_classes: usize,
    /// Average each prediction with the mirrored prediction of the mirrored
    /// input, making class maps exactly flip-equivariant.
    pub mirror_average: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneArch::resnet50(),
            pretrained: None,
            freeze_level: FreezeLevel::StemBlock2,
            input_size: 224,
            channel_stats: ChannelStats::identity(),
            head_lr: 1e-3,
            backbone_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 10,
            hflip_prob: 0.5,
            n_classes: N_CLASSES,
            mirror_average: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Settings for the reduced-depth backbone at 64 pixels.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneArch::tiny(),
            input_size: 96,
            head_lr: 0.5,
            backbone_lr: 0.1,
            batch_size: 16,
            epochs: 20,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_lr > self.head_lr {
            return bad(format!(
                "backbone_lr {} must not exceed head_lr {}",
                self.backbone_lr, self.head_lr
            ));
        }
        if !(self.head_lr > 0.0 && self.backbone_lr >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.input_size < 64 {
            return bad(format!("input_size {} is below 64", self.input_size));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!("hflip_prob {} outside [0,1]", self.hflip_prob));
        }
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.channel_stats.std.iter().any(|&s| s <= 0.0) {
            return bad("channel std must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().input_size, 224);
        assert_eq!(ModelConfig::default().freeze_level, FreezeLevel::StemBlock2);
    }

    #[test]
    fn invariants_are_enforced() {
        let base = ModelConfig::default();
        for cfg in [
            ModelConfig { backbone_lr: 0.1, head_lr: 0.01, ..base.clone() },
            ModelConfig { input_size: 32, ..base.clone() },
            ModelConfig { hflip_prob: 1.5, ..base.clone() },
            ModelConfig { n_classes: 3, ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: ModelConfig = toml::from_str("freeze_level = \"all_backbone\"\nhead_lr = 0.5").unwrap();
        assert_eq!(cfg.freeze_level, FreezeLevel::AllBackbone);
        assert_eq!(cfg.head_lr, 0.5);
        assert_eq!(cfg.input_size, 224);
        let back: ModelConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
