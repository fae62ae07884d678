//! Mini-batch fine-tuning with two learning-rate groups.

use std::collections::{BTreeMap, HashMap};

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::head::bce_with_logits;
use super::preprocess::{hflip, preprocess};
use super::tensor::Tensor;
use super::{EpochLog, TrainedModel};
use crate::classes::IconClass;
use crate::dataset::{plan_oversampled_epoch, EpochPlan};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, top1_accuracy};
use crate::ingest::ChannelStats;

/// Preprocessed inputs keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct InputSet {
    pub input_size: usize,
    tensors: BTreeMap<String, Tensor>,
}

impl InputSet {
    pub fn new(input_size: usize) -> Self {
        InputSet {
            input_size,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, t: Tensor) {
        assert_eq!(t.shape(), [1, 3, self.input_size, self.input_size], "input shape");
        self.tensors.insert(id.into(), t);
    }

    pub fn insert_image(&mut self, id: impl Into<String>, image: &DynamicImage, stats: &ChannelStats) -> Result<()> {
        let t = preprocess(image, self.input_size, stats)?;
        self.insert(id, t);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.tensors.get(id).ok_or_else(|| Error::UnknownRecord(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tensors.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// One plan per epoch. With oversampling every class is brought to the size
/// of the largest; without it each epoch is a seeded shuffle of `train`.
pub fn plan_epochs(train: &[(String, IconClass)], epochs: usize, seed: u64, oversample: bool) -> Result<Vec<EpochPlan>> {
    (0..epochs)
        .map(|e| {
            let s = epoch_seed(seed, e);
            if oversample {
                plan_oversampled_epoch(train, s)
            } else {
                use rand::seq::SliceRandom;
                let mut order = train.to_vec();
                order.sort();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
                let mut per_class: BTreeMap<IconClass, Vec<String>> = BTreeMap::new();
                for (id, c) in &order {
                    per_class.entry(*c).or_default().push(id.clone());
                }
                Ok(EpochPlan {
                    target_count: per_class.values().map(Vec::len).max().unwrap_or(0),
                    per_class,
                    order,
                })
            }
        })
        .collect()
}

struct ValScore {
    mean_ap: Option<f64>,
    accuracy: Option<f64>,
    loss: Option<f64>,
}

fn validate(model: &TrainedModel, inputs: &InputSet, val: &[(String, IconClass)]) -> Result<ValScore> {
    if val.is_empty() {
        return Ok(ValScore {
            mean_ap: None,
            accuracy: None,
            loss: None,
        });
    }
    let items: Vec<(&str, &Tensor)> = val
        .iter()
        .map(|(id, _)| inputs.get(id).map(|t| (id.as_str(), t)))
        .collect::<Result<_>>()?;
    let preds = model.predict_tensors(&items, 0.5);
    let truths: Vec<IconClass> = val.iter().map(|(_, c)| *c).collect();
    let logits: Vec<Vec<f64>> = preds.iter().map(|p| p.logits.clone()).collect();
    let targets: Vec<Vec<f64>> = truths
        .iter()
        .map(|c| {
            let mut t = vec![0.0; model.config.n_classes];
            t[model.channel_of(*c)] = 1.0;
            t
        })
        .collect();
    Ok(ValScore {
        mean_ap: mean_average_precision(&preds, &truths),
        accuracy: Some(top1_accuracy(&preds, &truths)),
        loss: Some(bce_with_logits(&logits, &targets).0),
    })
}

/// Whether `a` beats `b` as the retained epoch: higher mean AP, then lower
/// validation loss. Undefined scores lose to defined ones; full ties keep
/// the earlier epoch, and without any validation data the latest wins.
fn improves(a: &ValScore, b: &ValScore) -> bool {
    match (a.mean_ap, b.mean_ap) {
        (Some(x), Some(y)) if x != y => return x > y,
        (Some(_), None) => return true,
        (None, Some(_)) => return false,
        _ => {}
    }
    match (a.loss, b.loss) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        (None, None) => a.mean_ap.is_none() && b.mean_ap.is_none(),
        (None, Some(_)) => false,
    }
}

/// Fine-tunes `model` over the given epoch plans with per-class binary
/// cross-entropy on one-hot targets. Units below the freeze level run in
/// inference mode and are never updated; the rest of the backbone moves at
/// `backbone_lr` and the head at `head_lr`. The weights of the epoch with
/// the best validation mean AP (lower validation loss on ties) are
/// returned along with the full log.
pub fn train(model: TrainedModel, inputs: &InputSet, plans: &[EpochPlan], val: &[(String, IconClass)]) -> Result<TrainedModel> {
    model.config.validate()?;
    if plans.is_empty() {
        return Ok(model);
    }
    if inputs.input_size != model.config.input_size {
        return Err(Error::InvalidArgument(format!(
            "inputs are {} pixels but the model expects {}",
            inputs.input_size, model.config.input_size
        )));
    }
    for (id, _) in plans.iter().flat_map(|p| &p.order).chain(val) {
        inputs.get(id)?;
    }
    let cfg = model.config.clone();
    let frozen = cfg.freeze_level.frozen_units();
    let n_units = model.backbone.units.len();
    let n_classes = cfg.n_classes;

    let initial = model.clone();
    let mut model = model;
    let mut log = model.training_log.clone();
    let start = log.len();
    let mut best: Option<(ValScore, usize, TrainedModel)> = None;
    // Frozen-prefix activations never change, so they are computed once per
    // (record, mirrored) pair.
    let mut prefix: HashMap<(String, bool), Tensor> = HashMap::new();

    for (e, plan) in plans.iter().enumerate() {
        let epoch = start + e;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch) ^ 0x6175_676d);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in plan.order.chunks(cfg.batch_size) {
            let mut hs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for (id, class) in batch {
                let flip = rng.random::<f64>() < cfg.hflip_prob;
                let x = inputs.get(id)?;
                let h = if frozen == 0 {
                    if flip {
                        hflip(x)
                    } else {
                        x.clone()
                    }
                } else {
                    let bb = &model.backbone;
                    prefix
                        .entry((id.clone(), flip))
                        .or_insert_with(|| bb.forward_frozen(&if flip { hflip(x) } else { x.clone() }, frozen))
                        .clone()
                };
                hs.push(h);
                let mut t = vec![0.0; n_classes];
                t[model.channel_of(*class)] = 1.0;
                targets.push(t);
            }
            let h = Tensor::stack(&hs);
            let feats = if frozen < n_units {
                model.backbone.forward_train_from(&h, frozen)
            } else {
                h
            };
            let logits: Vec<Vec<f64>> = model.head.forward(&feats).into_iter().map(|o| o.logits).collect();
            let (loss, dlogits) = bce_with_logits(&logits, &targets);
            if !loss.is_finite() {
                let mut last_good = best.map(|b| b.2).unwrap_or(initial);
                last_good.training_log = log;
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            model.head.zero_grad();
            let dfeat = model.head.backward(&feats, &dlogits);
            if frozen < n_units {
                model.backbone.backward(dfeat, frozen);
            }
            model.head.sgd_step(cfg.head_lr, cfg.momentum, cfg.weight_decay);
            for p in model.backbone.trainable_params(frozen) {
                p.sgd_step(cfg.backbone_lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
                p.zero_grad();
            }
            loss_sum += loss;
            batches += 1;
        }
        let score = validate(&model, inputs, val)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("epoch {epoch}: loss {train_loss:.5} val mAP {:?}", score.mean_ap);
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mean_ap: score.mean_ap,
            val_accuracy: score.accuracy,
            val_loss: score.loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| improves(&score, b)) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, mut out) = best.expect("at least one epoch ran");
    out.training_log = log;
    out.best_epoch = Some(best_epoch);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, FreezeLevel, ModelConfig};

    fn tiny(freeze: FreezeLevel, seed: u64) -> TrainedModel {
        let cfg = ModelConfig {
            freeze_level: freeze,
            epochs: 2,
            batch_size: 4,
            input_size: 64,
            ..ModelConfig::tiny()
        };
        let bb = Backbone::new(&cfg.backbone, &mut ChaCha8Rng::seed_from_u64(seed));
        TrainedModel::from_backbone(cfg, bb).unwrap()
    }

    fn toy_data() -> (InputSet, Vec<(String, IconClass)>) {
        let mut inputs = InputSet::new(64);
        let mut train = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, class) in IconClass::ALL.iter().enumerate() {
            for j in 0..2 {
                let id = format!("r{k}-{j}");
                let data = (0..3 * 64 * 64)
                    .map(|i| if i / (64 * 64) == k % 3 { 1.0 } else { rng.random_range(-0.2..0.2) })
                    .collect();
                inputs.insert(id.clone(), Tensor::from_vec(1, 3, 64, 64, data));
                train.push((id, *class));
            }
        }
        (inputs, train)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = tiny(FreezeLevel::StemBlock2, 0);
        let (inputs, _) = toy_data();
        assert_eq!(train(m.clone(), &inputs, &[], &[]).unwrap(), m);
    }

    #[test]
    fn frozen_units_are_bit_identical_after_training() {
        let m = tiny(FreezeLevel::StemBlock2, 0);
        let (inputs, train_set) = toy_data();
        let plans = plan_epochs(&train_set, 2, 0, true).unwrap();
        let out = train(m.clone(), &inputs, &plans, &train_set[..6]).unwrap();
        for u in 0..3 {
            assert_eq!(out.backbone.units[u], m.backbone.units[u], "unit {u} changed");
        }
        assert_ne!(out.backbone.units[3], m.backbone.units[3]);
        assert_ne!(out.head, m.head);
        assert_eq!(out.training_log.len(), 2);
        assert!(out.best_epoch.is_some());
    }

    #[test]
    fn all_backbone_only_moves_the_head() {
        let m = tiny(FreezeLevel::AllBackbone, 1);
        let (inputs, train_set) = toy_data();
        let plans = plan_epochs(&train_set, 1, 0, false).unwrap();
        let out = train(m.clone(), &inputs, &plans, &[]).unwrap();
        assert_eq!(out.backbone, m.backbone);
        assert_ne!(out.head.weight, m.head.weight);
    }

    #[test]
    fn one_step_descends_on_a_single_sample() {
        for freeze in [FreezeLevel::None, FreezeLevel::StemBlock2] {
            let mut m = tiny(freeze, 3);
            m.config.hflip_prob = 0.0;
            m.config.batch_size = 1;
            m.config.momentum = 0.0;
            m.config.weight_decay = 0.0;
            m.config.head_lr = 1e-2;
            m.config.backbone_lr = 1e-3;
            let (inputs, train_set) = toy_data();
            let one = vec![train_set[4].clone()];
            let x = inputs.get(&one[0].0).unwrap().clone();
            let mut t = vec![0.0; 10];
            t[one[0].1.index()] = 1.0;
            let before = m.batch_loss(&x, std::slice::from_ref(&t));
            let plans = plan_epochs(&one, 1, 0, false).unwrap();
            let after_model = train(m, &inputs, &plans, &[]).unwrap();
            let after = after_model.batch_loss(&x, &[t]);
            assert!(after < before, "{freeze}: {after} >= {before}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (inputs, train_set) = toy_data();
        let plans = plan_epochs(&train_set, 2, 5, true).unwrap();
        let a = train(tiny(FreezeLevel::StemBlock1, 2), &inputs, &plans, &train_set).unwrap();
        let b = train(tiny(FreezeLevel::StemBlock1, 2), &inputs, &plans, &train_set).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let mut m = tiny(FreezeLevel::AllBackbone, 0);
        m.config.head_lr = 1e300;
        m.config.backbone_lr = 0.0;
        let (inputs, train_set) = toy_data();
        let plans = plan_epochs(&train_set, 3, 0, false).unwrap();
        match train(m.clone(), &inputs, &plans, &train_set) {
            Err(Error::Diverged { last_good, .. }) => {
                assert!(last_good.head.weight.iter().all(|w| w.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let (inputs, _) = toy_data();
        let plans = plan_epochs(&[("missing".to_string(), IconClass::Paul)], 1, 0, false).unwrap();
        assert!(matches!(
            train(tiny(FreezeLevel::None, 0), &inputs, &plans, &[]),
            Err(Error::UnknownRecord(_))
        ));
    }
}
