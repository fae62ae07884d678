use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport};
use crate::classes::IconClass;
use crate::error::Result;
use crate::model::{build_model_with, plan_epochs, train, BackboneWeights, EpochLog, FreezeLevel, InputSet, ModelConfig, TrainedModel};

/// Everything a sweep shares across freeze levels.
#[derive(Debug, Clone, Copy)]
pub struct AblationSetup<'a> {
    pub config: &'a ModelConfig,
    pub weights: &'a BackboneWeights,
    pub inputs: &'a InputSet,
    pub train: &'a [(String, IconClass)],
    pub val: &'a [(String, IconClass)],
    pub oversample: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub level: FreezeLevel,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub training_log: Vec<EpochLog>,
    /// Metrics of the retained checkpoint on the validation split.
    pub report: MetricsReport,
}

/// Trains one model at `level` with `seed` and evaluates it on the
/// validation split.
pub fn train_and_evaluate(setup: &AblationSetup<'_>, level: FreezeLevel, seed: u64) -> Result<(TrainedModel, MetricsReport)> {
    let config = ModelConfig {
        freeze_level: level,
        seed,
        ..setup.config.clone()
    };
    let model = build_model_with(&config, setup.weights)?;
    let plans = plan_epochs(setup.train, config.epochs, seed, setup.oversample)?;
    let model = train(model, setup.inputs, &plans, setup.val)?;
    let items: Vec<(&str, &crate::model::Tensor)> = setup
        .val
        .iter()
        .map(|(id, _)| setup.inputs.get(id).map(|t| (id.as_str(), t)))
        .collect::<Result<_>>()?;
    let preds = model.predict_tensors(&items, setup.threshold);
    let truths: Vec<Option<IconClass>> = setup.val.iter().map(|(_, c)| Some(*c)).collect();
    let report = evaluate(&preds, &truths, setup.threshold)?;
    Ok((model, report))
}

/// One run per (level, seed), levels in the given order, seeds inner.
/// Every run starts from the same pretrained weights, so results do not
/// depend on the order of `levels`.
pub fn ablation_sweep(setup: &AblationSetup<'_>, levels: &[FreezeLevel], seeds: &[u64]) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(levels.len() * seeds.len());
    for &level in levels {
        for &seed in seeds {
            let (model, report) = train_and_evaluate(setup, level, seed)?;
            runs.push(AblationRun {
                level,
                seed,
                best_epoch: model.best_epoch,
                training_log: model.training_log,
                report,
            });
        }
    }
    Ok(runs)
}

/// Plot data: one row per run with the validation means.
pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("freeze_level,seed,best_epoch,mean_precision,mean_recall,mean_f1,mean_ap,accuracy\n");
    for r in runs {
        let m = &r.report.means;
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.level,
            r.seed,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            m.precision,
            m.recall,
            m.f1,
            m.ap,
            r.report.accuracy
        ));
    }
    out
}
