//! Label proposals from confident predictions on classes an image lacks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classes::IconClass;
use crate::error::{Error, Result};
use crate::model::{InputSet, Prediction, Tensor, TrainedModel};
use crate::review::{Decision, DecisionEvent, ReviewItem, ReviewKind};
use crate::store::{write_jsonl, Store, StoreState};

pub const DEFAULT_PROPOSAL_THRESHOLD: f64 = 0.9;
pub const PROPOSALS_FILE: &str = "proposals.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProposal {
    pub record_id: String,
    pub icon_class: IconClass,
    pub confidence: f64,
    /// Service path of the class activation map overlay.
    pub cam_ref: String,
    /// Checkpoint id of the model that made the prediction.
    pub created_from: String,
}

/// Service path of a record's CAM overlay, percent-encoded.
pub fn cam_ref(record_id: &str, class: IconClass) -> String {
    format!("/api/cam/{}/{}.png", encode_path(record_id), encode_path(class.code()))
}

/// Percent-encodes bytes that may not appear raw in a URL path; `/` is kept.
pub fn encode_path(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~()!$&'*+,;=:@/".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl LabelProposal {
    /// The pending review item for this proposal. Its id depends only on the
    /// record and class, so re-proposing never duplicates queue entries.
    pub fn to_review_item(&self) -> ReviewItem {
        ReviewItem::new(ReviewKind::LabelProposal, vec![self.record_id.clone()], self.icon_class.code())
            .with_evidence("class", self.icon_class.code())
            .with_evidence("confidence", format!("{:.6}", self.confidence))
            .with_evidence("cam_ref", &self.cam_ref)
            .with_evidence("created_from", &self.created_from)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.5 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("proposal threshold {threshold} outside (0.5, 1]")))
    }
}

/// Proposals for every active record and class scoring at least
/// `threshold` that the record is not labeled with, ordered by record id
/// then class index.
pub fn proposals_from_predictions(
    state: &StoreState,
    predictions: &[Prediction],
    created_from: &str,
    threshold: f64,
) -> Result<Vec<LabelProposal>> {
    check_threshold(threshold)?;
    let mut out = Vec::new();
    for p in predictions {
        let Some(record) = state.records.get(&p.record_id) else {
            return Err(Error::UnknownRecord(p.record_id.clone()));
        };
        if !record.is_active() {
            continue;
        }
        let labels = state.annotation(&p.record_id);
        for class in IconClass::ALL {
            let score = p.score(class);
            if score >= threshold && !labels.is_some_and(|l| l.contains(class)) {
                out.push(LabelProposal {
                    record_id: p.record_id.clone(),
                    icon_class: class,
                    confidence: score,
                    cam_ref: cam_ref(&p.record_id, class),
                    created_from: created_from.to_string(),
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.record_id, a.icon_class.index()).cmp(&(&b.record_id, b.icon_class.index())));
    Ok(out)
}

/// Runs the model over every active record with stored bytes. Each such
/// record must be present in `inputs`.
pub fn propose_labels(model: &TrainedModel, state: &StoreState, inputs: &InputSet, threshold: f64) -> Result<Vec<LabelProposal>> {
    if !model.is_trained() {
        return Err(Error::UntrainedModel);
    }
    check_threshold(threshold)?;
    let items: Vec<(&str, &Tensor)> = state
        .active_records()
        .filter(|r| r.local_path.is_some())
        .map(|r| inputs.get(&r.id).map(|t| (r.id.as_str(), t)))
        .collect::<Result<_>>()?;
    let preds = model.predict_tensors(&items, threshold);
    proposals_from_predictions(state, &preds, &model.checkpoint_id(), threshold)
}

/// Enqueues proposals as pending review items; returns how many were new.
pub fn enqueue_proposals(store: &mut Store, proposals: &[LabelProposal]) -> Result<usize> {
    store.enqueue(proposals.iter().map(LabelProposal::to_review_item).collect())
}

pub fn write_proposals(path: &Path, proposals: &[LabelProposal]) -> Result<()> {
    write_jsonl(path, proposals)
}

fn proposal_item<'a>(store: &'a Store, item_id: &str) -> Result<&'a ReviewItem> {
    let item = store
        .state()
        .items
        .get(item_id)
        .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?;
    if item.kind != ReviewKind::LabelProposal {
        return Err(Error::InvalidArgument(format!("{item_id} is a {} item, not a label proposal", item.kind)));
    }
    if !item.is_pending() {
        return Err(Error::AlreadyDecided(item_id.to_string()));
    }
    Ok(item)
}

/// Accepts a pending proposal, adding its class with model-proposed
/// provenance. When the record is no longer active the proposal is voided
/// with a logged rejection and the status error is returned.
pub fn accept_proposal(store: &mut Store, item_id: &str, decided_at: &str) -> Result<()> {
    proposal_item(store, item_id)?;
    let accept = DecisionEvent {
        item_id: item_id.to_string(),
        decision: Decision::Accept,
        payload: None,
        decided_at: decided_at.to_string(),
    };
    match store.commit(accept) {
        Err(e @ Error::RecordNotActive { .. }) => {
            store.commit(DecisionEvent {
                item_id: item_id.to_string(),
                decision: Decision::Reject,
                payload: Some(json!({ "voided": e.to_string() })),
                decided_at: decided_at.to_string(),
            })?;
            Err(e)
        }
        other => other,
    }
}

pub fn reject_proposal(store: &mut Store, item_id: &str, decided_at: &str) -> Result<()> {
    proposal_item(store, item_id)?;
    store.commit(DecisionEvent {
        item_id: item_id.to_string(),
        decision: Decision::Reject,
        payload: None,
        decided_at: decided_at.to_string(),
    })
}
