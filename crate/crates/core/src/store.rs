//! Event-sourced curation store.
//!
//! Base facts live in three append-only or regenerated files (`records.jsonl`
//! from ingest, `labels.jsonl` from keyword labeling, `review.jsonl` for
//! enqueued review items). Every later change is a line in `decisions.jsonl`.
//! The current state is the fold of the decision log over the base facts, so
//! replaying the log from scratch always reproduces it.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classes::IconClass;
use crate::dataset::{AnnotationSet, Provenance};
use crate::error::{Error, Result};
use crate::ingest::{ImageRecord, RecordStatus};
use crate::review::{Decision, DecisionEvent, ReviewItem, ReviewKind, ReviewStatus};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const REVIEW_FILE: &str = "review.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const SPLITS_FILE: &str = "splits.jsonl";
pub const IMAGES_DIR: &str = "images";

/// Automatic store changes recorded in the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AutoAction {
    RemoveDuplicate { record_id: String, survivor: String },
    RemoveFiltered { record_id: String, reason: String },
}

impl AutoAction {
    pub fn into_event(self, decided_at: &str) -> DecisionEvent {
        let (kind, id) = match &self {
            AutoAction::RemoveDuplicate { record_id, .. } => ("remove_duplicate", record_id),
            AutoAction::RemoveFiltered { record_id, .. } => ("remove_filtered", record_id),
        };
        DecisionEvent {
            item_id: format!("auto/{kind}/{id}"),
            decision: Decision::Auto,
            payload: Some(serde_json::to_value(&self).expect("auto action serializes")),
            decided_at: decided_at.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StoreState {
    pub records: BTreeMap<String, ImageRecord>,
    pub annotations: BTreeMap<String, AnnotationSet>,
    pub items: BTreeMap<String, ReviewItem>,
    /// Number of applied decisions that changed annotations. Dataset
    /// statistics computed at an older revision are stale.
    pub label_revision: u64,
}

#[derive(Debug)]
enum Effect {
    Status {
        record_id: String,
        status: RecordStatus,
        reason: Option<String>,
        duplicate_of: Option<String>,
    },
    Metadata {
        record_id: String,
        key: String,
        value: String,
    },
    Labels {
        record_id: String,
        classes: Vec<IconClass>,
        provenance: Provenance,
    },
    Decide {
        item_id: String,
        status: ReviewStatus,
        payload: Option<Value>,
        decided_at: String,
    },
}

fn malformed(item_id: &str, reason: impl Into<String>) -> Error {
    Error::MalformedPayload {
        item_id: item_id.to_string(),
        reason: reason.into(),
    }
}

impl StoreState {
    pub fn active_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values().filter(|r| r.is_active())
    }

    pub fn annotation(&self, record_id: &str) -> Option<&AnnotationSet> {
        self.annotations.get(record_id)
    }

    /// Annotation sets of all active records, empty sets included.
    pub fn active_annotations(&self) -> Vec<AnnotationSet> {
        self.active_records()
            .map(|r| {
                self.annotations
                    .get(&r.id)
                    .cloned()
                    .unwrap_or_else(|| AnnotationSet::new(r.id.clone()))
            })
            .collect()
    }

    pub fn pending_items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values().filter(|i| i.is_pending())
    }

    /// Canonical serialization used to compare states byte for byte.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("store state serializes")
    }

    fn active_record(&self, record_id: &str) -> Result<&ImageRecord> {
        let record = self
            .records
            .get(record_id)
            .ok_or_else(|| Error::UnknownRecord(record_id.to_string()))?;
        if !record.is_active() {
            return Err(Error::RecordNotActive {
                record_id: record_id.to_string(),
                status: record.status.to_string(),
            });
        }
        Ok(record)
    }

    /// Validates an event against the current state without changing it.
    fn plan(&self, ev: &DecisionEvent) -> Result<Vec<Effect>> {
        if ev.decision == Decision::Auto {
            let payload = ev.payload.clone().ok_or_else(|| malformed(&ev.item_id, "missing payload"))?;
            let action: AutoAction =
                serde_json::from_value(payload).map_err(|e| malformed(&ev.item_id, e.to_string()))?;
            return Ok(match action {
                AutoAction::RemoveDuplicate { record_id, survivor } => {
                    self.active_record(&record_id)?;
                    vec![Effect::Status {
                        record_id,
                        status: RecordStatus::RemovedDuplicate,
                        reason: Some("exact duplicate".into()),
                        duplicate_of: Some(survivor),
                    }]
                }
                AutoAction::RemoveFiltered { record_id, reason } => {
                    self.active_record(&record_id)?;
                    vec![Effect::Status {
                        record_id,
                        status: RecordStatus::RemovedFiltered,
                        reason: Some(reason),
                        duplicate_of: None,
                    }]
                }
            });
        }

        let item = self
            .items
            .get(&ev.item_id)
            .ok_or_else(|| Error::UnknownItem(ev.item_id.clone()))?;
        if !item.is_pending() {
            return Err(Error::AlreadyDecided(ev.item_id.clone()));
        }
        let decide = |status| Effect::Decide {
            item_id: ev.item_id.clone(),
            status,
            payload: ev.payload.clone(),
            decided_at: ev.decided_at.clone(),
        };
        if ev.decision == Decision::Reject {
            return Ok(vec![decide(ReviewStatus::Rejected)]);
        }

        let payload = ev.payload.as_ref().filter(|p| !p.is_null());
        let mut effects = match item.kind {
            ReviewKind::NearDupPair => {
                let (a, b) = (&item.subject_ids[0], &item.subject_ids[1]);
                let keep = match payload.and_then(|p| p.get("keep")) {
                    None => a.min(b).clone(),
                    Some(Value::String(k)) if k == a || k == b => k.clone(),
                    Some(other) => return Err(malformed(&ev.item_id, format!("keep must name a subject, got {other}"))),
                };
                let drop = if &keep == a { b.clone() } else { a.clone() };
                self.active_record(&keep)?;
                self.active_record(&drop)?;
                vec![Effect::Status {
                    record_id: drop,
                    status: RecordStatus::RemovedDuplicate,
                    reason: Some("near duplicate".into()),
                    duplicate_of: Some(keep),
                }]
            }
            ReviewKind::Fragment => {
                let record_id = item.subject_ids[0].clone();
                self.active_record(&record_id)?;
                let keep = match payload.and_then(|p| p.get("keep")) {
                    None => false,
                    Some(Value::Bool(k)) => *k,
                    Some(other) => return Err(malformed(&ev.item_id, format!("keep must be a boolean, got {other}"))),
                };
                if keep {
                    vec![Effect::Metadata {
                        record_id,
                        key: "kept_fragment".into(),
                        value: "true".into(),
                    }]
                } else {
                    vec![Effect::Status {
                        record_id,
                        status: RecordStatus::RemovedFiltered,
                        reason: Some("fragment".into()),
                        duplicate_of: None,
                    }]
                }
            }
            ReviewKind::PoseMismatch => {
                let record_id = item.subject_ids[0].clone();
                self.active_record(&record_id)?;
                let labels = payload
                    .and_then(|p| p.get("labels"))
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed(&ev.item_id, "accept requires a labels array"))?;
                if labels.is_empty() {
                    return Err(malformed(&ev.item_id, "labels array is empty"));
                }
                let classes = labels
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .and_then(IconClass::parse)
                            .ok_or_else(|| malformed(&ev.item_id, format!("unknown class {v}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                vec![Effect::Labels {
                    record_id,
                    classes,
                    provenance: Provenance::Manual,
                }]
            }
            ReviewKind::LabelProposal => {
                let record_id = item.subject_ids[0].clone();
                self.active_record(&record_id)?;
                let class = item
                    .evidence
                    .get("class")
                    .and_then(|c| IconClass::parse(c))
                    .ok_or_else(|| malformed(&ev.item_id, "proposal lacks a class"))?;
                vec![Effect::Labels {
                    record_id,
                    classes: vec![class],
                    provenance: Provenance::ModelProposed,
                }]
            }
        };
        effects.push(decide(ReviewStatus::Accepted));
        Ok(effects)
    }

    fn execute(&mut self, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::Status {
                    record_id,
                    status,
                    reason,
                    duplicate_of,
                } => {
                    let r = self.records.get_mut(&record_id).expect("planned record exists");
                    r.status = status;
                    r.status_reason = reason;
                    if duplicate_of.is_some() {
                        r.duplicate_of = duplicate_of;
                    }
                }
                Effect::Metadata { record_id, key, value } => {
                    let r = self.records.get_mut(&record_id).expect("planned record exists");
                    r.extra_metadata.insert(key, value);
                }
                Effect::Labels {
                    record_id,
                    classes,
                    provenance,
                } => {
                    let set = self
                        .annotations
                        .entry(record_id.clone())
                        .or_insert_with(|| AnnotationSet::new(record_id));
                    for c in classes {
                        set.add(c, provenance, None);
                    }
                    self.label_revision += 1;
                }
                Effect::Decide {
                    item_id,
                    status,
                    payload,
                    decided_at,
                } => {
                    let item = self.items.get_mut(&item_id).expect("planned item exists");
                    item.status = status;
                    item.decision_payload = payload;
                    item.decided_at = Some(decided_at);
                }
            }
        }
    }

    pub fn apply(&mut self, ev: &DecisionEvent) -> Result<()> {
        let effects = self.plan(ev)?;
        self.execute(effects);
        Ok(())
    }

    /// Folds a decision log over base facts.
    pub fn replay(
        records: &[ImageRecord],
        labels: &[AnnotationSet],
        items: &[ReviewItem],
        log: &[DecisionEvent],
    ) -> Result<StoreState> {
        let mut state = StoreState::default();
        for r in records {
            state.records.entry(r.id.clone()).or_insert_with(|| r.clone());
        }
        for set in labels {
            state.annotations.insert(set.record_id.clone(), set.clone());
        }
        for item in items {
            let mut item = item.clone();
            item.status = ReviewStatus::Pending;
            item.decision_payload = None;
            item.decided_at = None;
            state.items.entry(item.item_id.clone()).or_insert(item);
        }
        for (i, ev) in log.iter().enumerate() {
            state.apply(ev).map_err(|e| Error::CorruptStore {
                path: PathBuf::from(DECISIONS_FILE),
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(state)
    }
}

/// Single-writer handle over the store. Without a directory it keeps
/// everything in memory.
#[derive(Debug, Clone)]
pub struct Store {
    dir: Option<PathBuf>,
    base_records: Vec<ImageRecord>,
    base_labels: Vec<AnnotationSet>,
    base_items: Vec<ReviewItem>,
    log: Vec<DecisionEvent>,
    state: StoreState,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::CorruptStore {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path)
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            dir: None,
            base_records: Vec::new(),
            base_labels: Vec::new(),
            base_items: Vec::new(),
            log: Vec::new(),
            state: StoreState::default(),
        }
    }

    /// Opens a store directory, creating it when missing.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Self::load(dir)
    }

    /// Opens a store that must already hold ingested records.
    pub fn open_existing(dir: &Path) -> Result<Self> {
        let records = dir.join(RECORDS_FILE);
        if !records.is_file() {
            return Err(Error::io(
                records,
                std::io::Error::new(std::io::ErrorKind::NotFound, "record store not found"),
            ));
        }
        Self::load(dir)
    }

    fn load(dir: &Path) -> Result<Self> {
        let base_records: Vec<ImageRecord> = read_jsonl(&dir.join(RECORDS_FILE))?;
        let base_labels: Vec<AnnotationSet> = read_jsonl(&dir.join(LABELS_FILE))?;
        let base_items: Vec<ReviewItem> = read_jsonl(&dir.join(REVIEW_FILE))?;
        let log: Vec<DecisionEvent> = read_jsonl(&dir.join(DECISIONS_FILE))?;
        let state = StoreState::replay(&base_records, &base_labels, &base_items, &log).map_err(|e| match e {
            Error::CorruptStore { line, reason, .. } => Error::CorruptStore {
                path: dir.join(DECISIONS_FILE),
                line,
                reason,
            },
            other => other,
        })?;
        Ok(Store {
            dir: Some(dir.to_path_buf()),
            base_records,
            base_labels,
            base_items,
            log,
            state,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn images_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(IMAGES_DIR))
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn log(&self) -> &[DecisionEvent] {
        &self.log
    }

    /// Rebuilds state from base facts and the decision log.
    pub fn replay(&self) -> Result<StoreState> {
        StoreState::replay(&self.base_records, &self.base_labels, &self.base_items, &self.log)
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    /// Appends records whose ids are not stored yet; returns how many.
    pub fn add_records(&mut self, records: Vec<ImageRecord>) -> Result<usize> {
        let fresh: Vec<ImageRecord> = records
            .into_iter()
            .filter(|r| !self.state.records.contains_key(&r.id))
            .collect();
        if let Some(path) = self.path(RECORDS_FILE) {
            append_jsonl(&path, &fresh)?;
        }
        for r in &fresh {
            self.state.records.insert(r.id.clone(), r.clone());
        }
        let n = fresh.len();
        self.base_records.extend(fresh);
        Ok(n)
    }

    /// Replaces the keyword-derived base labels. Labels added by decisions
    /// are re-applied on top.
    pub fn set_base_labels(&mut self, mut labels: Vec<AnnotationSet>) -> Result<()> {
        labels.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        labels.retain(|s| !s.is_empty());
        if let Some(path) = self.path(LABELS_FILE) {
            write_jsonl(&path, &labels)?;
        }
        self.base_labels = labels;
        self.state = self.replay()?;
        Ok(())
    }

    /// Adds pending review items not already known; returns how many.
    pub fn enqueue(&mut self, items: Vec<ReviewItem>) -> Result<usize> {
        let mut fresh = Vec::new();
        for item in items {
            if item.subject_ids.len() != item.kind.subject_count() {
                return Err(Error::InvalidArgument(format!(
                    "{} item needs {} subjects",
                    item.kind,
                    item.kind.subject_count()
                )));
            }
            if self.state.items.contains_key(&item.item_id) || fresh.iter().any(|f: &ReviewItem| f.item_id == item.item_id) {
                continue;
            }
            fresh.push(item);
        }
        if let Some(path) = self.path(REVIEW_FILE) {
            append_jsonl(&path, &fresh)?;
        }
        for item in &fresh {
            self.state.items.insert(item.item_id.clone(), item.clone());
        }
        let n = fresh.len();
        self.base_items.extend(fresh);
        Ok(n)
    }

    /// Validates, logs and applies one decision event.
    pub fn commit(&mut self, ev: DecisionEvent) -> Result<()> {
        let effects = self.state.plan(&ev)?;
        if let Some(path) = self.path(DECISIONS_FILE) {
            append_jsonl(&path, std::slice::from_ref(&ev))?;
        }
        self.state.execute(effects);
        self.log.push(ev);
        Ok(())
    }
}
