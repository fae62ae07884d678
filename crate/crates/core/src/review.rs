//! Review items and the decision events that resolve them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ingest::md5_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    NearDupPair,
    Fragment,
    PoseMismatch,
    LabelProposal,
}

impl ReviewKind {
    pub const ALL: [ReviewKind; 4] = [
        ReviewKind::NearDupPair,
        ReviewKind::Fragment,
        ReviewKind::PoseMismatch,
        ReviewKind::LabelProposal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReviewKind::NearDupPair => "near_dup_pair",
            ReviewKind::Fragment => "fragment",
            ReviewKind::PoseMismatch => "pose_mismatch",
            ReviewKind::LabelProposal => "label_proposal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn subject_count(self) -> usize {
        match self {
            ReviewKind::NearDupPair => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ReviewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ReviewStatus::Pending, ReviewStatus::Accepted, ReviewStatus::Rejected]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub kind: ReviewKind,
    pub subject_ids: Vec<String>,
    #[serde(default)]
    pub evidence: BTreeMap<String, String>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<String>,
}

impl ReviewItem {
    /// A pending item whose id is derived from its kind, subjects and an
    /// optional discriminator, so regenerating candidates yields the same id.
    pub fn new(kind: ReviewKind, subject_ids: Vec<String>, discriminator: &str) -> Self {
        debug_assert_eq!(subject_ids.len(), kind.subject_count());
        let key = format!("{}|{}|{}", kind.as_str(), subject_ids.join("|"), discriminator);
        ReviewItem {
            item_id: format!("{}-{}", kind.as_str(), &md5_hex(key.as_bytes())[..12]),
            kind,
            subject_ids,
            evidence: BTreeMap::new(),
            status: ReviewStatus::Pending,
            decision_payload: None,
            decided_at: None,
        }
    }

    pub fn with_evidence(mut self, key: &str, value: impl ToString) -> Self {
        self.evidence.insert(key.to_string(), value.to_string());
        self
    }

    pub fn is_pending(&self) -> bool {
        self.status == ReviewStatus::Pending
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    /// Automatic store change (exact-duplicate or pose-filter removal).
    Auto,
}

impl Decision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "accept" => Some(Decision::Accept),
            "reject" => Some(Decision::Reject),
            _ => None,
        }
    }
}

/// One line of `decisions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub item_id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    pub decided_at: String,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
