use std::collections::BTreeMap;
use std::fmt;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::hash::{dhash, hex64, md5_hex};
use super::manifest::RawEntry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorMode {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "BW")]
    Bw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Active,
    RemovedDuplicate,
    RemovedFiltered,
    ReviewPending,
}

impl RecordStatus {
    pub fn is_removed(self) -> bool {
        matches!(self, RecordStatus::RemovedDuplicate | RecordStatus::RemovedFiltered)
    }

    pub fn can_move_to(self, next: RecordStatus) -> bool {
        match self {
            RecordStatus::Active => next != RecordStatus::Active,
            RecordStatus::ReviewPending => next != RecordStatus::ReviewPending,
            RecordStatus::RemovedDuplicate | RecordStatus::RemovedFiltered => false,
        }
    }
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RecordStatus::Active => "active",
            RecordStatus::RemovedDuplicate => "removed_duplicate",
            RecordStatus::RemovedFiltered => "removed_filtered",
            RecordStatus::ReviewPending => "review_pending",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub source: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_path: Option<String>,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub extra_metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub md5: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "hex64")]
    pub phash: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_mode: Option<ColorMode>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_reason: Option<String>,
    /// Survivor of the duplicate group this record was removed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

impl ImageRecord {
    pub fn is_active(&self) -> bool {
        self.status == RecordStatus::Active
    }

    pub fn has_bytes(&self) -> bool {
        self.md5.is_some()
    }

    pub fn set_status(&mut self, next: RecordStatus, reason: Option<String>) -> Result<()> {
        if !self.status.can_move_to(next) {
            return Err(Error::RecordNotActive {
                record_id: self.id.clone(),
                status: self.status.to_string(),
            });
        }
        self.status = next;
        self.status_reason = reason;
        Ok(())
    }

    /// The text fields searched by keyword rules, as `(field name, text)`.
    pub fn text_fields(&self) -> Vec<(String, &str)> {
        let mut out = vec![
            ("title".to_string(), self.title.as_str()),
            ("description".to_string(), self.description.as_str()),
        ];
        out.extend(self.tags.iter().map(|t| ("tags".to_string(), t.as_str())));
        out.extend(
            self.extra_metadata
                .iter()
                .map(|(k, v)| (format!("metadata.{k}"), v.as_str())),
        );
        out
    }
}

/// Stable record id: the source name plus the first 16 hex digits of the
/// uri's MD5.
pub fn record_id(source_name: &str, uri: &str) -> String {
    format!("{source_name}/{}", &md5_hex(uri.as_bytes())[..16])
}

pub fn normalize_record(entry: &RawEntry, source_name: &str) -> Result<ImageRecord> {
    let uri = entry.uri.trim();
    if uri.is_empty() {
        return Err(Error::RecordRejected("empty uri".into()));
    }
    let tags = entry
        .tags
        .iter()
        .flat_map(|t| t.split(';'))
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    let extra_metadata = entry
        .metadata
        .iter()
        .map(|(k, v)| (k.trim().to_lowercase(), v.clone()))
        .collect();
    Ok(ImageRecord {
        id: record_id(source_name, uri),
        source: source_name.to_string(),
        uri: uri.to_string(),
        local_path: None,
        title: entry.title.clone().unwrap_or_default(),
        description: entry.description.clone().unwrap_or_default(),
        tags,
        extra_metadata,
        md5: None,
        phash: None,
        width: None,
        height: None,
        color_mode: None,
        status: RecordStatus::Active,
        status_reason: None,
        duplicate_of: None,
    })
}

/// Channel difference (in 8-bit units) below which a pixel counts as gray.
pub const BW_TOLERANCE: u8 = 2;

pub fn detect_color_mode(image: &DynamicImage) -> ColorMode {
    let rgb = image.to_rgb8();
    let gray = rgb.pixels().all(|p| {
        let [r, g, b] = p.0;
        r.abs_diff(g) <= BW_TOLERANCE && g.abs_diff(b) <= BW_TOLERANCE && r.abs_diff(b) <= BW_TOLERANCE
    });
    if gray {
        ColorMode::Bw
    } else {
        ColorMode::Rgb
    }
}

/// Fills hashes, dimensions and color mode from the raw bytes. Bytes that do
/// not decode mark the record as damaged instead of failing.
pub fn fetch_and_hash(mut record: ImageRecord, bytes: &[u8]) -> ImageRecord {
    match image::load_from_memory(bytes) {
        Ok(img) if img.width() >= 1 && img.height() >= 1 => {
            record.md5 = Some(md5_hex(bytes));
            record.phash = Some(dhash(&img));
            record.width = Some(img.width());
            record.height = Some(img.height());
            record.color_mode = Some(detect_color_mode(&img));
        }
        _ => {
            record.md5 = None;
            record.phash = None;
            if record.status.can_move_to(RecordStatus::RemovedFiltered) {
                record.status = RecordStatus::RemovedFiltered;
                record.status_reason = Some("damaged".into());
            }
        }
    }
    record
}
