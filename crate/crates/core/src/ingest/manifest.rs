use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw row from a source manifest, before normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntry {
    pub uri: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl RawEntry {
    pub fn new(uri: impl Into<String>) -> Self {
        RawEntry {
            uri: uri.into(),
            title: None,
            description: None,
            tags: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line (JSONL) or record number (CSV, header excluded).
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub source_name: String,
    pub entries: Vec<RawEntry>,
    pub expected_count: Option<usize>,
    pub rejects: Vec<Reject>,
}

impl SourceManifest {
    pub fn total_rows(&self) -> usize {
        self.entries.len() + self.rejects.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestFormat {
    JsonLines,
    Csv,
}

impl ManifestFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ManifestFormat::Csv,
            _ => ManifestFormat::JsonLines,
        }
    }
}

pub fn load_manifest(path: &Path, source_name: &str) -> Result<SourceManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, ManifestFormat::from_path(path), source_name, path)
}

pub fn parse_manifest(
    text: &str,
    format: ManifestFormat,
    source_name: &str,
    path: &Path,
) -> Result<SourceManifest> {
    if source_name.trim().is_empty() {
        return Err(Error::InvalidManifest("source name is empty".into()));
    }
    let (entries, rejects) = match format {
        ManifestFormat::JsonLines => parse_jsonl(text),
        ManifestFormat::Csv => parse_csv(text)?,
    };
    let total = entries.len() + rejects.len();
    if total == 0 {
        return Err(Error::InvalidManifest(format!("{} has no rows", path.display())));
    }
    if rejects.len() * 2 > total {
        return Err(Error::ManifestTooBroken {
            path: path.to_path_buf(),
            malformed: rejects.len(),
            total,
            first_reason: rejects[0].reason.clone(),
        });
    }
    if entries.is_empty() {
        return Err(Error::InvalidManifest(format!("{} has no valid rows", path.display())));
    }
    Ok(SourceManifest {
        source_name: source_name.to_string(),
        entries,
        expected_count: None,
        rejects,
    })
}

fn parse_jsonl(text: &str) -> (Vec<RawEntry>, Vec<Reject>) {
    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawEntry>(line) {
            Ok(entry) => entries.push(entry),
            Err(e) => rejects.push(Reject {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    (entries, rejects)
}

const CSV_KNOWN: [&str; 4] = ["uri", "title", "description", "tags"];

fn parse_csv(text: &str) -> Result<(Vec<RawEntry>, Vec<Reject>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::InvalidManifest(format!("csv header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let Some(uri_col) = headers.iter().position(|h| h.eq_ignore_ascii_case("uri")) else {
        return Err(Error::InvalidManifest("csv header lacks a uri column".into()));
    };
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (title_col, desc_col, tags_col) = (col("title"), col("description"), col("tags"));

    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject {
                    line: i + 1,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if row.len() != headers.len() {
            rejects.push(Reject {
                line: i + 1,
                reason: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
            continue;
        }
        let field = |c: Option<usize>| {
            c.and_then(|c| row.get(c))
                .map(str::to_string)
                .filter(|s| !s.is_empty())
        };
        let mut entry = RawEntry::new(row.get(uri_col).unwrap_or_default());
        entry.title = field(title_col);
        entry.description = field(desc_col);
        entry.tags = field(tags_col)
            .map(|t| t.split(';').map(str::to_string).collect())
            .unwrap_or_default();
        for (h, v) in headers.iter().zip(row.iter()) {
            if !CSV_KNOWN.iter().any(|k| h.eq_ignore_ascii_case(k)) && !v.is_empty() {
                entry.metadata.insert(h.clone(), v.to_string());
            }
        }
        entries.push(entry);
    }
    Ok((entries, rejects))
}
