use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationSet, Provenance};
use crate::classes::IconClass;
use crate::error::{Error, Result};
use crate::ingest::ImageRecord;
use crate::text::contains_word;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassKeywords {
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Ambiguous names that only produce suggestions.
    #[serde(default)]
    pub broad: Vec<String>,
}

/// Class code → keyword lists. Stored as TOML with one table per class:
///
/// ```toml
/// ["11F"]
/// keywords = ["virgin mary", "madonna"]
/// broad = ["mary"]
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordConfig {
    pub classes: BTreeMap<IconClass, ClassKeywords>,
}

impl KeywordConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, ClassKeywords> =
            toml::from_str(text).map_err(|e| Error::Config(format!("keyword config: {e}")))?;
        let mut classes = BTreeMap::new();
        for (code, kws) in raw {
            let class = IconClass::parse(&code).ok_or(Error::UnknownClass(code))?;
            classes.insert(class, kws);
        }
        let cfg = KeywordConfig { classes };
        if cfg.is_empty() {
            return Err(Error::Config("keyword config has no keywords".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let raw: BTreeMap<&str, &ClassKeywords> = self.classes.iter().map(|(c, k)| (c.code(), k)).collect();
        toml::to_string(&raw).expect("keyword config serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.classes.values().all(|k| k.keywords.is_empty())
    }

    pub fn insert(&mut self, class: IconClass, keyword: &str) -> &mut Self {
        self.classes.entry(class).or_default().keywords.push(keyword.to_string());
        self
    }

    pub fn insert_broad(&mut self, class: IconClass, keyword: &str) -> &mut Self {
        self.classes.entry(class).or_default().broad.push(keyword.to_string());
        self
    }

    /// Saint names with common English and Italian variants.
    pub fn defaults() -> Self {
        let table: [(IconClass, &[&str], &[&str]); 10] = [
            (
                IconClass::AntonyOfPadua,
                &["anthony of padua", "antony of padua", "antonio da padova", "sant'antonio da padova"],
                &["anthony", "antony"],
            ),
            (
                IconClass::Francis,
                &["francis of assisi", "saint francis", "st. francis", "st francis", "san francesco", "francesco d'assisi"],
                &["francis"],
            ),
            (IconClass::Jerome, &["jerome", "hieronymus", "girolamo"], &[]),
            (
                IconClass::JohnTheBaptist,
                &["john the baptist", "giovanni battista", "baptist"],
                &["john", "giovanni"],
            ),
            (
                IconClass::MaryMagdalene,
                &["mary magdalene", "magdalene", "magdalen", "maddalena"],
                &["mary", "maria"],
            ),
            (IconClass::Paul, &["saint paul", "st. paul", "st paul", "san paolo", "apostle paul"], &["paul", "paolo"]),
            (
                IconClass::Peter,
                &["saint peter", "st. peter", "st peter", "san pietro", "apostle peter"],
                &["peter", "pietro"],
            ),
            (
                IconClass::Dominic,
                &["saint dominic", "st. dominic", "st dominic", "san domenico"],
                &["dominic", "domenico"],
            ),
            (IconClass::Sebastian, &["sebastian", "sebastiano"], &[]),
            (
                IconClass::VirginMary,
                &["virgin mary", "madonna", "virgin", "our lady", "vergine"],
                &["mary", "maria"],
            ),
        ];
        let classes = table
            .into_iter()
            .map(|(c, kw, broad)| {
                (
                    c,
                    ClassKeywords {
                        keywords: kw.iter().map(|s| s.to_string()).collect(),
                        broad: broad.iter().map(|s| s.to_string()).collect(),
                    },
                )
            })
            .collect();
        KeywordConfig { classes }
    }
}

/// Which record fields keyword matching looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataField {
    Title,
    Description,
    Tags,
    Metadata,
}

impl MetadataField {
    pub const ALL: [MetadataField; 4] = [
        MetadataField::Title,
        MetadataField::Description,
        MetadataField::Tags,
        MetadataField::Metadata,
    ];

    fn texts<'a>(self, r: &'a ImageRecord) -> Vec<&'a str> {
        match self {
            MetadataField::Title => vec![r.title.as_str()],
            MetadataField::Description => vec![r.description.as_str()],
            MetadataField::Tags => r.tags.iter().map(String::as_str).collect(),
            MetadataField::Metadata => r.extra_metadata.values().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSuggestion {
    pub record_id: String,
    pub keyword: String,
    pub candidates: Vec<IconClass>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordLabeling {
    pub annotations: Vec<AnnotationSet>,
    pub suggestions: Vec<KeywordSuggestion>,
}

/// Labels each record with every class whose keyword appears on word
/// boundaries in one of `fields`. The recorded keyword is the first in the
/// class's list that matches, so the result does not depend on field order.
/// Broad keywords never label; when none of their candidate classes was
/// matched they yield a suggestion instead.
pub fn apply_keyword_labels<'a>(
    records: impl IntoIterator<Item = &'a ImageRecord>,
    config: &KeywordConfig,
    fields: &[MetadataField],
) -> Result<KeywordLabeling> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("no metadata fields to search".into()));
    }
    if config.is_empty() {
        return Err(Error::InvalidArgument("keyword map is empty".into()));
    }
    let mut fields = fields.to_vec();
    fields.sort();
    fields.dedup();

    let mut broad: BTreeMap<String, Vec<IconClass>> = BTreeMap::new();
    for (&class, kws) in &config.classes {
        for b in &kws.broad {
            broad.entry(b.to_lowercase()).or_default().push(class);
        }
    }

    let mut out = KeywordLabeling::default();
    for record in records {
        let texts: Vec<&str> = fields.iter().flat_map(|f| f.texts(record)).collect();
        let matches = |kw: &str| texts.iter().any(|t| contains_word(t, kw));
        let mut set = AnnotationSet::new(record.id.clone());
        for (&class, kws) in &config.classes {
            if let Some(kw) = kws.keywords.iter().find(|k| matches(k)) {
                set.add(class, Provenance::Keyword, Some(kw.to_lowercase()));
            }
        }
        for (kw, candidates) in &broad {
            if matches(kw) && !candidates.iter().any(|c| set.contains(*c)) {
                out.suggestions.push(KeywordSuggestion {
                    record_id: record.id.clone(),
                    keyword: kw.clone(),
                    candidates: candidates.clone(),
                });
            }
        }
        out.annotations.push(set);
    }
    Ok(out)
}
