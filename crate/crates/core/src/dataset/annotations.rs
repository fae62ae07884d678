use serde::{Deserialize, Serialize};

use crate::classes::IconClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Keyword,
    Manual,
    ModelProposed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub code: IconClass,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
}

/// Labels of one record; at most one entry per class, kept in class-index
/// order. This is also the line format of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub record_id: String,
    pub labels: Vec<Label>,
}

impl AnnotationSet {
    pub fn new(record_id: impl Into<String>) -> Self {
        AnnotationSet {
            record_id: record_id.into(),
            labels: Vec::new(),
        }
    }

    pub fn with_classes(record_id: impl Into<String>, classes: &[IconClass], provenance: Provenance) -> Self {
        let mut set = Self::new(record_id);
        for &c in classes {
            set.add(c, provenance, None);
        }
        set
    }

    pub fn contains(&self, class: IconClass) -> bool {
        self.labels.iter().any(|l| l.code == class)
    }

    /// Adds a label unless the class is already present. Returns whether the
    /// set changed.
    pub fn add(&mut self, class: IconClass, provenance: Provenance, keyword: Option<String>) -> bool {
        if self.contains(class) {
            return false;
        }
        let at = self.labels.partition_point(|l| l.code.index() < class.index());
        self.labels.insert(
            at,
            Label {
                code: class,
                provenance,
                keyword,
            },
        );
        true
    }

    pub fn classes(&self) -> impl Iterator<Item = IconClass> + '_ {
        self.labels.iter().map(|l| l.code)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The class of a single-label record.
    pub fn single(&self) -> Option<IconClass> {
        match self.labels.as_slice() {
            [only] => Some(only.code),
            _ => None,
        }
    }
}
