//! Annotations, class statistics, splits and epoch planning.

mod annotations;
mod cooccurrence;
mod keywords;
mod oversample;
mod split;

pub use annotations::{AnnotationSet, Label, Provenance};
pub use cooccurrence::{cooccurrence, CoOccurrenceMatrix};
pub use keywords::{apply_keyword_labels, ClassKeywords, KeywordConfig, KeywordLabeling, KeywordSuggestion, MetadataField};
pub use oversample::{plan_oversampled_epoch, plan_oversampled_epoch_over, EpochPlan};
pub use split::{
    proportional_counts, single_label_subset, stratified_split, SingleLabelSubset, Split, SplitAssignment, SplitOutcome,
};

use crate::classes::{IconClass, N_CLASSES};

/// Number of records carrying each class.
pub fn class_counts<'a>(annotations: impl IntoIterator<Item = &'a AnnotationSet>) -> [usize; N_CLASSES] {
    let mut counts = [0; N_CLASSES];
    for set in annotations {
        for c in set.classes() {
            counts[IconClass::index(c)] += 1;
        }
    }
    counts
}
