//! Glue between the record store and the model: stored images, corpus
//! statistics, persisted splits and preprocessed input sets.

use std::path::PathBuf;

use image::DynamicImage;

use crate::dataset::{single_label_subset, SingleLabelSubset, SplitAssignment, SplitOutcome};
use crate::error::{Error, Result};
use crate::ingest::{ChannelStats, ChannelStatsAccumulator, ImageRecord};
use crate::model::InputSet;
use crate::store::{read_jsonl_file, write_jsonl, Store, SPLITS_FILE};

/// Path of a record's stored bytes.
pub fn record_image_path(store: &Store, record: &ImageRecord) -> Result<PathBuf> {
    let dir = store
        .images_dir()
        .ok_or_else(|| Error::InvalidArgument("in-memory store has no images".into()))?;
    let name = record
        .local_path
        .as_ref()
        .ok_or_else(|| Error::Image(format!("record {} has no stored image", record.id)))?;
    Ok(dir.join(name))
}

pub fn load_record_image(store: &Store, record_id: &str) -> Result<DynamicImage> {
    let record = store
        .state()
        .records
        .get(record_id)
        .ok_or_else(|| Error::UnknownRecord(record_id.to_string()))?;
    let path = record_image_path(store, record)?;
    let err = |e: &dyn std::fmt::Display| Error::Image(format!("{}: {e}", path.display()));
    image::ImageReader::open(&path)
        .map_err(|e| err(&e))?
        .with_guessed_format()
        .map_err(|e| err(&e))?
        .decode()
        .map_err(|e| err(&e))
}

/// Per-channel statistics over the given records' images.
pub fn channel_stats_for<'a>(store: &Store, ids: impl IntoIterator<Item = &'a str>) -> Result<ChannelStats> {
    let mut acc = ChannelStatsAccumulator::new();
    for id in ids {
        acc.push_image(&load_record_image(store, id)?.to_rgb8());
    }
    acc.finish()
}

/// Preprocesses the given records' images at `input_size`.
pub fn build_inputs<'a>(
    store: &Store,
    ids: impl IntoIterator<Item = &'a str>,
    input_size: usize,
    stats: &ChannelStats,
) -> Result<InputSet> {
    let mut inputs = InputSet::new(input_size);
    for id in ids {
        if !inputs.contains(id) {
            inputs.insert_image(id, &load_record_image(store, id)?, stats)?;
        }
    }
    Ok(inputs)
}

/// Ids of active records that have stored image bytes, in id order.
pub fn active_image_ids(store: &Store) -> Vec<String> {
    store
        .state()
        .active_records()
        .filter(|r| r.local_path.is_some())
        .map(|r| r.id.clone())
        .collect()
}

pub fn save_splits(store: &Store, outcome: &SplitOutcome) -> Result<PathBuf> {
    let dir = store
        .dir()
        .ok_or_else(|| Error::InvalidArgument("in-memory store cannot hold splits".into()))?;
    let path = dir.join(SPLITS_FILE);
    write_jsonl(&path, &outcome.assignments)?;
    Ok(path)
}

pub fn load_splits(store: &Store) -> Result<Vec<SplitAssignment>> {
    let dir = store
        .dir()
        .ok_or_else(|| Error::InvalidArgument("in-memory store cannot hold splits".into()))?;
    let path = dir.join(SPLITS_FILE);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no splits; run split first"),
        ));
    }
    read_jsonl_file(&path)
}

/// Single-label train/val/test lists over the store's active annotations.
pub fn training_subset(store: &Store, splits: &[SplitAssignment]) -> SingleLabelSubset {
    single_label_subset(&store.state().active_annotations(), splits)
}
