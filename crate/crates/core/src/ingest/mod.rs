//! Source manifests, record normalization, hashing and corpus statistics.

mod hash;
mod manifest;
mod record;
mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use hash::{dhash, hamming, md5_hex};
pub use manifest::{load_manifest, parse_manifest, ManifestFormat, RawEntry, Reject, SourceManifest};
pub use record::{
    detect_color_mode, fetch_and_hash, normalize_record, record_id, ColorMode, ImageRecord, RecordStatus,
    BW_TOLERANCE,
};
pub use stats::{compute_channel_stats, ChannelStats, ChannelStatsAccumulator, MIN_STD};

use crate::error::{Error, Result};
use crate::store::Store;

/// Resolves a record uri to raw bytes.
pub trait Fetcher {
    fn fetch(&self, uri: &str) -> Result<Vec<u8>>;
}

/// Reads `file://` uris and plain paths, relative paths resolved against a
/// base directory. Remote schemes are not fetched.
#[derive(Debug, Clone)]
pub struct LocalFetcher {
    pub base_dir: PathBuf,
}

impl Fetcher for LocalFetcher {
    fn fetch(&self, uri: &str) -> Result<Vec<u8>> {
        let path = uri.strip_prefix("file://").unwrap_or(uri);
        if path.contains("://") {
            return Err(Error::InvalidArgument(format!("remote uri not supported: {uri}")));
        }
        let path = self.base_dir.join(path);
        fs::read(&path).map_err(|e| Error::io(path, e))
    }
}

/// File name for a record's bytes inside the images directory.
pub fn image_file_name(record_id: &str) -> String {
    record_id.replace(['/', '\\'], "__")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub source_name: String,
    pub rows: usize,
    pub stored: usize,
    pub already_present: usize,
    pub fetch_failures: Vec<(String, String)>,
    pub damaged: Vec<String>,
    pub rejects: Vec<Reject>,
}

/// Normalizes every manifest entry, fetches and hashes its bytes, copies
/// them under `images_dir` and appends new records to the store. Records
/// whose id is already stored are left untouched.
pub fn ingest(
    store: &mut Store,
    manifest: &SourceManifest,
    fetcher: &dyn Fetcher,
    images_dir: &Path,
) -> Result<IngestReport> {
    let mut report = IngestReport {
        source_name: manifest.source_name.clone(),
        rows: manifest.total_rows(),
        rejects: manifest.rejects.clone(),
        ..Default::default()
    };
    let mut fresh = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let record = match normalize_record(entry, &manifest.source_name) {
            Ok(r) => r,
            Err(e) => {
                report.rejects.push(Reject {
                    line: i + 1,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if store.state().records.contains_key(&record.id) || fresh.iter().any(|r: &ImageRecord| r.id == record.id) {
            report.already_present += 1;
            continue;
        }
        let record = match fetcher.fetch(&record.uri) {
            Ok(bytes) => {
                let mut record = fetch_and_hash(record, &bytes);
                if record.has_bytes() {
                    fs::create_dir_all(images_dir).map_err(|e| Error::io(images_dir, e))?;
                    let name = image_file_name(&record.id);
                    let dest = images_dir.join(&name);
                    fs::write(&dest, &bytes).map_err(|e| Error::io(&dest, e))?;
                    record.local_path = Some(name);
                } else {
                    report.damaged.push(record.id.clone());
                }
                record
            }
            Err(e) => {
                report.fetch_failures.push((record.id.clone(), e.to_string()));
                record
            }
        };
        fresh.push(record);
    }
    report.stored = fresh.len();
    store.add_records(fresh)?;
    Ok(report)
}
