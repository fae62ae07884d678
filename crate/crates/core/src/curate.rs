//! Duplicate removal, suspect-image flagging and decision application.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::{hamming, ImageRecord};
use crate::review::{Decision, DecisionEvent, ReviewItem, ReviewKind};
use crate::store::{AutoAction, Store, StoreState};
use crate::text::contains_word;

pub const DEFAULT_NEAR_DUP_THRESHOLD: u32 = 10;
pub const DEFAULT_FRAGMENT_KEYWORDS: [&str; 3] = ["detail", "fragment", "portion"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub md5: String,
    pub survivor: String,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub groups: Vec<DuplicateGroup>,
}

impl DedupReport {
    pub fn removed_count(&self) -> usize {
        self.groups.iter().map(|g| g.removed.len()).sum()
    }
}

/// Groups active records by MD5. The lexicographically smallest id of each
/// group survives.
pub fn plan_exact_duplicates(state: &StoreState) -> DedupReport {
    let mut by_md5: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in state.active_records() {
        if let Some(md5) = &r.md5 {
            by_md5.entry(md5).or_default().push(&r.id);
        }
    }
    let groups = by_md5
        .into_iter()
        .filter(|(_, ids)| ids.len() > 1)
        .map(|(md5, mut ids)| {
            ids.sort_unstable();
            DuplicateGroup {
                md5: md5.to_string(),
                survivor: ids[0].to_string(),
                removed: ids[1..].iter().map(|s| s.to_string()).collect(),
            }
        })
        .collect();
    DedupReport { groups }
}

pub fn remove_exact_duplicates(store: &mut Store, decided_at: &str) -> Result<DedupReport> {
    let report = plan_exact_duplicates(store.state());
    for group in &report.groups {
        for id in &group.removed {
            store.commit(
                AutoAction::RemoveDuplicate {
                    record_id: id.clone(),
                    survivor: group.survivor.clone(),
                }
                .into_event(decided_at),
            )?;
        }
    }
    Ok(report)
}

/// Unordered pairs of ids (smaller first) whose hashes differ in at most
/// `threshold` bits, with their distance.
///
/// Uses pigeonhole bucketing: split the 64 bits into `threshold + 1`
/// segments; any pair within the threshold agrees exactly on at least one
/// segment, so only pairs sharing a segment value are compared.
pub fn near_duplicate_pairs(hashes: &[(String, u64)], threshold: u32) -> Result<Vec<(u32, String, String)>> {
    if threshold > 64 {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0,64]")));
    }
    let mut sorted: Vec<&(String, u64)> = hashes.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let n = sorted.len();
    let mut candidates: HashSet<(usize, usize)> = HashSet::new();
    let segments = threshold as usize + 1;
    if segments > 16 {
        for i in 0..n {
            for j in i + 1..n {
                candidates.insert((i, j));
            }
        }
    } else {
        let mut bounds = Vec::with_capacity(segments + 1);
        for s in 0..=segments {
            bounds.push(s * 64 / segments);
        }
        for s in 0..segments {
            let (lo, hi) = (bounds[s], bounds[s + 1]);
            let mask = if hi - lo == 64 { u64::MAX } else { ((1u64 << (hi - lo)) - 1) << lo };
            let mut buckets: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (i, (_, h)) in sorted.iter().enumerate() {
                buckets.entry(h & mask).or_default().push(i);
            }
            for members in buckets.values() {
                for (a, &i) in members.iter().enumerate() {
                    for &j in &members[a + 1..] {
                        candidates.insert((i, j));
                    }
                }
            }
        }
    }
    let mut pairs: Vec<(u32, String, String)> = candidates
        .into_iter()
        .filter_map(|(i, j)| {
            let d = hamming(sorted[i].1, sorted[j].1);
            (d <= threshold).then(|| (d, sorted[i].0.clone(), sorted[j].0.clone()))
        })
        .collect();
    pairs.sort();
    Ok(pairs)
}

/// One `near_dup_pair` item per active pair within `threshold`, ordered by
/// (distance, ids).
pub fn find_near_duplicates(state: &StoreState, threshold: u32) -> Result<Vec<ReviewItem>> {
    let hashes: Vec<(String, u64)> = state
        .active_records()
        .filter_map(|r| r.phash.map(|h| (r.id.clone(), h)))
        .collect();
    Ok(near_duplicate_pairs(&hashes, threshold)?
        .into_iter()
        .map(|(d, a, b)| ReviewItem::new(ReviewKind::NearDupPair, vec![a, b], "").with_evidence("hamming_distance", d))
        .collect())
}

fn first_keyword_match<'a>(record: &ImageRecord, keywords: &'a [String]) -> Option<(String, &'a str)> {
    record
        .text_fields()
        .into_iter()
        .find_map(|(field, text)| keywords.iter().find(|k| contains_word(text, k)).map(|k| (field, k.as_str())))
}

/// Flags active records whose metadata mentions a fragment keyword on word
/// boundaries. Records already kept as fragments are skipped.
pub fn flag_fragments(state: &StoreState, keywords: &[String]) -> Result<Vec<ReviewItem>> {
    if keywords.is_empty() {
        return Err(Error::InvalidArgument("fragment keyword list is empty".into()));
    }
    Ok(state
        .active_records()
        .filter(|r| r.extra_metadata.get("kept_fragment").map(String::as_str) != Some("true"))
        .filter_map(|r| {
            first_keyword_match(r, keywords).map(|(field, kw)| {
                ReviewItem::new(ReviewKind::Fragment, vec![r.id.clone()], "")
                    .with_evidence("keyword", kw)
                    .with_evidence("field", field)
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureDetection {
    pub record_id: String,
    pub n_figures: u32,
    pub detector_name: String,
}

/// Counts human figures in an image. `Ok(None)` means the detector declines
/// to judge the record.
pub trait FigureDetector {
    fn name(&self) -> &str;
    fn detect(&self, record: &ImageRecord, image_path: Option<&Path>) -> Result<Option<u32>>;
}

/// Deterministic detector for tests and fixtures: reads a figure count from
/// a lookup table, falling back to a metadata key.
#[derive(Debug, Clone, Default)]
pub struct StubDetector {
    pub counts: BTreeMap<String, u32>,
    pub metadata_key: Option<String>,
}

impl StubDetector {
    pub fn from_metadata(key: &str) -> Self {
        StubDetector {
            counts: BTreeMap::new(),
            metadata_key: Some(key.to_string()),
        }
    }
}

impl FigureDetector for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn detect(&self, record: &ImageRecord, _image_path: Option<&Path>) -> Result<Option<u32>> {
        if let Some(&n) = self.counts.get(&record.id) {
            return Ok(Some(n));
        }
        Ok(self
            .metadata_key
            .as_ref()
            .and_then(|k| record.extra_metadata.get(k))
            .and_then(|v| v.trim().parse().ok()))
    }
}

/// Runs an external command once per image. The command receives
/// `{"image_path": "..."}` on stdin and must print `{"n_figures": N}`.
#[derive(Debug, Clone)]
pub struct CommandDetector {
    pub command: String,
}

#[derive(Deserialize)]
struct DetectorResponse {
    n_figures: Option<i64>,
}

impl FigureDetector for CommandDetector {
    fn name(&self) -> &str {
        &self.command
    }

    fn detect(&self, record: &ImageRecord, image_path: Option<&Path>) -> Result<Option<u32>> {
        let Some(path) = image_path else {
            return Ok(None);
        };
        let request = serde_json::json!({ "image_path": path });
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Detector(format!("spawn {:?}: {e}", self.command)))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(request.to_string().as_bytes())
            .map_err(|e| Error::Detector(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| Error::Detector(e.to_string()))?;
        if !out.status.success() {
            return Err(Error::Detector(format!("{} exited with {} for {}", self.command, out.status, record.id)));
        }
        let resp: DetectorResponse = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Detector(format!("bad response for {}: {e}", record.id)))?;
        match resp.n_figures {
            None => Ok(None),
            Some(n) if n >= 0 => Ok(Some(n as u32)),
            Some(n) => Err(Error::Detector(format!("negative figure count {n}"))),
        }
    }
}

/// Runs the detector over active records. Records it skips or fails on are
/// returned separately.
pub fn detect_figures(
    state: &StoreState,
    detector: &dyn FigureDetector,
    images_dir: Option<&Path>,
) -> (Vec<FigureDetection>, Vec<(String, String)>) {
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    for r in state.active_records() {
        let path: Option<PathBuf> = match (images_dir, &r.local_path) {
            (Some(dir), Some(p)) => Some(dir.join(p)),
            _ => None,
        };
        match detector.detect(r, path.as_deref()) {
            Ok(Some(n)) => found.push(FigureDetection {
                record_id: r.id.clone(),
                n_figures: n,
                detector_name: detector.name().to_string(),
            }),
            Ok(None) => skipped.push((r.id.clone(), "detector skipped".into())),
            Err(e) => skipped.push((r.id.clone(), e.to_string())),
        }
    }
    (found, skipped)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseFilterPlan {
    /// Annotated records with no detected figure.
    pub auto_removals: Vec<String>,
    /// Unannotated records with at least one detected figure.
    pub items: Vec<ReviewItem>,
    /// Active records without a detection.
    pub skipped: Vec<String>,
}

pub fn flag_pose_mismatches(state: &StoreState, detections: &[FigureDetection]) -> PoseFilterPlan {
    let by_id: BTreeMap<&str, &FigureDetection> = detections.iter().map(|d| (d.record_id.as_str(), d)).collect();
    let mut plan = PoseFilterPlan::default();
    for r in state.active_records() {
        let Some(det) = by_id.get(r.id.as_str()) else {
            log::warn!("no figure detection for {}; skipped", r.id);
            plan.skipped.push(r.id.clone());
            continue;
        };
        let annotated = state.annotation(&r.id).is_some_and(|a| !a.is_empty());
        match (annotated, det.n_figures) {
            (true, 0) => plan.auto_removals.push(r.id.clone()),
            (false, n) if n >= 1 => plan.items.push(
                ReviewItem::new(ReviewKind::PoseMismatch, vec![r.id.clone()], "")
                    .with_evidence("n_figures", n)
                    .with_evidence("detector", &det.detector_name),
            ),
            _ => {}
        }
    }
    plan
}

/// Commits the automatic removals of a pose plan and enqueues its items.
pub fn apply_pose_filter(store: &mut Store, plan: &PoseFilterPlan, decided_at: &str) -> Result<usize> {
    for id in &plan.auto_removals {
        store.commit(
            AutoAction::RemoveFiltered {
                record_id: id.clone(),
                reason: "annotated but no detected figure".into(),
            }
            .into_event(decided_at),
        )?;
    }
    store.enqueue(plan.items.clone())
}

pub fn apply_decision(
    store: &mut Store,
    item_id: &str,
    decision: Decision,
    payload: Option<Value>,
    decided_at: &str,
) -> Result<()> {
    if decision == Decision::Auto {
        return Err(Error::InvalidArgument("auto is not a reviewer decision".into()));
    }
    store.commit(DecisionEvent {
        item_id: item_id.to_string(),
        decision,
        payload,
        decided_at: decided_at.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::IconClass;
    use crate::dataset::{AnnotationSet, Provenance};
    use crate::ingest::{normalize_record, RawEntry, RecordStatus};
    use crate::review::ReviewStatus;
    use proptest::prelude::*;

    const T: &str = "2024-01-01T00:00:00.000Z";

    fn rec(uri: &str, md5: &str, phash: u64) -> ImageRecord {
        let mut r = normalize_record(&RawEntry::new(uri), "t").unwrap();
        r.md5 = Some(md5.into());
        r.phash = Some(phash);
        r
    }

    fn store_of(records: Vec<ImageRecord>) -> Store {
        let mut s = Store::in_memory();
        s.add_records(records).unwrap();
        s
    }

    #[test]
    fn identical_bytes_leave_one_survivor() {
        let mut store = store_of(vec![rec("a", "m1", 1), rec("b", "m1", 1), rec("c", "m1", 1)]);
        let report = remove_exact_duplicates(&mut store, T).unwrap();
        assert_eq!(report.groups.len(), 1);
        assert_eq!(report.removed_count(), 2);
        let active: Vec<_> = store.state().active_records().map(|r| r.id.clone()).collect();
        assert_eq!(active, vec![report.groups[0].survivor.clone()]);
        let removed = store
            .state()
            .records
            .values()
            .filter(|r| r.status == RecordStatus::RemovedDuplicate)
            .count();
        assert_eq!(removed, 2);
    }

    #[test]
    fn distinct_md5_is_untouched() {
        let mut store = store_of(vec![rec("a", "m1", 1), rec("b", "m2", 2)]);
        let report = remove_exact_duplicates(&mut store, T).unwrap();
        assert!(report.groups.is_empty());
        assert_eq!(store.state().active_records().count(), 2);
        assert!(remove_exact_duplicates(&mut Store::in_memory(), T).unwrap().groups.is_empty());
    }

    #[test]
    fn threshold_zero_on_distinct_hashes() {
        let store = store_of(vec![rec("a", "1", 1), rec("b", "2", 2), rec("c", "3", 4)]);
        assert!(find_near_duplicates(store.state(), 0).unwrap().is_empty());
        assert!(find_near_duplicates(store.state(), 65).is_err());
        let items = find_near_duplicates(store.state(), 2).unwrap();
        assert_eq!(items.len(), 3);
        assert!(items.iter().all(|i| i.evidence["hamming_distance"] == "2"));
    }

    fn brute_pairs(hashes: &[(String, u64)], t: u32) -> Vec<(u32, String, String)> {
        let mut out = Vec::new();
        for i in 0..hashes.len() {
            for j in 0..hashes.len() {
                let (a, b) = (&hashes[i], &hashes[j]);
                if a.0 < b.0 {
                    let d = (a.1 ^ b.1).count_ones();
                    if d <= t {
                        out.push((d, a.0.clone(), b.0.clone()));
                    }
                }
            }
        }
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn bucketed_pairs_equal_all_pairs(
            base in proptest::collection::vec(any::<u64>(), 1..12),
            flips in proptest::collection::vec((0usize..12, 0u32..64), 0..40),
            t in 0u32..24,
        ) {
            let mut hashes: Vec<(String, u64)> = base.iter().enumerate().map(|(i, h)| (format!("r{i:03}"), *h)).collect();
            for (k, (src, bit)) in flips.iter().enumerate() {
                let h = hashes[src % base.len()].1 ^ (1u64 << bit);
                hashes.push((format!("f{k:03}"), h));
            }
            prop_assert_eq!(near_duplicate_pairs(&hashes, t).unwrap(), brute_pairs(&hashes, t));
        }

        #[test]
        fn near_dups_independent_of_insertion_order(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..20u64).map(|i| rec(&format!("u{i}"), &format!("m{i}"), (i % 5) * 0x0101 + i)).collect();
            let a = find_near_duplicates(store_of(recs.clone()).state(), 6).unwrap();
            let mut shuffled = recs;
            shuffled.shuffle(&mut rng);
            let b = find_near_duplicates(store_of(shuffled).state(), 6).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn fragment_word_boundaries() {
        let mut a = rec("a", "1", 0);
        a.title = "Polyptych (detail)".into();
        let mut b = rec("b", "2", 0);
        b.title = "Detailed study of hands".into();
        let mut c = rec("c", "3", 0);
        c.tags = vec!["fragment".into()];
        let (ida, idc) = (a.id.clone(), c.id.clone());
        let store = store_of(vec![a, b, c]);
        let kws: Vec<String> = DEFAULT_FRAGMENT_KEYWORDS.iter().map(|s| s.to_string()).collect();
        let items = flag_fragments(store.state(), &kws).unwrap();
        let flagged: Vec<_> = items.iter().map(|i| i.subject_ids[0].clone()).collect();
        let mut expected = vec![ida.clone(), idc];
        expected.sort();
        assert_eq!(flagged, expected);
        let item_a = items.iter().find(|i| i.subject_ids[0] == ida).unwrap();
        assert_eq!(item_a.evidence["keyword"], "detail");
        assert_eq!(item_a.evidence["field"], "title");
        assert!(flag_fragments(store.state(), &[]).is_err());
    }

    #[test]
    fn pose_rules() {
        let recs = vec![rec("a", "1", 0), rec("b", "2", 0), rec("c", "3", 0), rec("d", "4", 0)];
        let ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
        let mut store = store_of(recs);
        store
            .set_base_labels(vec![AnnotationSet::with_classes(ids[0].clone(), &[IconClass::Peter], Provenance::Keyword)])
            .unwrap();
        let det = |i: usize, n| FigureDetection {
            record_id: ids[i].clone(),
            n_figures: n,
            detector_name: "stub".into(),
        };
        // a: annotated, 0 figures; b: unannotated, 1 figure; c: unannotated, 0; d: missing
        let plan = flag_pose_mismatches(store.state(), &[det(0, 0), det(1, 1), det(2, 0)]);
        assert_eq!(plan.auto_removals, vec![ids[0].clone()]);
        assert_eq!(plan.items.len(), 1);
        assert_eq!(plan.items[0].subject_ids, vec![ids[1].clone()]);
        assert_eq!(plan.skipped, vec![ids[3].clone()]);

        apply_pose_filter(&mut store, &plan, T).unwrap();
        assert_eq!(store.state().records[&ids[0]].status, RecordStatus::RemovedFiltered);
        assert!(store.state().records[&ids[2]].is_active());

        let item = plan.items[0].item_id.clone();
        apply_decision(&mut store, &item, Decision::Accept, Some(serde_json::json!({"labels": ["11H(PETER)"]})), T).unwrap();
        let set = store.state().annotation(&ids[1]).unwrap();
        assert_eq!(set.labels[0].provenance, Provenance::Manual);
        assert_eq!(store.state().items[&item].status, ReviewStatus::Accepted);
    }

    #[test]
    fn stub_detector_reads_metadata() {
        let mut r = rec("a", "1", 0);
        r.extra_metadata.insert("figures".into(), "2".into());
        let store = store_of(vec![r.clone(), rec("b", "2", 0)]);
        let (found, skipped) = detect_figures(store.state(), &StubDetector::from_metadata("figures"), None);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].n_figures, 2);
        assert_eq!(skipped.len(), 1);
    }

    #[test]
    fn command_detector_contract() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("x.png");
        std::fs::write(&img, b"x").unwrap();
        let det = CommandDetector {
            command: r#"grep -q image_path && echo '{"n_figures": 3}'"#.into(),
        };
        let r = rec("a", "1", 0);
        assert_eq!(det.detect(&r, Some(&img)).unwrap(), Some(3));
        assert_eq!(det.detect(&r, None).unwrap(), None);
        let bad = CommandDetector { command: "echo nope".into() };
        assert!(bad.detect(&r, Some(&img)).is_err());
    }

    #[test]
    fn reviewer_cannot_submit_auto() {
        let mut store = store_of(vec![rec("a", "1", 0)]);
        assert!(apply_decision(&mut store, "x", Decision::Auto, None, T).is_err());
    }
}
