use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::AnnotationSet;
use crate::classes::{IconClass, N_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One line of `splits.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub record_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOutcome {
    /// Sorted by record id.
    pub assignments: Vec<SplitAssignment>,
    pub warnings: Vec<String>,
}

impl SplitOutcome {
    pub fn by_record(&self) -> BTreeMap<&str, Split> {
        self.assignments.iter().map(|a| (a.record_id.as_str(), a.split)).collect()
    }
}

/// Integer split sizes for `n` items: floors of the exact shares, with the
/// remainder handed to the largest fractional parts (earlier split on ties).
/// Each size is within one of its exact share.
pub fn proportional_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| n as f64 * r);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Rarest-class-first greedy stratification. Classes are visited in order
/// of increasing size; each still-unassigned record of the class goes to the
/// split with the most outstanding demand for that class, preferring splits
/// that still want every other label of the record. Unlabeled records form
/// their own group and are split proportionally as well. Classes with fewer
/// than three records go entirely to train.
pub fn stratified_split(annotations: &[AnnotationSet], ratios: [f64; 3], seed: u64) -> Result<SplitOutcome> {
    check_ratios(ratios)?;
    let mut records: Vec<&AnnotationSet> = annotations.iter().collect();
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    records.dedup_by(|a, b| a.record_id == b.record_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);

    // group N_CLASSES holds unlabeled records
    let n_groups = N_CLASSES + 1;
    let group_of = |set: &AnnotationSet| -> Vec<usize> {
        if set.is_empty() {
            vec![N_CLASSES]
        } else {
            set.classes().map(IconClass::index).collect()
        }
    };
    let mut counts = vec![0usize; n_groups];
    for r in &records {
        for g in group_of(r) {
            counts[g] += 1;
        }
    }

    let mut warnings = Vec::new();
    let mut desired: Vec<[i64; 3]> = counts
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            if n > 0 && n < 3 {
                let name = IconClass::from_index(g).map_or("unlabeled".to_string(), |c| c.code().to_string());
                warnings.push(format!("{name} has only {n} image(s); all assigned to train"));
                [n as i64, 0, 0]
            } else {
                proportional_counts(n, ratios).map(|c| c as i64)
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..N_CLASSES).filter(|&g| counts[g] > 0).collect();
    order.sort_by_key(|&g| (counts[g], g));
    order.push(N_CLASSES);

    let mut assigned: Vec<Option<Split>> = vec![None; records.len()];
    for g in order {
        for (i, r) in records.iter().enumerate() {
            if assigned[i].is_some() {
                continue;
            }
            let groups = group_of(r);
            if !groups.contains(&g) {
                continue;
            }
            let fits = |s: usize| groups.iter().all(|&l| desired[l][s] > 0);
            let best = (0..3)
                .max_by_key(|&s| (desired[g][s] > 0, fits(s), desired[g][s], std::cmp::Reverse(s)))
                .expect("three splits");
            for &l in &groups {
                desired[l][best] -= 1;
            }
            assigned[i] = Some(Split::ALL[best]);
        }
    }

    let mut assignments: Vec<SplitAssignment> = records
        .iter()
        .zip(assigned)
        .map(|(r, s)| SplitAssignment {
            record_id: r.record_id.clone(),
            split: s.expect("every record belongs to a group"),
        })
        .collect();
    assignments.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(SplitOutcome { assignments, warnings })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleLabelSubset {
    pub train: Vec<(String, IconClass)>,
    pub val: Vec<(String, IconClass)>,
    pub test: Vec<(String, IconClass)>,
}

impl SingleLabelSubset {
    pub fn get(&self, split: Split) -> &[(String, IconClass)] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Keeps exactly the records carrying one label, grouped by split.
pub fn single_label_subset(annotations: &[AnnotationSet], splits: &[SplitAssignment]) -> SingleLabelSubset {
    let by_id: BTreeMap<&str, Split> = splits.iter().map(|a| (a.record_id.as_str(), a.split)).collect();
    let mut out = SingleLabelSubset::default();
    let mut sets: Vec<&AnnotationSet> = annotations.iter().collect();
    sets.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    for set in sets {
        let (Some(class), Some(split)) = (set.single(), by_id.get(set.record_id.as_str())) else {
            continue;
        };
        let entry = (set.record_id.clone(), class);
        match split {
            Split::Train => out.train.push(entry),
            Split::Val => out.val.push(entry),
            Split::Test => out.test.push(entry),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use proptest::prelude::*;
    use rand::Rng;

    fn single(n: usize, class: IconClass, prefix: &str) -> Vec<AnnotationSet> {
        (0..n)
            .map(|i| AnnotationSet::with_classes(format!("{prefix}{i:05}"), &[class], Provenance::Keyword))
            .collect()
    }

    fn per_class(outcome: &SplitOutcome, sets: &[AnnotationSet]) -> BTreeMap<usize, [usize; 3]> {
        let by = outcome.by_record();
        let mut out: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
        for s in sets {
            let split = by[s.record_id.as_str()];
            let groups: Vec<usize> = if s.is_empty() { vec![N_CLASSES] } else { s.classes().map(|c| c.index()).collect() };
            for g in groups {
                out.entry(g).or_default()[split.index()] += 1;
            }
        }
        out
    }

    #[test]
    fn magdalene_row() {
        let sets = single(2420, IconClass::MaryMagdalene, "m");
        let out = stratified_split(&sets, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(per_class(&out, &sets)[&IconClass::MaryMagdalene.index()], [1936, 242, 242]);
    }

    #[test]
    fn ten_images() {
        let sets = single(10, IconClass::Paul, "p");
        let out = stratified_split(&sets, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(per_class(&out, &sets)[&IconClass::Paul.index()], [8, 1, 1]);
    }

    #[test]
    fn tiny_class_goes_to_train_with_warning() {
        let sets = single(2, IconClass::Dominic, "d");
        let out = stratified_split(&sets, [0.8, 0.1, 0.1], 1).unwrap();
        assert!(out.assignments.iter().all(|a| a.split == Split::Train));
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn bad_ratios() {
        assert!(stratified_split(&[], [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn unlabeled_records_split_proportionally() {
        let sets: Vec<AnnotationSet> = (0..100).map(|i| AnnotationSet::new(format!("n{i:03}"))).collect();
        let out = stratified_split(&sets, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(per_class(&out, &sets)[&N_CLASSES], [80, 10, 10]);
    }

    #[test]
    fn multi_label_fixture_within_one_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sizes = [12usize, 40, 55, 35, 60, 20, 45, 15, 25, 300];
        let mut sets = Vec::new();
        let mut k = 0;
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                let mut classes = vec![IconClass::ALL[c]];
                if c != 9 && rng.random_bool(0.3) {
                    classes.push(IconClass::VirginMary);
                }
                if rng.random_bool(0.1) {
                    classes.push(IconClass::ALL[rng.random_range(0..N_CLASSES)]);
                }
                sets.push(AnnotationSet::with_classes(format!("r{k:05}"), &classes, Provenance::Keyword));
                k += 1;
            }
        }
        for seed in 0..5 {
            let out = stratified_split(&sets, [0.8, 0.1, 0.1], seed).unwrap();
            // independent recount per class against the exact shares
            for (g, got) in per_class(&out, &sets) {
                let n: usize = got.iter().sum();
                for s in 0..3 {
                    let exact = n as f64 * [0.8, 0.1, 0.1][s];
                    assert!(
                        (got[s] as f64 - exact).abs() <= 1.0 + 1e-9,
                        "seed {seed} group {g}: {got:?} vs n={n}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_label_filter() {
        use IconClass::{Peter, VirginMary};
        let sets = vec![
            AnnotationSet::with_classes("a", &[VirginMary], Provenance::Keyword),
            AnnotationSet::with_classes("b", &[VirginMary, Peter], Provenance::Keyword),
            AnnotationSet::new("c"),
        ];
        let splits: Vec<SplitAssignment> = ["a", "b", "c"]
            .iter()
            .map(|id| SplitAssignment {
                record_id: id.to_string(),
                split: Split::Test,
            })
            .collect();
        let sub = single_label_subset(&sets, &splits);
        assert_eq!(sub.test, vec![("a".to_string(), VirginMary)]);
        assert_eq!(sub.counts(), [0, 0, 1]);
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(
            labels in proptest::collection::vec(proptest::collection::vec(0usize..N_CLASSES, 0..3), 1..120),
            seed in any::<u64>(),
        ) {
            let sets: Vec<AnnotationSet> = labels
                .iter()
                .enumerate()
                .map(|(i, ls)| {
                    let classes: Vec<IconClass> = ls.iter().map(|&l| IconClass::ALL[l]).collect();
                    AnnotationSet::with_classes(format!("r{i:04}"), &classes, Provenance::Keyword)
                })
                .collect();
            let a = stratified_split(&sets, [0.8, 0.1, 0.1], seed).unwrap();
            let b = stratified_split(&sets, [0.8, 0.1, 0.1], seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.assignments.len(), sets.len());
            let ids: std::collections::BTreeSet<_> = a.assignments.iter().map(|x| x.record_id.clone()).collect();
            prop_assert_eq!(ids.len(), sets.len());
        }

        #[test]
        fn single_label_counts_match_exact_shares(n in 3usize..3000, seed in any::<u64>()) {
            let sets = single(n, IconClass::Jerome, "j");
            let out = stratified_split(&sets, [0.8, 0.1, 0.1], seed).unwrap();
            let got = per_class(&out, &sets)[&IconClass::Jerome.index()];
            for s in 0..3 {
                prop_assert!((got[s] as f64 - n as f64 * [0.8, 0.1, 0.1][s]).abs() < 1.0);
            }
        }
    }
}
