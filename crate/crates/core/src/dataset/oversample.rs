use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::IconClass;
use crate::error::{Error, Result};

/// One oversampled training epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub target_count: usize,
    pub per_class: BTreeMap<IconClass, Vec<String>>,
    /// Shuffled concatenation of the per-class lists.
    pub order: Vec<(String, IconClass)>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Oversamples every class to the size of the largest. Each class is
/// replicated whole `t / n` times and topped up with `t % n` distinct
/// members drawn with the seed, so every member appears `⌊t/n⌋` or `⌈t/n⌉`
/// times. All ten classes must be present.
pub fn plan_oversampled_epoch(train: &[(String, IconClass)], seed: u64) -> Result<EpochPlan> {
    plan_oversampled_epoch_over(train, &IconClass::ALL, seed)
}

/// Same as [`plan_oversampled_epoch`] restricted to `classes`; training
/// records of other classes are ignored.
pub fn plan_oversampled_epoch_over(train: &[(String, IconClass)], classes: &[IconClass], seed: u64) -> Result<EpochPlan> {
    let mut members: BTreeMap<IconClass, Vec<String>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (id, class) in train {
        if let Some(list) = members.get_mut(class) {
            list.push(id.clone());
        }
    }
    if let Some((class, _)) = members.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::EmptyClass(class.code().to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_count = members.values().map(Vec::len).max().unwrap_or(0);
    let mut per_class = BTreeMap::new();
    for (class, mut ids) in members {
        ids.sort();
        let n = ids.len();
        let mut list = Vec::with_capacity(target_count);
        for _ in 0..target_count / n {
            list.extend(ids.iter().cloned());
        }
        let mut extra: Vec<usize> = index::sample(&mut rng, n, target_count % n).into_vec();
        extra.sort_unstable();
        list.extend(extra.into_iter().map(|i| ids[i].clone()));
        per_class.insert(class, list);
    }
    let mut order: Vec<(String, IconClass)> = per_class
        .iter()
        .flat_map(|(&c, ids)| ids.iter().map(move |id| (id.clone(), c)))
        .collect();
    order.shuffle(&mut rng);
    Ok(EpochPlan {
        target_count,
        per_class,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn train_with(counts: &[(IconClass, usize)]) -> Vec<(String, IconClass)> {
        counts
            .iter()
            .flat_map(|&(c, n)| (0..n).map(move |i| (format!("{}-{i:05}", c.index()), c)))
            .collect()
    }

    fn multiplicities(list: &[String]) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for id in list {
            *m.entry(id.as_str()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn virgin_vs_anthony() {
        let train = train_with(&[(IconClass::VirginMary, 15492), (IconClass::AntonyOfPadua, 171)]);
        let plan = plan_oversampled_epoch_over(&train, &[IconClass::VirginMary, IconClass::AntonyOfPadua], 0).unwrap();
        assert_eq!(plan.per_class[&IconClass::VirginMary].len(), 15492);
        assert_eq!(plan.per_class[&IconClass::AntonyOfPadua].len(), 15492);
        assert_eq!(plan.len(), 2 * 15492);
    }

    #[test]
    fn balanced_counts_use_each_image_once() {
        let counts: Vec<_> = IconClass::ALL.iter().map(|&c| (c, 7)).collect();
        let plan = plan_oversampled_epoch(&train_with(&counts), 1).unwrap();
        for list in plan.per_class.values() {
            assert!(multiplicities(list).values().all(|&m| m == 1));
        }
    }

    #[test]
    fn three_versus_seven() {
        let (a, b) = (IconClass::Jerome, IconClass::Paul);
        let plan = plan_oversampled_epoch_over(&train_with(&[(a, 3), (b, 7)]), &[a, b], 9).unwrap();
        let hist = multiplicities(&plan.per_class[&a]);
        assert_eq!(plan.per_class[&a].len(), 7);
        let mut ms: Vec<usize> = hist.values().copied().collect();
        ms.sort();
        assert_eq!(ms, vec![2, 2, 3]);
    }

    #[test]
    fn missing_class_is_named() {
        let train = train_with(&[(IconClass::VirginMary, 3)]);
        match plan_oversampled_epoch(&train, 0) {
            Err(Error::EmptyClass(name)) => assert_eq!(name, "11H(ANTONY OF PADUA)"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seeded_plans_repeat() {
        let counts: Vec<_> = IconClass::ALL.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        let t = train_with(&counts);
        assert_eq!(plan_oversampled_epoch(&t, 5).unwrap(), plan_oversampled_epoch(&t, 5).unwrap());
    }

    proptest! {
        #[test]
        fn multiplicities_are_balanced(counts in proptest::collection::vec(1usize..60, 10), seed in any::<u64>()) {
            let pairs: Vec<_> = IconClass::ALL.iter().copied().zip(counts.iter().copied()).collect();
            let plan = plan_oversampled_epoch(&train_with(&pairs), seed).unwrap();
            let t = *counts.iter().max().unwrap();
            prop_assert_eq!(plan.target_count, t);
            for (class, n) in pairs {
                let list = &plan.per_class[&class];
                prop_assert_eq!(list.len(), t);
                let hist = multiplicities(list);
                prop_assert_eq!(hist.len(), n);
                for &m in hist.values() {
                    prop_assert!(m == t / n || m == t.div_ceil(n));
                }
            }
        }
    }
}
