//! Slide-level train/test partitioning.
//!
//! Splitting happens on slide identifiers, never on patches, so that no
//! slide contributes patches to both sides.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::label::PolypLabel;
use crate::error::{Error, Result};

/// Default train share of slides.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlideSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SlideSplit {
    pub fn split_of(&self, slide_id: &str) -> Option<Split> {
        if self.train.contains(slide_id) {
            Some(Split::Train)
        } else if self.test.contains(slide_id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

fn check_fraction(train_fraction: f64) -> Result<()> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    Ok(())
}

fn take_shuffled(mut ids: Vec<String>, n_train: usize, rng: &mut ChaCha8Rng, out: &mut SlideSplit) {
    ids.sort();
    ids.shuffle(rng);
    let test = ids.split_off(n_train);
    out.train.extend(ids);
    out.test.extend(test);
}

/// Unstratified split: `round(train_fraction · N)` slides go to train.
pub fn split_slides(slide_ids: &BTreeSet<String>, train_fraction: f64, seed: u64) -> Result<SlideSplit> {
    check_fraction(train_fraction)?;
    if slide_ids.is_empty() {
        return Err(Error::invalid("no slides to split"));
    }
    let n_train = (train_fraction * slide_ids.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SlideSplit::default();
    take_shuffled(slide_ids.iter().cloned().collect(), n_train, &mut rng, &mut out);
    Ok(out)
}

/// Split stratified by slide label.
///
/// The overall train count is `round(train_fraction · N)`; per-class quotas
/// start at `floor(train_fraction · N_c)` and the leftover slots go to the
/// classes with the largest fractional remainders (ties in class order).
pub fn split_slides_stratified(
    slide_labels: &BTreeMap<String, PolypLabel>,
    train_fraction: f64,
    seed: u64,
) -> Result<SlideSplit> {
    check_fraction(train_fraction)?;
    if slide_labels.is_empty() {
        return Err(Error::invalid("no slides to split"));
    }
    let mut by_class: BTreeMap<PolypLabel, Vec<String>> = BTreeMap::new();
    for (id, &label) in slide_labels {
        by_class.entry(label).or_default().push(id.clone());
    }

    let total = (train_fraction * slide_labels.len() as f64).round() as usize;
    let mut quotas: Vec<(PolypLabel, usize, f64)> = by_class
        .iter()
        .map(|(&label, ids)| {
            let raw = train_fraction * ids.len() as f64;
            (label, raw.floor() as usize, raw - raw.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        quotas[i].1 += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SlideSplit::default();
    for (label, quota, _) in quotas {
        take_shuffled(by_class[&label].clone(), quota, &mut rng, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> BTreeSet<String> {
        (0..n).map(|i| format!("slide-{i:04}")).collect()
    }

    /// Slide counts per class of the reference corpus.
    fn reference_slides() -> BTreeMap<String, PolypLabel> {
        let counts = [41, 21, 26, 146, 20, 38];
        PolypLabel::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&l, n)| (0..n).map(move |i| (format!("{}-{i:03}", l.slug()), l)))
            .collect()
    }

    #[test]
    fn reference_corpus_gives_204_88() {
        let s = split_slides(&ids(292), 0.7, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (204, 88));
        let s = split_slides_stratified(&reference_slides(), 0.7, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (204, 88));
    }

    #[test]
    fn single_slide_goes_to_train() {
        let s = split_slides(&ids(1), 0.7, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 0));
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(split_slides(&ids(4), 0.0, 0).is_err());
        assert!(split_slides(&ids(4), 1.0, 0).is_err());
        assert!(split_slides(&BTreeSet::new(), 0.5, 0).is_err());
    }

    #[test]
    fn seeds_replay_and_differ() {
        let all = ids(292);
        let a = split_slides(&all, 0.7, 11).unwrap();
        assert_eq!(a, split_slides(&all, 0.7, 11).unwrap());
        let distinct: BTreeSet<Vec<String>> = (0..100)
            .map(|seed| split_slides(&all, 0.7, seed).unwrap().train.into_iter().collect())
            .collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn stratified_quotas_within_one() {
        let labels = reference_slides();
        let s = split_slides_stratified(&labels, 0.7, 5).unwrap();
        for class in PolypLabel::ALL {
            let n = labels.values().filter(|&&l| l == class).count();
            let got = s.train.iter().filter(|id| labels[*id] == class).count();
            let want = (0.7 * n as f64).round() as i64;
            assert!((got as i64 - want).abs() <= 1, "{class}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_complete(n in 1usize..200, f in 0.05f64..0.95, seed in any::<u64>()) {
            let all = ids(n);
            let s = split_slides(&all, f, seed).unwrap();
            prop_assert!(s.train.is_disjoint(&s.test));
            prop_assert_eq!(s.train.len() + s.test.len(), n);
            prop_assert_eq!(s.train.len(), (f * n as f64).round() as usize);
        }

        #[test]
        fn stratified_partition_is_disjoint(counts in proptest::collection::vec(1usize..30, 6), seed in any::<u64>()) {
            let labels: BTreeMap<String, PolypLabel> = PolypLabel::ALL
                .iter()
                .zip(&counts)
                .flat_map(|(&l, &n)| (0..n).map(move |i| (format!("{}-{i}", l.slug()), l)))
                .collect();
            let s = split_slides_stratified(&labels, 0.7, seed).unwrap();
            prop_assert!(s.train.is_disjoint(&s.test));
            prop_assert_eq!(s.train.len() + s.test.len(), labels.len());
            prop_assert_eq!(s.train.len(), (0.7 * labels.len() as f64).round() as usize);
        }
    }
}
