//! Per-class balancing of a training portion to a fixed count.
//!
//! Classes above the target are subsampled uniformly without replacement.
//! Classes below it keep every original and gain augmented records whose
//! parents are dealt round-robin over the originals. Augmented records are
//! not written to disk: each carries a seed from which its transform is
//! replayed when the image is loaded.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::record::{ImageRecord, Origin};
use crate::rng;
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BalanceConfig {
    pub target_per_class: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            target_per_class: 1000,
            seed: 0,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_per_class == 0 {
            return Err(Error::InvalidConfig("target_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BalancedRecord {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub record: ImageRecord,
    /// Present exactly when the record is augmented.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub augmentation_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BalancedSet {
    entries: Vec<BalancedRecord>,
}

impl BalancedSet {
    pub fn entries(&self) -> &[BalancedRecord] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<BalancedRecord> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_class_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.record.label.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.entries.iter().map(|e| &e.record)
    }
}

/// Balances every class present in `train_records` to
/// `config.target_per_class` records. Output is grouped by class in
/// abbreviation order; originals keep their input order and precede the
/// augmented records.
pub fn balance_class_counts(
    train_records: &[ImageRecord],
    config: &BalanceConfig,
) -> Result<BalancedSet> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut by_class: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in train_records {
        if r.origin != Origin::Original {
            return Err(Error::AugmentedInput(r.id.clone()));
        }
        by_class.entry(r.label.as_str()).or_default().push(r);
    }

    let target = config.target_per_class;
    let mut entries = Vec::with_capacity(by_class.len() * target);
    for (class, originals) in by_class {
        let n = originals.len();
        if n >= target {
            let mut rng = rng::stream(rng::derive_seed(config.seed, class));
            let mut keep = index::sample(&mut rng, n, target).into_vec();
            keep.sort_unstable();
            entries.extend(keep.into_iter().map(|i| BalancedRecord {
                record: originals[i].clone(),
                augmentation_seed: None,
            }));
        } else {
            entries.extend(originals.iter().map(|r| BalancedRecord {
                record: (*r).clone(),
                augmentation_seed: None,
            }));
            let stream = format!("augment/{class}");
            for k in 0..target - n {
                let parent = originals[k % n];
                let id: String = format!("{}~aug{:05}", parent.id, k);
                entries.push(BalancedRecord {
                    record: ImageRecord::augmented_from(parent, id),
                    augmentation_seed: Some(rng::derive_indexed(config.seed, &stream, k as u64)),
                });
            }
        }
    }
    Ok(BalancedSet { entries })
}

/// Like [`balance_class_counts`], but also requires every taxonomy class to
/// be present in the training portion.
pub fn balance_for_taxonomy(
    train_records: &[ImageRecord],
    taxonomy: &ClassTaxonomy,
    config: &BalanceConfig,
) -> Result<BalancedSet> {
    for class in taxonomy.abbreviations() {
        if !train_records.iter().any(|r| r.label == class) {
            return Err(Error::EmptyClass(class.into()));
        }
    }
    for r in train_records {
        taxonomy.require(&r.label)?;
    }
    balance_class_counts(train_records, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn originals(label: &str, n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| ImageRecord::original(format!("{label}/{i:05}"), format!("{label}/{i}.jpg"), label))
            .collect()
    }

    #[test]
    fn subsamples_overrepresented_class() {
        let recs = originals("AH", 2359);
        let out = balance_class_counts(&recs, &BalanceConfig::default()).unwrap();
        assert_eq!(out.len(), 1000);
        assert!(out.entries().iter().all(|e| e.record.is_original()));
        let ids: BTreeSet<_> = out.records().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn exact_target_is_fixed_point() {
        let recs = originals("CS", 1000);
        let out = balance_class_counts(&recs, &BalanceConfig::default()).unwrap();
        let back: Vec<ImageRecord> = out.records().cloned().collect();
        assert_eq!(back, recs);
    }

    #[test]
    fn augments_underrepresented_round_robin() {
        let recs = originals("BSSP", 224);
        let out = balance_class_counts(&recs, &BalanceConfig::default()).unwrap();
        assert_eq!(out.len(), 1000);
        let augmented: Vec<_> = out.entries().iter().filter(|e| !e.record.is_original()).collect();
        assert_eq!(augmented.len(), 776);
        let mut per_parent: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &augmented {
            *per_parent.entry(e.record.parent_id.as_deref().unwrap()).or_insert(0) += 1;
        }
        assert_eq!(per_parent.len(), 224);
        assert!(per_parent.values().all(|c| *c == 3 || *c == 4));
        assert_eq!(per_parent.values().filter(|c| **c == 4).count(), 776 - 3 * 224);
        let seeds: BTreeSet<u64> = augmented.iter().map(|e| e.augmentation_seed.unwrap()).collect();
        assert_eq!(seeds.len(), 776);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut recs = originals("IG", 1500);
        recs.extend(originals("WAT", 40));
        let cfg = BalanceConfig { target_per_class: 100, seed: 5 };
        assert_eq!(
            balance_class_counts(&recs, &cfg).unwrap(),
            balance_class_counts(&recs, &cfg).unwrap()
        );
        let other = BalanceConfig { seed: 6, ..cfg };
        assert_ne!(
            balance_class_counts(&recs, &cfg).unwrap(),
            balance_class_counts(&recs, &other).unwrap()
        );
    }

    #[test]
    fn error_paths() {
        assert_eq!(
            balance_class_counts(&[], &BalanceConfig::default()).unwrap_err(),
            Error::EmptyInput
        );
        let p = ImageRecord::original("p", "p", "BOG");
        let child = ImageRecord::augmented_from(&p, "c");
        assert_eq!(
            balance_class_counts(&[p, child], &BalanceConfig::default()).unwrap_err(),
            Error::AugmentedInput("c".into())
        );
        let tax = ClassTaxonomy::living_england();
        let err = balance_for_taxonomy(&originals("AH", 3), &tax, &BalanceConfig::default());
        assert!(matches!(err, Err(Error::EmptyClass(_))));
        let zero = BalanceConfig { target_per_class: 0, seed: 0 };
        assert!(balance_class_counts(&originals("AH", 1), &zero).is_err());
    }
}
