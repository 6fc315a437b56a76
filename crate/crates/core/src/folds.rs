//! Stratified k-fold assignment.
//!
//! Within each class the original records are shuffled with a per-class
//! stream and dealt round-robin onto the folds. The dealing position carries
//! over from one class to the next so the remainders spread across folds
//! instead of piling onto fold 0.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::record::{ImageRecord, Manifest};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldAssignment {
    n_folds: usize,
    seed: u64,
    assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn from_parts(
        n_folds: usize,
        seed: u64,
        assignment: BTreeMap<String, usize>,
    ) -> Result<Self> {
        if n_folds == 0 {
            return Err(Error::InvalidFoldCount);
        }
        if let Some((_, &fold)) = assignment.iter().find(|(_, f)| **f >= n_folds) {
            return Err(Error::FoldOutOfRange { fold, n_folds });
        }
        Ok(Self {
            n_folds,
            seed,
            assignment,
        })
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn validation_ids(&self, fold: usize) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
    }

    /// Checks that every original record of `manifest` has a fold and that no
    /// augmented record does.
    pub fn validate_against(&self, manifest: &Manifest) -> Result<()> {
        for r in manifest.records() {
            match (r.is_original(), self.fold_of(&r.id)) {
                (true, None) => return Err(Error::MissingFold(r.id.clone())),
                (false, Some(_)) => {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "augmented record `{}` must not carry a fold",
                        r.id
                    )))
                }
                _ => {}
            }
        }
        if self.assignment.len() != manifest.originals().count() {
            return Err(Error::InvalidConfig(
                "fold assignment references records missing from the manifest".into(),
            ));
        }
        Ok(())
    }

    /// Splits the manifest's original records into (training, validation)
    /// for `fold`, preserving manifest order.
    pub fn split<'a>(
        &self,
        manifest: &'a Manifest,
        fold: usize,
    ) -> Result<(Vec<&'a ImageRecord>, Vec<&'a ImageRecord>)> {
        if fold >= self.n_folds {
            return Err(Error::FoldOutOfRange {
                fold,
                n_folds: self.n_folds,
            });
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for r in manifest.originals() {
            match self.fold_of(&r.id) {
                Some(f) if f == fold => val.push(r),
                Some(_) => train.push(r),
                None => return Err(Error::MissingFold(r.id.clone())),
            }
        }
        Ok((train, val))
    }
}

pub fn stratified_kfold_split(
    manifest: &Manifest,
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if n_folds == 0 {
        return Err(Error::InvalidFoldCount);
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in manifest.originals() {
        by_class.entry(r.label.as_str()).or_default().push(r.id.as_str());
    }
    if let Some((class, ids)) = by_class.iter().find(|(_, ids)| ids.len() < n_folds) {
        return Err(Error::TooFewForFolds {
            class: class.to_string(),
            available: ids.len(),
            n_folds,
        });
    }

    let mut assignment = BTreeMap::new();
    let mut cursor = 0usize;
    for (class, mut ids) in by_class {
        // Sorting first makes the result independent of ingestion order.
        ids.sort_unstable();
        let mut rng = rng::stream(rng::derive_seed(seed, class));
        ids.shuffle(&mut rng);
        for id in ids {
            assignment.insert(id.to_string(), cursor % n_folds);
            cursor += 1;
        }
    }
    Ok(FoldAssignment {
        n_folds,
        seed,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ClassTaxonomy;
    use alloc::format;
    use alloc::vec;

    fn manifest(counts: &[(&str, usize)]) -> Manifest {
        let recs = counts
            .iter()
            .flat_map(|(label, n)| {
                (0..*n).map(move |i| {
                    ImageRecord::original(format!("{label}/{i}"), format!("{label}/{i}.jpg"), *label)
                })
            })
            .collect();
        Manifest::new(recs, &ClassTaxonomy::living_england()).unwrap()
    }

    fn sizes(f: &FoldAssignment) -> Vec<usize> {
        let mut s = vec![0; f.n_folds()];
        for fold in f.assignment().values() {
            s[*fold] += 1;
        }
        s
    }

    #[test]
    fn even_division() {
        let f = stratified_kfold_split(&manifest(&[("WAT", 10)]), 5, 1).unwrap();
        assert_eq!(sizes(&f), vec![2; 5]);
    }

    #[test]
    fn remainder_goes_to_one_fold() {
        let f = stratified_kfold_split(&manifest(&[("WAT", 11)]), 5, 1).unwrap();
        let mut s = sizes(&f);
        s.sort_unstable();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn deterministic_given_seed() {
        let m = manifest(&[("WAT", 13), ("BS", 7)]);
        assert_eq!(
            stratified_kfold_split(&m, 5, 42).unwrap(),
            stratified_kfold_split(&m, 5, 42).unwrap()
        );
        assert_ne!(
            stratified_kfold_split(&m, 5, 42).unwrap(),
            stratified_kfold_split(&m, 5, 43).unwrap()
        );
    }

    #[test]
    fn too_few_names_the_class() {
        let err = stratified_kfold_split(&manifest(&[("WAT", 10), ("CW", 3)]), 5, 0).unwrap_err();
        assert_eq!(
            err,
            Error::TooFewForFolds {
                class: "CW".into(),
                available: 3,
                n_folds: 5
            }
        );
    }

    #[test]
    fn split_partitions_originals() {
        let m = manifest(&[("WAT", 10), ("BS", 6)]);
        let f = stratified_kfold_split(&m, 2, 9).unwrap();
        f.validate_against(&m).unwrap();
        let (t0, v0) = f.split(&m, 0).unwrap();
        let (t1, v1) = f.split(&m, 1).unwrap();
        assert_eq!(t0.len() + v0.len(), 16);
        assert_eq!(v0.len() + v1.len(), 16);
        assert_eq!(t0.len(), v1.len());
        assert_eq!(t1.len(), v0.len());
        assert!(f.split(&m, 2).is_err());
    }
}
