use std::collections::{BTreeMap, BTreeSet};

use habitat_core::balance::{balance_class_counts, BalanceConfig};
use habitat_core::folds::stratified_kfold_split;
use habitat_core::metrics::{
    confusion_matrix, one_vs_rest_accuracy, per_class_metrics, softmax, topk_accuracy,
    ConfusionMatrix, PredictionRecord,
};
use habitat_core::preprocess::{denormalize, normalize, resize, PreprocessConfig};
use habitat_core::raster::Raster;
use habitat_core::record::{ImageRecord, Manifest};
use habitat_core::taxonomy::ClassSpec;
use habitat_core::ClassTaxonomy;
use proptest::prelude::*;

fn taxonomy(k: usize) -> ClassTaxonomy {
    let specs = (0..k)
        .map(|i| ClassSpec::new(&format!("Class {i}"), &format!("C{i:02}"), ""))
        .collect();
    ClassTaxonomy::new(format!("synthetic-{k}"), specs).unwrap()
}

fn manifest(tax: &ClassTaxonomy, counts: &[usize]) -> Manifest {
    let mut recs = Vec::new();
    for (c, n) in counts.iter().enumerate() {
        let label = &tax.classes()[c].abbreviation;
        for i in 0..*n {
            recs.push(ImageRecord::original(
                format!("{label}/{i:05}.jpg"),
                format!("{label}/{i:05}.jpg"),
                label.as_str(),
            ));
        }
    }
    Manifest::new(recs, tax).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_vs_rest_counts_match_definitions(
        k in 2usize..8,
        cells in proptest::collection::vec(0u64..20, 64),
    ) {
        let rows: Vec<Vec<u64>> = (0..k).map(|r| cells[r * 8..r * 8 + k].to_vec()).collect();
        let cm = ConfusionMatrix::from_rows(&rows, "t").unwrap();
        let total: u64 = rows.iter().flatten().sum();
        for (c, row) in rows.iter().enumerate() {
            let o = cm.one_vs_rest(c);
            let tp = row[c];
            let fp: u64 = (0..k).filter(|r| *r != c).map(|r| rows[r][c]).sum();
            let fn_: u64 = (0..k).filter(|p| *p != c).map(|p| row[p]).sum();
            prop_assert_eq!((o.tp, o.fp, o.fn_), (tp, fp, fn_));
            prop_assert_eq!(o.tn, total - tp - fp - fn_);
            let m = per_class_metrics(&cm)[c];
            prop_assert!((0.0..=1.0).contains(&m.precision));
            prop_assert!((0.0..=1.0).contains(&m.f1));
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            let acc = one_vs_rest_accuracy(&cm)[c];
            if total > 0 {
                prop_assert!((acc - (tp + o.tn) as f64 / total as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn topk_is_monotone_and_matches_trace(
        k in 2usize..10,
        logits in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 10), 1..40),
        labels in proptest::collection::vec(0usize..10, 40),
    ) {
        let tax = taxonomy(k);
        let records: Vec<PredictionRecord> = logits
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let probs = softmax(&l[..k]);
                let truth = &tax.classes()[labels[i] % k].abbreviation;
                PredictionRecord::from_probabilities(format!("img{i}"), truth, probs, &tax, 0).unwrap()
            })
            .collect();
        let top1 = topk_accuracy(&records, 1).unwrap();
        let top2 = topk_accuracy(&records, 2).unwrap();
        let top3 = topk_accuracy(&records, 3).unwrap();
        prop_assert!(top1 <= top2 && top2 <= top3);
        let cm = confusion_matrix(&records, &tax).unwrap();
        prop_assert_eq!(cm.trace() as f64 / cm.total() as f64, top1);
        for r in &records {
            prop_assert_eq!(&r.predicted_label, &r.top3[0].abbreviation);
            prop_assert!(r.top3.windows(2).all(|w| w[0].probability >= w[1].probability));
        }
    }

    #[test]
    fn folds_partition_and_stratify(
        counts in proptest::collection::vec(5usize..40, 1..6),
        n_folds in 2usize..6,
        seed in any::<u64>(),
    ) {
        let tax = taxonomy(counts.len());
        let m = manifest(&tax, &counts);
        let f = stratified_kfold_split(&m, n_folds, seed).unwrap();
        prop_assert_eq!(f.assignment().len(), m.len());
        let mut seen = BTreeSet::new();
        for fold in 0..n_folds {
            for id in f.validation_ids(fold) {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
        prop_assert_eq!(seen.len(), m.len());
        for class in tax.abbreviations() {
            let mut sizes = vec![0usize; n_folds];
            for r in m.records().iter().filter(|r| r.label == class) {
                sizes[f.fold_of(&r.id).unwrap()] += 1;
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{class}: {sizes:?}");
        }
    }

    #[test]
    fn balancing_hits_target_from_training_parents(
        counts in proptest::collection::vec(5usize..120, 1..5),
        target in 1usize..80,
        seed in any::<u64>(),
    ) {
        let tax = taxonomy(counts.len());
        let m = manifest(&tax, &counts);
        let folds = stratified_kfold_split(&m, 5, seed).unwrap();
        let (train, _) = folds.split(&m, 0).unwrap();
        let train: Vec<ImageRecord> = train.into_iter().cloned().collect();
        let train_ids: BTreeSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
        let cfg = BalanceConfig { target_per_class: target, seed };
        let set = balance_class_counts(&train, &cfg).unwrap();
        let per: BTreeMap<&str, usize> = set.per_class_counts();
        prop_assert!(per.values().all(|n| *n == target));
        for e in set.entries() {
            match &e.record.parent_id {
                Some(p) => prop_assert!(train_ids.contains(p.as_str())),
                None => prop_assert!(train_ids.contains(e.record.id.as_str())),
            }
            prop_assert_eq!(e.augmentation_seed.is_some(), e.record.parent_id.is_some());
        }
    }

    #[test]
    fn normalization_round_trips(
        w in 1usize..40,
        h in 1usize..40,
        seed in any::<u8>(),
    ) {
        let img = Raster::from_fn(w, h, |x, y| {
            let v = (x * 31 + y * 17 + seed as usize) as u8;
            [v, v.wrapping_mul(3), 255 - v]
        }).unwrap();
        let cfg = PreprocessConfig { target_size: 32, ..Default::default() };
        let resized = resize(&img, 32, 32).unwrap();
        let back = denormalize(&normalize(&resized, &cfg), &cfg);
        for (c, plane) in back.chunks(32 * 32).enumerate() {
            for (i, v) in plane.iter().enumerate() {
                let expected = f32::from(resized.as_bytes()[i * 3 + c]) / 255.0;
                prop_assert!((v - expected).abs() < 1e-6);
            }
        }
    }
}
