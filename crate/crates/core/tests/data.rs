use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use cstae::data::{apply_label_mask, make_split_plan, make_split_plan_with, SplitKind, SplitOptions, SplitPlan};

fn physionet_subjects() -> Vec<String> {
    (1..=109).map(|i| format!("S{i:03}")).collect()
}

fn excluded() -> SplitOptions {
    SplitOptions {
        exclude: ["S088", "S089", "S092", "S100"].map(String::from).to_vec(),
    }
}

fn set(v: &[String]) -> BTreeSet<String> {
    v.iter().cloned().collect()
}

/// Checks what every plan must satisfy and returns the pool it was drawn from.
fn check_plan(plan: &SplitPlan, pool: &BTreeSet<String>) {
    for fold in &plan.folds {
        let (train, test) = (set(&fold.train), set(&fold.test));
        assert!(train.is_disjoint(&test), "fold {}", fold.index);
        let union: BTreeSet<String> = train.union(&test).cloned().collect();
        assert_eq!(&union, pool, "fold {}", fold.index);
        assert_eq!(train.len(), fold.train.len(), "duplicate train subject");
        assert_eq!(test.len(), fold.test.len(), "duplicate test subject");
    }
    let indices: Vec<usize> = plan.folds.iter().map(|f| f.index).collect();
    assert_eq!(indices, (0..plan.folds.len()).collect::<Vec<_>>());
    assert_eq!(SplitPlan::from_manifest(&plan.to_manifest()).unwrap(), *plan);
}

#[test]
fn physionet_random_draws_cover_105_subjects() {
    let subjects = physionet_subjects();
    let plan = make_split_plan_with(
        &subjects,
        SplitKind::RandomSubjects { test_size: 10, disjoint: false },
        10,
        42,
        &excluded(),
    )
    .unwrap();
    let pool: BTreeSet<String> = set(&subjects).difference(&set(&excluded().exclude)).cloned().collect();
    assert_eq!(pool.len(), 105);
    assert_eq!(plan.folds.len(), 10);
    check_plan(&plan, &pool);
    for fold in &plan.folds {
        assert_eq!((fold.test.len(), fold.train.len()), (10, 95));
    }
    let again = make_split_plan_with(
        &subjects,
        SplitKind::RandomSubjects { test_size: 10, disjoint: false },
        10,
        42,
        &excluded(),
    )
    .unwrap();
    assert_eq!(plan, again);
}

#[test]
fn disjoint_draws_never_repeat_a_test_subject() {
    let subjects = physionet_subjects();
    let plan = make_split_plan_with(
        &subjects,
        SplitKind::RandomSubjects { test_size: 10, disjoint: true },
        10,
        3,
        &excluded(),
    )
    .unwrap();
    let mut seen = BTreeSet::new();
    for fold in &plan.folds {
        for s in &fold.test {
            assert!(seen.insert(s.clone()), "{s} tested twice");
        }
    }
    assert_eq!(seen.len(), 100);
}

#[test]
fn kfold_test_sets_partition_the_pool() {
    let subjects = physionet_subjects();
    let plan = make_split_plan_with(&subjects, SplitKind::KfoldSubjects { repetitions: 2 }, 10, 1, &excluded()).unwrap();
    let pool: BTreeSet<String> = set(&subjects).difference(&set(&excluded().exclude)).cloned().collect();
    check_plan(&plan, &pool);
    assert_eq!(plan.folds.len(), 20);
    let mut by_rep: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for fold in &plan.folds {
        assert!((10..=11).contains(&fold.test.len()));
        by_rep.entry(fold.repetition).or_default().extend(fold.test.clone());
    }
    for tests in by_rep.values() {
        assert_eq!(tests.len(), 105);
        assert_eq!(set(tests), pool);
    }
}

#[test]
fn loso_tests_each_subject_once() {
    let subjects: Vec<String> = (1..=9).map(|i| format!("A{i:02}")).collect();
    let plan = make_split_plan(&subjects, SplitKind::Loso, 0, 0).unwrap();
    check_plan(&plan, &set(&subjects));
    let tested: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
    assert_eq!(set(&tested), set(&subjects));
    assert_eq!(tested.len(), 9);
}

proptest! {
    #[test]
    fn random_plans_are_subject_disjoint(n in 2usize..40, seed in any::<u64>(), k in 2usize..6) {
        let subjects: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
        let k = k.min(n);
        let plan = make_split_plan(&subjects, SplitKind::KfoldSubjects { repetitions: 1 }, k, seed).unwrap();
        check_plan(&plan, &set(&subjects));
        let plan = make_split_plan(&subjects, SplitKind::RandomSubjects { test_size: 1, disjoint: false }, 3, seed).unwrap();
        check_plan(&plan, &set(&subjects));
    }

    #[test]
    fn label_masks_are_stratified_partitions(
        labels in proptest::collection::vec(0usize..4, 1..200),
        fraction in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("t{i}")).collect();
        let opt: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let mask = apply_label_mask(&ids, &opt, fraction, seed).unwrap();
        let n = labels.len();
        prop_assert_eq!(mask.labeled_count(), (fraction * n as f64).round() as usize);
        prop_assert_eq!(mask.labeled_count() + mask.unlabeled_count(), n);
        prop_assert!(mask.labeled_ids.is_disjoint(&mask.unlabeled_ids));
        let classes: Vec<usize> = (0..4).filter(|c| labels.contains(c)).collect();
        // the one-per-class floor can pull a large class off its share; otherwise shares hold to ±1
        let floor_active = fraction * n as f64 >= classes.len() as f64
            && classes.iter().any(|&c| (fraction * labels.iter().filter(|&&l| l == c).count() as f64) < 1.0);
        for &class in &classes {
            let members: Vec<&String> = ids.iter().zip(&labels).filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
            let kept = members.iter().filter(|i| mask.is_labeled(i)).count() as f64;
            if fraction * n as f64 >= classes.len() as f64 {
                prop_assert!(kept >= 1.0, "class {class} has no labeled trial");
            }
            if !floor_active {
                prop_assert!((kept - fraction * members.len() as f64).abs() <= 1.0, "class {class}: {kept}");
            }
        }
        prop_assert_eq!(apply_label_mask(&ids, &opt, fraction, seed).unwrap(), mask);
    }
}

#[test]
fn mask_rejects_bad_fractions() {
    let ids = vec!["a".to_string(), "b".to_string()];
    let labels = vec![Some(0), Some(1)];
    for f in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(apply_label_mask(&ids, &labels, f, 0).is_err(), "{f}");
    }
}
