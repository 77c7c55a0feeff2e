use episeg::data::Dataset;
use episeg::eval::{
    binarize, cross_validate, evaluate, fold_seed, iou, iou_counts, test_seed, Counts, IoUAccumulator, Report,
};
use episeg::gradcheck::tiny_config;
use episeg::model::Model;
use episeg::{Rng, RunConfig};
use proptest::prelude::*;

fn small_config() -> RunConfig {
    let mut cfg = tiny_config();
    cfg.data.image_size = 16;
    cfg.data.samples_per_class = 6;
    cfg.train.epochs = 1;
    cfg.train.episodes_per_epoch = 2;
    cfg.train.batch_size = 2;
    cfg.eval.episodes = 12;
    cfg
}

fn random_mask(rng: &mut Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.uniform() < p).collect()
}

/// Set-based IoU, counted from index sets rather than pixel flags.
fn oracle_iou(pred: &[bool], gt: &[bool]) -> Option<f64> {
    use std::collections::BTreeSet;
    let a: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    let b: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i]).collect();
    let u = a.union(&b).count();
    (u > 0).then(|| a.intersection(&b).count() as f64 / u as f64)
}

#[test]
fn iou_examples() {
    let m = [true, false, true, true];
    assert_eq!(iou(&m, &m).unwrap(), Some(1.0));
    assert_eq!(iou(&[true, false], &[false, true]).unwrap(), Some(0.0));
    assert_eq!(iou(&[true, true, false, false], &[true, false, true, false]).unwrap(), Some(1.0 / 3.0));
    assert_eq!(iou(&[false; 4], &[false; 4]).unwrap(), None);
    let gt = [true, true, true, true, false, false];
    assert_eq!(iou(&[true, true, false, false, false, false], &gt).unwrap(), Some(0.5));
    assert_eq!(
        iou_counts(&[true, true, false], &[true, false, false]).unwrap(),
        Counts { intersection: 1, union: 2 }
    );
    assert!(iou(&[true], &[true, false]).is_err());
}

#[test]
fn binarize_thresholds_at_one_half() {
    assert_eq!(binarize(&[0.0, 0.4999, 0.5, 0.9]), vec![false, false, true, true]);
}

#[test]
fn iou_matches_set_oracle_on_random_pairs() {
    let mut rng = Rng::new(10);
    for _ in 0..20 {
        let p = rng.uniform();
        let a = random_mask(&mut rng, 64, p);
        let b = random_mask(&mut rng, 64, p);
        assert_eq!(iou(&a, &b).unwrap(), oracle_iou(&a, &b));
    }
}

#[test]
fn miou_examples() {
    let mut acc = IoUAccumulator::new(false);
    acc.update(0, &[true, true], &[true, false]).unwrap();
    acc.update(1, &[true, false], &[true, false]).unwrap();
    assert_eq!(acc.class_iou(0), Some(0.5));
    assert_eq!(acc.class_iou(1), Some(1.0));
    assert_eq!(acc.miou(&[0, 1]), Some(0.75));
    // a class without union is skipped, not scored as zero
    acc.update(2, &[false, false], &[false, false]).unwrap();
    assert_eq!(acc.miou(&[0, 1, 2]), Some(0.75));
    assert_eq!(acc.miou(&[2]), None);
    assert_eq!(acc.miou(&[7]), None);

    let mut perfect = IoUAccumulator::new(false);
    for c in 0..3 {
        perfect.update(c, &[true, false], &[true, false]).unwrap();
    }
    assert_eq!(perfect.miou(&[0, 1, 2]), Some(1.0));
}

#[test]
fn counts_accumulate_across_episodes() {
    let mut acc = IoUAccumulator::new(false);
    acc.update(0, &[true, false, false, false], &[true, false, false, false]).unwrap();
    acc.update(0, &[true, true, true, false], &[false, false, false, true]).unwrap();
    // accumulated: 1 / (1 + 4) rather than the episode mean (1 + 0) / 2
    assert_eq!(acc.class_iou(0), Some(0.2));
    let mut per = IoUAccumulator::new(true);
    per.update(0, &[true, false, false, false], &[true, false, false, false]).unwrap();
    per.update(0, &[true, true, true, false], &[false, false, false, true]).unwrap();
    assert_eq!(per.class_iou(0), Some(0.5));
}

#[test]
fn miou_matches_recount_oracle() {
    let mut rng = Rng::new(11);
    let mut acc = IoUAccumulator::new(false);
    let mut inter = [0u64; 3];
    let mut union = [0u64; 3];
    for _ in 0..60 {
        let class = rng.below(3);
        let a = random_mask(&mut rng, 32, 0.3);
        let b = random_mask(&mut rng, 32, 0.3);
        acc.update(class, &a, &b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            inter[class] += (*x && *y) as u64;
            union[class] += (*x || *y) as u64;
        }
    }
    let want = (0..3).map(|c| inter[c] as f64 / union[c] as f64).sum::<f64>() / 3.0;
    assert!((acc.miou(&[0, 1, 2]).unwrap() - want).abs() < 1e-15);
}

#[test]
fn merge_equals_sequential_updates() {
    let mut rng = Rng::new(12);
    let items: Vec<(usize, Vec<bool>, Vec<bool>)> = (0..30)
        .map(|_| (rng.below(4), random_mask(&mut rng, 16, 0.4), random_mask(&mut rng, 16, 0.4)))
        .collect();
    let mut whole = IoUAccumulator::new(false);
    let (mut left, mut right) = (IoUAccumulator::new(false), IoUAccumulator::new(false));
    for (i, (c, a, b)) in items.iter().enumerate() {
        whole.update(*c, a, b).unwrap();
        if i % 2 == 0 { &mut left } else { &mut right }.update(*c, a, b).unwrap();
    }
    left.merge(&right);
    assert_eq!(left.classes(), whole.classes());
    for c in whole.classes() {
        assert_eq!(left.counts(c), whole.counts(c));
    }
    let mut per_whole = IoUAccumulator::new(true);
    let (mut pl, mut pr) = (IoUAccumulator::new(true), IoUAccumulator::new(true));
    for (i, (c, a, b)) in items.iter().enumerate() {
        per_whole.update(*c, a, b).unwrap();
        if i % 2 == 0 { &mut pl } else { &mut pr }.update(*c, a, b).unwrap();
    }
    pl.merge(&pr);
    for c in per_whole.classes() {
        assert!((pl.class_iou(c).unwrap() - per_whole.class_iou(c).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn seeds_depend_on_run_seed_and_fold_only() {
    assert_eq!(test_seed(3, 1), test_seed(3, 1));
    assert_ne!(test_seed(3, 1), test_seed(3, 2));
    assert_ne!(test_seed(3, 1), test_seed(4, 1));
    assert_ne!(fold_seed(3, 1), test_seed(3, 1));
}

#[test]
fn evaluation_reads_parameters_only_and_is_deterministic() {
    let cfg = small_config();
    let ds = Dataset::generate(&cfg.data, 2).unwrap();
    let model = Model::new(&cfg).unwrap();
    let before = model.params.clone();
    let a = evaluate(&model, &ds, 1, 1, 10, 5).unwrap();
    let b = evaluate(&model, &ds, 1, 1, 10, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.fold, a.k_shot, a.episodes, a.seed), (1, 1, 10, 5));
    assert!((0.0..=1.0).contains(&a.miou));
    assert_eq!(a.per_class.iter().map(|c| c.class).collect::<Vec<_>>(), vec![2, 3]);
    for ((_, x), (_, y)) in model.params.iter().zip(before.iter()) {
        assert_eq!(x.value, y.value);
    }
    let five = evaluate(&model, &ds, 1, 5, 4, 5).unwrap();
    assert_eq!(five.k_shot, 5);
}

#[test]
fn ufa_does_not_change_evaluation_scores() {
    let cfg = small_config();
    let ds = Dataset::generate(&cfg.data, 2).unwrap();
    let on = Model::new(&cfg).unwrap();
    let mut off_cfg = cfg.clone();
    off_cfg.ufa.enabled = false;
    let mut off = Model::new(&off_cfg).unwrap();
    off.params = on.params.clone();
    assert_eq!(
        evaluate(&on, &ds, 0, 1, 8, 1).unwrap().miou,
        evaluate(&off, &ds, 0, 1, 8, 1).unwrap().miou
    );
}

#[test]
fn cross_validation_covers_every_fold_reproducibly() {
    let cfg = small_config();
    let ds = Dataset::generate(&cfg.data, 3).unwrap();
    let r = cross_validate(&cfg, &ds).unwrap();
    assert_eq!(r.folds.iter().map(|f| f.fold).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let mean = r.folds.iter().map(|f| f.miou).sum::<f64>() / 4.0;
    assert!((r.average - mean).abs() < 1e-15);
    for f in &r.folds {
        assert_eq!(f.seed, test_seed(cfg.seed, f.fold));
        assert_eq!(f.episodes, cfg.eval.episodes);
    }
    assert_eq!(r.flags["ufa.enabled"], "true");
    assert_eq!(cross_validate(&cfg, &ds).unwrap(), r);

    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    let back: Report = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("average,"));
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 1..50), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let b: Vec<bool> = a.iter().map(|_| rng.uniform() < 0.5).collect();
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert_eq!(x, oracle_iou(&a, &b));
        if let Some(v) = x {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn miou_ignores_update_order(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let items: Vec<(usize, Vec<bool>, Vec<bool>)> = (0..12)
            .map(|_| (rng.below(3), random_mask(&mut rng, 10, 0.5), random_mask(&mut rng, 10, 0.5)))
            .collect();
        let mut fwd = IoUAccumulator::new(false);
        let mut rev = IoUAccumulator::new(false);
        for (c, a, b) in &items {
            fwd.update(*c, a, b).unwrap();
        }
        for (c, a, b) in items.iter().rev() {
            rev.update(*c, a, b).unwrap();
        }
        prop_assert_eq!(fwd.miou(&[0, 1, 2]), rev.miou(&[0, 1, 2]));
    }
}
