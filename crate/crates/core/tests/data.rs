use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use episeg::config::DataConfig;
use episeg::data::{
    fold_split, generate_dataset, sample_episode, sample_episode_where, Dataset, MAX_FOREGROUND, MIN_FOREGROUND,
    NUM_FOLDS,
};
use episeg::Rng;
use proptest::prelude::*;

fn cfg(classes: usize, samples: usize, size: usize) -> DataConfig {
    DataConfig {
        classes,
        samples_per_class: samples,
        image_size: size,
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn fold_split_examples() {
    let s = fold_split(12, 0).unwrap();
    assert_eq!(s.test, vec![0, 1, 2]);
    assert_eq!(s.train, (3..12).collect::<Vec<_>>());
    assert_eq!(fold_split(12, 3).unwrap().test, vec![9, 10, 11]);
    assert_eq!(fold_split(20, 2).unwrap().test, vec![10, 11, 12, 13, 14]);
    assert!(fold_split(12, 4).is_err());
    assert!(fold_split(10, 0).is_err());
    assert!(fold_split(0, 0).is_err());
}

#[test]
fn folds_partition_the_classes() {
    for n in [8, 12, 20, 40] {
        let mut seen = BTreeSet::new();
        for f in 0..NUM_FOLDS {
            let s = fold_split(n, f).unwrap();
            assert_eq!(s.train.len() + s.test.len(), n);
            assert!(s.test.iter().all(|c| !s.train.contains(c)));
            for c in s.test {
                assert!(seen.insert(c), "class {c} tested twice");
            }
        }
        assert_eq!(seen.len(), n);
    }
}

#[test]
fn generation_validates_its_config() {
    assert!(Dataset::generate(&cfg(10, 4, 16), 0).is_err());
    assert!(Dataset::generate(&cfg(4, 4, 16), 0).is_err());
    assert!(Dataset::generate(&cfg(8, 1, 16), 0).is_err());
    assert!(Dataset::generate(&cfg(8, 4, 4), 0).is_err());
}

#[test]
fn samples_respect_the_foreground_range_and_are_binary() {
    let ds = Dataset::generate(&cfg(12, 25, 64), 3).unwrap();
    assert_eq!(ds.num_classes(), 12);
    for (id, class) in ds.samples.iter().enumerate() {
        assert_eq!(class.len(), 25);
        for s in class {
            assert_eq!(s.class_id, id);
            assert_eq!((s.image.len(), s.mask.len()), (64 * 64, 64 * 64));
            assert!(s.mask.iter().all(|&m| m <= 1));
            let fg = s.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg), "class {id}: {fg}");
            assert!(s.image.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&cfg(8, 6, 16), 21, a.path()).unwrap();
    generate_dataset(&cfg(8, 6, 16), 21, b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 8 * 6 * 2 + 1);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&cfg(8, 6, 16), 22, c.path()).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn load_round_trips_and_rejects_bad_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&cfg(8, 3, 16), 5, dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.samples, ds.samples);

    let bad = episeg::numcore::Tensor::new(vec![16, 16], vec![0.5; 256]).unwrap();
    episeg::numcore::io::write_tensor(&dir.path().join("class_0/sample_0.mask.t"), &bad).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn episodes_hold_distinct_samples_of_one_class() {
    let ds = Dataset::generate(&cfg(8, 8, 16), 1).unwrap();
    let split = fold_split(8, 1).unwrap();
    let mut rng = Rng::new(2);
    for k in [1, 5] {
        for _ in 0..200 {
            let ep = sample_episode(&ds, &split.train, k, &mut rng).unwrap();
            assert_eq!(ep.k_shot(), k);
            assert!(split.train.contains(&ep.class_id));
            let unique: BTreeSet<_> = ep.indices.iter().collect();
            assert_eq!(unique.len(), k + 1);
            assert_eq!(ep.query, ds.samples[ep.class_id][ep.indices[0]]);
            for (s, &i) in ep.support.iter().zip(&ep.indices[1..]) {
                assert_eq!(*s, ds.samples[ep.class_id][i]);
                assert_eq!(s.class_id, ep.class_id);
            }
        }
    }
    assert!(sample_episode(&ds, &split.train, 8, &mut rng).is_err());
    assert!(sample_episode(&ds, &split.train, 0, &mut rng).is_err());
    assert!(sample_episode(&ds, &[], 1, &mut rng).is_err());
}

#[test]
fn training_pool_never_yields_novel_classes() {
    let ds = Dataset::generate(&cfg(12, 4, 16), 1).unwrap();
    for fold in 0..NUM_FOLDS {
        let split = fold_split(12, fold).unwrap();
        let mut rng = Rng::new(fold as u64);
        for _ in 0..2000 {
            let ep = sample_episode(&ds, &split.train, 1, &mut rng).unwrap();
            assert!(!split.test.contains(&ep.class_id));
        }
    }
}

/// Chi-square statistic of observed counts against a uniform expectation.
fn chi_square(counts: &[usize], total: usize) -> f64 {
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn class_and_sample_choice_is_uniform() {
    let ds = Dataset::generate(&cfg(12, 10, 16), 4).unwrap();
    let split = fold_split(12, 0).unwrap();
    let n = 10_000;
    let runs = 20;
    let (mut chi_c, mut chi_q, mut chi_s) = (0.0, 0.0, 0.0);
    for seed in 0..runs {
        let mut rng = Rng::new(seed);
        let mut classes = vec![0usize; 12];
        let mut queries = vec![0usize; 10];
        let mut supports = vec![0usize; 10];
        for _ in 0..n {
            let ep = sample_episode(&ds, &split.train, 1, &mut rng).unwrap();
            classes[ep.class_id] += 1;
            queries[ep.indices[0]] += 1;
            supports[ep.indices[1]] += 1;
        }
        let train_counts: Vec<usize> = split.train.iter().map(|&c| classes[c]).collect();
        let e = n as f64 / 9.0;
        let sd = (n as f64 * (1.0 / 9.0) * (8.0 / 9.0)).sqrt();
        assert!(train_counts.iter().all(|&c| (c as f64 - e).abs() < 4.5 * sd));
        chi_c += chi_square(&train_counts, n) / runs as f64;
        chi_q += chi_square(&queries, n) / runs as f64;
        chi_s += chi_square(&supports, n) / runs as f64;
    }
    // a chi-square mean over 20 runs has sd sqrt(2 dof / 20)
    for (chi, dof) in [(chi_c, 8.0), (chi_q, 9.0), (chi_s, 9.0)] {
        let sd = (2.0 * dof / runs as f64).sqrt();
        assert!((chi - dof).abs() < 4.0 * sd, "mean chi-square {chi:.2} for {dof} dof");
    }
}

#[test]
fn filtered_sampling_retries_until_accepted() {
    let ds = Dataset::generate(&cfg(8, 4, 16), 0).unwrap();
    let mut rng = Rng::new(1);
    let ep = sample_episode_where(&ds, &[2, 3, 4, 5, 6, 7], 1, &mut rng, |e| e.class_id == 5).unwrap();
    assert_eq!(ep.class_id, 5);
    assert!(sample_episode_where(&ds, &[2, 3], 1, &mut rng, |_| false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_seed_same_episode(seed in 0u64..10_000, k in 1usize..4) {
        let ds = Dataset::generate(&cfg(8, 5, 8), 0).unwrap();
        let a = sample_episode(&ds, &[2, 3, 4, 5, 6, 7], k, &mut Rng::new(seed)).unwrap();
        let b = sample_episode(&ds, &[2, 3, 4, 5, 6, 7], k, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
