//! IoU accumulation, mIoU, fold evaluation, and cross-validation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{fold_split, Dataset, NUM_FOLDS};
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::numcore::{stream_seed, Rng};

pub const THRESHOLD: f64 = 0.5;
const TAG_TEST: u64 = 0x7E57;
const TAG_FOLD: u64 = 0xF01D;

/// Intersection and union pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

pub fn binarize(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p >= THRESHOLD).collect()
}

pub fn iou_counts(pred: &[bool], gt: &[bool]) -> Result<Counts> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction of {} pixels against mask of {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        c.intersection += (p && g) as u64;
        c.union += (p || g) as u64;
    }
    Ok(c)
}

/// IoU of one mask pair; `None` when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<Option<f64>> {
    Ok(iou_counts(pred, gt)?.iou())
}

/// Per-class running counts. With `per_episode`, class IoU is the mean of
/// episode IoUs instead of the ratio of accumulated counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoUAccumulator {
    counts: BTreeMap<usize, Counts>,
    episode_ious: BTreeMap<usize, (f64, usize)>,
    per_episode: bool,
}

impl IoUAccumulator {
    pub fn new(per_episode: bool) -> Self {
        Self {
            per_episode,
            ..Self::default()
        }
    }

    pub fn update(&mut self, class: usize, pred: &[bool], gt: &[bool]) -> Result<()> {
        let c = iou_counts(pred, gt)?;
        let e = self.counts.entry(class).or_default();
        e.intersection += c.intersection;
        e.union += c.union;
        if let Some(v) = c.iou() {
            let s = self.episode_ious.entry(class).or_insert((0.0, 0));
            s.0 += v;
            s.1 += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUAccumulator) {
        for (&k, c) in &other.counts {
            let e = self.counts.entry(k).or_default();
            e.intersection += c.intersection;
            e.union += c.union;
        }
        for (&k, &(s, n)) in &other.episode_ious {
            let e = self.episode_ious.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += n;
        }
    }

    pub fn counts(&self, class: usize) -> Counts {
        self.counts.get(&class).copied().unwrap_or_default()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.counts.keys().copied().collect()
    }

    pub fn class_iou(&self, class: usize) -> Option<f64> {
        if self.per_episode {
            self.episode_ious
                .get(&class)
                .filter(|(_, n)| *n > 0)
                .map(|(s, n)| s / *n as f64)
        } else {
            self.counts(class).iou()
        }
    }

    /// Mean IoU over `classes`; classes without any union are skipped with a
    /// warning. `None` if no class qualifies.
    pub fn miou(&self, classes: &[usize]) -> Option<f64> {
        let mut vals = Vec::new();
        for &c in classes {
            match self.class_iou(c) {
                Some(v) => vals.push(v),
                None => log::warn!("class {c} has zero union and is excluded from mIoU"),
            }
        }
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub class: usize,
    pub iou: Option<f64>,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub k_shot: usize,
    pub miou: f64,
    pub episodes: usize,
    pub seed: u64,
    pub per_class: Vec<ClassIoU>,
}

/// Seed of the held-out episodes of a fold. Depends only on the run seed
/// and the fold so every configuration is scored on the same episodes.
pub fn test_seed(run_seed: u64, fold: usize) -> u64 {
    stream_seed(stream_seed(run_seed, TAG_TEST), fold as u64)
}

/// Run seed used for fold `fold` during cross-validation.
pub fn fold_seed(run_seed: u64, fold: usize) -> u64 {
    stream_seed(stream_seed(run_seed, TAG_FOLD), fold as u64)
}

/// Scores `episodes` novel-class episodes of `fold`. Parameters are only read.
pub fn evaluate(
    m: &Model,
    ds: &Dataset,
    fold: usize,
    k_shot: usize,
    episodes: usize,
    seed: u64,
) -> Result<FoldResult> {
    let split = fold_split(ds.num_classes(), fold)?;
    let stride = m.config.feature_stride();
    let per_episode = m.config.eval.per_episode_iou;
    let accs = (0..episodes)
        .into_par_iter()
        .map(|i| -> Result<IoUAccumulator> {
            let mut rng = Rng::stream(seed, i as u64);
            let ep = model::sample_usable_episode(ds, &split.test, k_shot, stride, &mut rng)?;
            let pred = m.predict(&ep)?;
            let gt: Vec<bool> = ep.query.mask.iter().map(|&v| v == 1).collect();
            let mut acc = IoUAccumulator::new(per_episode);
            acc.update(ep.class_id, &binarize(&pred.probs), &gt)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = IoUAccumulator::new(per_episode);
    for a in &accs {
        acc.merge(a);
    }
    let miou = acc.miou(&split.test).ok_or_else(|| {
        Error::InsufficientSamples(format!("fold {fold}: no novel class produced a nonzero union"))
    })?;
    let per_class = split
        .test
        .iter()
        .map(|&c| {
            let n = acc.counts(c);
            ClassIoU {
                class: c,
                iou: acc.class_iou(c),
                intersection: n.intersection,
                union: n.union,
            }
        })
        .collect();
    Ok(FoldResult {
        fold,
        k_shot,
        miou,
        episodes,
        seed,
        per_class,
    })
}

/// Per-fold results plus their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub k_shot: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub average: f64,
    pub flags: BTreeMap<String, String>,
}

/// Configuration switches recorded next to every result row.
pub fn ablation_flags(cfg: &RunConfig) -> BTreeMap<String, String> {
    let pairs: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
    [
        "ufa.enabled",
        "csm.enabled",
        "ufa.target",
        "csm.k",
        "csm.num_vectors",
        "ufa.positions",
        "csm.recon_weight",
    ]
    .iter()
    .map(|k| (k.to_string(), pairs[*k].clone()))
    .collect()
}

impl Report {
    pub fn new(cfg: &RunConfig, folds: Vec<FoldResult>) -> Self {
        let average = folds.iter().map(|f| f.miou).sum::<f64>() / folds.len().max(1) as f64;
        Self {
            k_shot: folds.first().map_or(cfg.train.k_shot, |f| f.k_shot),
            seed: cfg.seed,
            folds,
            average,
            flags: ablation_flags(cfg),
        }
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jp = dir.join("report.json");
        let json = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        let cp = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&cp)?;
        let mut header: Vec<String> = ["fold", "k_shot", "miou", "episodes", "seed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(self.flags.keys().cloned());
        w.write_record(&header)?;
        let flags: Vec<String> = self.flags.values().cloned().collect();
        for f in &self.folds {
            let mut row = vec![
                f.fold.to_string(),
                f.k_shot.to_string(),
                format!("{:.6}", f.miou),
                f.episodes.to_string(),
                f.seed.to_string(),
            ];
            row.extend(flags.iter().cloned());
            w.write_record(&row)?;
        }
        let mut row = vec![
            "average".to_string(),
            self.k_shot.to_string(),
            format!("{:.6}", self.average),
            self.folds.iter().map(|f| f.episodes).sum::<usize>().to_string(),
            self.seed.to_string(),
        ];
        row.extend(flags);
        w.write_record(&row)?;
        w.flush().map_err(|e| Error::io(&cp, e))
    }
}

/// Trains and evaluates every fold with its own fixed seed.
pub fn cross_validate(cfg: &RunConfig, ds: &Dataset) -> Result<Report> {
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for fold in 0..NUM_FOLDS {
        let mut fc = cfg.clone();
        fc.train.fold = fold;
        fc.seed = fold_seed(cfg.seed, fold);
        let outcome = model::train(&fc, ds)?;
        let r = evaluate(
            &outcome.model,
            ds,
            fold,
            fc.train.k_shot,
            fc.eval.episodes,
            test_seed(cfg.seed, fold),
        )?;
        log::info!("fold {fold}: mIoU {:.4}", r.miou);
        folds.push(r);
    }
    Ok(Report::new(cfg, folds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks() {
        let m = [true, false, true, true];
        assert_eq!(iou(&m, &m).unwrap(), Some(1.0));
    }

    #[test]
    fn disjoint_masks() {
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), Some(0.0));
    }

    #[test]
    fn half_coverage() {
        let gt = [true, true, true, true, false];
        let pred = [true, true, false, false, false];
        assert_eq!(iou(&pred, &gt).unwrap(), Some(0.5));
    }

    #[test]
    fn accumulation_is_pixel_weighted() {
        let mut acc = IoUAccumulator::new(false);
        acc.update(0, &[true; 4], &[true; 4]).unwrap();
        acc.update(0, &[false, false], &[true, true]).unwrap();
        assert_eq!(acc.class_iou(0), Some(4.0 / 6.0));
        let mut per = IoUAccumulator::new(true);
        per.update(0, &[true; 4], &[true; 4]).unwrap();
        per.update(0, &[false, false], &[true, true]).unwrap();
        assert_eq!(per.class_iou(0), Some(0.5));
    }

    #[test]
    fn miou_skips_empty_classes() {
        let mut acc = IoUAccumulator::new(false);
        acc.update(0, &[true, false], &[true, true]).unwrap();
        acc.update(1, &[true], &[true]).unwrap();
        acc.update(2, &[false], &[false]).unwrap();
        assert_eq!(acc.miou(&[0, 1, 2]), Some(0.75));
        assert_eq!(acc.miou(&[2]), None);
    }

    #[test]
    fn shape_mismatch() {
        assert!(iou(&[true], &[true, false]).is_err());
    }
}
