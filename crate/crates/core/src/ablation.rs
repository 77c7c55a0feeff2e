//! Controlled comparisons along one configuration axis.
//!
//! Every row of an axis trains and evaluates on the same dataset, fold,
//! seeds, and test episodes; only the row's overrides differ.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, test_seed};
use crate::model::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Modules,
    UfaTarget,
    CsmK,
    CsmSize,
    UfaPosition,
    ReconLoss,
}

pub const AXES: [&str; 6] = ["modules", "ufa_target", "csm_k", "csm_size", "ufa_position", "recon_loss"];

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "modules" => Axis::Modules,
            "ufa_target" => Axis::UfaTarget,
            "csm_k" => Axis::CsmK,
            "csm_size" => Axis::CsmSize,
            "ufa_position" => Axis::UfaPosition,
            "recon_loss" => Axis::ReconLoss,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation axis `{s}` (expected one of {})",
                    AXES.join(", ")
                )))
            }
        })
    }
}

/// One row: a label and the dotted overrides that define it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Setting {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

fn setting(label: &str, overrides: &[(&str, &str)]) -> Setting {
    Setting {
        label: label.to_string(),
        overrides: overrides
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    }
}

/// Rows of an axis, in table order.
pub fn settings(axis: Axis) -> Vec<Setting> {
    match axis {
        Axis::Modules => vec![
            setting("baseline", &[("ufa.enabled", "false"), ("csm.enabled", "false")]),
            setting("ufa", &[("ufa.enabled", "true"), ("csm.enabled", "false")]),
            setting("csm", &[("ufa.enabled", "false"), ("csm.enabled", "true")]),
            setting("ufa+csm", &[("ufa.enabled", "true"), ("csm.enabled", "true")]),
        ],
        Axis::UfaTarget => vec![
            setting("query", &[("ufa.target", "query_only")]),
            setting("query+support", &[("ufa.target", "both")]),
        ],
        Axis::CsmK => vec![
            setting("k=1", &[("csm.k", "1")]),
            setting("k=5", &[("csm.k", "5")]),
            setting("k=all", &[("csm.k", "all")]),
        ],
        Axis::CsmSize => [20, 30, 50, 100, 200]
            .iter()
            .map(|n| Setting {
                label: format!("n={n}"),
                overrides: vec![("csm.num_vectors".into(), n.to_string())],
            })
            .collect(),
        Axis::UfaPosition => ["0", "1", "2", "1,2", "0,1,2"]
            .iter()
            .map(|p| Setting {
                label: format!("blocks={p}"),
                overrides: vec![("ufa.positions".into(), p.to_string())],
            })
            .collect(),
        Axis::ReconLoss => vec![
            setting("with", &[("csm.recon_weight", "1")]),
            setting("without", &[("csm.recon_weight", "0")]),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub config_hashes: Vec<String>,
    pub seeds: Vec<u64>,
    pub mious: Vec<f64>,
    pub median: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub fold: usize,
    pub k_shot: usize,
    pub rows: Vec<AblationRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and scores every row of `axis` for each seed.
pub fn run(base: &RunConfig, ds: &Dataset, axis: Axis, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let fold = base.train.fold;
    let k = base.train.k_shot;
    let mut rows = Vec::new();
    for s in settings(axis) {
        let mut cfg = base.clone();
        for (key, v) in &s.overrides {
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        let mut mious = Vec::new();
        let mut hashes = Vec::new();
        for &seed in seeds {
            cfg.seed = seed;
            let outcome = train(&cfg, ds)?;
            let r = evaluate(&outcome.model, ds, fold, k, cfg.eval.episodes, test_seed(seed, fold))?;
            log::info!("{:?} {} seed {seed}: mIoU {:.4}", axis, s.label, r.miou);
            mious.push(r.miou);
            hashes.push(cfg.hash());
        }
        rows.push(AblationRow {
            label: s.label,
            overrides: s.overrides,
            config_hashes: hashes,
            seeds: seeds.to_vec(),
            median: median(&mious),
            mean: mious.iter().sum::<f64>() / mious.len() as f64,
            mious,
        });
    }
    Ok(AblationTable {
        axis,
        fold,
        k_shot: k,
        rows,
    })
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One line per setting: label, overrides, seeds, median, mean, per-seed values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["setting", "overrides", "fold", "k_shot", "seeds", "miou_median", "miou_mean", "miou_per_seed"])?;
        for r in &self.rows {
            let ov = r
                .overrides
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            let per = r.mious.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(";");
            w.write_record([
                r.label.clone(),
                ov,
                self.fold.to_string(),
                self.k_shot.to_string(),
                seeds,
                format!("{:.6}", r.median),
                format!("{:.6}", r.mean),
                per,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
