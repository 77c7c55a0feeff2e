//! The segmentation network, its losses, training, and inference.

pub mod checkpoint;
mod network;
mod train;

pub use network::{feature_masks, CallCounts, Forward, Model, Prediction};
pub use train::{
    probe_episode, sample_usable_episode, train, train_with, with_threads, EpochLog, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::memory::PixelMask;
use crate::numcore::FeatureMap;

/// Probability clip used by the value-level cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

/// Masked average pooling of a support map.
pub fn prototype(f_s: &FeatureMap, mask: &PixelMask) -> Result<Vec<f64>> {
    if mask.len() != f_s.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} pixels for a {}-pixel map",
            mask.len(),
            f_s.pixels()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptySupportMask);
    }
    let mut v = vec![0.0; f_s.channels()];
    for j in mask.foreground() {
        for (a, b) in v.iter_mut().zip(f_s.pixel(j)) {
            *a += b;
        }
    }
    v.iter_mut().for_each(|a| *a /= n as f64);
    Ok(v)
}

/// Mean of the per-shot prototypes.
pub fn kshot_prototype(protos: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = protos
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no prototypes to average".into()))?;
    if protos.iter().any(|p| p.len() != first.len()) {
        return Err(Error::ShapeMismatch("prototypes differ in length".into()));
    }
    let k = protos.len() as f64;
    Ok((0..first.len())
        .map(|c| protos.iter().map(|p| p[c]).sum::<f64>() / k)
        .collect())
}

/// Mean binary cross-entropy of probabilities against a binary mask.
pub fn seg_loss(probs: &[f64], gt: &[f64]) -> Result<f64> {
    if probs.len() != gt.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities against {} mask pixels",
            probs.len(),
            gt.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn total_loss(seg: f64, recon: f64, recon_weight: f64) -> f64 {
    seg + recon_weight * recon
}
