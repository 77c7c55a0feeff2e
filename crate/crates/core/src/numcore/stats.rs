use crate::error::{Error, Result};

use super::tensor::FeatureMap;

/// Variance floor added under the square root of every channel std.
pub const EPS_STD: f64 = 1e-5;

/// Per-channel spatial mean and standard deviation of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Channel statistics with the default [`EPS_STD`] floor.
pub fn channel_stats(f: &FeatureMap) -> Result<ChannelStats> {
    channel_stats_with_eps(f, EPS_STD)
}

/// Population (1/N) mean and `sqrt(var + eps)` per channel.
pub fn channel_stats_with_eps(f: &FeatureMap, eps: f64) -> Result<ChannelStats> {
    let n = f.pixels();
    let c = f.channels();
    if n == 0 || c == 0 {
        return Err(Error::DegenerateFeatureMap(format!(
            "{}x{}x{}",
            f.height(),
            f.width(),
            c
        )));
    }
    let (mean, var) = mean_var(f.data(), n, c);
    let std = var.iter().map(|v| (v + eps).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// Population mean and variance per channel of an `n × c` row-major block.
pub(crate) fn mean_var(data: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let inv = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    (mean, var)
}

/// `(f - mean) / std` per channel.
pub fn standardize(f: &FeatureMap, s: &ChannelStats) -> Result<FeatureMap> {
    check_stats(f, s)?;
    if let Some(c) = s.std.iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateFeatureMap(format!(
            "zero standard deviation in channel {c}"
        )));
    }
    let c = f.channels();
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| (x - s.mean[i % c]) / s.std[i % c])
        .collect();
    FeatureMap::new(f.height(), f.width(), c, data)
}

/// Inverse of [`standardize`]: `z * std + mean` per channel.
pub fn destandardize(z: &FeatureMap, s: &ChannelStats) -> Result<FeatureMap> {
    check_stats(z, s)?;
    let c = z.channels();
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x * s.std[i % c] + s.mean[i % c])
        .collect();
    FeatureMap::new(z.height(), z.width(), c, data)
}

fn check_stats(f: &FeatureMap, s: &ChannelStats) -> Result<()> {
    if s.mean.len() != f.channels() || s.std.len() != f.channels() {
        return Err(Error::ShapeMismatch(format!(
            "stats for {} channels applied to a {}-channel map",
            s.mean.len(),
            f.channels()
        )));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// `log(sum(exp(v)))`, max-shifted.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
