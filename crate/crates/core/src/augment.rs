//! Uncertainty-based feature augmentation.
//!
//! During training every query feature map gets new channel statistics:
//! the mini-batch variance of each statistic defines a Gaussian around it,
//! a sample is drawn for query and support by re-parameterization, the two
//! are blended with a Beta-distributed weight, and the standardized query is
//! re-scaled to the blended statistics. In evaluation the hook is the
//! identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    channel_stats, ChannelOp, ChannelStats, FeatureMap, Rng, Tape, Tensor, Var, EPS_STD,
};

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Which streams the hook rewrites in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UfaTarget {
    QueryOnly,
    Both,
}

/// Noise scale in the re-parameterization: the batch variance or its square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Variance,
    Stddev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UfaSettings {
    pub gamma: f64,
    pub target: UfaTarget,
    pub scale_mode: ScaleMode,
}

impl Default for UfaSettings {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            target: UfaTarget::QueryOnly,
            scale_mode: ScaleMode::Variance,
        }
    }
}

/// Mini-batch variance of the channel means and stds.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUncertainty {
    pub var_mu: Vec<f64>,
    pub var_sigma: Vec<f64>,
    pub batch_size: usize,
}

impl StatUncertainty {
    pub fn zeros(channels: usize) -> Self {
        Self {
            var_mu: vec![0.0; channels],
            var_sigma: vec![0.0; channels],
            batch_size: 1,
        }
    }

    fn scales(&self, mode: ScaleMode) -> (Vec<f64>, Vec<f64>) {
        match mode {
            ScaleMode::Variance => (self.var_mu.clone(), self.var_sigma.clone()),
            ScaleMode::Stddev => (
                self.var_mu.iter().map(|v| v.sqrt()).collect(),
                self.var_sigma.iter().map(|v| v.sqrt()).collect(),
            ),
        }
    }
}

/// Re-parameterized statistics `alpha` (mean) and `beta` (std).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledStats {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl From<ChannelStats> for SampledStats {
    fn from(s: ChannelStats) -> Self {
        Self {
            alpha: s.mean,
            beta: s.std,
        }
    }
}

/// Blend of query and support samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedStats {
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub lambda: f64,
}

/// Population variance over the batch of each channel statistic.
pub fn estimate_uncertainty(batch: &[ChannelStats]) -> Result<StatUncertainty> {
    let first = batch
        .first()
        .ok_or_else(|| Error::ShapeMismatch("uncertainty of an empty batch".into()))?;
    let c = first.channels();
    if let Some(bad) = batch.iter().find(|s| s.channels() != c || s.std.len() != c) {
        return Err(Error::ShapeMismatch(format!(
            "batch mixes {c} and {} channels",
            bad.channels()
        )));
    }
    let n = batch.len();
    if n == 1 {
        return Ok(StatUncertainty::zeros(c));
    }
    let variance = |pick: fn(&ChannelStats) -> &[f64]| -> Vec<f64> {
        // shifting by the first row makes an identical batch exactly zero
        let origin = pick(first);
        let rows: Vec<f64> = batch
            .iter()
            .flat_map(|s| pick(s).iter().zip(origin).map(|(x, o)| x - o))
            .collect();
        crate::numcore::mean_var(&rows, n, c).1
    };
    Ok(StatUncertainty {
        var_mu: variance(|s| &s.mean),
        var_sigma: variance(|s| &s.std),
        batch_size: n,
    })
}

/// Draws per-channel standard normals and re-parameterizes `s`.
pub fn reparameterize(
    s: &ChannelStats,
    u: &StatUncertainty,
    rng: &mut Rng,
    mode: ScaleMode,
) -> Result<SampledStats> {
    let c = s.channels();
    let eps_mu = rng.normals(c);
    let eps_sigma = rng.normals(c);
    reparameterize_with(s, u, &eps_mu, &eps_sigma, mode)
}

/// `alpha = mu + eps_mu * scale(Var mu)`, `beta = max(0, sigma + eps_sigma * scale(Var sigma))`.
pub fn reparameterize_with(
    s: &ChannelStats,
    u: &StatUncertainty,
    eps_mu: &[f64],
    eps_sigma: &[f64],
    mode: ScaleMode,
) -> Result<SampledStats> {
    let c = s.channels();
    for (what, len) in [
        ("var_mu", u.var_mu.len()),
        ("var_sigma", u.var_sigma.len()),
        ("eps_mu", eps_mu.len()),
        ("eps_sigma", eps_sigma.len()),
    ] {
        if len != c {
            return Err(Error::ShapeMismatch(format!("{what} has {len} entries, stats have {c}")));
        }
    }
    let (scale_mu, scale_sigma) = u.scales(mode);
    let alpha = (0..c).map(|k| s.mean[k] + eps_mu[k] * scale_mu[k]).collect();
    let beta = (0..c)
        .map(|k| (s.std[k] + eps_sigma[k] * scale_sigma[k]).max(0.0))
        .collect();
    Ok(SampledStats { alpha, beta })
}

/// Draws `lambda ~ Beta(gamma, gamma)` once and blends.
pub fn mix_stats(
    q: &SampledStats,
    s: &SampledStats,
    rng: &mut Rng,
    gamma: f64,
) -> Result<MixedStats> {
    let lambda = rng.beta(gamma)?;
    mix_stats_with(q, s, lambda)
}

pub fn mix_stats_with(q: &SampledStats, s: &SampledStats, lambda: f64) -> Result<MixedStats> {
    if q.alpha.len() != s.alpha.len() || q.beta.len() != s.beta.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixing {} and {} channels",
            q.alpha.len(),
            s.alpha.len()
        )));
    }
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect()
    };
    Ok(MixedStats {
        alpha_hat: lerp(&q.alpha, &s.alpha),
        beta_hat: lerp(&q.beta, &s.beta).into_iter().map(|b| b.max(0.0)).collect(),
        lambda,
    })
}

/// Replaces the statistics of `f_q` with the mixed ones.
pub fn apply_ufa(f_q: &FeatureMap, m: &MixedStats) -> Result<FeatureMap> {
    let c = f_q.channels();
    if m.alpha_hat.len() != c || m.beta_hat.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "mixed stats for {} channels, map has {c}",
            m.alpha_hat.len()
        )));
    }
    let s = channel_stats(f_q)?;
    let data = f_q
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let k = i % c;
            m.beta_hat[k] * (x - s.mean[k]) / s.std[k] + m.alpha_hat[k]
        })
        .collect();
    FeatureMap::new(f_q.height(), f_q.width(), c, data)
}

/// Every random quantity one episode consumes at one hook.
#[derive(Debug, Clone, PartialEq)]
pub struct UfaDraw {
    pub eps_mu_q: Vec<f64>,
    pub eps_sigma_q: Vec<f64>,
    pub eps_mu_s: Vec<f64>,
    pub eps_sigma_s: Vec<f64>,
    pub lambda: f64,
}

impl UfaDraw {
    pub fn sample(rng: &mut Rng, channels: usize, gamma: f64) -> Result<Self> {
        let eps_mu_q = rng.normals(channels);
        let eps_sigma_q = rng.normals(channels);
        let eps_mu_s = rng.normals(channels);
        let eps_sigma_s = rng.normals(channels);
        let lambda = rng.beta(gamma)?;
        Ok(Self {
            eps_mu_q,
            eps_sigma_q,
            eps_mu_s,
            eps_sigma_s,
            lambda,
        })
    }

    /// Draw that leaves the query unchanged when the batch variance is zero.
    pub fn neutral(channels: usize) -> Self {
        Self {
            eps_mu_q: vec![0.0; channels],
            eps_sigma_q: vec![0.0; channels],
            eps_mu_s: vec![0.0; channels],
            eps_sigma_s: vec![0.0; channels],
            lambda: 1.0,
        }
    }
}

/// Query-stream and support-stream uncertainty of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchUncertainty {
    pub query: StatUncertainty,
    pub support: StatUncertainty,
}

impl BatchUncertainty {
    /// Query statistics pool over the batch; support statistics pool over
    /// every support map of every episode in the batch.
    pub fn estimate(query: &[ChannelStats], support: &[ChannelStats]) -> Result<Self> {
        Ok(Self {
            query: estimate_uncertainty(query)?,
            support: estimate_uncertainty(support)?,
        })
    }
}

/// One episode's features at a hook point.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPair {
    pub query: FeatureMap,
    pub support: Vec<FeatureMap>,
}

/// Value-level hook over a mini-batch. `rngs` holds one stream per episode.
pub fn ufa_hook(
    batch: &[StreamPair],
    mode: Mode,
    settings: &UfaSettings,
    rngs: &mut [Rng],
) -> Result<Vec<StreamPair>> {
    if mode == Mode::Eval {
        return Ok(batch.to_vec());
    }
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty UFA batch".into()));
    }
    if rngs.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rng streams for {} episodes",
            rngs.len(),
            batch.len()
        )));
    }
    let q_stats = batch
        .iter()
        .map(|p| channel_stats(&p.query))
        .collect::<Result<Vec<_>>>()?;
    let s_stats = batch
        .iter()
        .map(|p| p.support.iter().map(channel_stats).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<ChannelStats> = s_stats.iter().flatten().cloned().collect();
    let unc = BatchUncertainty::estimate(&q_stats, &flat)?;
    let c = batch[0].query.channels();

    let mut out = Vec::with_capacity(batch.len());
    for ((pair, (qs, ss)), rng) in batch.iter().zip(q_stats.iter().zip(&s_stats)).zip(rngs) {
        let draw = UfaDraw::sample(rng, c, settings.gamma)?;
        let s_mean = average_stats(ss)?;
        let aq = reparameterize_with(qs, &unc.query, &draw.eps_mu_q, &draw.eps_sigma_q, settings.scale_mode)?;
        let as_ = reparameterize_with(&s_mean, &unc.support, &draw.eps_mu_s, &draw.eps_sigma_s, settings.scale_mode)?;
        let query = apply_ufa(&pair.query, &mix_stats_with(&aq, &as_, draw.lambda)?)?;
        let support = match settings.target {
            UfaTarget::QueryOnly => pair.support.clone(),
            UfaTarget::Both => {
                let m = mix_stats_with(&as_, &aq, draw.lambda)?;
                pair.support
                    .iter()
                    .map(|f| apply_ufa(f, &m))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        out.push(StreamPair { query, support });
    }
    Ok(out)
}

/// Mean of the K support statistics (the support side of the blend).
pub fn average_stats(stats: &[ChannelStats]) -> Result<ChannelStats> {
    let first = stats
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no support statistics".into()))?;
    let c = first.channels();
    let k = stats.len() as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for s in stats {
        if s.channels() != c {
            return Err(Error::ShapeMismatch("support stats disagree on channels".into()));
        }
        for j in 0..c {
            mean[j] += s.mean[j] / k;
            std[j] += s.std[j] / k;
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Differentiable hook for one episode. Batch uncertainties and the draw
/// are constants; gradients reach the query and support features through
/// their own statistics.
pub fn augment_on_tape(
    tape: &mut Tape,
    query: Var,
    support: &[Var],
    unc: &BatchUncertainty,
    draw: &UfaDraw,
    settings: &UfaSettings,
) -> (Var, Vec<Var>) {
    let (zq, mu_q, sigma_q) = tape.standardize(query, EPS_STD);
    let mut s_mu = Vec::with_capacity(support.len());
    let mut s_sigma = Vec::with_capacity(support.len());
    let mut s_z = Vec::with_capacity(support.len());
    for &s in support {
        let (z, mu, sigma) = tape.standardize(s, EPS_STD);
        s_z.push(z);
        s_mu.push(mu);
        s_sigma.push(sigma);
    }
    let mu_s = tape.mean(&s_mu);
    let sigma_s = tape.mean(&s_sigma);

    let (scale_mu_q, scale_sigma_q) = unc.query.scales(settings.scale_mode);
    let (scale_mu_s, scale_sigma_s) = unc.support.scales(settings.scale_mode);
    let shift = |eps: &[f64], scale: &[f64]| {
        Tensor::from_vec(eps.iter().zip(scale).map(|(e, v)| e * v).collect())
    };
    let alpha_q = tape.add_const(mu_q, &shift(&draw.eps_mu_q, &scale_mu_q));
    let beta_q = tape.add_const(sigma_q, &shift(&draw.eps_sigma_q, &scale_sigma_q));
    let beta_q = tape.clamp_min0(beta_q);
    let alpha_s = tape.add_const(mu_s, &shift(&draw.eps_mu_s, &scale_mu_s));
    let beta_s = tape.add_const(sigma_s, &shift(&draw.eps_sigma_s, &scale_sigma_s));
    let beta_s = tape.clamp_min0(beta_s);

    let lambda = draw.lambda;
    let alpha_hat = tape.axpby(alpha_q, alpha_s, lambda, 1.0 - lambda);
    let beta_hat = tape.axpby(beta_q, beta_s, lambda, 1.0 - lambda);
    let scaled = tape.channel(zq, beta_hat, ChannelOp::Mul);
    let new_query = tape.channel(scaled, alpha_hat, ChannelOp::Add);

    let new_support = match settings.target {
        UfaTarget::QueryOnly => support.to_vec(),
        UfaTarget::Both => {
            let alpha_hat_s = tape.axpby(alpha_s, alpha_q, lambda, 1.0 - lambda);
            let beta_hat_s = tape.axpby(beta_s, beta_q, lambda, 1.0 - lambda);
            s_z.iter()
                .map(|&z| {
                    let scaled = tape.channel(z, beta_hat_s, ChannelOp::Mul);
                    tape.channel(scaled, alpha_hat_s, ChannelOp::Add)
                })
                .collect()
        }
    };
    (new_query, new_support)
}
