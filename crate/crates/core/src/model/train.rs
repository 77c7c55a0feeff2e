//! Episodic SGD training loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Mode;
use crate::config::RunConfig;
use crate::data::{fold_split, sample_episode_where, Dataset, Episode};
use crate::error::{Error, Result};
use crate::eval::{binarize, IoUAccumulator};
use crate::numcore::{stream_seed, Rng, Sgd, Tensor};

use super::network::{feature_masks, Model};

const TAG_EPISODE: u64 = 0xE915;
const TAG_UFA: u64 = 0x0FA0;
const TAG_PROBE: u64 = 0x9808;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_loss: f64,
    pub recon_loss: f64,
    pub train_miou: Option<f64>,
    pub probe_recon: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    /// Probe reconstruction loss before the first update.
    pub initial_probe_recon: f64,
    pub initial_bank: Option<Tensor>,
}

/// Episode whose query and supports keep foreground at feature resolution.
pub fn sample_usable_episode(
    ds: &Dataset,
    pool: &[usize],
    k: usize,
    stride: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let fsize = ds.image_size() / stride;
    sample_episode_where(ds, pool, k, rng, |ep| {
        feature_masks(ep, fsize, fsize).is_ok_and(|(q, _)| q.count() > 0)
    })
}

/// Fixed training-class episode used to track reconstruction quality.
pub fn probe_episode(cfg: &RunConfig, ds: &Dataset) -> Result<Episode> {
    let split = fold_split(ds.num_classes(), cfg.train.fold)?;
    let mut rng = Rng::stream(cfg.seed, TAG_PROBE);
    sample_usable_episode(ds, &split.train, cfg.train.k_shot, cfg.feature_stride(), &mut rng)
}

/// Runs `f` on a pool with `threads` workers (`0`: rayon's default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.image_size() != cfg.data.image_size || ds.num_classes() != cfg.data.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes of {}px images, config expects {} of {}px",
            ds.num_classes(),
            ds.image_size(),
            cfg.data.classes,
            cfg.data.image_size
        )));
    }
    if ds.image_size() % cfg.feature_stride() != 0 {
        return Err(Error::Config("image size not divisible by the encoder stride".into()));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(Model::new(cfg)?, ds, |_| {})
}

/// Trains `model` in place on the base classes of its configured fold.
/// `on_epoch` sees each epoch's log as soon as it is complete.
pub fn train_with(
    mut model: Model,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    check_dataset(&cfg, ds)?;
    with_threads(cfg.threads, move || {
        let split = fold_split(ds.num_classes(), cfg.train.fold)?;
        let stride = cfg.feature_stride();
        let batch = cfg.train.batch_size;
        let steps = cfg.train.episodes_per_epoch.div_ceil(batch).max(1);
        let episode_seed = stream_seed(cfg.seed, TAG_EPISODE);
        let ufa_seed = stream_seed(cfg.seed, TAG_UFA);
        let probe = probe_episode(&cfg, ds)?;
        let initial_probe_recon = model.probe_recon(&probe)?;
        let initial_bank = model.bank().cloned();
        let mut opt = Sgd::new(&model.params, cfg.train.lr, cfg.train.momentum);
        let mut history = Vec::with_capacity(cfg.train.epochs);

        for epoch in 0..cfg.train.epochs {
            let mut seg_sum = 0.0;
            let mut recon_sum = 0.0;
            let mut norm_sum = 0.0;
            let mut acc = IoUAccumulator::new(false);
            for step in 0..steps {
                let base = ((epoch * steps + step) * batch) as u64;
                let episodes = (0..batch as u64)
                    .map(|i| {
                        let mut rng = Rng::stream(episode_seed, base + i);
                        sample_usable_episode(ds, &split.train, cfg.train.k_shot, stride, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut rngs: Vec<Rng> = (0..batch as u64).map(|i| Rng::stream(ufa_seed, base + i)).collect();
                let fwd = model.forward_batch(&episodes, Mode::Train, Some(&mut rngs), true)?;
                for (i, f) in fwd.iter().enumerate() {
                    let total = f.scalar(f.total);
                    if !total.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            step,
                            episode_seed: stream_seed(episode_seed, base + i as u64),
                        });
                    }
                }
                let grads = fwd
                    .par_iter()
                    .map(|f| f.tape.backward(f.total.expect("loss requested")))
                    .collect::<Result<Vec<_>>>()?;
                model.params.zero_grad();
                let scale = 1.0 / batch as f64;
                for (f, g) in fwd.iter().zip(&grads) {
                    f.tape.accumulate_param_grads(g, &mut model.params, scale)?;
                }
                let norm = model.params.grad_norm();
                if !norm.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        episode_seed: stream_seed(episode_seed, base),
                    });
                }
                if cfg.train.grad_clip > 0.0 && norm > cfg.train.grad_clip {
                    let s = cfg.train.grad_clip / norm;
                    model.params.iter_mut().for_each(|p| p.grad.scale_assign(s));
                }
                opt.step(&mut model.params);
                norm_sum += norm;
                for (f, ep) in fwd.iter().zip(&episodes) {
                    seg_sum += f.scalar(f.seg);
                    recon_sum += f.scalar(f.recon);
                    let gt: Vec<bool> = ep.query.mask.iter().map(|&m| m == 1).collect();
                    acc.update(ep.class_id, &binarize(&f.prediction().probs), &gt)?;
                }
            }
            let n = (steps * batch) as f64;
            let log = EpochLog {
                epoch,
                seg_loss: seg_sum / n,
                recon_loss: recon_sum / n,
                train_miou: acc.miou(&acc.classes()),
                probe_recon: model.probe_recon(&probe)?,
                grad_norm: norm_sum / steps as f64,
            };
            log::info!(
                "epoch {epoch}: seg {:.4} recon {:.4} train mIoU {:.4} probe recon {:.4}",
                log.seg_loss,
                log.recon_loss,
                log.train_miou.unwrap_or(f64::NAN),
                log.probe_recon
            );
            on_epoch(&log);
            history.push(log);
        }
        Ok(TrainOutcome {
            model,
            history,
            initial_probe_recon,
            initial_bank,
        })
    })
}
