//! Encoder, prototype head, re-encoding, and pixel-wise decoder.
//!
//! A mini-batch is run stage by stage: every episode advances through one
//! encoder block on its own tape, then UFA hooks (training only) see the
//! statistics of the whole batch before the next block runs.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::augment::{augment_on_tape, BatchUncertainty, Mode, UfaDraw};
use crate::config::RunConfig;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::memory::{init_bank, recon_loss_on_tape, reencode_on_tape, PixelMask};
use crate::numcore::{mean_var, sigmoid, ChannelStats, FeatureMap, ParamId, Params, Rng, Tape, Tensor, Var, EPS_STD};

const TAG_INIT: u64 = 0x1417;

/// Per-pixel foreground probabilities at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub size: usize,
    pub probs: Vec<f64>,
}

/// How often the optional modules actually ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub ufa: u64,
    pub csm: u64,
}

#[derive(Debug, Default)]
struct Counters {
    ufa: AtomicU64,
    csm: AtomicU64,
}

#[derive(Debug, Clone)]
struct Ids {
    conv_w: Vec<ParamId>,
    conv_b: Vec<ParamId>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    bank: Option<ParamId>,
}

/// Trainable network plus the configuration it was built from.
#[derive(Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: Params,
    ids: Ids,
    counters: Counters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            counters: Counters::default(),
        }
    }
}

/// One episode's recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    /// Foreground-minus-background logit at image resolution, `[S, S, 1]`.
    pub logits: Var,
    pub f_hat: Var,
    pub f_tilde: Var,
    pub prototype: Var,
    pub seg: Option<Var>,
    pub recon: Option<Var>,
    pub total: Option<Var>,
}

impl Forward {
    pub fn prediction(&self) -> Prediction {
        let t = self.tape.value(self.logits);
        Prediction {
            size: t.shape()[0],
            probs: t.data().iter().map(|&z| sigmoid(z)).collect(),
        }
    }

    pub fn scalar(&self, v: Option<Var>) -> f64 {
        v.map_or(0.0, |v| self.tape.value(v).item())
    }
}

struct Stage {
    tape: Tape,
    vars: Vec<Var>,
    q: Var,
    s: Vec<Var>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let mut t = Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|x| x * std).collect()).unwrap();
    t.round_to_f32();
    t
}

fn stats_of(t: &Tensor) -> ChannelStats {
    let c = *t.shape().last().unwrap();
    let (mean, var) = mean_var(t.data(), t.len() / c, c);
    ChannelStats {
        mean,
        std: var.iter().map(|v| (v + EPS_STD).sqrt()).collect(),
    }
}

/// Feature-resolution masks of an episode; errors on an empty support.
pub fn feature_masks(ep: &Episode, h: usize, w: usize) -> Result<(PixelMask, Vec<PixelMask>)> {
    let s0 = ep.query.size;
    let q = PixelMask::downsample_nearest(&ep.query.mask_f64(), s0, s0, h, w)?;
    let s = ep
        .support
        .iter()
        .map(|x| PixelMask::downsample_nearest(&x.mask_f64(), x.size, x.size, h, w))
        .collect::<Result<Vec<_>>>()?;
    if s.iter().any(|m| m.count() == 0) {
        return Err(Error::EmptySupportMask);
    }
    Ok((q, s))
}

impl Model {
    /// Fresh weights drawn from the run seed.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::stream(cfg.seed, TAG_INIT);
        let mut params = Params::new();
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut cin = 1;
        for (i, &cout) in cfg.model.widths.iter().enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            conv_w.push(params.insert(
                &format!("encoder.block{i}.weight"),
                normal_tensor(&[3, 3, cin, cout], std, &mut rng),
            ));
            conv_b.push(params.insert(&format!("encoder.block{i}.bias"), Tensor::zeros(&[cout])));
            cin = cout;
        }
        let c = cin;
        let hidden = cfg.model.decoder_hidden;
        let fc1_w = params.insert(
            "decoder.fc1.weight",
            normal_tensor(&[3 * c, hidden], (1.0 / (3 * c) as f64).sqrt(), &mut rng),
        );
        let fc1_b = params.insert("decoder.fc1.bias", Tensor::zeros(&[hidden]));
        let fc2_w = params.insert(
            "decoder.fc2.weight",
            normal_tensor(&[hidden, 2], (1.0 / hidden as f64).sqrt(), &mut rng),
        );
        let fc2_b = params.insert("decoder.fc2.bias", Tensor::zeros(&[2]));
        let bank = if cfg.csm.enabled {
            let mut b = init_bank(cfg.csm.num_vectors, c, &mut rng)?.into_tensor();
            b.round_to_f32();
            Some(params.insert("memory.bank", b))
        } else {
            None
        };
        Ok(Self {
            config: cfg.clone(),
            params,
            ids: Ids {
                conv_w,
                conv_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                bank,
            },
            counters: Counters::default(),
        })
    }

    pub fn feature_channels(&self) -> usize {
        *self.config.model.widths.last().unwrap()
    }

    pub fn bank_id(&self) -> Option<ParamId> {
        self.ids.bank
    }

    pub fn bank(&self) -> Option<&Tensor> {
        self.ids.bank.map(|id| self.params.value(id))
    }

    pub fn call_counts(&self) -> CallCounts {
        CallCounts {
            ufa: self.counters.ufa.load(Ordering::Relaxed),
            csm: self.counters.csm.load(Ordering::Relaxed),
        }
    }

    fn block(&self, tape: &mut Tape, vars: &[Var], b: usize, x: Var) -> Var {
        let w = vars[self.ids.conv_w[b].0];
        let bias = vars[self.ids.conv_b[b].0];
        let y = tape.conv3x3(x, w, bias);
        let y = tape.silu(y);
        if self.config.model.downsample[b] {
            tape.avg_pool2(y)
        } else {
            y
        }
    }

    /// Runs a mini-batch. `rngs` (one stream per episode) is read only when
    /// UFA is active in training mode; `with_loss` adds the loss nodes.
    pub fn forward_batch(
        &self,
        episodes: &[Episode],
        mode: Mode,
        rngs: Option<&mut [Rng]>,
        with_loss: bool,
    ) -> Result<Vec<Forward>> {
        if episodes.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let mut stages: Vec<Stage> = episodes
            .iter()
            .map(|ep| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = (0..self.params.len())
                    .map(|i| tape.param(&self.params, ParamId(i)))
                    .collect();
                let q = tape.constant(ep.query.image_tensor());
                let s = ep.support.iter().map(|x| tape.constant(x.image_tensor())).collect();
                Stage { tape, vars, q, s }
            })
            .collect();

        let ufa_on = mode == Mode::Train && self.config.ufa.enabled;
        let mut rngs = rngs;
        if ufa_on && !self.config.ufa.positions.is_empty() {
            match rngs.as_deref() {
                Some(r) if r.len() == episodes.len() => {}
                _ => {
                    return Err(Error::ShapeMismatch(
                        "training with UFA needs one rng stream per episode".into(),
                    ))
                }
            }
        }
        for b in 0..self.config.model.widths.len() {
            stages.par_iter_mut().for_each(|st| {
                st.q = self.block(&mut st.tape, &st.vars, b, st.q);
                for k in 0..st.s.len() {
                    st.s[k] = self.block(&mut st.tape, &st.vars, b, st.s[k]);
                }
            });
            if ufa_on && self.config.ufa.positions.contains(&b) {
                let qs: Vec<ChannelStats> = stages.iter().map(|st| stats_of(st.tape.value(st.q))).collect();
                let ss: Vec<ChannelStats> = stages
                    .iter()
                    .flat_map(|st| st.s.iter().map(|&v| stats_of(st.tape.value(v))))
                    .collect();
                let unc = BatchUncertainty::estimate(&qs, &ss)?;
                let settings = self.config.ufa_settings();
                let c = qs[0].channels();
                let rs = rngs.as_deref_mut().expect("checked above");
                for (st, rng) in stages.iter_mut().zip(rs.iter_mut()) {
                    let draw = UfaDraw::sample(rng, c, settings.gamma)?;
                    let (q, s) = augment_on_tape(&mut st.tape, st.q, &st.s, &unc, &draw, &settings);
                    st.q = q;
                    st.s = s;
                    self.counters.ufa.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        stages
            .into_par_iter()
            .zip(episodes.par_iter())
            .map(|(st, ep)| self.head(st, ep, with_loss))
            .collect()
    }

    fn head(&self, st: Stage, ep: &Episode, with_loss: bool) -> Result<Forward> {
        let Stage { mut tape, vars, q, s } = st;
        let shape = tape.value(q).shape().to_vec();
        let (h, w) = (shape[0], shape[1]);
        let (qmask, smasks) = feature_masks(ep, h, w)?;
        let protos: Vec<Var> = s
            .iter()
            .zip(&smasks)
            .map(|(&f, m)| tape.masked_mean(f, &m.as_weights()))
            .collect();
        let prototype = if protos.len() == 1 { protos[0] } else { tape.mean(&protos) };

        let csm = &self.config.csm;
        let f_hat = q;
        let mut recon = None;
        let f_tilde = match self.ids.bank {
            Some(bid) if csm.enabled => {
                self.counters.csm.fetch_add(1, Ordering::Relaxed);
                let bank = vars[bid.0];
                let settings = self.config.reencode_settings();
                let f_tilde = reencode_on_tape(&mut tape, f_hat, bank, settings);
                if with_loss {
                    let detach = |tape: &mut Tape, v: Var| {
                        if csm.detach_features {
                            let t = tape.value(v).clone();
                            tape.constant(t)
                        } else {
                            v
                        }
                    };
                    let fq = detach(&mut tape, f_hat);
                    let tq = if csm.detach_features {
                        reencode_on_tape(&mut tape, fq, bank, settings)
                    } else {
                        f_tilde
                    };
                    let rq = recon_loss_on_tape(&mut tape, fq, tq, &qmask, csm.loss_mean);
                    let mut rs = Vec::new();
                    for (&f, m) in s.iter().zip(&smasks) {
                        let fs = detach(&mut tape, f);
                        let ts = reencode_on_tape(&mut tape, fs, bank, settings);
                        if let Some(r) = recon_loss_on_tape(&mut tape, fs, ts, m, csm.loss_mean) {
                            rs.push(r);
                        }
                    }
                    let mut parts: Vec<Var> = rq.into_iter().collect();
                    if !rs.is_empty() {
                        parts.push(if rs.len() == 1 { rs[0] } else { tape.mean(&rs) });
                    }
                    recon = match parts.len() {
                        0 => None,
                        1 => Some(parts[0]),
                        _ => Some(tape.sum(&parts)),
                    };
                }
                f_tilde
            }
            _ => f_hat,
        };

        let vb = tape.broadcast(prototype, h, w);
        let x = tape.concat(&[f_tilde, f_hat, vb]);
        let hid = tape.linear(x, vars[self.ids.fc1_w.0], vars[self.ids.fc1_b.0]);
        let hid = tape.silu(hid);
        let out = tape.linear(hid, vars[self.ids.fc2_w.0], vars[self.ids.fc2_b.0]);
        let d = tape.pair_diff(out);
        let size = ep.query.size;
        let logits = tape.upsample_bilinear(d, size, size);

        let (seg, total) = if with_loss {
            let seg = tape.bce_with_logits(logits, &ep.query.mask_f64());
            let total = match recon {
                Some(r) if csm.recon_weight != 0.0 => tape.axpby(seg, r, 1.0, csm.recon_weight),
                _ => seg,
            };
            (Some(seg), Some(total))
        } else {
            (None, None)
        };
        Ok(Forward {
            tape,
            logits,
            f_hat,
            f_tilde,
            prototype,
            seg,
            recon,
            total,
        })
    }

    /// Inference: UFA off, re-encoding with the stored bank, no randomness.
    pub fn predict(&self, ep: &Episode) -> Result<Prediction> {
        let f = self.forward_batch(std::slice::from_ref(ep), Mode::Eval, None, false)?;
        Ok(f[0].prediction())
    }

    /// Reconstruction loss of one episode under inference conditions.
    pub fn probe_recon(&self, ep: &Episode) -> Result<f64> {
        let f = self.forward_batch(std::slice::from_ref(ep), Mode::Eval, None, true)?;
        Ok(f[0].scalar(f[0].recon))
    }

    /// Encoder output for a single `[S, S, 1]` image (no augmentation).
    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..self.params.len())
            .map(|i| tape.param(&self.params, ParamId(i)))
            .collect();
        let mut x = tape.constant(image.clone());
        for b in 0..self.config.model.widths.len() {
            x = self.block(&mut tape, &vars, b, x);
        }
        FeatureMap::try_from(tape.value(x).clone())
    }

    /// Decoder on explicit features: `[f_re; f_aug; v]` through the
    /// pixel-wise perceptron, upsampled to `out_size`.
    pub fn decode(&self, f_re: &FeatureMap, f_aug: &FeatureMap, v: &[f64], out_size: usize) -> Result<Prediction> {
        let c = self.feature_channels();
        if f_re.channels() != c
            || f_aug.channels() != c
            || v.len() != c
            || f_re.height() != f_aug.height()
            || f_re.width() != f_aug.width()
        {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects two maps and a prototype with {c} channels"
            )));
        }
        let mut tape = Tape::new();
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);
        let a = tape.constant(f_re.to_tensor());
        let b = tape.constant(f_aug.to_tensor());
        let vv = tape.constant(Tensor::from_vec(v.to_vec()));
        let vb = tape.broadcast(vv, f_re.height(), f_re.width());
        let x = tape.concat(&[a, b, vb]);
        let (w1, b1, w2, b2) = (
            p(&mut tape, self.ids.fc1_w),
            p(&mut tape, self.ids.fc1_b),
            p(&mut tape, self.ids.fc2_w),
            p(&mut tape, self.ids.fc2_b),
        );
        let hid = tape.linear(x, w1, b1);
        let hid = tape.silu(hid);
        let out = tape.linear(hid, w2, b2);
        let d = tape.pair_diff(out);
        let up = tape.upsample_bilinear(d, out_size, out_size);
        Ok(Prediction {
            size: out_size,
            probs: tape.value(up).data().iter().map(|&z| sigmoid(z)).collect(),
        })
    }
}
