//! Finite-difference verification of every differentiable component.
//!
//! Each component builds a scalar loss on a tape from a few input tensors;
//! the analytic adjoints are compared with central differences entry by
//! entry. The relative error of one entry is
//! `|a - n| / max(|a|, |n|, floor)`, so entries whose true gradient is
//! near zero are judged on absolute error against `floor`.

use serde::Serialize;

use crate::augment::{augment_on_tape, BatchUncertainty, Mode, ScaleMode, StatUncertainty, UfaDraw, UfaSettings, UfaTarget};
use crate::config::RunConfig;
use crate::data::{Episode, Sample};
use crate::error::Result;
use crate::memory::{recon_loss_on_tape, reencode_on_tape, NeighborCount, PixelMask, ReencodeSettings};
use crate::model::Model;
use crate::numcore::{Rng, Tape, Tensor, Var, EPS_STD};

pub const STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const END_TO_END_TOLERANCE: f64 = 1e-2;
pub const OP_FLOOR: f64 = 1e-6;
pub const END_TO_END_FLOOR: f64 = 1e-3;

pub const COMPONENTS: [&str; 6] = ["numcore", "augment", "reencode", "recon_loss", "seg_loss", "model"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.component.as_str())
            .collect()
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error over all entries of all `inputs`, plus the entry
/// count. `flip` negates the analytic gradient (fault injection).
pub fn check_fn(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    floor: f64,
    flip: bool,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &v);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let g = grads.get(*v).unwrap_or(&zero);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = if flip { -g.data()[j] } else { g.data()[j] };
            worst = worst.max(rel_err(analytic, numeric, floor));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

fn weights(n: usize, rng: &mut Rng) -> Vec<f64> {
    rng.normals(n)
}

/// Softmax cross-entropy and a standardize → weighted-sum chain.
pub fn check_numcore(seed: u64, flip: bool) -> Result<(f64, usize)> {
    let mut rng = Rng::new(seed);
    let logits = random(&[3], &mut rng);
    let (e1, n1) = check_fn(&[logits], &|t, v| t.softmax_cross_entropy(v[0], 1), OP_FLOOR, flip)?;
    let x = random(&[3, 3, 2], &mut rng);
    let w = weights(18, &mut rng);
    let (e2, n2) = check_fn(
        &[x],
        &|t, v| {
            let (z, _, _) = t.standardize(v[0], EPS_STD);
            t.dot_const(z, &w)
        },
        OP_FLOOR,
        flip,
    )?;
    Ok((e1.max(e2), n1 + n2))
}

/// UFA path with nonzero batch uncertainty, both target modes.
pub fn check_augment(seed: u64, flip: bool) -> Result<(f64, usize)> {
    let mut rng = Rng::new(seed);
    let c = 3;
    let q = random(&[4, 4, c], &mut rng);
    let s = random(&[4, 4, c], &mut rng);
    let unc = BatchUncertainty {
        query: StatUncertainty {
            var_mu: vec![0.3, 0.1, 0.2],
            var_sigma: vec![0.05, 0.1, 0.02],
            batch_size: 4,
        },
        support: StatUncertainty {
            var_mu: vec![0.2, 0.4, 0.1],
            var_sigma: vec![0.03, 0.02, 0.05],
            batch_size: 4,
        },
    };
    let draw = UfaDraw {
        eps_mu_q: vec![0.5, -1.0, 1.5],
        eps_sigma_q: vec![0.3, 0.2, -0.4],
        eps_mu_s: vec![-0.7, 0.2, 0.9],
        eps_sigma_s: vec![0.1, -0.5, 0.6],
        lambda: 0.35,
    };
    let wq = weights(16 * c, &mut rng);
    let ws = weights(16 * c, &mut rng);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for target in [UfaTarget::QueryOnly, UfaTarget::Both] {
        for scale_mode in [ScaleMode::Variance, ScaleMode::Stddev] {
            let settings = UfaSettings {
                gamma: 0.1,
                target,
                scale_mode,
            };
            let (e, n) = check_fn(
                &[q.clone(), s.clone()],
                &|t, v| {
                    let (nq, ns) = augment_on_tape(t, v[0], &[v[1]], &unc, &draw, &settings);
                    let a = t.dot_const(nq, &wq);
                    let b = t.dot_const(ns[0], &ws);
                    t.sum(&[a, b])
                },
                OP_FLOOR,
                flip,
            )?;
            worst = worst.max(e);
            count += n;
        }
    }
    Ok((worst, count))
}

/// Re-encoding with respect to features and bank, all-vector and top-k.
pub fn check_reencode(seed: u64, flip: bool) -> Result<(f64, usize)> {
    let mut rng = Rng::new(seed);
    let f = random(&[3, 3, 4], &mut rng);
    let bank = random(&[5, 4], &mut rng);
    let w = weights(36, &mut rng);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for k in [NeighborCount::All, NeighborCount::Top(3)] {
        let settings = ReencodeSettings { k, temperature: 1.0 };
        let (e, n) = check_fn(
            &[f.clone(), bank.clone()],
            &|t, v| {
                let r = reencode_on_tape(t, v[0], v[1], settings);
                t.dot_const(r, &w)
            },
            OP_FLOOR,
            flip,
        )?;
        worst = worst.max(e);
        count += n;
    }
    Ok((worst, count))
}

/// Reconstruction loss through the bank, summed and averaged.
pub fn check_recon(seed: u64, flip: bool) -> Result<(f64, usize)> {
    let mut rng = Rng::new(seed);
    let f = random(&[3, 3, 4], &mut rng);
    let bank = random(&[5, 4], &mut rng);
    let mask = PixelMask::new(vec![true, false, true, true, false, true, true, false, false]);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for mean in [false, true] {
        let (e, n) = check_fn(
            &[f.clone(), bank.clone()],
            &|t, v| {
                let r = reencode_on_tape(t, v[0], v[1], ReencodeSettings::default());
                recon_loss_on_tape(t, v[0], r, &mask, mean).expect("five foreground pixels")
            },
            OP_FLOOR,
            flip,
        )?;
        worst = worst.max(e);
        count += n;
    }
    Ok((worst, count))
}

/// Logit upsampling followed by binary cross-entropy.
pub fn check_seg_loss(seed: u64, flip: bool) -> Result<(f64, usize)> {
    let mut rng = Rng::new(seed);
    let logits = random(&[3, 3, 1], &mut rng);
    let target: Vec<f64> = (0..36).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect();
    check_fn(
        &[logits],
        &|t, v| {
            let up = t.upsample_bilinear(v[0], 6, 6);
            t.bce_with_logits(up, &target)
        },
        OP_FLOOR,
        flip,
    )
}

/// Configuration of the small end-to-end instance: 8×8 images, C = 8.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.threads = 1;
    cfg.data.image_size = 8;
    cfg.data.classes = 8;
    cfg.model.widths = vec![4, 8, 8, 8];
    cfg.model.downsample = vec![true, false, false, false];
    cfg.model.decoder_hidden = 8;
    cfg.csm.num_vectors = 6;
    cfg.train.batch_size = 1;
    cfg
}

/// One random episode on 8×8 images with block-shaped masks.
pub fn tiny_episode(seed: u64) -> Episode {
    let mut rng = Rng::new(seed);
    let mut sample = |r0: usize, c0: usize| {
        let image: Vec<f32> = (0..64).map(|_| rng.uniform() as f32).collect();
        let mask = (0..64)
            .map(|i| {
                let (r, c) = (i / 8, i % 8);
                (r >= r0 && r < r0 + 4 && c >= c0 && c < c0 + 4) as u8
            })
            .collect();
        Sample {
            class_id: 0,
            size: 8,
            image,
            mask,
        }
    };
    let query = sample(2, 1);
    let support = vec![sample(1, 3)];
    Episode {
        class_id: 0,
        query,
        support,
        indices: vec![0, 1],
    }
}

/// Every parameter of the full pipeline in training mode (UFA and CSM on).
pub fn check_model(seed: u64, flip: bool) -> Result<(f64, usize)> {
    let mut cfg = tiny_config();
    // stop-gradients are invisible to finite differences
    cfg.csm.detach_features = false;
    let mut model = Model::new(&cfg)?;
    let ep = tiny_episode(seed);
    let loss_of = |m: &Model| -> Result<f64> {
        let mut rngs = [Rng::new(seed ^ 0x5EED)];
        let f = m.forward_batch(std::slice::from_ref(&ep), Mode::Train, Some(&mut rngs), true)?;
        Ok(f[0].scalar(f[0].total))
    };
    let mut rngs = [Rng::new(seed ^ 0x5EED)];
    let f = model.forward_batch(std::slice::from_ref(&ep), Mode::Train, Some(&mut rngs), true)?;
    let grads = f[0].tape.backward(f[0].total.expect("loss"))?;
    model.params.zero_grad();
    f[0].tape.accumulate_param_grads(&grads, &mut model.params, 1.0)?;
    let analytic: Vec<Tensor> = model.params.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..model.params.value(id).len() {
            let x0 = model.params.value(id).data()[j];
            model.params.get_mut(id).value.data_mut()[j] = x0 + STEP;
            let up = loss_of(&model)?;
            model.params.get_mut(id).value.data_mut()[j] = x0 - STEP;
            let down = loss_of(&model)?;
            model.params.get_mut(id).value.data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[pi].data()[j];
            let a = if flip { -a } else { a };
            worst = worst.max(rel_err(a, numeric, END_TO_END_FLOOR));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Runs every component; `flip` names a component whose analytic gradient
/// is negated to prove the suite can fail.
pub fn run_suite(seed: u64, flip: Option<&str>) -> Result<GradcheckReport> {
    type Check = fn(u64, bool) -> Result<(f64, usize)>;
    let checks: [(&str, Check, f64); 6] = [
        ("numcore", check_numcore, OP_TOLERANCE),
        ("augment", check_augment, OP_TOLERANCE),
        ("reencode", check_reencode, OP_TOLERANCE),
        ("recon_loss", check_recon, OP_TOLERANCE),
        ("seg_loss", check_seg_loss, OP_TOLERANCE),
        ("model", check_model, END_TO_END_TOLERANCE),
    ];
    let mut rows = Vec::new();
    for (name, f, tol) in checks {
        let (err, n) = f(seed, flip == Some(name))?;
        rows.push(ComponentResult {
            component: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
            entries: n,
            passed: err <= tol,
        });
    }
    Ok(GradcheckReport { rows })
}
