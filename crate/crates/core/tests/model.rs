use episeg::augment::Mode;
use episeg::data::{Dataset, Episode};
use episeg::gradcheck::{check_model, check_seg_loss, tiny_config, tiny_episode, END_TO_END_TOLERANCE, OP_TOLERANCE};
use episeg::memory::PixelMask;
use episeg::model::{checkpoint, kshot_prototype, prototype, seg_loss, total_loss, train, Model, PROB_CLIP};
use episeg::{Error, FeatureMap, Rng, RunConfig};

fn small_config() -> RunConfig {
    let mut cfg = tiny_config();
    cfg.data.image_size = 16;
    cfg.data.samples_per_class = 8;
    cfg.train.epochs = 2;
    cfg.train.episodes_per_epoch = 4;
    cfg.train.batch_size = 2;
    cfg
}

fn small_dataset(cfg: &RunConfig) -> Dataset {
    Dataset::generate(&cfg.data, 11).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn with_supports(seed: u64, k: usize) -> Episode {
    let mut ep = tiny_episode(seed);
    for i in 1..k {
        ep.support.push(tiny_episode(seed + 100 * i as u64).support[0].clone());
        ep.indices.push(i + 1);
    }
    ep
}

#[test]
fn prototype_examples() {
    let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let all = prototype(&f, &PixelMask::new(vec![true, true])).unwrap();
    assert_eq!(all, vec![2.0, 3.0]);
    let one = prototype(&f, &PixelMask::new(vec![false, true])).unwrap();
    assert_eq!(one, vec![3.0, 4.0]);
    assert!(matches!(
        prototype(&f, &PixelMask::new(vec![false, false])),
        Err(Error::EmptySupportMask)
    ));
    assert!(prototype(&f, &PixelMask::new(vec![true])).is_err());
}

#[test]
fn prototype_matches_masked_average_oracle() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let f = FeatureMap::from_fn(4, 3, 5, |_, _, _| rng.normal());
        let bits: Vec<bool> = (0..12).map(|i| i == 0 || rng.uniform() < 0.4).collect();
        let got = prototype(&f, &PixelMask::new(bits.clone())).unwrap();
        let n = bits.iter().filter(|&&b| b).count() as f64;
        for c in 0..5 {
            let want: f64 = (0..12).filter(|&j| bits[j]).map(|j| f.pixel(j)[c]).sum::<f64>() / n;
            assert!((got[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn kshot_prototype_is_the_mean() {
    assert_eq!(kshot_prototype(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
    assert_eq!(kshot_prototype(&[vec![0.0, 4.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 2.0]);
    let five: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 10.0 - i as f64]).collect();
    assert_eq!(kshot_prototype(&five).unwrap(), vec![2.0, 8.0]);
    assert!(kshot_prototype(&[]).is_err());
    assert!(kshot_prototype(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn seg_loss_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((seg_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - ln2).abs() < 1e-12);
    assert!(seg_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
    let clipped = seg_loss(&[0.0], &[1.0]).unwrap();
    assert!((clipped + PROB_CLIP.ln()).abs() < 1e-9);
    assert!(seg_loss(&[0.5], &[1.0, 0.0]).is_err());
    assert!(seg_loss(&[], &[]).is_err());

    let mut rng = Rng::new(4);
    let p: Vec<f64> = (0..30).map(|_| rng.uniform_range(0.01, 0.99)).collect();
    let y: Vec<f64> = (0..30).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
    let want = p
        .iter()
        .zip(&y)
        .map(|(p, y)| if *y == 1.0 { -p.ln() } else { -(1.0 - p).ln() })
        .sum::<f64>()
        / 30.0;
    assert!((seg_loss(&p, &y).unwrap() - want).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(0.7, 0.3, 1.0), 1.0);
    assert_eq!(total_loss(0.7, 0.3, 0.0), 0.7);
    assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
}

#[test]
fn decode_gives_probabilities_at_image_resolution() {
    let cfg = tiny_config();
    let model = Model::new(&cfg).unwrap();
    let c = model.feature_channels();
    let mut rng = Rng::new(5);
    let a = FeatureMap::from_fn(4, 4, c, |_, _, _| rng.normal());
    let b = FeatureMap::from_fn(4, 4, c, |_, _, _| rng.normal());
    let v = rng.normals(c);
    let p = model.decode(&a, &b, &v, 8).unwrap();
    assert_eq!(p.size, 8);
    assert_eq!(p.probs.len(), 64);
    assert!(p.probs.iter().all(|&x| x > 0.0 && x < 1.0));
    assert!(model.decode(&a, &b, &v[1..], 8).is_err());
}

#[test]
fn prediction_shape_and_range() {
    let model = Model::new(&tiny_config()).unwrap();
    let p = model.predict(&tiny_episode(1)).unwrap();
    assert_eq!((p.size, p.probs.len()), (8, 64));
    assert!(p.probs.iter().all(|&x| x > 0.0 && x < 1.0));
    assert_eq!(bits(&model.predict(&tiny_episode(1)).unwrap().probs), bits(&p.probs));
}

#[test]
fn eval_batch_is_permutation_equivariant() {
    let model = Model::new(&tiny_config()).unwrap();
    let eps: Vec<Episode> = (0..3).map(tiny_episode).collect();
    let fwd = model.forward_batch(&eps, Mode::Eval, None, false).unwrap();
    let rev: Vec<Episode> = eps.iter().rev().cloned().collect();
    let fwd_rev = model.forward_batch(&rev, Mode::Eval, None, false).unwrap();
    for i in 0..3 {
        assert_eq!(bits(&fwd[i].prediction().probs), bits(&fwd_rev[2 - i].prediction().probs));
    }
}

#[test]
fn train_batch_is_permutation_equivariant() {
    let model = Model::new(&tiny_config()).unwrap();
    let eps: Vec<Episode> = (0..3).map(tiny_episode).collect();
    let mut rngs: Vec<Rng> = (0..3).map(|i| Rng::new(40 + i)).collect();
    let fwd = model.forward_batch(&eps, Mode::Train, Some(&mut rngs), true).unwrap();
    let order = [2, 0, 1];
    let perm: Vec<Episode> = order.iter().map(|&i| eps[i].clone()).collect();
    let mut prngs: Vec<Rng> = order.iter().map(|&i| Rng::new(40 + i as u64)).collect();
    let fwd_p = model.forward_batch(&perm, Mode::Train, Some(&mut prngs), true).unwrap();
    for (j, &i) in order.iter().enumerate() {
        let (a, b) = (fwd[i].scalar(fwd[i].total), fwd_p[j].scalar(fwd_p[j].total));
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn seeded_train_forward_is_bit_exact() {
    let model = Model::new(&tiny_config()).unwrap();
    let eps: Vec<Episode> = (0..2).map(tiny_episode).collect();
    let run = || {
        let mut rngs: Vec<Rng> = (0..2).map(|i| Rng::new(7 + i)).collect();
        let f = model.forward_batch(&eps, Mode::Train, Some(&mut rngs), true).unwrap();
        f.iter().flat_map(|f| f.prediction().probs).collect::<Vec<_>>()
    };
    assert_eq!(bits(&run()), bits(&run()));
}

#[test]
fn inference_draws_no_randomness() {
    let model = Model::new(&tiny_config()).unwrap();
    let eps = [tiny_episode(2)];
    let mut rngs = [Rng::new(9)];
    model.forward_batch(&eps, Mode::Eval, Some(&mut rngs), true).unwrap();
    assert_eq!(rngs[0].draws(), 0);
    let mut rngs = [Rng::new(9)];
    model.forward_batch(&eps, Mode::Train, Some(&mut rngs), true).unwrap();
    assert!(rngs[0].draws() > 0);
}

#[test]
fn ufa_is_inert_at_inference() {
    let on = Model::new(&tiny_config()).unwrap();
    let mut cfg = tiny_config();
    cfg.ufa.enabled = false;
    let mut off = Model::new(&cfg).unwrap();
    off.params = on.params.clone();
    let ep = tiny_episode(3);
    assert_eq!(bits(&on.predict(&ep).unwrap().probs), bits(&off.predict(&ep).unwrap().probs));
    assert_eq!(on.call_counts().ufa, 0);
}

#[test]
fn encoder_weights_are_shared_between_query_and_support() {
    let model = Model::new(&tiny_config()).unwrap();
    let mut ep = tiny_episode(4);
    ep.support = vec![ep.query.clone()];
    let f = model.forward_batch(std::slice::from_ref(&ep), Mode::Eval, None, false).unwrap();
    let fq = model.encode(&ep.query.image_tensor()).unwrap();
    let fs = model.encode(&ep.support[0].image_tensor()).unwrap();
    assert_eq!(bits(fq.data()), bits(fs.data()));
    let (q, _) = episeg::model::feature_masks(&ep, fq.height(), fq.width()).unwrap();
    let direct = prototype(&fq, &q).unwrap();
    let recorded = f[0].tape.value(f[0].prototype).data().to_vec();
    for (a, b) in direct.iter().zip(&recorded) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn baseline_bypasses_both_modules() {
    let mut cfg = tiny_config();
    cfg.ufa.enabled = false;
    cfg.csm.enabled = false;
    let model = Model::new(&cfg).unwrap();
    assert!(model.bank().is_none());
    let eps: Vec<Episode> = (0..2).map(tiny_episode).collect();
    let mut rngs: Vec<Rng> = (0..2).map(Rng::new).collect();
    let f = model.forward_batch(&eps, Mode::Train, Some(&mut rngs), true).unwrap();
    assert_eq!(model.call_counts(), Default::default());
    assert!(f[0].recon.is_none());
    assert_eq!(f[0].scalar(f[0].total), f[0].scalar(f[0].seg));

    let full = Model::new(&tiny_config()).unwrap();
    let mut rngs: Vec<Rng> = (0..2).map(Rng::new).collect();
    full.forward_batch(&eps, Mode::Train, Some(&mut rngs), true).unwrap();
    let c = full.call_counts();
    assert!(c.ufa > 0 && c.csm > 0);
}

#[test]
fn total_gradient_is_the_weighted_sum() {
    let mut cfg = tiny_config();
    cfg.csm.recon_weight = 0.5;
    let mut model = Model::new(&cfg).unwrap();
    let ep = [tiny_episode(5)];
    let mut rngs = [Rng::new(1)];
    let f = model.forward_batch(&ep, Mode::Train, Some(&mut rngs), true).unwrap();
    let f = &f[0];
    assert!((f.scalar(f.total) - total_loss(f.scalar(f.seg), f.scalar(f.recon), 0.5)).abs() < 1e-12);
    let collect = |model: &mut Model, v| {
        let g = f.tape.backward(v).unwrap();
        model.params.zero_grad();
        f.tape.accumulate_param_grads(&g, &mut model.params, 1.0).unwrap();
        model.params.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect::<Vec<f64>>()
    };
    let gt = collect(&mut model, f.total.unwrap());
    let gs = collect(&mut model, f.seg.unwrap());
    let gr = collect(&mut model, f.recon.unwrap());
    for i in 0..gt.len() {
        assert!((gt[i] - (gs[i] + 0.5 * gr[i])).abs() <= 1e-10 * gt[i].abs().max(1.0));
    }
}

#[test]
fn kshot_episodes_run_end_to_end() {
    let model = Model::new(&tiny_config()).unwrap();
    let ep = with_supports(6, 5);
    assert_eq!(ep.k_shot(), 5);
    let mut rngs = [Rng::new(2)];
    let f = model.forward_batch(std::slice::from_ref(&ep), Mode::Train, Some(&mut rngs), true).unwrap();
    assert!(f[0].scalar(f[0].total).is_finite());
    assert_eq!(model.predict(&ep).unwrap().probs.len(), 64);
}

#[test]
fn empty_support_is_rejected() {
    let model = Model::new(&tiny_config()).unwrap();
    let mut ep = tiny_episode(7);
    ep.support[0].mask.iter_mut().for_each(|m| *m = 0);
    assert!(matches!(model.predict(&ep), Err(Error::EmptySupportMask)));
}

#[test]
fn seg_loss_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (err, n) = check_seg_loss(seed, false).unwrap();
        assert!(n > 0 && err <= OP_TOLERANCE, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (err, n) = check_model(seed, false).unwrap();
        assert!(n > 100 && err <= END_TO_END_TOLERANCE, "seed {seed}: {err:.3e}");
    }
    let (err, _) = check_model(0, true).unwrap();
    assert!(err > END_TO_END_TOLERANCE);
}

#[test]
fn training_is_deterministic_and_updates_the_bank() {
    let cfg = small_config();
    let ds = small_dataset(&cfg);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.history, b.history);
    for ((_, pa), (_, pb)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(bits(pa.value.data()), bits(pb.value.data()));
    }
    let init = a.initial_bank.as_ref().unwrap();
    assert_ne!(bits(init.data()), bits(a.model.bank().unwrap().data()));
}

#[test]
fn long_toy_run_stays_finite() {
    let mut cfg = small_config();
    cfg.train.epochs = 50;
    cfg.train.episodes_per_epoch = 2;
    let out = train(&cfg, &small_dataset(&cfg)).unwrap();
    assert_eq!(out.history.len(), 50);
    assert!(out
        .history
        .iter()
        .all(|h| h.seg_loss.is_finite() && h.recon_loss.is_finite() && h.probe_recon.is_finite()));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = small_config();
    let ds = small_dataset(&cfg);
    let out = train(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&out, dir.path()).unwrap();
    let (loaded, manifest) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.config, out.model.config);
    assert_eq!(manifest.config_hash, cfg.hash());
    for ((_, a), (_, b)) in loaded.params.iter().zip(out.model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(a.value.data()), bits(b.value.data()));
    }
    let ep = Episode {
        class_id: 0,
        query: ds.samples[0][0].clone(),
        support: vec![ds.samples[0][1].clone()],
        indices: vec![0, 1],
    };
    assert_eq!(bits(&loaded.predict(&ep).unwrap().probs), bits(&out.model.predict(&ep).unwrap().probs));

    let first = out.model.params.iter().next().unwrap().1.name.clone();
    std::fs::write(dir.path().join(format!("{first}.t")), b"garbage").unwrap();
    assert!(checkpoint::load(dir.path()).is_err());
}

#[test]
fn detached_recon_loss_only_trains_the_bank() {
    let grads = |detach: bool, use_recon: bool| {
        let mut cfg = tiny_config();
        cfg.csm.detach_features = detach;
        let mut model = Model::new(&cfg).unwrap();
        let ep = [tiny_episode(8)];
        let mut rngs = [Rng::new(3)];
        let f = model.forward_batch(&ep, Mode::Train, Some(&mut rngs), true).unwrap();
        let v = if use_recon { f[0].recon } else { f[0].seg }.unwrap();
        let g = f[0].tape.backward(v).unwrap();
        model.params.zero_grad();
        f[0].tape.accumulate_param_grads(&g, &mut model.params, 1.0).unwrap();
        model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.grad.data().to_vec()))
            .collect::<Vec<_>>()
    };
    for (name, g) in grads(true, true) {
        let nonzero = g.iter().any(|&x| x != 0.0);
        assert_eq!(nonzero, name == "memory.bank", "{name}");
    }
    assert!(grads(false, true).iter().any(|(n, g)| n.starts_with("encoder") && g.iter().any(|&x| x != 0.0)));
    let (a, b) = (grads(true, false), grads(false, false));
    for ((_, x), (_, y)) in a.iter().zip(&b) {
        assert_eq!(bits(x), bits(y));
    }
}
