use episeg::gradcheck::{check_recon, check_reencode, OP_TOLERANCE};
use episeg::memory::{
    correlation, init_bank, recon_loss, recon_loss_on_tape, reencode, reencode_on_tape, reencode_weights, MemoryBank,
    NeighborCount, PixelMask, ReencodeSettings, DEFAULT_NUM_VECTORS,
};
use episeg::numcore::{Tape, Tensor};
use episeg::{FeatureMap, Rng, RunConfig};
use proptest::prelude::*;

fn random_map(rng: &mut Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.normal())
}

fn random_bank(rng: &mut Rng, n: usize, c: usize) -> MemoryBank {
    MemoryBank::new(Tensor::new(vec![n, c], rng.normals(n * c)).unwrap()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force re-encoding: explicit exponentials over every memory vector.
fn oracle_reencode(f: &FeatureMap, bank: &MemoryBank) -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..f.pixels() {
        let s: Vec<f64> = (0..bank.len()).map(|k| dot(f.pixel(j), bank.vector(k))).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..f.channels() {
            out.push((0..bank.len()).map(|k| e[k] / z * bank.vector(k)[c]).sum());
        }
    }
    out
}

/// Brute-force loss: explicit correlation matrix, restricted softmax per row.
fn oracle_recon(a: &FeatureMap, b: &FeatureMap, fg: &[usize]) -> f64 {
    if fg.len() < 2 {
        return 0.0;
    }
    let mut loss = 0.0;
    for &i in fg {
        let row: Vec<f64> = fg.iter().map(|&j| dot(a.pixel(i), b.pixel(j))).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss -= dot(a.pixel(i), b.pixel(i)) - m - z.ln();
    }
    loss
}

#[test]
fn singleton_bank_maps_every_pixel_to_its_vector() {
    let mut rng = Rng::new(1);
    let bank = MemoryBank::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
    let f = random_map(&mut rng, 3, 4, 3);
    let out = reencode(&f, &bank, NeighborCount::All).unwrap();
    assert!(out.data().chunks(3).all(|p| p == [0.3, -1.2, 2.0]));
}

#[test]
fn two_vector_bank_examples() {
    let bank = MemoryBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let f = FeatureMap::new(1, 1, 2, vec![10.0, -10.0]).unwrap();
    let out = reencode(&f, &bank, NeighborCount::All).unwrap();
    assert!((out.data()[0] - 1.0).abs() < 1e-4 && out.data()[1].abs() < 1e-4);
    for c in [-3.0, 0.0, 2.5] {
        let f = FeatureMap::new(1, 1, 2, vec![c, c]).unwrap();
        assert_eq!(reencode(&f, &bank, NeighborCount::All).unwrap().data(), &[0.5, 0.5]);
    }
}

#[test]
fn reencode_errors() {
    let bank = MemoryBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let f = FeatureMap::zeros(2, 2, 3);
    assert!(reencode(&f, &bank, NeighborCount::All).is_err());
    let f = FeatureMap::zeros(2, 2, 2);
    assert!(reencode(&f, &bank, NeighborCount::Top(3)).is_err());
}

#[test]
fn reencode_matches_brute_force() {
    let mut rng = Rng::new(2);
    for _ in 0..10 {
        let f = random_map(&mut rng, 3, 3, 4);
        let bank = random_bank(&mut rng, 7, 4);
        let got = reencode(&f, &bank, NeighborCount::All).unwrap();
        for (a, b) in got.data().iter().zip(oracle_reencode(&f, &bank)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn top_k_renormalizes_over_the_selected_vectors() {
    let bank = MemoryBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let f = FeatureMap::new(1, 1, 2, vec![2.0, 1.0]).unwrap();
    let w = reencode_weights(&f, &bank, ReencodeSettings { k: NeighborCount::Top(2), temperature: 1.0 }).unwrap();
    // scores (2, 1, -2): keep the first two, softmax over (2, 1)
    let e = 1f64.exp();
    assert!((w[0][0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((w[0][1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert_eq!(w[0][2], 0.0);
    let one = reencode(&f, &bank, NeighborCount::Top(1)).unwrap();
    assert_eq!(one.data(), &[1.0, 0.0]);
}

#[test]
fn correlation_examples() {
    let v = FeatureMap::new(1, 2, 2, vec![0.6, 0.8, 5.0, 5.0]).unwrap();
    let c = correlation(&v, &v, &PixelMask::new(vec![true, false])).unwrap();
    assert!((c.get(0, 0) - 1.0).abs() < 1e-12);
    assert_eq!((c.get(0, 1), c.get(1, 0), c.get(1, 1)), (0.0, 0.0, 0.0));

    let none = correlation(&v, &v, &PixelMask::new(vec![false, false])).unwrap();
    assert!(none.data.iter().all(|&x| x == 0.0));

    let a = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, -1.0]).unwrap();
    let b = FeatureMap::new(1, 2, 2, vec![0.5, 0.0, -2.0, 4.0]).unwrap();
    let c = correlation(&a, &b, &PixelMask::new(vec![true, true])).unwrap();
    assert_eq!(c.get(0, 0), 0.5);
    assert_eq!(c.get(0, 1), 6.0);
    assert_eq!(c.get(1, 0), 1.5);
    assert_eq!(c.get(1, 1), -10.0);
}

#[test]
fn small_foreground_correlations_match_matrix_products() {
    let mut rng = Rng::new(3);
    for trial in 0..25 {
        let f = random_map(&mut rng, 3, 3, 3);
        let g = random_map(&mut rng, 3, 3, 3);
        let count = 1 + trial % 4;
        let mut bits = vec![false; 9];
        let mut placed = 0;
        while placed < count {
            let i = rng.below(9);
            if !bits[i] {
                bits[i] = true;
                placed += 1;
            }
        }
        let mask = PixelMask::new(bits.clone());
        let c = correlation(&f, &g, &mask).unwrap();
        // masked A (9×3) times masked Bᵀ (3×9)
        let zero = |m: &FeatureMap, i: usize| if bits[i] { m.pixel(i).to_vec() } else { vec![0.0; 3] };
        for i in 0..9 {
            for j in 0..9 {
                let want: f64 = (0..3).map(|k| zero(&f, i)[k] * zero(&g, j)[k]).sum();
                assert!((c.get(i, j) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn recon_loss_examples() {
    // orthogonal, large foreground vectors reconstruct perfectly
    let s = 20.0;
    let f = FeatureMap::new(1, 3, 3, vec![s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, s]).unwrap();
    let all = PixelMask::new(vec![true; 3]);
    assert!(recon_loss(&f, &f, &all).unwrap() < 1e-6);

    let u = FeatureMap::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
    let l = recon_loss(&u, &u, &PixelMask::new(vec![true, true])).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);

    assert_eq!(recon_loss(&u, &u, &PixelMask::new(vec![false, false])).unwrap(), 0.0);
    assert_eq!(recon_loss(&u, &u, &PixelMask::new(vec![true, false])).unwrap(), 0.0);
}

#[test]
fn mean_normalization_divides_by_the_foreground_count() {
    let mut rng = Rng::new(4);
    let a = random_map(&mut rng, 2, 3, 2);
    let b = random_map(&mut rng, 2, 3, 2);
    let mask = PixelMask::new(vec![true, false, true, true, false, true]);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.to_tensor()), t.constant(b.to_tensor()));
    let sum = recon_loss_on_tape(&mut t, va, vb, &mask, false).unwrap();
    let mean = recon_loss_on_tape(&mut t, va, vb, &mask, true).unwrap();
    assert!((t.value(sum).item() - 4.0 * t.value(mean).item()).abs() < 1e-12);
    assert!((t.value(sum).item() - recon_loss(&a, &b, &mask).unwrap()).abs() < 1e-12);
    assert!(recon_loss_on_tape(&mut t, va, vb, &PixelMask::new(vec![false; 6]), true).is_none());
}

#[test]
fn bank_initialization() {
    let a = init_bank(5, 4, &mut Rng::new(7)).unwrap();
    let b = init_bank(5, 4, &mut Rng::new(7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(DEFAULT_NUM_VECTORS, 50);
    assert_eq!(RunConfig::default().csm.num_vectors, 50);

    let (n, c) = (200, 64);
    let bank = init_bank(n, c, &mut Rng::new(8)).unwrap();
    let xs = bank.as_tensor().data();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!((var * c as f64 - 1.0).abs() < 0.1, "variance {var} vs 1/C");
}

#[test]
fn gradient_step_on_the_bank_lowers_the_loss() {
    let mut rng = Rng::new(9);
    let f = random_map(&mut rng, 3, 3, 4);
    let bank = random_bank(&mut rng, 6, 4);
    let mask = PixelMask::new((0..9).map(|i| i % 2 == 0).collect());
    let loss_at = |b: &Tensor| {
        let mut t = Tape::new();
        let vf = t.constant(f.to_tensor());
        let vb = t.input(b.clone());
        let re = reencode_on_tape(&mut t, vf, vb, ReencodeSettings::default());
        let l = recon_loss_on_tape(&mut t, vf, re, &mask, false).unwrap();
        let g = t.backward(l).unwrap().get(vb).cloned().unwrap();
        (t.value(l).item(), g)
    };
    let (l0, g) = loss_at(bank.as_tensor());
    assert!(l0 > 0.0);
    let mut step = 1.0;
    let l1 = loop {
        let mut stepped = bank.as_tensor().clone();
        for (s, d) in stepped.data_mut().iter_mut().zip(g.data()) {
            *s -= step * d;
        }
        let (l1, _) = loss_at(&stepped);
        if l1 < l0 || step < 1e-10 {
            break l1;
        }
        step /= 2.0;
    };
    assert!(l1 < l0, "{l1} !< {l0}");
}

#[test]
fn reencode_and_recon_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (e1, _) = check_reencode(seed, false).unwrap();
        let (e2, _) = check_recon(seed, false).unwrap();
        assert!(e1 <= OP_TOLERANCE, "reencode seed {seed}: {e1:.3e}");
        assert!(e2 <= OP_TOLERANCE, "recon seed {seed}: {e2:.3e}");
    }
}

#[test]
fn pixel_mask_downsampling_is_nearest_neighbour() {
    // 4×4 → 2×2 reads source pixels (1,1), (1,3), (3,1), (3,3)
    let mut m = vec![0.0; 16];
    for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 3), (3, 3)] {
        m[y * 4 + x] = 1.0;
    }
    let d = PixelMask::downsample_nearest(&m, 4, 4, 2, 2).unwrap();
    assert_eq!(d.bits(), &[true, false, false, true]);
    assert_eq!(d.count(), 2);
    assert!(PixelMask::downsample_nearest(&m, 4, 3, 2, 2).is_err());
}

proptest! {
    #[test]
    fn attention_weights_form_distributions(seed in 0u64..1000, n in 1usize..9, k in 1usize..9) {
        let mut rng = Rng::new(seed);
        let f = random_map(&mut rng, 2, 3, 3);
        let bank = random_bank(&mut rng, n, 3);
        let kc = if k >= n { NeighborCount::All } else { NeighborCount::Top(k) };
        let w = reencode_weights(&f, &bank, ReencodeSettings { k: kc, temperature: 1.0 }).unwrap();
        for row in w {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reencode_ignores_memory_order(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let f = random_map(&mut rng, 2, 2, 3);
        let bank = random_bank(&mut rng, 6, 3);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|k| bank.vector(k).to_vec()).collect();
        rows.reverse();
        rows.swap(0, 3);
        let shuffled = MemoryBank::from_rows(&rows).unwrap();
        let a = reencode(&f, &bank, NeighborCount::All).unwrap();
        let b = reencode(&f, &shuffled, NeighborCount::All).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn all_equals_explicit_n(seed in 0u64..1000, n in 1usize..10) {
        let mut rng = Rng::new(seed);
        let f = random_map(&mut rng, 2, 2, 3);
        let bank = random_bank(&mut rng, n, 3);
        let a = reencode(&f, &bank, NeighborCount::All).unwrap();
        let b = reencode(&f, &bank, NeighborCount::Top(n)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn recon_loss_matches_oracle_and_is_positive(seed in 0u64..1000, bits in prop::collection::vec(any::<bool>(), 6)) {
        let mut rng = Rng::new(seed);
        let a = random_map(&mut rng, 2, 3, 2);
        let b = random_map(&mut rng, 2, 3, 2);
        let mask = PixelMask::new(bits.clone());
        let fg: Vec<usize> = (0..6).filter(|&i| bits[i]).collect();
        let l = recon_loss(&a, &b, &mask).unwrap();
        prop_assert!(l >= 0.0);
        if fg.len() >= 2 {
            prop_assert!(l > 0.0);
        }
        prop_assert!((l - oracle_recon(&a, &b, &fg)).abs() <= 1e-9);
    }
}
