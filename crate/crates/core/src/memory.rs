//! Class-shared memory: a bank of learnable vectors that re-encodes every
//! pixel feature as a softmax-weighted sum of memory vectors, and the masked
//! diagonal reconstruction loss that trains it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, softmax_in_place, CustomOp, FeatureMap, Rng, Tape, Tensor, Var};

pub const DEFAULT_NUM_VECTORS: usize = 50;

/// How many memory vectors take part in each pixel's softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborCount {
    #[default]
    All,
    Top(usize),
}

impl fmt::Display for NeighborCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeighborCount::All => write!(f, "all"),
            NeighborCount::Top(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for NeighborCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(NeighborCount::All),
            other => match other.parse::<usize>() {
                Ok(k) if k > 0 => Ok(NeighborCount::Top(k)),
                _ => Err(Error::Config(format!("csm.k must be a positive integer or `all`, got `{s}`"))),
            },
        }
    }
}

impl Serialize for NeighborCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NeighborCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `N × C` matrix of memory vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    vectors: Tensor,
}

impl MemoryBank {
    pub fn new(vectors: Tensor) -> Result<Self> {
        match *vectors.shape() {
            [n, c] if n >= 1 && c >= 1 => Ok(Self { vectors }),
            _ => Err(Error::ShapeMismatch(format!(
                "memory bank must be N x C with N, C >= 1, got {:?}",
                vectors.shape()
            ))),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch("ragged memory rows".into()));
        }
        Self::new(Tensor::new(vec![rows.len(), c], rows.concat())?)
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        let c = self.dim();
        &self.vectors.data()[k * c..(k + 1) * c]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vectors
    }

    pub fn into_tensor(self) -> Tensor {
        self.vectors
    }
}

/// Entries i.i.d. `N(0, 1/C)`, rounded to `f32`.
pub fn init_bank(n: usize, c: usize, rng: &mut Rng) -> Result<MemoryBank> {
    if n == 0 || c == 0 {
        return Err(Error::Config(format!("memory bank needs N, C >= 1, got {n} x {c}")));
    }
    let scale = 1.0 / (c as f64).sqrt();
    let data = (0..n * c)
        .map(|_| (rng.normal() * scale) as f32 as f64)
        .collect();
    MemoryBank::new(Tensor::new(vec![n, c], data)?)
}

/// Binary foreground indicator per feature pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_values(values: &[f64]) -> Self {
        Self {
            bits: values.iter().map(|&v| v >= 0.5).collect(),
        }
    }

    /// Nearest-neighbour downsampling of an `h0 × w0` mask: target pixel
    /// `(i, j)` reads source pixel `(floor((i + 0.5) h0 / h), floor((j + 0.5) w0 / w))`.
    pub fn downsample_nearest(mask: &[f64], h0: usize, w0: usize, h: usize, w: usize) -> Result<Self> {
        if mask.len() != h0 * w0 {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} values for {h0}x{w0}",
                mask.len()
            )));
        }
        let mut bits = Vec::with_capacity(h * w);
        for i in 0..h {
            let si = (((i as f64 + 0.5) * h0 as f64 / h as f64) as usize).min(h0 - 1);
            for j in 0..w {
                let sj = (((j as f64 + 0.5) * w0 as f64 / w as f64) as usize).min(w0 - 1);
                bits.push(mask[si * w0 + sj] >= 0.5);
            }
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Re-encoding settings shared by the value and tape routes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReencodeSettings {
    pub k: NeighborCount,
    pub temperature: f64,
}

impl Default for ReencodeSettings {
    fn default() -> Self {
        Self {
            k: NeighborCount::All,
            temperature: 1.0,
        }
    }
}

/// Re-encoded features plus the dense `HW × N` attention weights.
struct Reencoded {
    out: Vec<f64>,
    weights: Vec<f64>,
}

fn check_reencode(f_channels: usize, bank: &MemoryBank, k: NeighborCount) -> Result<()> {
    if f_channels != bank.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have {f_channels} channels, memory vectors {}",
            bank.dim()
        )));
    }
    if let NeighborCount::Top(k) = k {
        if k > bank.len() {
            return Err(Error::Config(format!(
                "k = {k} exceeds the {} memory vectors",
                bank.len()
            )));
        }
    }
    Ok(())
}

fn reencode_kernel(f: &[f64], c: usize, bank: &Tensor, settings: ReencodeSettings) -> Reencoded {
    let n = bank.shape()[0];
    let m = bank.data();
    let pixels = f.len() / c;
    let mut out = vec![0.0; f.len()];
    let mut weights = vec![0.0; pixels * n];
    let mut scores = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let inv_t = 1.0 / settings.temperature;
    for (j, fj) in f.chunks_exact(c).enumerate() {
        for (k, s) in scores.iter_mut().enumerate() {
            *s = inv_t * fj.iter().zip(&m[k * c..(k + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
        }
        let w = &mut weights[j * n..(j + 1) * n];
        match settings.k {
            NeighborCount::Top(kk) if kk < n => {
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut sel: Vec<f64> = order[..kk].iter().map(|&i| scores[i]).collect();
                softmax_in_place(&mut sel);
                for (&i, p) in order[..kk].iter().zip(sel) {
                    w[i] = p;
                }
                order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
            }
            _ => {
                w.copy_from_slice(&scores);
                softmax_in_place(w);
            }
        }
        let o = &mut out[j * c..(j + 1) * c];
        for (k, &a) in w.iter().enumerate() {
            if a != 0.0 {
                for (ov, mv) in o.iter_mut().zip(&m[k * c..(k + 1) * c]) {
                    *ov += a * mv;
                }
            }
        }
    }
    Reencoded { out, weights }
}

/// Replaces each pixel vector by a softmax-similarity-weighted sum of the
/// memory vectors (restricted to the `k` most similar when `k` is finite).
pub fn reencode(f: &FeatureMap, bank: &MemoryBank, k: NeighborCount) -> Result<FeatureMap> {
    reencode_with(f, bank, ReencodeSettings { k, temperature: 1.0 })
}

pub fn reencode_with(f: &FeatureMap, bank: &MemoryBank, settings: ReencodeSettings) -> Result<FeatureMap> {
    check_reencode(f.channels(), bank, settings.k)?;
    let r = reencode_kernel(f.data(), f.channels(), bank.as_tensor(), settings);
    FeatureMap::new(f.height(), f.width(), f.channels(), r.out)
}

/// Attention weights used for every pixel, `HW` rows of `N`.
pub fn reencode_weights(f: &FeatureMap, bank: &MemoryBank, settings: ReencodeSettings) -> Result<Vec<Vec<f64>>> {
    check_reencode(f.channels(), bank, settings.k)?;
    let r = reencode_kernel(f.data(), f.channels(), bank.as_tensor(), settings);
    Ok(r.weights.chunks_exact(bank.len()).map(<[f64]>::to_vec).collect())
}

struct ReencodeOp {
    weights: Vec<f64>,
    inv_t: f64,
}

impl CustomOp for ReencodeOp {
    fn name(&self) -> &'static str {
        "reencode"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (f, bank) = (inputs[0], inputs[1]);
        let n = bank.shape()[0];
        let c = bank.shape()[1];
        let m = bank.data();
        let mut df = needs[0].then(|| vec![0.0; f.len()]);
        let mut dm = needs[1].then(|| vec![0.0; m.len()]);
        let mut da = vec![0.0; n];
        for (j, (fj, gj)) in f.data().chunks_exact(c).zip(g.data().chunks_exact(c)).enumerate() {
            let w = &self.weights[j * n..(j + 1) * n];
            // d out / d a_k = m_k ; softmax Jacobian a_k (da_k - sum_l a_l da_l)
            let mut mean = 0.0;
            for k in 0..n {
                da[k] = if w[k] != 0.0 {
                    gj.iter().zip(&m[k * c..(k + 1) * c]).map(|(a, b)| a * b).sum()
                } else {
                    0.0
                };
                mean += w[k] * da[k];
            }
            for k in 0..n {
                let a = w[k];
                if a == 0.0 {
                    continue;
                }
                let ds = a * (da[k] - mean) * self.inv_t;
                let mk = &m[k * c..(k + 1) * c];
                if let Some(df) = df.as_mut() {
                    for (d, mv) in df[j * c..(j + 1) * c].iter_mut().zip(mk) {
                        *d += ds * mv;
                    }
                }
                if let Some(dm) = dm.as_mut() {
                    for ((d, gv), fv) in dm[k * c..(k + 1) * c].iter_mut().zip(gj).zip(fj) {
                        *d += a * gv + ds * fv;
                    }
                }
            }
        }
        vec![
            df.map(|d| Tensor::new(f.shape().to_vec(), d).unwrap()),
            dm.map(|d| Tensor::new(bank.shape().to_vec(), d).unwrap()),
        ]
    }
}

/// Differentiable re-encoding of `f: [H, W, C]` with `bank: [N, C]`.
pub fn reencode_on_tape(tape: &mut Tape, f: Var, bank: Var, settings: ReencodeSettings) -> Var {
    let ft = tape.value(f);
    let c = *ft.shape().last().unwrap();
    let r = reencode_kernel(ft.data(), c, tape.value(bank), settings);
    let out = Tensor::new(ft.shape().to_vec(), r.out).unwrap();
    tape.custom(
        &[f, bank],
        out,
        Box::new(ReencodeOp {
            weights: r.weights,
            inv_t: 1.0 / settings.temperature,
        }),
    )
}

/// Dense `HW × HW` correlation of the masked maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub size: usize,
    pub data: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }
}

fn check_pair(a: &FeatureMap, b: &FeatureMap, mask: &PixelMask) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::ShapeMismatch("original and re-encoded maps differ in shape".into()));
    }
    if mask.len() != a.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} pixels for a {}-pixel map",
            mask.len(),
            a.pixels()
        )));
    }
    Ok(())
}

/// Background rows of both maps are zeroed, then `C = A Bᵀ`.
pub fn correlation(f_orig: &FeatureMap, f_re: &FeatureMap, mask: &PixelMask) -> Result<CorrelationMatrix> {
    check_pair(f_orig, f_re, mask)?;
    let n = f_orig.pixels();
    let mut data = vec![0.0; n * n];
    let fg = mask.foreground();
    for &i in &fg {
        for &j in &fg {
            data[i * n + j] = dot(f_orig.pixel(i), f_re.pixel(j));
        }
    }
    Ok(CorrelationMatrix { size: n, data })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Foreground-restricted correlation, its row softmax, and the loss.
struct ReconForward {
    loss: f64,
    probs: Vec<f64>,
}

fn recon_kernel(a: &[f64], b: &[f64], c: usize, fg: &[usize]) -> ReconForward {
    let n = fg.len();
    let mut probs = vec![0.0; n * n];
    let mut loss = 0.0;
    for (r, &i) in fg.iter().enumerate() {
        let ai = &a[i * c..(i + 1) * c];
        let row = &mut probs[r * n..(r + 1) * n];
        for (col, &j) in fg.iter().enumerate() {
            row[col] = dot(ai, &b[j * c..(j + 1) * c]);
        }
        loss += log_sum_exp(row) - row[r];
        softmax_in_place(row);
    }
    ReconForward { loss, probs }
}

/// Sum over foreground rows of `-log softmax(row restricted to foreground columns)[own index]`.
/// Zero when fewer than two foreground pixels exist.
pub fn recon_loss(f_orig: &FeatureMap, f_re: &FeatureMap, mask: &PixelMask) -> Result<f64> {
    check_pair(f_orig, f_re, mask)?;
    let fg = mask.foreground();
    if fg.len() < 2 {
        log::warn!("reconstruction loss skipped: {} foreground pixel(s)", fg.len());
        return Ok(0.0);
    }
    Ok(recon_kernel(f_orig.data(), f_re.data(), f_orig.channels(), &fg).loss)
}

struct ReconOp {
    fg: Vec<usize>,
    probs: Vec<f64>,
    scale: f64,
}

impl CustomOp for ReconOp {
    fn name(&self) -> &'static str {
        "recon_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let c = *a.shape().last().unwrap();
        let n = self.fg.len();
        let s = g.item() * self.scale;
        let mut da = needs[0].then(|| vec![0.0; a.len()]);
        let mut db = needs[1].then(|| vec![0.0; b.len()]);
        for (r, &i) in self.fg.iter().enumerate() {
            for (col, &j) in self.fg.iter().enumerate() {
                let mut gij = self.probs[r * n + col];
                if r == col {
                    gij -= 1.0;
                }
                let gij = gij * s;
                if gij == 0.0 {
                    continue;
                }
                if let Some(da) = da.as_mut() {
                    for (d, v) in da[i * c..(i + 1) * c].iter_mut().zip(&b.data()[j * c..(j + 1) * c]) {
                        *d += gij * v;
                    }
                }
                if let Some(db) = db.as_mut() {
                    for (d, v) in db[j * c..(j + 1) * c].iter_mut().zip(&a.data()[i * c..(i + 1) * c]) {
                        *d += gij * v;
                    }
                }
            }
        }
        vec![
            da.map(|d| Tensor::new(a.shape().to_vec(), d).unwrap()),
            db.map(|d| Tensor::new(b.shape().to_vec(), d).unwrap()),
        ]
    }
}

/// Differentiable reconstruction loss; `mean` divides by the foreground count.
/// Returns `None` when the mask has fewer than two foreground pixels.
pub fn recon_loss_on_tape(tape: &mut Tape, f_orig: Var, f_re: Var, mask: &PixelMask, mean: bool) -> Option<Var> {
    let fg = mask.foreground();
    if fg.len() < 2 {
        log::warn!("reconstruction loss skipped: {} foreground pixel(s)", fg.len());
        return None;
    }
    let c = *tape.value(f_orig).shape().last().unwrap();
    let fwd = recon_kernel(tape.value(f_orig).data(), tape.value(f_re).data(), c, &fg);
    let scale = if mean { 1.0 / fg.len() as f64 } else { 1.0 };
    Some(tape.custom(
        &[f_orig, f_re],
        Tensor::scalar(fwd.loss * scale),
        Box::new(ReconOp {
            fg,
            probs: fwd.probs,
            scale,
        }),
    ))
}
