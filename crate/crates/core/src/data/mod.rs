//! Synthetic shape dataset, fold splits, and episode sampling.
//!
//! Each class is one shape family with its own intensity and texture.
//! Images contain one target object plus up to two distractors drawn from
//! other classes; the mask marks only the target.

mod shapes;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use shapes::{ClassParams, Family, Placement, Texture, FAMILIES};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::numcore::io::{read_tensor, write_tensor};
use crate::numcore::{stream_seed, Rng, Tensor};

pub const DATASET_VERSION: u32 = 1;
pub const NUM_FOLDS: usize = 4;
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.60;
pub const BACKGROUND_NOISE: f64 = 0.1;
const MAX_DISTRACTORS: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 500;

/// One grayscale image with the binary mask of its target object.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class_id: usize,
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&x| x as f64).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as f64).collect()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size, 1], self.image_f64()).unwrap()
    }

    pub fn mask_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.mask_f64()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub family: Family,
    pub params: ClassParams,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub background_noise: f64,
    pub classes: Vec<ClassEntry>,
    pub folds: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `samples[class_id][k]`.
    pub samples: Vec<Vec<Sample>>,
}

/// Base (train) and novel (test) classes of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contiguous class blocks: fold `i` tests on the `i`-th quarter of the ids.
pub fn fold_split(num_classes: usize, fold: usize) -> Result<FoldSplit> {
    if fold >= NUM_FOLDS {
        return Err(Error::Config(format!("fold {fold} is outside 0..{NUM_FOLDS}")));
    }
    if num_classes == 0 || num_classes % NUM_FOLDS != 0 {
        return Err(Error::Config(format!(
            "{num_classes} classes cannot be split into {NUM_FOLDS} equal folds"
        )));
    }
    let per = num_classes / NUM_FOLDS;
    let test: Vec<usize> = (fold * per..(fold + 1) * per).collect();
    let train = (0..num_classes).filter(|c| !test.contains(c)).collect();
    Ok(FoldSplit { fold, train, test })
}

fn render_sample(
    class_id: usize,
    params: &[ClassParams],
    size: usize,
    rng: &mut Rng,
) -> Result<Sample> {
    let target = &params[class_id];
    let n = size * size;
    let centre = |i: usize| i as f64 + 0.5;

    let mut placement = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let p = Placement::sample(target, size, rng);
        let mut count = 0;
        for y in 0..size {
            for x in 0..size {
                count += p.contains(target.family, centre(x), centre(y)) as usize;
            }
        }
        let frac = count as f64 / n as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            placement = Some(p);
            break;
        }
    }
    let target_place = placement.ok_or_else(|| {
        Error::Generation(format!(
            "class {class_id}: no placement with foreground in [{MIN_FOREGROUND}, {MAX_FOREGROUND}] on a {size}x{size} canvas"
        ))
    })?;

    let background = 0.1 + 0.15 * rng.uniform();
    let mut clean = vec![background; n];
    let mut mask = vec![0u8; n];

    let n_distractors = if params.len() > 1 { rng.below(MAX_DISTRACTORS + 1) } else { 0 };
    for _ in 0..n_distractors {
        let mut other = rng.below(params.len() - 1);
        if other >= class_id {
            other += 1;
        }
        let dp = &params[other];
        let place = Placement::sample(dp, size, rng);
        for y in 0..size {
            for x in 0..size {
                if place.contains(dp.family, centre(x), centre(y)) {
                    clean[y * size + x] = shapes::textured(dp, place.intensity, x, y);
                }
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            if target_place.contains(target.family, centre(x), centre(y)) {
                clean[y * size + x] = shapes::textured(target, target_place.intensity, x, y);
                mask[y * size + x] = 1;
            }
        }
    }
    let noise = rng.normals(n);
    let image = clean
        .iter()
        .zip(&noise)
        .map(|(&v, &e)| (v + BACKGROUND_NOISE * e).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Sample {
        class_id,
        size,
        image,
        mask,
    })
}

impl Dataset {
    /// Renders every sample in memory. Each class uses its own seed stream,
    /// so the result does not depend on the worker count.
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        if cfg.classes < 2 * NUM_FOLDS || cfg.classes % NUM_FOLDS != 0 {
            return Err(Error::Config(format!(
                "need a multiple of {NUM_FOLDS} classes with at least {} of them, got {}",
                2 * NUM_FOLDS,
                cfg.classes
            )));
        }
        if cfg.samples_per_class < 2 || cfg.image_size < 8 {
            return Err(Error::Config(
                "need at least 2 samples per class and images of at least 8 pixels".into(),
            ));
        }
        let params: Vec<ClassParams> = (0..cfg.classes)
            .map(|id| ClassParams::for_class(id, cfg.classes, cfg.image_size))
            .collect();
        let samples = (0..cfg.classes)
            .into_par_iter()
            .map(|class_id| {
                let mut rng = Rng::stream(seed, class_id as u64);
                (0..cfg.samples_per_class)
                    .map(|_| render_sample(class_id, &params, cfg.image_size, &mut rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let folds = (0..NUM_FOLDS)
            .map(|f| fold_split(cfg.classes, f).map(|s| s.test))
            .collect::<Result<Vec<_>>>()?;
        let meta = DatasetMeta {
            version: DATASET_VERSION,
            seed,
            image_size: cfg.image_size,
            samples_per_class: cfg.samples_per_class,
            background_noise: BACKGROUND_NOISE,
            classes: params
                .into_iter()
                .enumerate()
                .map(|(id, p)| ClassEntry {
                    id,
                    family: p.family,
                    params: p,
                })
                .collect(),
            folds,
        };
        Ok(Self { meta, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.samples.len()
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            classes: self.num_classes(),
            samples_per_class: self.meta.samples_per_class,
            image_size: self.meta.image_size,
        }
    }

    /// Writes `dataset.json` and `class_{id}/sample_{k}.{img,mask}.t`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, class) in self.samples.iter().enumerate() {
            let cdir = dir.join(format!("class_{id}"));
            for (k, s) in class.iter().enumerate() {
                write_tensor(&cdir.join(format!("sample_{k}.img.t")), &s.image_tensor())?;
                write_tensor(&cdir.join(format!("sample_{k}.mask.t")), &s.mask_tensor())?;
            }
        }
        let path = dir.join("dataset.json");
        let json = serde_json::to_string_pretty(&self.meta)? + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        let size = meta.image_size;
        let samples = (0..meta.classes.len())
            .into_par_iter()
            .map(|id| {
                let cdir = dir.join(format!("class_{id}"));
                (0..meta.samples_per_class)
                    .map(|k| {
                        let ip = cdir.join(format!("sample_{k}.img.t"));
                        let mp = cdir.join(format!("sample_{k}.mask.t"));
                        let img = read_tensor(&ip)?;
                        let mask = read_tensor(&mp)?;
                        if img.shape() != [size, size, 1] || mask.shape() != [size, size] {
                            return Err(Error::TensorFormat {
                                path: ip,
                                reason: format!("expected {size}x{size} image and mask"),
                            });
                        }
                        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
                            return Err(Error::TensorFormat {
                                path: mp,
                                reason: "mask is not binary".into(),
                            });
                        }
                        Ok(Sample {
                            class_id: id,
                            size,
                            image: img.data().iter().map(|&v| v as f32).collect(),
                            mask: mask.data().iter().map(|&m| m as u8).collect(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, samples })
    }
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(cfg, seed)?;
    ds.write(dir)?;
    Ok(ds)
}

/// One query plus `K` supports of a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    pub query: Sample,
    pub support: Vec<Sample>,
    /// Sample indices within the class; the query comes first.
    pub indices: Vec<usize>,
}

impl Episode {
    pub fn k_shot(&self) -> usize {
        self.support.len()
    }
}

/// Uniform class from `pool`, then `K + 1` distinct samples without
/// replacement; the first becomes the query.
pub fn sample_episode(ds: &Dataset, pool: &[usize], k: usize, rng: &mut Rng) -> Result<Episode> {
    if pool.is_empty() {
        return Err(Error::InsufficientSamples("empty class pool".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let class_id = pool[rng.below(pool.len())];
    let class = ds
        .samples
        .get(class_id)
        .ok_or_else(|| Error::InsufficientSamples(format!("class {class_id} not in dataset")))?;
    if class.len() < k + 1 {
        return Err(Error::InsufficientSamples(format!(
            "class {class_id} has {} samples, a {k}-shot episode needs {}",
            class.len(),
            k + 1
        )));
    }
    // partial Fisher-Yates over the index list
    let mut idx: Vec<usize> = (0..class.len()).collect();
    for i in 0..=k {
        let j = i + rng.below(class.len() - i);
        idx.swap(i, j);
    }
    idx.truncate(k + 1);
    Ok(Episode {
        class_id,
        query: class[idx[0]].clone(),
        support: idx[1..].iter().map(|&i| class[i].clone()).collect(),
        indices: idx,
    })
}

/// Draws episodes until `accept` holds, up to a fixed number of attempts.
pub fn sample_episode_where(
    ds: &Dataset,
    pool: &[usize],
    k: usize,
    rng: &mut Rng,
    accept: impl Fn(&Episode) -> bool,
) -> Result<Episode> {
    for _ in 0..1000 {
        let ep = sample_episode(ds, pool, k, rng)?;
        if accept(&ep) {
            return Ok(ep);
        }
    }
    Err(Error::InsufficientSamples(
        "no acceptable episode after 1000 draws".into(),
    ))
}

/// Seed of the dataset stream for a run seed.
pub fn dataset_seed(run_seed: u64) -> u64 {
    stream_seed(run_seed, 0xDA7A)
}
