//! Checkpoint directories: one tensor file per parameter plus `manifest.json`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::{hash_file, Manifest};
use crate::numcore::io::{read_tensor, write_tensor};

use super::network::Model;
use super::train::TrainOutcome;

pub const MANIFEST: &str = "manifest.json";

fn param_file(name: &str) -> String {
    format!("{name}.t")
}

/// Writes weights and a manifest carrying the config, seed, and history.
pub fn save(outcome: &TrainOutcome, dir: &Path) -> Result<Manifest> {
    let m = &outcome.model;
    for (_, p) in m.params.iter() {
        write_tensor(&dir.join(param_file(&p.name)), &p.value)?;
    }
    let mut manifest = Manifest::new("train", &m.config);
    manifest.extra = serde_json::json!({
        "fold": m.config.train.fold,
        "k_shot": m.config.train.k_shot,
        "epochs": outcome.history.len(),
        "initial_probe_recon": outcome.initial_probe_recon,
        "history": outcome.history,
    });
    manifest.hash_dir(dir)?;
    manifest.write(&dir.join(MANIFEST))?;
    Ok(manifest)
}

/// Rebuilds the model described by a checkpoint, verifying file hashes
/// and parameter shapes.
pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::Checkpoint(format!("{} has no {MANIFEST}", dir.display())));
    }
    let manifest = Manifest::read(&mpath)?;
    let cfg = manifest.run_config()?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let mut model = Model::new(&cfg)?;
    let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let file = param_file(&name);
        let path = dir.join(&file);
        let expected = manifest
            .artifacts
            .get(&file)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lists no `{file}`")))?;
        if &hash_file(&path)? != expected {
            return Err(Error::Checkpoint(format!("`{file}` does not match its recorded hash")));
        }
        let t = read_tensor(&path)?;
        let id = model.params.id(&name).expect("name from same model");
        let p = model.params.get_mut(id);
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, config implies {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok((model, manifest))
}
