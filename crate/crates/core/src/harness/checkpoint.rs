//! Checkpoint directories: one `.dna` file per parameter and Adam moment,
//! plus `manifest.json` carrying the step, config text and hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::harness::train::Adam;
use crate::model::Mpae;
use crate::tensors_io::{load_array, save_array, DenseArray, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub config_hash: String,
    pub config: String,
    pub raw_dim: usize,
    pub adam_t: u64,
    pub params: Vec<ParamEntry>,
}

fn write_mat(path: &Path, m: &Mat) -> Result<()> {
    save_array(path, &DenseArray::from_f64(vec![m.rows, m.cols], m.data.clone())?)
}

fn read_mat(path: &Path, shape: [usize; 2]) -> Result<Mat> {
    let arr = load_array(path)?;
    if arr.dims() != shape {
        return Err(Error::validation(format!("{} has dims {:?}, expected {:?}", path.display(), arr.dims(), shape)));
    }
    Ok(Mat::new(shape[0], shape[1], arr.to_f64_vec()?))
}

pub fn save_checkpoint(dir: &Path, model: &Mpae, adam: &Adam, step: usize) -> Result<()> {
    for sub in ["params", "adam"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let names = model.store.names();
    let mut params = Vec::with_capacity(names.len());
    for (i, (name, value)) in names.iter().zip(model.store.values()).enumerate() {
        write_mat(&dir.join("params").join(format!("{name}.dna")), value)?;
        write_mat(&dir.join("adam").join(format!("{name}.m.dna")), &adam.m[i])?;
        write_mat(&dir.join("adam").join(format!("{name}.v.dna")), &adam.v[i])?;
        params.push(ParamEntry { name: name.clone(), shape: [value.rows, value.cols] });
    }
    let manifest = Manifest {
        step,
        config_hash: model.config.hash(),
        config: model.config.to_text(),
        raw_dim: model.raw_dim,
        adam_t: adam.t,
        params,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads model, optimizer state and step. With `expected`, model-shape keys
/// must agree (otherwise [`Error::CheckpointMismatch`] lists them) and the
/// returned model and optimizer adopt the expected run settings.
pub fn load_checkpoint(dir: &Path, expected: Option<&RunConfig>) -> Result<(Mpae, Adam, usize)> {
    let manifest = read_manifest(dir)?;
    let stored = RunConfig::parse(&manifest.config)?;
    let config = match expected {
        Some(exp) => {
            let keys = stored.model_differences(exp);
            if !keys.is_empty() {
                return Err(Error::CheckpointMismatch { keys });
            }
            exp.clone()
        }
        None => stored,
    };
    let mut model = Mpae::new(&config, manifest.raw_dim)?;
    let mut adam = Adam::new(&config, model.store.values());
    adam.t = manifest.adam_t;
    let expected_names: Vec<String> = model.store.names().to_vec();
    let stored_names: Vec<String> = manifest.params.iter().map(|p| p.name.clone()).collect();
    if expected_names != stored_names {
        return Err(Error::CheckpointMismatch { keys: vec!["parameters".into()] });
    }
    for (i, entry) in manifest.params.iter().enumerate() {
        let current = model.store.values()[i].shape();
        if (current.0, current.1) != (entry.shape[0], entry.shape[1]) {
            return Err(Error::CheckpointMismatch { keys: vec![entry.name.clone()] });
        }
        model.store.values_mut()[i] = read_mat(&dir.join("params").join(format!("{}.dna", entry.name)), entry.shape)?;
        adam.m[i] = read_mat(&dir.join("adam").join(format!("{}.m.dna", entry.name)), entry.shape)?;
        adam.v[i] = read_mat(&dir.join("adam").join(format!("{}.v.dna", entry.name)), entry.shape)?;
    }
    Ok((model, adam, manifest.step))
}

/// Model only, for inference.
pub fn load_model(dir: &Path, expected: Option<&RunConfig>) -> Result<Mpae> {
    load_checkpoint(dir, expected).map(|(m, _, _)| m)
}
