//! Model checkpoints: a JSON sidecar describing the model and a flat
//! little-endian `f64` blob holding parameter values (and, for full
//! checkpoints, optimizer velocities).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::debias::CedBranches;
use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier, OutputKind};
use crate::nn::{ParamSource, Parameter};
use crate::rng::seeded;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointForm {
    /// Every branch plus optimizer state.
    Full,
    /// Inference branch only.
    Stripped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub form: CheckpointForm,
    pub arch: Architecture,
    pub in_channels: usize,
    pub num_classes: usize,
    pub output: OutputKind,
    /// Whether the biased branches are stored.
    pub ced: bool,
    pub epochs_trained: usize,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    pub has_velocity: bool,
    /// Canonical rendering of the training configuration.
    pub config: String,
}

/// A trained model in either of its training-time shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Single(Classifier),
    Ced(CedBranches),
}

impl TrainedModel {
    pub fn inference(&self) -> Classifier {
        match self {
            TrainedModel::Single(c) => c.strip_for_inference(),
            TrainedModel::Ced(c) => c.strip_for_inference(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TrainedModel::Single(c) => c.num_classes(),
            TrainedModel::Ced(c) => c.num_classes(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            TrainedModel::Single(c) => c.params_mut(),
            TrainedModel::Ced(c) => c.params_mut(),
        }
    }
}

fn blob_path(json: &Path, blob: &str) -> PathBuf {
    json.parent().unwrap_or(Path::new(".")).join(blob)
}

fn encode(params: &[&mut Parameter], velocity: bool) -> Vec<u8> {
    let mut out = Vec::new();
    for p in params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if velocity {
        for p in params {
            for v in p.velocity.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the JSON path.
pub fn save(
    model: &mut TrainedModel,
    cfg: &RunConfig,
    form: CheckpointForm,
    epochs_trained: usize,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stripped;
    let (target, ced, output): (&mut TrainedModel, bool, OutputKind) = match form {
        CheckpointForm::Full => {
            let ced = matches!(model, TrainedModel::Ced(_));
            let output = model.inference().output;
            (model, ced, output)
        }
        CheckpointForm::Stripped => {
            stripped = TrainedModel::Single(model.inference());
            let output = stripped.inference().output;
            (&mut stripped, false, output)
        }
    };
    let in_channels = target.inference().branch.in_channels();
    let num_classes = target.num_classes();
    let params = target.params_mut();
    let has_velocity = form == CheckpointForm::Full;
    let blob_name = format!("{stem}.bin");
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        form,
        arch: cfg.arch,
        in_channels,
        num_classes,
        output,
        ced,
        epochs_trained,
        blob: blob_name.clone(),
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        has_velocity,
        config: cfg.to_kv_string(),
    };
    let bytes = encode(&params, has_velocity);
    let bin = dir.join(&blob_name);
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

/// Reads a checkpoint written by [`save`], given its JSON path.
pub fn load(json_path: &Path) -> Result<(CheckpointMeta, TrainedModel)> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let bin = blob_path(json_path, &meta.blob);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;

    // Shapes come from the architecture; values come from the blob.
    let mut rng = seeded(0);
    let mut model = if meta.ced {
        let evidence = match meta.output {
            OutputKind::Evidential { evidence } => evidence,
            OutputKind::Softmax => {
                return Err(Error::CheckpointMismatch("CED checkpoint with softmax head".into()))
            }
        };
        TrainedModel::Ced(CedBranches::new(
            &meta.arch,
            meta.in_channels,
            meta.num_classes,
            evidence,
            &mut rng,
        )?)
    } else {
        TrainedModel::Single(Classifier::new(
            &meta.arch,
            meta.in_channels,
            meta.num_classes,
            meta.output,
            &mut rng,
        )?)
    };
    let mut params = model.params_mut();
    if params.len() != meta.params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} parameters, file lists {}",
            params.len(),
            meta.params.len()
        )));
    }
    for (p, e) in params.iter().zip(&meta.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {} {:?} does not match file entry {} {:?}",
                p.name,
                p.value.shape(),
                e.name,
                e.shape
            )));
        }
    }
    let total: usize = params.iter().map(|p| p.value.len()).sum();
    let expected = total * 8 * if meta.has_velocity { 2 } else { 1 };
    if bytes.len() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "blob has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut words = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v = words.next().expect("length checked");
        }
    }
    for p in params.iter_mut() {
        if meta.has_velocity {
            for v in p.velocity.data_mut() {
                *v = words.next().expect("length checked");
            }
        } else {
            p.velocity.fill(0.0);
        }
        p.zero_grad();
    }
    drop(params);
    Ok((meta, model))
}
