//! Fold checkpoints: a `HDGL1` magic line followed by a JSON body holding the
//! config, split membership, RNG state and every parameter тensor.

use std::fs;
use std::path::Path;

use hdgl_autodiff::{Matrix, ParamStore};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::training::model::HdglModel;
use crate::training::TrainConfig;

pub const MAGIC: &str = "HDGL1";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub n_rois: usize,
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub params: Vec<ParamBlob>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        cfg: &TrainConfig,
        n_rois: usize,
        fold: usize,
        train_ids: Vec<String>,
        test_ids: Vec<String>,
        rng_seed: u64,
        rng_word_pos: u128,
        store: &ParamStore,
    ) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let value = store.value(id);
                ParamBlob {
                    name: store.name(id).to_string(),
                    rows: value.dim().0,
                    cols: value.dim().1,
                    data: value.iter().cloned().collect(),
                }
            })
            .collect();
        Checkpoint {
            config: cfg.clone(),
            n_rois,
            fold,
            train_ids,
            test_ids,
            rng_seed,
            rng_word_pos,
            params,
        }
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let body = serde_json::to_string(ck)
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
    fs::write(path, format!("{MAGIC}\n{body}\n"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let Some((magic, body)) = text.split_once('\n') else {
        return Err(Error::Checkpoint("missing magic header".into()));
    };
    if magic.trim() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            magic.trim()
        )));
    }
    serde_json::from_str(body.trim())
        .map_err(|e| Error::Checkpoint(format!("malformed body: {e}")))
}

/// Rebuild the model a checkpoint describes and load its parameters.
pub fn restore_model(ck: &Checkpoint) -> Result<HdglModel> {
    let mut model = HdglModel::build(&ck.config, ck.n_rois, 0)?;
    if model.store.len() != ck.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            model.store.len(),
            ck.params.len()
        )));
    }
    for (id, blob) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&ck.params) {
        if model.store.name(id) != blob.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: {} vs {}",
                model.store.name(id),
                blob.name
            )));
        }
        let shape = model.store.value(id).dim();
        if shape != (blob.rows, blob.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, checkpoint stores {}x{}",
                blob.name, shape, blob.rows, blob.cols
            )));
        }
        *model.store.value_mut(id) =
            Array2::from_shape_vec(shape, blob.data.clone()).expect("blob shape");
    }
    Ok(model)
}

/// Assert the checkpoint fits a cohort's ROI count.
pub fn check_compatibility(ck: &Checkpoint, n_rois: usize) -> Result<()> {
    if ck.n_rois != n_rois {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained on {} ROIs, data has {n_rois}",
            ck.n_rois
        )));
    }
    Ok(())
}
