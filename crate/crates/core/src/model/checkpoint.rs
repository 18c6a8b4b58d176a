use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, RankModel};
use crate::dataset::{read_matrix_csv, write_matrix_csv, MANIFEST};
use crate::error::{Error, Result};

/// Contents of a checkpoint directory's `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    /// Parameter file stems in load order.
    pub params: Vec<String>,
}

pub fn save_checkpoint(model: &RankModel, epoch: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let info = model.param_info();
    for ((name, _), p) in info.iter().zip(model.params()) {
        write_matrix_csv(p, &dir.join(format!("{name}.csv")))?;
    }
    let manifest = Checkpoint {
        config: model.config.clone(),
        epoch,
        params: info.into_iter().map(|(n, _)| n).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint and the epoch it was taken at.
pub fn load_checkpoint(dir: &Path) -> Result<(RankModel, usize)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, "checkpoint", e))?;
    let mut model = RankModel::init(manifest.config.clone())?;
    let expected: Vec<String> = model.param_info().into_iter().map(|(n, _)| n).collect();
    if expected != manifest.params {
        return Err(Error::parse(
            &path,
            "params",
            "parameter list does not match the architecture",
        ));
    }
    for (name, slot) in expected.iter().zip(model.params_mut()) {
        let file = dir.join(format!("{name}.csv"));
        let m = read_matrix_csv(&file)?;
        if m.shape() != slot.shape() {
            return Err(Error::parse(
                &file,
                "shape",
                format!("expected {:?}, found {:?}", slot.shape(), m.shape()),
            ));
        }
        *slot = m;
    }
    Ok((model, manifest.epoch))
}
