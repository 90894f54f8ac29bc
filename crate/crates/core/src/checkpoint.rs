//! Parameter checkpoints.
//!
//! A checkpoint is two files:
//!
//! * `<name>.safetensors` holds every named array as a 2-D little-endian
//!   `F32` tensor;
//! * `<name>.json` is a sidecar with the format version, a `kind` string
//!   (`vit`, `denoiser`), an optional tag (`teacher`, `student`), the model
//!   config and the ordered list of array names.
//!
//! Values are stored in single precision; training state lives in `f64`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub tag: Option<String>,
    pub config: serde_json::Value,
    pub arrays: Vec<String>,
}

/// Path of the JSON sidecar that accompanies `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save(path: &Path, params: &ParamSet, kind: &str, tag: Option<&str>, config: serde_json::Value) -> Result<()> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, m)| {
            let bytes = m
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            (name.to_string(), vec![m.rows(), m.cols()], bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| checkpoint_err(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, &None, path).map_err(|e| checkpoint_err(path, e.to_string()))?;

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        tag: tag.map(str::to_string),
        config,
        arrays: params.names().to_vec(),
    };
    let text = serde_json::to_string_pretty(&sidecar)?;
    let side = sidecar_path(path);
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

pub fn load(path: &Path) -> Result<(ParamSet, Sidecar)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(checkpoint_err(
            path,
            format!("unsupported format version {}", sidecar.format_version),
        ));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| checkpoint_err(path, e.to_string()))?;
    let mut params = ParamSet::new();
    for name in &sidecar.arrays {
        let view = tensors
            .tensor(name)
            .map_err(|_| checkpoint_err(path, format!("missing array `{name}`")))?;
        if view.dtype() != Dtype::F32 || view.shape().len() != 2 {
            return Err(checkpoint_err(path, format!("array `{name}` is not a 2-D f32 tensor")));
        }
        let (rows, cols) = (view.shape()[0], view.shape()[1]);
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(name.clone(), Matrix::from_vec(rows, cols, data));
    }
    Ok((params, sidecar))
}

/// Checks that `loaded` has exactly the arrays and shapes of `expected`, and
/// returns it reordered to match.
pub fn conform(path: &Path, loaded: ParamSet, expected: &ParamSet) -> Result<ParamSet> {
    let mut by_name: HashMap<&str, &Matrix> = loaded.iter().collect();
    let mut out = ParamSet::new();
    for (name, want) in expected.iter() {
        let got = by_name
            .remove(name)
            .ok_or_else(|| checkpoint_err(path, format!("missing array `{name}`")))?;
        if got.shape() != want.shape() {
            return Err(checkpoint_err(
                path,
                format!(
                    "array `{name}` has shape {:?}, config requires {:?}",
                    got.shape(),
                    want.shape()
                ),
            ));
        }
        if !got.is_finite() {
            return Err(checkpoint_err(path, format!("array `{name}` has non-finite values")));
        }
        out.insert(name, got.clone());
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(checkpoint_err(path, format!("unexpected array `{extra}`")));
    }
    Ok(out)
}

fn checkpoint_err(path: &Path, message: String) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    }
}
