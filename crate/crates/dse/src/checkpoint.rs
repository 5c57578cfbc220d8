//! On-disk layout shared by generator and encoder checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and
//! `params.safetensors`. The manifest records the network kind, family and
//! full architecture spec; the safetensors file holds one array per
//! parameter under dotted names (`blocks.0.conv1.weight`, ...), with
//! non-trainable state prefixed `buffer.`. Every file is written to a
//! temporary name and renamed into place.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::latent::Family;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest<S> {
    pub format_version: u32,
    /// `generator` or `encoder`.
    pub kind: String,
    pub family: Family,
    pub spec: S,
    pub params_file: String,
    pub checksum: String,
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| DseError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| DseError::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn save<S: Serialize>(dir: &Path, kind: &str, family: Family, spec: &S, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
    let params = dir.join(PARAMS_FILE);
    let tmp = tmp_path(&params);
    store.save(&tmp)?;
    std::fs::rename(&tmp, &params).map_err(|e| DseError::io(&params, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        family,
        spec,
        params_file: PARAMS_FILE.to_string(),
        checksum: store.checksum()?,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| DseError::io(dir, e))?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

/// Reads and checks a manifest, returning it with the parameter file path.
pub fn load_manifest<S: DeserializeOwned>(
    dir: &Path,
    kind: &str,
    family: Family,
) -> Result<(Manifest<S>, PathBuf)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| DseError::io(&path, e))?;
    let manifest: Manifest<S> =
        serde_json::from_str(&text).map_err(|e| DseError::io(&path, format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DseError::Config(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    if manifest.kind != kind {
        return Err(DseError::Config(format!(
            "{}: checkpoint holds a {}, expected a {kind}",
            path.display(),
            manifest.kind
        )));
    }
    if manifest.family != family {
        return Err(DseError::Config(format!(
            "{}: checkpoint family is {} but {} was requested",
            path.display(),
            manifest.family,
            family
        )));
    }
    let params = dir.join(&manifest.params_file);
    if !params.is_file() {
        return Err(DseError::io(&params, "parameter file missing"));
    }
    Ok((manifest, params))
}
