//! Parameter checkpoints: a tar archive holding `manifest.json` and one
//! little-endian `f32` file per tensor.
//!
//! Parameters are kept in `f64` in memory and rounded to `f32` on save, so
//! saving a loaded checkpoint reproduces the archive byte for byte.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_ae::{AEConfig, AEParams};
use crate::params::ParamSet;
use crate::te_maml::{LearnerConfig, MetaLearnerParams};
use crate::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Autoencoder,
    MetaLearner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: Kind,
    pub seed: u64,
    /// Model configuration, shaped by `kind`.
    pub config: serde_json::Value,
    /// Input widths of an autoencoder (`d_span`, `d_log`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dims: Option<[usize; 2]>,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Round every entry through `f32`, matching what a checkpoint stores.
pub fn round_to_f32(params: &mut ParamSet) {
    for (_, m) in params.iter_mut() {
        m.mapv_inplace(|v| v as f32 as f64);
    }
}

fn append(builder: &mut tar::Builder<impl Write>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)
}

/// Serialize `tensors` and a manifest into an in-memory archive.
pub fn to_bytes(kind: Kind, seed: u64, config: serde_json::Value, input_dims: Option<[usize; 2]>, tensors: &ParamSet) -> Result<Vec<u8>> {
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, m)| TensorEntry {
            name: name.clone(),
            shape: [m.nrows(), m.ncols()],
            file: format!("tensors/{name}.bin"),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        seed,
        config,
        input_dims,
        tensors: entries,
    };
    let io = |e| Error::Checkpoint(format!("writing archive: {e}"));
    let mut builder = tar::Builder::new(Vec::new());
    append(&mut builder, MANIFEST, &serde_json::to_vec_pretty(&manifest)?).map_err(io)?;
    for (entry, (_, m)) in manifest.tensors.iter().zip(tensors.iter()) {
        let bytes: Vec<u8> = m.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        append(&mut builder, &entry.file, &bytes).map_err(io)?;
    }
    builder.into_inner().map_err(io)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Manifest, ParamSet)> {
    let mut archive = tar::Archive::new(bytes);
    let mut manifest: Option<Manifest> = None;
    let mut files = std::collections::BTreeMap::new();
    for entry in archive.entries().map_err(|e| ckpt_err(path, e))? {
        let mut entry = entry.map_err(|e| ckpt_err(path, e))?;
        let name = entry.path().map_err(|e| ckpt_err(path, e))?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| ckpt_err(path, e))?;
        if name == MANIFEST {
            manifest = Some(serde_json::from_slice(&data).map_err(|e| ckpt_err(path, format!("bad manifest: {e}")))?);
        } else {
            files.insert(name, data);
        }
    }
    let manifest = manifest.ok_or_else(|| ckpt_err(path, "missing manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {}", manifest.format_version)));
    }
    let mut params = ParamSet::new();
    for t in &manifest.tensors {
        let data = files
            .get(&t.file)
            .ok_or_else(|| ckpt_err(path, format!("missing tensor file {}", t.file)))?;
        let [r, c] = t.shape;
        if data.len() != r * c * 4 {
            return Err(ckpt_err(path, format!("tensor {} has {} bytes, expected {}", t.name, data.len(), r * c * 4)));
        }
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(t.name.clone(), Matrix::from_shape_vec((r, c), values).expect("length checked"));
    }
    Ok((manifest, params))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, ParamSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

fn expect_kind(m: &Manifest, kind: Kind, path: &Path) -> Result<()> {
    if m.kind != kind {
        return Err(ckpt_err(path, format!("expected a {kind:?} checkpoint, found {:?}", m.kind)));
    }
    Ok(())
}

pub fn ae_bytes(params: &AEParams) -> Result<Vec<u8>> {
    to_bytes(
        Kind::Autoencoder,
        params.config.seed,
        serde_json::to_value(&params.config)?,
        Some([params.d_span, params.d_log]),
        &params.tensors,
    )
}

pub fn save_ae(path: &Path, params: &AEParams) -> Result<()> {
    write_file(path, &ae_bytes(params)?)
}

pub fn load_ae(path: &Path) -> Result<AEParams> {
    let (m, tensors) = load(path)?;
    expect_kind(&m, Kind::Autoencoder, path)?;
    let config: AEConfig = serde_json::from_value(m.config).map_err(|e| ckpt_err(path, format!("bad config: {e}")))?;
    let [d_span, d_log] = m.input_dims.ok_or_else(|| ckpt_err(path, "missing input_dims"))?;
    let reference = AEParams::init(&config, d_span, d_log)?;
    if !reference.tensors.same_shape(&tensors) {
        return Err(ckpt_err(path, "tensor names or shapes do not match the configuration"));
    }
    Ok(AEParams {
        config,
        d_span,
        d_log,
        tensors,
    })
}

pub fn meta_bytes(params: &MetaLearnerParams) -> Result<Vec<u8>> {
    to_bytes(
        Kind::MetaLearner,
        params.config.seed,
        serde_json::to_value(&params.config)?,
        None,
        &params.tensors,
    )
}

pub fn save_meta(path: &Path, params: &MetaLearnerParams) -> Result<()> {
    write_file(path, &meta_bytes(params)?)
}

pub fn load_meta(path: &Path) -> Result<MetaLearnerParams> {
    let (m, tensors) = load(path)?;
    expect_kind(&m, Kind::MetaLearner, path)?;
    let config: LearnerConfig = serde_json::from_value(m.config).map_err(|e| ckpt_err(path, format!("bad config: {e}")))?;
    let reference = MetaLearnerParams::init(&config)?;
    if !reference.tensors.same_shape(&tensors) {
        return Err(ckpt_err(path, "tensor names or shapes do not match the configuration"));
    }
    Ok(reference.with_tensors(tensors))
}
