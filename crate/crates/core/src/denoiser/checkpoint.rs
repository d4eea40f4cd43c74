//! `NVCK` checkpoints: magic, little-endian u64 header length, JSON header,
//! then the raw little-endian f32 payload. Tensor offsets in the header are
//! byte offsets relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserConfig, DenoiserParams};
use crate::diffusion::ScheduleSpec;
use crate::grid::NormStats;
use crate::nn::{ParamSet, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVCK";
const FORMAT_VERSION: u32 = 1;

/// Metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// What the tensors hold, e.g. `"params"`, `"ema"`, `"adam_m"`.
    pub role: String,
    /// Optimizer steps taken when the file was written.
    pub step: u64,
    pub schedule: Option<ScheduleSpec>,
    pub norm: Option<NormStats>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: DenoiserConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &DenoiserParams, config: &DenoiserConfig, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    Denoiser::new(config.clone())?.check_params(params)?;
    if !params.all_finite() {
        return Err(Error::Numerical {
            step: meta.step as usize,
            message: "refusing to save non-finite parameters".into(),
        });
    }
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let nbytes = 4 * t.len() as u64;
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        config: config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DenoiserParams, DenoiserConfig, CheckpointMeta)> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt("not an NVCK checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let payload_start = 12u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| fmt(format!("header length {hlen} runs past end of file")))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| fmt(format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported checkpoint version {}", header.version)));
    }
    let payload = &bytes[payload_start..];
    let model = Denoiser::new(header.config.clone()).map_err(|e| fmt(format!("header config: {e}")))?;
    let specs = model.layout().specs();
    if specs.len() != header.tensors.len() {
        return Err(fmt(format!(
            "header lists {} tensors, config implies {}",
            header.tensors.len(),
            specs.len()
        )));
    }
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    let mut end = 0u64;
    for (spec, e) in specs.iter().zip(&header.tensors) {
        if spec.name != e.name || spec.shape != e.shape {
            return Err(fmt(format!(
                "tensor {} {:?} disagrees with config ({} {:?})",
                e.name, e.shape, spec.name, spec.shape
            )));
        }
        let count: usize = e.shape.iter().product();
        if e.nbytes != 4 * count as u64 {
            return Err(fmt(format!("tensor {} declares {} bytes for {count} values", e.name, e.nbytes)));
        }
        let stop = e
            .offset
            .checked_add(e.nbytes)
            .filter(|&s| s <= payload.len() as u64)
            .ok_or_else(|| fmt(format!("tensor {} extends past end of file", e.name)))?;
        let raw = &payload[e.offset as usize..stop as usize];
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fmt(format!("tensor {} holds non-finite values", e.name)));
        }
        end = end.max(stop);
        names.push(e.name.clone());
        tensors.push(Tensor::from_vec(&e.shape, data));
    }
    if end != payload.len() as u64 {
        return Err(fmt(format!("{} unreferenced payload bytes", payload.len() as u64 - end)));
    }
    Ok((ParamSet::from_parts(names, tensors), header.config, header.meta))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &DenoiserParams,
    config: &DenoiserConfig,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DenoiserParams, DenoiserConfig, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load and require the stored configuration to equal `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &DenoiserConfig,
) -> Result<(DenoiserParams, CheckpointMeta)> {
    let (params, config, meta) = load_checkpoint(path)?;
    if &config != expected {
        return Err(Error::Config(format!(
            "checkpoint config {config:?} does not match requested {expected:?}"
        )));
    }
    Ok((params, meta))
}
