//! Checkpoint file: one JSON header line, then the parameters as
//! little-endian `f64` in segment order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, Segment, VelocityNet};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Unspecified,
    /// Flow-matching teacher (standardised data space).
    Teacher,
    /// Distilled student (flow-matching parameterisation, used through the TrigFlow adapter).
    Student,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub sigma_d: Option<f64>,
    pub iters: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub segments: Vec<Segment>,
    pub c_noise_scale: f64,
    pub qk_norm: bool,
    pub config: NetConfig,
    #[serde(default)]
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint<W: Write>(net: &VelocityNet, meta: &CheckpointMeta, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        segments: net.layout().segments().to_vec(),
        c_noise_scale: net.config().c_noise_scale,
        qk_norm: net.config().qk_norm,
        config: net.config().clone(),
        meta: meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(VelocityNet, CheckpointMeta)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema version {}", header.schema_version)));
    }
    if header.config.c_noise_scale != header.c_noise_scale || header.config.qk_norm != header.qk_norm {
        return Err(Error::Checkpoint("header fields disagree with embedded config".into()));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("body length {} is not a multiple of 8", body.len())));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let net = VelocityNet::from_params(header.config, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if net.layout().segments() != header.segments.as_slice() {
        return Err(Error::Checkpoint("segment table does not match the configured layout".into()));
    }
    Ok((net, header.meta))
}

pub fn save_checkpoint(net: &VelocityNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(net, meta, BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<(VelocityNet, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?))
}
