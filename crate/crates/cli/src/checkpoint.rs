//! Self-describing checkpoint files.
//!
//! ```text
//! DEME-CHECKPOINT\n
//! <one line of JSON header>\n
//! <parameter data: little-endian f64, in header order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use deme_core::denoiser::DenoiserConfig;
use deme_core::diffusion::ScheduleConfig;
use deme_core::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &str = "DEME-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    /// Ids of the checkpoints this one was derived from.
    pub parents: Vec<String>,
    pub range_index: Option<usize>,
    pub num_ranges: Option<usize>,
    pub p: Option<f64>,
    pub merge_weights: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub id: String,
    pub architecture: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub provenance: Provenance,
    /// Seconds since the Unix epoch; honours `SOURCE_DATE_EPOCH`.
    pub created: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub provenance: Provenance,
    pub created: u64,
    pub params: ParamSet,
}

/// Content id: a digest of names, shapes and parameter bits.
pub fn params_id(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn corrupt(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

impl Checkpoint {
    pub fn new(architecture: DenoiserConfig, schedule: ScheduleConfig, provenance: Provenance, params: ParamSet) -> Self {
        Self { architecture, schedule, provenance, created: now(), params }
    }

    pub fn id(&self) -> String {
        params_id(&self.params)
    }

    pub fn header(&self) -> Header {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            id: self.id(),
            architecture: self.architecture.clone(),
            schedule: self.schedule,
            provenance: self.provenance.clone(),
            created: self.created,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header()).expect("header is serializable");
        let mut out = Vec::with_capacity(header.len() + 32 + 8 * self.params.total_dim());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
        if line.trim_end() != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        line.clear();
        r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
        let version: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        match version.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(corrupt(path, format!("format_version {v} is not supported (expected {FORMAT_VERSION})"))),
            None => return Err(corrupt(path, "header has no format_version")),
        }
        let header: Header = serde_json::from_value(version).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|e| CliError::io(path, e))?;
        if body.len() % 8 != 0 {
            return Err(corrupt(path, "truncated data section"));
        }
        let values: Vec<f64> =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let mut params = ParamSet::new();
        let mut expected = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(corrupt(path, format!("tensor `{}` lies outside the data section", e.name)));
            }
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?);
            expected += n;
        }
        if expected != values.len() {
            return Err(corrupt(path, "data section has trailing values"));
        }
        header.architecture.check_params(&params).map_err(|e| corrupt(path, e.to_string()))?;
        let ckpt = Self {
            architecture: header.architecture,
            schedule: header.schedule,
            provenance: header.provenance,
            created: header.created,
            params,
        };
        if ckpt.id() != header.id {
            return Err(corrupt(path, "content does not match the recorded id"));
        }
        Ok(ckpt)
    }
}
