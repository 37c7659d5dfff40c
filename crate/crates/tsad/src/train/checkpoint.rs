//! Checkpoint file format:
//!
//! ```text
//! magic "TSAD" | version u32 LE | header_len u32 LE | header JSON
//! | raw little-endian arrays | crc32 u32 LE (over everything before it)
//! ```
//!
//! The header carries the config snapshot, the stage provenance chain, the
//! training step, the RNG state, and a parameter table (name, dtype, shape,
//! byte offset into the array section). Optimizer moments are stored as
//! ordinary arrays under the reserved `optim.` prefix so save -> load ->
//! save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::Params;

pub const MAGIC: &[u8; 4] = b"TSAD";
pub const FORMAT_VERSION: u32 = 1;

/// IEEE CRC-32 (reflected 0xEDB88320), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut c = 0xFFFFFFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFFFFFF
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    provenance: Vec<String>,
    step: u64,
    optimizer_step: u64,
    rng: Option<RngState>,
    arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint: named model parameters, optimizer moments, config
/// snapshot and provenance chain.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    /// Training stages this parameter set has passed through, in order.
    pub provenance: Vec<String>,
    pub step: u64,
    pub optimizer_step: u64,
    pub rng: Option<RngState>,
    pub params: Params<f32>,
    /// Optimizer moment arrays, keyed `m/<param>` or `v/<param>`.
    pub moments: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn stage(&self) -> Option<&str> {
        self.provenance.last().map(|s| s.as_str())
    }
}

fn push_arrays<S: Scalar>(
    section: &mut Vec<u8>,
    table: &mut Vec<ArrayEntry>,
    prefix: &str,
    arrays: &BTreeMap<String, Tensor<S>>,
) {
    for (name, tensor) in arrays {
        table.push(ArrayEntry {
            name: format!("{prefix}{name}"),
            dtype: S::DTYPE,
            shape: tensor.shape().to_vec(),
            offset: section.len() as u64,
        });
        for &v in tensor.data() {
            match S::DTYPE {
                Dtype::F32 => section.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
                Dtype::F64 => section.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
    }
}

fn assemble(header: &Header, section: &[u8]) -> Result<Vec<u8>> {
    let header_bytes =
        serde_json::to_vec(header).map_err(|e| Error::format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + section.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(section);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut section = Vec::new();
    let mut table = Vec::new();
    push_arrays(&mut section, &mut table, "", &ckpt.params);
    push_arrays(&mut section, &mut table, "optim.", &ckpt.moments);
    let header = Header {
        config: ckpt.config.clone(),
        provenance: ckpt.provenance.clone(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer_step,
        rng: ckpt.rng.clone(),
        arrays: table,
    };
    let bytes = assemble(&header, &section)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Write a 64-bit parameter dump in the same container (gradient-check
/// tooling); a 32-bit trainer refuses to load it.
pub fn save_f64_dump(params: &Params<f64>, path: &Path) -> Result<()> {
    let mut section = Vec::new();
    let mut table = Vec::new();
    push_arrays(&mut section, &mut table, "", params);
    let header = Header {
        config: serde_json::Value::Null,
        provenance: vec!["grad-check".into()],
        step: 0,
        optimizer_step: 0,
        rng: None,
        arrays: table,
    };
    let bytes = assemble(&header, &section)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    if bytes.len() < 16 {
        return Err(Error::format("checkpoint too small to be valid"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x} (truncated or corrupt file)"
        )));
    }
    if &body[..4] != MAGIC {
        return Err(Error::format("bad magic: not a checkpoint file"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > body.len() {
        return Err(Error::format("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[12..12 + header_len])
        .map_err(|e| Error::format(format!("header: {e}")))?;
    let section = &body[12 + header_len..];

    let mut params = Params::new();
    let mut moments = BTreeMap::new();
    for entry in &header.arrays {
        let numel: usize = entry.shape.iter().product();
        match entry.dtype {
            Dtype::F64 => {
                return Err(Error::format(format!(
                    "array `{}` is f64; this trainer runs 32-bit parameters \
                     (64-bit dumps are for gradient checking only)",
                    entry.name
                )));
            }
            Dtype::F32 => {
                let start = entry.offset as usize;
                let end = start + numel * 4;
                if end > section.len() {
                    return Err(Error::format(format!(
                        "array `{}` extends past the data section",
                        entry.name
                    )));
                }
                let data: Vec<f32> = section[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let tensor = Tensor::new(entry.shape.clone(), data)?;
                if let Some(rest) = entry.name.strip_prefix("optim.") {
                    moments.insert(rest.to_string(), tensor);
                } else {
                    params.insert(entry.name.clone(), tensor);
                }
            }
        }
    }
    Ok(Checkpoint {
        config: header.config,
        provenance: header.provenance,
        step: header.step,
        optimizer_step: header.optimizer_step,
        rng: header.rng,
        params,
        moments,
    })
}
