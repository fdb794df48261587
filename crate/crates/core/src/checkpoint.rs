//! Model checkpoints: magic, format version, JSON header, raw little-endian weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::pretext::PretextConfig;

const MAGIC: &[u8; 8] = b"PCTXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Pretext geometry used for each scale during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextScales {
    pub small: PretextConfig,
    pub large: PretextConfig,
}

impl Default for PretextScales {
    fn default() -> Self {
        Self {
            small: PretextConfig::with_patch_size(32),
            large: PretextConfig::with_patch_size(64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub pretext: PretextScales,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    encoder: EncoderConfig,
    num_classes: usize,
    pretext: PretextScales,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, len: usize) -> std::io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Reads `magic`, a u32 version and a length-prefixed JSON header.
pub(crate) fn read_preamble(r: &mut impl Read, magic: &[u8; 8], what: &str) -> std::io::Result<Option<(u32, Vec<u8>)>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Ok(None);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{what} header length {len} is implausible"),
        ));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    Ok(Some((version, header)))
}

pub(crate) fn write_preamble(w: &mut impl Write, magic: &[u8; 8], version: u32, header: &[u8]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            encoder: self.model.config.clone(),
            num_classes: self.model.num_classes(),
            pretext: self.pretext,
            tensors: self
                .model
                .parameter_manifest()
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut result = write_preamble(&mut w, MAGIC, CHECKPOINT_VERSION, &json);
        self.model.visit_params(&mut |_, p| {
            if result.is_ok() {
                result = write_f32s(&mut w, &p.value);
            }
        });
        result.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let (version, json) = read_preamble(&mut r, MAGIC, "checkpoint")
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::Format(format!("{} is not a checkpoint file", path.display())))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header: Header = serde_json::from_slice(&json)?;
        let mut model = Model::<f32>::new(header.encoder, header.num_classes)?;
        let manifest = model.parameter_manifest();
        if manifest.len() != header.tensors.len()
            || manifest
                .iter()
                .zip(&header.tensors)
                .any(|((n, s), t)| *n != t.name || *s != t.shape)
        {
            return Err(Error::Format(
                "checkpoint tensor manifest does not match the encoder configuration".into(),
            ));
        }
        let mut result = Ok(());
        model.visit_params_mut(&mut |_, p| {
            if result.is_ok() {
                match read_f32s(&mut r, p.len()) {
                    Ok(v) => p.value = v,
                    Err(e) => result = Err(e),
                }
            }
        });
        result.map_err(|e| Error::io(path, e))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint weights".into()));
        }
        Ok(Checkpoint {
            model,
            pretext: header.pretext,
        })
    }
}
