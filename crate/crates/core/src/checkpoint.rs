//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DAPTCKPT`, a little-endian `u64` header length,
//! a JSON header (model config, tokenizer hash, embedded tokenizer files and
//! the name/shape of every tensor), then every tensor's values as
//! little-endian `f64` in header order. Values round-trip bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};
use crate::tokenizer::Tokenizer;

const MAGIC: &[u8; 8] = b"DAPTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tokenizer_hash: String,
    tokenizer_vocab: Option<String>,
    tokenizer_merges: Option<String>,
    tensors: Vec<TensorEntry>,
}

/// A model together with the tokenizer it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tokenizer_hash: String,
    tokenizer_files: Option<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: Model, tokenizer: &Tokenizer) -> Self {
        Checkpoint {
            model,
            tokenizer_hash: tokenizer.fingerprint(),
            tokenizer_files: Some((
                tokenizer.vocab_file_contents(),
                tokenizer.merges_file_contents(),
            )),
        }
    }

    /// A checkpoint that records only the tokenizer hash.
    pub fn without_tokenizer(model: Model, tokenizer_hash: impl Into<String>) -> Self {
        Checkpoint {
            model,
            tokenizer_hash: tokenizer_hash.into(),
            tokenizer_files: None,
        }
    }

    /// The embedded tokenizer, verified against the recorded hash.
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let (vocab, merges) = self
            .tokenizer_files
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint does not embed its tokenizer".into()))?;
        let tok = Tokenizer::from_files(vocab, merges)?;
        self.check_tokenizer(&tok)?;
        Ok(tok)
    }

    pub fn check_tokenizer(&self, tokenizer: &Tokenizer) -> Result<()> {
        let actual = tokenizer.fingerprint();
        if actual != self.tokenizer_hash {
            return Err(Error::TokenizerMismatch {
                expected: self.tokenizer_hash.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        self.model.params.for_each(|name, m| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            });
            values.extend_from_slice(m.data());
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            tokenizer_vocab: self.tokenizer_files.as_ref().map(|f| f.0.clone()),
            tokenizer_merges: self.tokenizer_files.as_ref().map(|f| f.1.clone()),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        header.config.validate()?;

        // Build a template from the config so names and shapes are checked
        // against what the config implies, not just what the file claims.
        let mut params = Parameters::init(&header.config, 0);
        let expected: Vec<(String, usize, usize)> = {
            let mut v = Vec::new();
            params.for_each(|n, m| v.push((n.to_string(), m.rows(), m.cols())));
            v
        };
        if expected.len() != header.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, rows, cols), entry) in expected.iter().zip(&header.tensors) {
            if name != &entry.name || *rows != entry.rows || *cols != entry.cols {
                return Err(Error::Shape(format!(
                    "tensor {} is {}x{}, expected {name} {rows}x{cols}",
                    entry.name, entry.rows, entry.cols
                )));
            }
        }
        let total: usize = expected.iter().map(|(_, r, c)| r * c).sum();
        let body = &bytes[body_start..];
        if body.len() != total * 8 {
            return Err(Error::Format(format!(
                "expected {} bytes of tensor data, found {}",
                total * 8,
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(8);
        params.for_each_mut(|_, m| {
            for v in m.data_mut() {
                *v = f64::from_le_bytes(
                    chunks
                        .next()
                        .expect("length checked")
                        .try_into()
                        .expect("8 bytes"),
                );
            }
        });
        if !params.is_finite() {
            return Err(Error::Format(
                "checkpoint contains non-finite values".into(),
            ));
        }
        let tokenizer_files = match (header.tokenizer_vocab, header.tokenizer_merges) {
            (Some(v), Some(m)) => Some((v, m)),
            _ => None,
        };
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                params,
            },
            tokenizer_hash: header.tokenizer_hash,
            tokenizer_files,
        })
    }

    /// Writes via a temporary file and rename so readers never see a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
