//! Language tokens: a deterministic hashed stub encoder and a loader for
//! precomputed per-token embeddings.
//!
//! Embedding file layout: one line of JSON
//! `{"text": ..., "tokens": L, "dim": D, "dtype": "f32" | "f64"}`, a newline,
//! then `L * D` little-endian reals, token-major.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Rows of the stub's hashed embedding table.
pub const STUB_VOCAB: u64 = 4096;
pub const STUB_SEED: u64 = 0x5eed_1a96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageSource {
    Stub,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageTokens {
    /// `len * dim`, token-major
    pub embeddings: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    pub source: LanguageSource,
}

impl LanguageTokens {
    pub fn empty(dim: usize) -> Self {
        LanguageTokens {
            embeddings: Vec::new(),
            len: 0,
            dim,
            source: LanguageSource::Stub,
        }
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Reorders tokens: token `i` of the result is token `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut embeddings = Vec::with_capacity(self.embeddings.len());
        for &i in order {
            embeddings.extend_from_slice(self.token(i));
        }
        LanguageTokens {
            embeddings,
            len: order.len(),
            ..self.clone()
        }
    }
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Row `row` of the stub table; entries are standard normal scaled by
/// `1/sqrt(dim)`.
fn stub_row(row: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED ^ row.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Whitespace-tokenizes `text` and looks every token up in the hashed table.
pub fn embed_stub(text: &str, dim: usize) -> LanguageTokens {
    let tokens = tokenize(text);
    let mut embeddings = Vec::with_capacity(tokens.len() * dim);
    for t in &tokens {
        embeddings.extend(stub_row(fnv1a(t) % STUB_VOCAB, dim));
    }
    LanguageTokens {
        embeddings,
        len: tokens.len(),
        dim,
        source: LanguageSource::Stub,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    text: String,
    tokens: usize,
    dim: usize,
    dtype: String,
}

pub fn encode_embedding_file(text: &str, tokens: &LanguageTokens, dtype: &str) -> Result<Vec<u8>> {
    let header = FileHeader {
        text: text.to_string(),
        tokens: tokens.len,
        dim: tokens.dim,
        dtype: dtype.to_string(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for &v in &tokens.embeddings {
        match dtype {
            "f32" => out.extend_from_slice(&(v as f32).to_le_bytes()),
            "f64" => out.extend_from_slice(&v.to_le_bytes()),
            other => return Err(invalid(format!("unsupported embedding dtype {other}"))),
        }
    }
    Ok(out)
}

/// Parses an embedding file and checks it was made for `text`.
pub fn decode_embedding_file(bytes: &[u8], text: &str) -> Result<LanguageTokens> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("embedding file has no header line".into()))?;
    let header: FileHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.text != text {
        return Err(invalid(format!(
            "embedding file is for {:?}, requested {:?}",
            header.text, text
        )));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unsupported embedding dtype {other}"))),
    };
    let body = &bytes[nl + 1..];
    let needed = header.tokens * header.dim * width;
    if body.len() < needed {
        return Err(Error::Truncated {
            needed: needed as u64,
            available: body.len() as u64,
        });
    }
    let embeddings = body[..needed]
        .chunks_exact(width)
        .map(|c| match width {
            4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            _ => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok(LanguageTokens {
        embeddings,
        len: header.tokens,
        dim: header.dim,
        source: LanguageSource::File,
    })
}

pub fn load_embedding_file(path: &Path, text: &str) -> Result<LanguageTokens> {
    decode_embedding_file(&std::fs::read(path)?, text)
}

/// Encodes `text` with the requested source. File embeddings are looked up
/// in `dir` under the FNV-1a hash of the text (`<hash>.emb`).
pub fn embed_language(text: &str, source: LanguageSource, dim: usize, dir: Option<&Path>) -> Result<LanguageTokens> {
    match source {
        LanguageSource::Stub => Ok(embed_stub(text, dim)),
        LanguageSource::File => {
            let dir = dir.ok_or_else(|| invalid("file language source needs an embedding directory"))?;
            let tokens = load_embedding_file(&embedding_path(dir, text), text)?;
            if tokens.dim != dim {
                return Err(invalid(format!("embedding dim {} but model expects {dim}", tokens.dim)));
            }
            Ok(tokens)
        }
    }
}

pub fn embedding_path(dir: &Path, text: &str) -> std::path::PathBuf {
    dir.join(format!("{:016x}.emb", fnv1a(text)))
}
