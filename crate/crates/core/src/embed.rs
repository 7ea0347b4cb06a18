//! Text embedders for service operations and log events.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{fnv1a, fnv1a_str, splitmix};

/// Maps preprocessed text to a fixed-width vector. Must be deterministic,
/// and the empty string must map to the zero vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing of whitespace tokens, averaged over tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub n_hashes: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 64, n_hashes: 2 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize, n_hashes: usize) -> Self {
        assert!(dim > 0 && n_hashes > 0, "embedder dimensions must be positive");
        Self { dim, n_hashes }
    }

    fn slot(&self, token: &str, k: usize) -> (usize, f64) {
        let h = splitmix(fnv1a(fnv1a_str(token), &(k as u64).to_le_bytes()));
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        (bucket, sign)
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut count = 0usize;
        for token in text.split_whitespace() {
            count += 1;
            for k in 0..self.n_hashes {
                let (b, s) = self.slot(token, k);
                v[b] += s;
            }
        }
        if count > 0 {
            v.iter_mut().for_each(|x| *x /= count as f64);
        }
        Ok(v)
    }
}

/// Precomputed embeddings loaded from a `{"text": .., "vec": [..]}` JSONL
/// sidecar produced offline by an external sentence encoder.
#[derive(Clone, Debug)]
pub struct SidecarEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct SidecarLine {
    text: String,
    vec: Vec<f64>,
}

impl SidecarEmbedder {
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            match dim {
                None => dim = Some(rec.vec.len()),
                Some(d) if d != rec.vec.len() => {
                    return Err(Error::shape(format!("sidecar line {}", idx + 1), d, rec.vec.len()))
                }
                _ => {}
            }
            table.insert(rec.text, rec.vec);
        }
        let dim = dim.ok_or_else(|| Error::Config("embedding sidecar is empty".into()))?;
        Ok(Self { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }

    /// Every text without an entry, sorted and deduplicated.
    pub fn missing<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut out: Vec<String> = texts
            .into_iter()
            .filter(|t| !t.is_empty() && !self.table.contains_key(*t))
            .map(str::to_owned)
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

impl TextEmbedder for SidecarEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Ok(vec![0.0; self.dim]);
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::MissingEmbeddings {
                missing: vec![text.to_owned()],
            })
    }
}
