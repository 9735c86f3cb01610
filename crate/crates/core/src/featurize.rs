//! Sentence featurization.
//!
//! Three backends turn each sentence of a problem into one row of a
//! [`SentenceMatrix`]: hashed character n-grams, a handful of stylometric
//! counts, or rows looked up in a precomputed [`EmbeddingStore`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Problem};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBackend {
    HashedCharNgram,
    Stylometric,
    ExternalEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub backend: FeatureBackend,
    pub dim: usize,
    pub ngram_range: (usize, usize),
    pub hash_seed: u64,
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            backend: FeatureBackend::HashedCharNgram,
            dim: 256,
            ngram_range: (1, 3),
            hash_seed: 0,
            normalize: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be at least 1".into()));
        }
        if self.backend == FeatureBackend::HashedCharNgram {
            let (lo, hi) = self.ngram_range;
            if lo == 0 || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "invalid n-gram range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Feature rows for one problem, row i for sentence i.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceMatrix {
    pub problem_id: String,
    pub rows: Tensor2,
}

impl SentenceMatrix {
    pub fn n_sentences(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit with the seed XORed into the offset basis.
pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = FNV_OFFSET ^ seed;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn hashed_ngram_row(sentence: &str, config: &FeatureConfig, row: &mut [f64]) {
    let dim = config.dim as u64;
    let chars: Vec<(usize, char)> = sentence.char_indices().collect();
    let (lo, hi) = config.ngram_range;
    for n in lo..=hi {
        if n > chars.len() {
            break;
        }
        for start in 0..=chars.len() - n {
            let begin = chars[start].0;
            let end = chars
                .get(start + n)
                .map_or(sentence.len(), |&(offset, _)| offset);
            let bucket = fnv1a64(&sentence.as_bytes()[begin..end], config.hash_seed) % dim;
            row[bucket as usize] += 1.0;
        }
    }
}

/// `[char length, punctuation count, uppercase ratio, digit ratio, mean word length]`
pub fn stylometric_features(sentence: &str) -> [f64; 5] {
    let total = sentence.chars().count();
    let punctuation = sentence
        .chars()
        .filter(|c| !c.is_alphanumeric() && !c.is_whitespace())
        .count();
    let upper = sentence.chars().filter(|c| c.is_uppercase()).count();
    let digits = sentence.chars().filter(|c| c.is_numeric()).count();
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let ratio = |k: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    let mean_word = if words.is_empty() {
        0.0
    } else {
        words.iter().map(|w| w.chars().count()).sum::<usize>() as f64 / words.len() as f64
    };
    [total as f64, punctuation as f64, ratio(upper), ratio(digits), mean_word]
}

fn l2_normalize(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

pub fn featurize_problem(
    problem: &Problem,
    config: &FeatureConfig,
    store: Option<&EmbeddingStore>,
) -> Result<SentenceMatrix> {
    config.validate()?;
    let n = problem.len();
    let mut rows = Tensor2::zeros(n, config.dim);
    match config.backend {
        FeatureBackend::HashedCharNgram => {
            for (i, sentence) in problem.sentences.iter().enumerate() {
                hashed_ngram_row(sentence, config, rows.row_mut(i));
            }
        }
        FeatureBackend::Stylometric => {
            for (i, sentence) in problem.sentences.iter().enumerate() {
                let feats = stylometric_features(sentence);
                let k = feats.len().min(config.dim);
                rows.row_mut(i)[..k].copy_from_slice(&feats[..k]);
            }
        }
        FeatureBackend::ExternalEmbeddings => {
            let store = store.ok_or_else(|| {
                Error::InvalidArgument("external embedding backend needs an embedding store".into())
            })?;
            if store.dim() != config.dim {
                return Err(Error::Embedding(format!(
                    "store dim {} differs from configured dim {}",
                    store.dim(),
                    config.dim
                )));
            }
            let block = store.rows(&problem.id).ok_or_else(|| {
                Error::Embedding(format!("{} is not in the embedding store", problem.id))
            })?;
            if block.len() != n * config.dim {
                return Err(Error::Embedding(format!(
                    "{}: store has {} rows, problem has {n} sentences",
                    problem.id,
                    block.len() / config.dim
                )));
            }
            for (dst, &src) in rows.as_mut_slice().iter_mut().zip(block) {
                *dst = f64::from(src);
            }
        }
    }
    if config.normalize {
        for i in 0..n {
            l2_normalize(rows.row_mut(i));
        }
    }
    rows.ensure_finite("sentence features")?;
    Ok(SentenceMatrix {
        problem_id: problem.id.clone(),
        rows,
    })
}

/// A feature configuration bundled with its optional embedding store.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub config: FeatureConfig,
    pub store: Option<Arc<EmbeddingStore>>,
}

impl Featurizer {
    pub fn new(config: FeatureConfig, store: Option<Arc<EmbeddingStore>>) -> Result<Self> {
        config.validate()?;
        if config.backend == FeatureBackend::ExternalEmbeddings && store.is_none() {
            return Err(Error::InvalidArgument(
                "external embedding backend needs an embedding store".into(),
            ));
        }
        Ok(Featurizer { config, store })
    }

    pub fn featurize(&self, problem: &Problem) -> Result<SentenceMatrix> {
        featurize_problem(problem, &self.config, self.store.as_deref())
    }

    /// Featurizes every problem of a dataset, in dataset order.
    pub fn featurize_dataset(&self, dataset: &Dataset) -> Result<Vec<SentenceMatrix>> {
        dataset
            .items
            .par_iter()
            .map(|item| self.featurize(&item.problem))
            .collect()
    }
}

pub const EMB_MAGIC: &[u8; 8] = b"SSPCEMB1";
pub const EMB_VERSION: u32 = 1;

/// Precomputed float32 sentence vectors indexed by problem id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    order: Vec<String>,
    index: HashMap<String, (usize, usize)>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    /// Builds a store from `(problem id, row-major n × dim block)` entries.
    pub fn from_blocks(dim: usize, blocks: Vec<(String, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dim must be at least 1".into()));
        }
        let mut store = EmbeddingStore {
            dim,
            order: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        };
        for (id, block) in blocks {
            if block.len() % dim != 0 {
                return Err(Error::Embedding(format!(
                    "{id}: {} values is not a multiple of dim {dim}",
                    block.len()
                )));
            }
            let n = block.len() / dim;
            if store.index.insert(id.clone(), (store.data.len() / dim, n)).is_some() {
                return Err(Error::Embedding(format!("duplicate problem id {id}")));
            }
            store.order.push(id);
            store.data.extend(block);
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn problem_ids(&self) -> &[String] {
        &self.order
    }

    pub fn total_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    /// `(row offset, sentence count)` of a problem.
    pub fn entry(&self, problem_id: &str) -> Option<(usize, usize)> {
        self.index.get(problem_id).copied()
    }

    pub fn rows(&self, problem_id: &str) -> Option<&[f32]> {
        let (offset, n) = self.entry(problem_id)?;
        Some(&self.data[offset * self.dim..(offset + n) * self.dim])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        let dim = u32::try_from(self.dim).map_err(|_| Error::Embedding("dim exceeds u32".into()))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u64).to_le_bytes());
        for id in &self.order {
            let id_len = u16::try_from(id.len())
                .map_err(|_| Error::Embedding(format!("problem id too long: {id}")))?;
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            let n = self.index[id].1 as u32;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(8).map_err(|_| header_err())? != EMB_MAGIC {
            return Err(Error::Embedding("bad magic".into()));
        }
        let version = reader.u32().map_err(|_| header_err())?;
        if version != EMB_VERSION {
            return Err(Error::Embedding(format!(
                "version mismatch: file has {version}, expected {EMB_VERSION}"
            )));
        }
        let dim = reader.u32().map_err(|_| header_err())? as usize;
        if dim == 0 {
            return Err(Error::Embedding("dim must be at least 1".into()));
        }
        let count = reader.u64().map_err(|_| header_err())?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let id_len = reader.u16().map_err(|_| header_err())? as usize;
            let id = std::str::from_utf8(reader.take(id_len).map_err(|_| header_err())?)
                .map_err(|_| Error::Embedding("problem id is not UTF-8".into()))?
                .to_string();
            let n = reader.u32().map_err(|_| header_err())? as usize;
            entries.push((id, n));
        }
        let total_rows: usize = entries.iter().map(|(_, n)| n).sum();
        let data_bytes = total_rows
            .checked_mul(dim * 4)
            .ok_or_else(|| Error::Embedding("header row count overflows".into()))?;
        let rest = &bytes[reader.pos..];
        if rest.len() < data_bytes {
            return Err(Error::Embedding(format!(
                "truncated data: {} bytes for {total_rows} rows of dim {dim}",
                rest.len()
            )));
        }
        if rest.len() > data_bytes {
            return Err(Error::Embedding(format!(
                "{} trailing bytes after data section",
                rest.len() - data_bytes
            )));
        }
        let data: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut blocks = Vec::with_capacity(entries.len());
        let mut offset = 0;
        for (id, n) in entries {
            blocks.push((id, data[offset * dim..(offset + n) * dim].to_vec()));
            offset += n;
        }
        Self::from_blocks(dim, blocks)
    }

    fn manifest(&self) -> serde_json::Value {
        let problems: Vec<_> = self
            .order
            .iter()
            .map(|id| {
                let (offset, n) = self.index[id];
                serde_json::json!({ "id": id, "row_offset": offset, "n_sentences": n })
            })
            .collect();
        serde_json::json!({
            "format": "SSPC-EMB",
            "version": EMB_VERSION,
            "dim": self.dim,
            "problem_count": self.order.len(),
            "problems": problems,
        })
    }
}

fn header_err() -> Error {
    Error::Embedding("truncated header".into())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let slice = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> std::result::Result<u16, ()> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().map_err(|_| ())?))
    }

    fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().map_err(|_| ())?))
    }

    fn u64(&mut self) -> std::result::Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().map_err(|_| ())?))
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

/// Writes the binary file and its non-authoritative JSON manifest sidecar.
pub fn write_embedding_file(path: &Path, store: &EmbeddingStore) -> Result<()> {
    fs::write(path, store.to_bytes()?).map_err(|e| Error::io(path, e))?;
    let manifest = manifest_path(path);
    let text = serde_json::to_string_pretty(&store.manifest()).map_err(|e| Error::json(&manifest, e))?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}
