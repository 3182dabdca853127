//! Blockwise spectra of Hermitian operators and a content-addressed cache.
//!
//! The cache key is a SHA-256 digest of the operator entries, so the same
//! matrix met again under different `β` or a shifted scalar is reused.
//! Entries live in memory and, when a directory is configured, as one
//! bincode file per key.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fock::{OperatorMatrix, C64};
use crate::linalg::{self, BlockVectors};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumBlock {
    pub indices: Vec<usize>,
    /// Ascending eigenvalues of the block.
    pub values: Vec<f64>,
    pub vectors: Option<BlockVectors>,
}

/// Eigen-decomposition of a Hermitian operator, stored per connected block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    pub dim: usize,
    pub blocks: Vec<SpectrumBlock>,
}

impl Spectrum {
    pub fn compute(op: &OperatorMatrix, with_vectors: bool) -> Result<Self> {
        if !op.is_hermitian() {
            return Err(Error::Domain(format!(
                "operator is not Hermitian (defect {:.3e})",
                op.hermiticity_defect()
            )));
        }
        let mut blocks = Vec::new();
        for indices in linalg::connected_components(op) {
            let (values, vectors) = linalg::block_eigh(op, &indices, with_vectors)?;
            blocks.push(SpectrumBlock {
                indices,
                values,
                vectors,
            });
        }
        Ok(Self {
            dim: op.dim(),
            blocks,
        })
    }

    pub fn has_vectors(&self) -> bool {
        self.blocks.iter().all(|b| b.vectors.is_some())
    }

    /// All eigenvalues, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        all
    }

    pub fn ground_energy(&self) -> f64 {
        self.blocks
            .iter()
            .filter_map(|b| b.values.first().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// `log Tr e^{−βH}`.
    pub fn log_trace_exp(&self, beta: f64) -> f64 {
        let e0 = self.ground_energy();
        let sum: f64 = self
            .blocks
            .iter()
            .flat_map(|b| b.values.iter())
            .map(|&e| (-beta * (e - e0)).exp())
            .sum();
        -beta * e0 + sum.ln()
    }

    /// Full-length eigenvector `k` of block `b`.
    pub fn vector(&self, b: usize, k: usize) -> Option<Vec<C64>> {
        let block = &self.blocks[b];
        let vecs = block.vectors.as_ref()?;
        let mut out = vec![C64::new(0.0, 0.0); self.dim];
        for (row, &i) in block.indices.iter().enumerate() {
            out[i] = vecs.get(row, k);
        }
        Some(out)
    }

    /// `max_k ‖H v_k − E_k v_k‖`; requires stored vectors.
    pub fn reconstruction_residual(&self, op: &OperatorMatrix) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (b, block) in self.blocks.iter().enumerate() {
            for (k, &e) in block.values.iter().enumerate() {
                let v = self
                    .vector(b, k)
                    .ok_or_else(|| Error::Precondition("spectrum has no eigenvectors".into()))?;
                let hv = op.apply(&v);
                let r: f64 = hv
                    .iter()
                    .zip(&v)
                    .map(|(h, x)| (h - x * e).norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(r);
            }
        }
        Ok(worst)
    }
}

/// Hit and miss counters of a [`SpectrumCache`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub memory_hits: u64,
    pub disk_hits: u64,
    pub misses: u64,
}

#[derive(Default)]
pub struct SpectrumCache {
    memory: Mutex<HashMap<String, Arc<Spectrum>>>,
    dir: Option<PathBuf>,
    memory_hits: AtomicU64,
    disk_hits: AtomicU64,
    misses: AtomicU64,
}

impl SpectrumCache {
    /// Memory-only cache.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Cache that also persists entries below `dir`.
    pub fn with_dir(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: Some(dir.as_ref().to_path_buf()),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn key(op: &OperatorMatrix, with_vectors: bool) -> String {
        let mut h = Sha256::new();
        h.update((op.dim() as u64).to_le_bytes());
        h.update([with_vectors as u8]);
        for (i, j, v) in op.triplets() {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
            h.update(v.re.to_bits().to_le_bytes());
            h.update(v.im.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.bin")))
    }

    pub fn spectrum(&self, op: &OperatorMatrix, with_vectors: bool) -> Result<Arc<Spectrum>> {
        let key = Self::key(op, with_vectors);
        if let Some(s) = self.memory.lock().expect("cache lock").get(&key) {
            self.memory_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(s));
        }
        if let Some(path) = self.path_for(&key) {
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(s) = bincode::deserialize::<Spectrum>(&bytes) {
                    self.disk_hits.fetch_add(1, Ordering::Relaxed);
                    let s = Arc::new(s);
                    self.memory.lock().expect("cache lock").insert(key, Arc::clone(&s));
                    return Ok(s);
                }
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let s = Arc::new(Spectrum::compute(op, with_vectors)?);
        if let Some(path) = self.path_for(&key) {
            self.persist(&path, &s)?;
        }
        self.memory.lock().expect("cache lock").insert(key, Arc::clone(&s));
        Ok(s)
    }

    fn persist(&self, path: &Path, s: &Spectrum) -> Result<()> {
        let bytes = bincode::serialize(s).map_err(|e| Error::Numerical(e.to_string()))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let seq = SEQ.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp{}-{seq}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            memory_hits: self.memory_hits.load(Ordering::Relaxed),
            disk_hits: self.disk_hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    /// Drops the in-memory entries; disk entries are kept.
    pub fn clear_memory(&self) {
        self.memory.lock().expect("cache lock").clear();
    }
}
