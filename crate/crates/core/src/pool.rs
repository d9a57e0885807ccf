//! The normality pool: global features of randomly drawn normal instances.
//!
//! Entries are snapshots taken with the projection current at build time.
//! They do not follow later updates of the projection unless
//! [`refresh_pool`] is called.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::rng;
use crate::tensor::{self, Tensor};

/// Default pool size.
pub const DEFAULT_POOL_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalityPool {
    /// `N_P × d` global features.
    pub entries: Tensor,
    pub ids: Vec<String>,
    pub build_seed: u64,
    pub projection_fingerprint: [u8; 32],
}

impl NormalityPool {
    /// Assembles a pool, checking the invariants (nonempty, one id per row,
    /// unique ids).
    pub fn new(
        entries: Tensor,
        ids: Vec<String>,
        build_seed: u64,
        projection_fingerprint: [u8; 32],
    ) -> Result<Self> {
        if entries.rows() == 0 {
            return Err(Error::EmptyInput("normality pool"));
        }
        if ids.len() != entries.rows() {
            return Err(Error::DataLength {
                expected: entries.rows(),
                actual: ids.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            entries,
            ids,
            build_seed,
            projection_fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn d(&self) -> usize {
        self.entries.cols()
    }

    /// Whether the pool was built with this projection.
    pub fn matches_projection(&self, w_i: &Tensor) -> bool {
        self.projection_fingerprint == fingerprint(w_i)
    }
}

/// SHA-256 over the projection's shape and little-endian entries.
pub fn fingerprint(w_i: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((w_i.rows() as u64).to_le_bytes());
    h.update((w_i.cols() as u64).to_le_bytes());
    for v in w_i.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Samples `size` normal instances without replacement and stores their
/// projected global features.
pub fn build_pool(
    corpus: &[Instance],
    w_i: &Tensor,
    size: usize,
    seed: u64,
) -> Result<NormalityPool> {
    if size == 0 {
        return Err(Error::InvalidConfig(
            "pool size must be positive".to_string(),
        ));
    }
    let normals: Vec<&Instance> = corpus.iter().filter(|i| i.normal).collect();
    if normals.len() < size {
        return Err(Error::InsufficientNormals {
            requested: size,
            available: normals.len(),
        });
    }
    let mut r = rng::seeded(seed);
    let picked = rng::sample_indices(&mut r, normals.len(), size);
    let mut rows = Vec::with_capacity(size);
    let mut ids = Vec::with_capacity(size);
    for i in picked {
        let inst = normals[i];
        rows.push(FeatureGrid::build(&inst.features, w_i)?.v_hat);
        ids.push(inst.id.clone());
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    NormalityPool::new(tensor::concat_rows(&refs)?, ids, seed, fingerprint(w_i))
}

/// Recomputes every entry for the same ids under the current projection.
pub fn refresh_pool(
    pool: &NormalityPool,
    corpus: &[Instance],
    w_i: &Tensor,
) -> Result<NormalityPool> {
    let mut rows = Vec::with_capacity(pool.len());
    for id in &pool.ids {
        let inst = corpus
            .iter()
            .find(|i| &i.id == id)
            .ok_or_else(|| Error::MissingId(id.clone()))?;
        rows.push(FeatureGrid::build(&inst.features, w_i)?.v_hat);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    NormalityPool::new(
        tensor::concat_rows(&refs)?,
        pool.ids.clone(),
        pool.build_seed,
        fingerprint(w_i),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Population standard deviation per dimension.
    pub std: Vec<f64>,
    /// Smallest Euclidean distance between two entries; `None` for a
    /// single-entry pool.
    pub nearest_duplicate_distance: Option<f64>,
}

pub fn pool_stats(pool: &NormalityPool) -> PoolStats {
    let e = &pool.entries;
    let n = e.rows() as f64;
    let mean = tensor::mean_rows(e)
        .map(Tensor::into_data)
        .unwrap_or_default();
    let mut var = alloc::vec![0.0; e.cols()];
    for i in 0..e.rows() {
        for (j, v) in e.row(i).iter().enumerate() {
            let dv = v - mean[j];
            var[j] += dv * dv;
        }
    }
    let std = var.iter().map(|s| libm::sqrt(s / n)).collect();
    let mut nearest: Option<f64> = None;
    for i in 0..e.rows() {
        for k in i + 1..e.rows() {
            let d2: f64 = e
                .row(i)
                .iter()
                .zip(e.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = libm::sqrt(d2);
            nearest = Some(nearest.map_or(d, |m| m.min(d)));
        }
    }
    PoolStats {
        count: e.rows(),
        mean,
        std,
        nearest_duplicate_distance: nearest,
    }
}
