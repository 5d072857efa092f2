//! The demonstration bank: a persistent cache of fused tokens.
//!
//! Keyed by demonstration content digest and aggregation layer count; every
//! entry also records the backbone and projection versions it was computed
//! under, so a version change is treated as a miss and the entry is
//! overwritten. A hit returns tokens bit-identical to fresh aggregation and
//! performs zero forward passes.
//!
//! Concurrency: any number of readers; insertion takes the write lock. Two
//! threads missing on the same key may both compute, but the results are
//! value-identical, so last-write-wins is fine.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use crate::aggregator::{aggregate, AggregationConfig, Demonstration, FusedTokens, ProjectionLayer};
use crate::backbone::BackboneWeights;
use crate::digest::{f64_bytes, Digest32};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"FDB1";
const VERSION: u32 = 1;

#[derive(Default)]
pub struct DemonstrationBank {
    entries: RwLock<HashMap<(Digest32, usize), FusedTokens>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl DemonstrationBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("bank lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Return cached fused tokens, or aggregate and store. A stale entry
    /// (weights or projection version changed) counts as a miss and is
    /// overwritten.
    pub fn get_or_aggregate(
        &self,
        demo: &Demonstration,
        cfg: &AggregationConfig,
        w: &BackboneWeights,
        p: &ProjectionLayer,
    ) -> Result<FusedTokens> {
        let key = (demo.digest(), cfg.n_layers);
        let weights_version = w.digest();
        let projection_version = p.digest();
        {
            let entries = self.entries.read().expect("bank lock");
            if let Some(hit) = entries.get(&key) {
                if hit.weights_version == weights_version
                    && hit.projection_version == projection_version
                {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(hit.clone());
                }
            }
        }
        // Miss (or stale): compute outside the lock, then insert.
        let fused = aggregate(demo, cfg, w, p)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.entries
            .write()
            .expect("bank lock")
            .insert(key, fused.clone());
        Ok(fused)
    }

    /// Persist to disk. All entries must share one (weights, projection,
    /// layer-count) triple, which becomes the file header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.entries.read().expect("bank lock");
        let mut iter = entries.values();
        let first = iter
            .next()
            .ok_or_else(|| Error::Usage("cannot save an empty bank".into()))?;
        for e in entries.values() {
            if e.weights_version != first.weights_version
                || e.projection_version != first.projection_version
                || e.n_layers_used != first.n_layers_used
            {
                return Err(Error::Consistency(
                    "bank holds entries from mixed weights/projection/layer-count; \
                     cannot persist to a single file"
                        .into(),
                ));
            }
        }
        let d_model = first.tokens.cols;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(first.weights_version.as_bytes());
        out.extend_from_slice(first.projection_version.as_bytes());
        out.extend_from_slice(&(first.n_layers_used as u32).to_le_bytes());
        out.extend_from_slice(&(d_model as u32).to_le_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());

        // stable order on disk
        let mut keys: Vec<&(Digest32, usize)> = entries.keys().collect();
        keys.sort_by_key(|(digest, n)| (digest.0, *n));
        for key in keys {
            let e = &entries[key];
            out.extend_from_slice(e.demo_digest.as_bytes());
            out.extend_from_slice(&(e.text_len as u64).to_le_bytes());
            out.extend_from_slice(&f64_bytes(&e.tokens.data));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a bank file written by [`save`](Self::save).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let corrupt =
            |detail: &str| Error::Corruption(format!("{}: {detail}", path.display()));
        let mut cur = Cursor::new(bytes.as_slice());
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            cur.read_exact(&mut buf)
                .map_err(|_| corrupt("unexpected end of file"))?;
            Ok(buf)
        };

        if take(4)? != MAGIC {
            return Err(corrupt("bad magic (not a bank file)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let weights_version = Digest32(take(32)?.try_into().unwrap());
        let projection_version = Digest32(take(32)?.try_into().unwrap());
        let n_layers_used = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d_model = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;

        let mut entries = HashMap::with_capacity(count);
        for _ in 0..count {
            let demo_digest = Digest32(take(32)?.try_into().unwrap());
            let text_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(text_len * d_model * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(
                (demo_digest, n_layers_used),
                FusedTokens {
                    tokens: Mat::new(text_len, d_model, data)
                        .map_err(|e| corrupt(&e.to_string()))?,
                    text_len,
                    demo_digest,
                    n_layers_used,
                    weights_version,
                    projection_version,
                },
            );
        }
        Ok(DemonstrationBank {
            entries: RwLock::new(entries),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }
}
