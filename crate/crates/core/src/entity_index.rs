//! Exact cosine nearest-neighbour search over the entity universe.
//!
//! Rows are normalized once at build time and stored as `f32`; queries are
//! normalized in `f64` and scored by a dot product accumulated in `f64`. The
//! full-universe scan is split into fixed shards that are scored in parallel,
//! each keeping its own top-k; shard winners are merged under the total order
//! (similarity descending, entity id ascending), so results do not depend on
//! the thread count.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::corpus::{EntityId, EntityNames, EntityTable};
use crate::error::{Error, Result};
use crate::model::COSINE_EPS;

const CACHE_MAGIC: &[u8; 4] = b"ELIX";
const CACHE_VERSION: u32 = 1;

/// Rows per shard of the parallel scan.
pub const SHARD_ROWS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: EntityId,
    pub similarity: f64,
}

/// Ranking order: higher similarity first, then lower id.
pub fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone)]
pub struct EntityIndex {
    names: Arc<EntityNames>,
    unit_rows: Vec<f32>,
    dim: usize,
    source_digest: String,
}

fn normalize_rows(data: &mut [f32], d: usize) {
    for row in data.chunks_exact_mut(d) {
        let n = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        for v in row.iter_mut() {
            *v = (f64::from(*v) / n) as f32;
        }
    }
}

#[inline]
fn score(row: &[f32], q: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&r, &x) in row.iter().zip(q) {
        acc += f64::from(r) * x;
    }
    // folds -0.0 into +0.0 so exact ties compare equal
    acc + 0.0
}

/// Bounded list of the best hits seen so far, kept sorted by [`rank`].
struct TopK {
    k: usize,
    hits: Vec<Hit>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            hits: Vec::with_capacity(k.min(1024) + 1),
        }
    }

    #[inline]
    fn offer(&mut self, hit: Hit) {
        if self.hits.len() == self.k {
            let worst = self.hits.last().expect("k > 0");
            if rank(&hit, worst) != Ordering::Less {
                return;
            }
        }
        let pos = self
            .hits
            .partition_point(|h| rank(h, &hit) == Ordering::Less);
        self.hits.insert(pos, hit);
        self.hits.truncate(self.k);
    }
}

fn merge(parts: Vec<Vec<Hit>>, k: usize) -> Vec<Hit> {
    let mut all: Vec<Hit> = parts.into_iter().flatten().collect();
    all.sort_by(rank);
    all.truncate(k);
    all
}

impl EntityIndex {
    /// Builds an index next to the table, copying the embeddings.
    pub fn build(table: &EntityTable) -> Self {
        let mut rows = table.embeddings().to_vec();
        normalize_rows(&mut rows, table.d());
        EntityIndex {
            names: table.shared_names(),
            unit_rows: rows,
            dim: table.d(),
            source_digest: table.digest(),
        }
    }

    /// Builds an index by normalizing the table's matrix in place.
    pub fn from_table(table: EntityTable) -> Self {
        let digest = table.digest();
        let (names, mut rows, dim) = table.into_parts();
        normalize_rows(&mut rows, dim);
        EntityIndex {
            names,
            unit_rows: rows,
            dim,
            source_digest: digest,
        }
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn d(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &EntityNames {
        &self.names
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn row(&self, id: EntityId) -> &[f32] {
        let i = id.index();
        &self.unit_rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, id: EntityId) -> Vec<f64> {
        self.row(id).iter().map(|&v| f64::from(v)).collect()
    }

    fn prepare_query(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query of width {}, index width {}",
                q.len(),
                self.dim
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("search query".into()));
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < COSINE_EPS {
            return Ok(vec![0.0; self.dim]);
        }
        Ok(q.iter().map(|v| v / n).collect())
    }

    fn check_top_k(top_k: usize) -> Result<()> {
        if top_k == 0 {
            Err(Error::InvalidArgument("top_k must be positive".into()))
        } else {
            Ok(())
        }
    }

    fn scan_shard(&self, shard: usize, queries: &[Vec<f64>], top_k: usize) -> Vec<Vec<Hit>> {
        let lo = shard * SHARD_ROWS;
        let hi = ((shard + 1) * SHARD_ROWS).min(self.k());
        let mut tops: Vec<TopK> = queries.iter().map(|_| TopK::new(top_k)).collect();
        for j in lo..hi {
            let row = &self.unit_rows[j * self.dim..(j + 1) * self.dim];
            let id = EntityId(j as u32);
            for (q, top) in queries.iter().zip(tops.iter_mut()) {
                top.offer(Hit {
                    id,
                    similarity: score(row, q),
                });
            }
        }
        tops.into_iter().map(|t| t.hits).collect()
    }

    fn shard_count(&self) -> usize {
        self.k().div_ceil(SHARD_ROWS)
    }

    /// Top-`top_k` entities for `q`, over the whole universe or restricted to
    /// `mask`.
    pub fn search(&self, q: &[f64], mask: Option<&[EntityId]>, top_k: usize) -> Result<Vec<Hit>> {
        Self::check_top_k(top_k)?;
        let qn = self.prepare_query(q)?;
        match mask {
            Some(ids) => self.search_masked(&qn, ids, top_k),
            None => {
                let queries = [qn];
                let per_shard: Vec<Vec<Hit>> = (0..self.shard_count())
                    .into_par_iter()
                    .map(|s| self.scan_shard(s, &queries, top_k).pop().expect("one query"))
                    .collect();
                Ok(merge(per_shard, top_k))
            }
        }
    }

    /// Single-threaded full scan; same results as [`EntityIndex::search`].
    pub fn search_serial(&self, q: &[f64], top_k: usize) -> Result<Vec<Hit>> {
        Self::check_top_k(top_k)?;
        let queries = [self.prepare_query(q)?];
        let per_shard: Vec<Vec<Hit>> = (0..self.shard_count())
            .map(|s| self.scan_shard(s, &queries, top_k).pop().expect("one query"))
            .collect();
        Ok(merge(per_shard, top_k))
    }

    /// Full-universe search for many queries in one pass over the matrix.
    pub fn search_many(&self, queries: &[Vec<f64>], top_k: usize) -> Result<Vec<Vec<Hit>>> {
        Self::check_top_k(top_k)?;
        let qs: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| self.prepare_query(q))
            .collect::<Result<_>>()?;
        let per_shard: Vec<Vec<Vec<Hit>>> = (0..self.shard_count())
            .into_par_iter()
            .map(|s| self.scan_shard(s, &qs, top_k))
            .collect();
        let mut by_query: Vec<Vec<Vec<Hit>>> = vec![Vec::with_capacity(per_shard.len()); qs.len()];
        for shard in per_shard {
            for (qi, hits) in shard.into_iter().enumerate() {
                by_query[qi].push(hits);
            }
        }
        Ok(by_query.into_iter().map(|parts| merge(parts, top_k)).collect())
    }

    fn search_masked(&self, qn: &[f64], ids: &[EntityId], top_k: usize) -> Result<Vec<Hit>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty candidate mask".into()));
        }
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if let Some(bad) = ids.iter().find(|id| id.index() >= self.k()) {
            return Err(Error::InvalidArgument(format!(
                "candidate id {} outside universe of {}",
                bad.0,
                self.k()
            )));
        }
        let mut top = TopK::new(top_k);
        for id in ids {
            top.offer(Hit {
                id,
                similarity: score(self.row(id), qn),
            });
        }
        Ok(top.hits)
    }

    /// Writes the `ELIX` cache: magic, version, `k`, `d`, row-major `f32`
    /// unit rows, then the 32-byte digest of the source table.
    pub fn write_cache<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&CACHE_VERSION.to_le_bytes())?;
        out.write_all(&(self.k() as u32).to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        for chunk in self.unit_rows.chunks(1 << 16) {
            let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.write_all(&bytes)?;
        }
        let digest = hex::decode(&self.source_digest)
            .map_err(|e| Error::Format(format!("bad digest: {}", e)))?;
        out.write_all(&digest)?;
        Ok(())
    }

    /// Reads a cache built from `table`. Returns `Ok(None)` when the cache was
    /// built from different table content and must be rebuilt.
    pub fn read_cache<R: Read>(mut input: R, table: &EntityTable) -> Result<Option<Self>> {
        let mut head = [0u8; 16];
        input.read_exact(&mut head)?;
        if &head[0..4] != CACHE_MAGIC {
            return Err(Error::Format("not an ELIX index cache".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported index cache version {}", word(4))));
        }
        let (k, d) = (word(8) as usize, word(12) as usize);
        if k != table.k() || d != table.d() {
            return Ok(None);
        }
        let mut bytes = vec![0u8; k * d * 4];
        input.read_exact(&mut bytes)?;
        let mut digest = [0u8; 32];
        input.read_exact(&mut digest)?;
        let expected = table.digest();
        if hex::encode(digest) != expected {
            return Ok(None);
        }
        let rows = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Some(EntityIndex {
            names: table.shared_names(),
            unit_rows: rows,
            dim: d,
            source_digest: expected,
        }))
    }
}
