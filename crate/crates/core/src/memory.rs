//! The non-parametric memory: an append-only key/value store and an
//! inverted-file (IVF) index rebuilt between stream batches.
//!
//! Rows appended after the last rebuild form an un-indexed tail that every
//! search scans exhaustively, so a memorized row is retrievable immediately.
//! All distances are squared L2, accumulated in `f64`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::TokenId;

const MEMORY_MAGIC: &[u8] = b"SEMMEM1";

/// Squared Euclidean distance, accumulated in eight f32 lanes.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let (rest_a, rest_b) = (chunks_a.remainder(), chunks_b.remainder());
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            let d = ca[i] - cb[i];
            acc[i] += d * d;
        }
    }
    let mut total: f64 = acc.iter().map(|&x| f64::from(x)).sum();
    for (x, y) in rest_a.iter().zip(rest_b) {
        let d = f64::from(*x) - f64::from(*y);
        total += d * d;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub value: TokenId,
    /// Squared L2 distance to the query.
    pub dist: f64,
}

/// Append-only rows of `(key, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    d: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
}

impl MemoryStore {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Appends a row and returns its index.
    pub fn append(&mut self, key: &[f32], value: TokenId) -> Result<usize> {
        if key.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: key.len(),
            });
        }
        if key.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("memory key has non-finite components"));
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        Ok(self.values.len() - 1)
    }

    pub fn key(&self, row: usize) -> &[f32] {
        &self.keys[row * self.d..(row + 1) * self.d]
    }

    pub fn value(&self, row: usize) -> TokenId {
        self.values[row]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], TokenId)> + '_ {
        self.keys
            .chunks_exact(self.d.max(1))
            .zip(self.values.iter().copied())
    }

    /// Size of one serialized row: `d` f32 components plus a u32 value.
    pub fn row_bytes(&self) -> usize {
        self.d * 4 + 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub n_centroids: usize,
    pub sample_size: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            n_centroids: 64,
            sample_size: 16_384,
            kmeans_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    d: usize,
    /// n_c x d, row-major.
    centroids: Vec<f32>,
    lists: Vec<Vec<u64>>,
    indexed_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    row: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the `k` smallest `(dist, row)` pairs.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, dist: f64, row: usize) {
        let c = Candidate { dist, row };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn finish(self, store: &MemoryStore) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                row: c.row,
                value: store.value(c.row),
                dist: c.dist,
            })
            .collect()
    }
}

fn check_query(store: &MemoryStore, query: &[f32], k: usize) -> Result<()> {
    if query.len() != store.d {
        return Err(Error::DimensionMismatch {
            expected: store.d,
            got: query.len(),
        });
    }
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(())
}

/// Exact k-nearest rows, ascending by distance then row index.
pub fn brute_force_search(store: &MemoryStore, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if store.is_empty() {
        return Err(Error::EmptyMemory);
    }
    check_query(store, query, k)?;
    let mut top = TopK::new(k);
    for row in 0..store.len() {
        top.offer(squared_l2(store.key(row), query), row);
    }
    Ok(top.finish(store))
}

fn nearest_centroid(centroids: &[f32], d: usize, point: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.chunks_exact(d).enumerate() {
        let dist = squared_l2(centroid, point);
        if dist < best.0 {
            best = (dist, c);
        }
    }
    best.1
}

/// Trains centroids by k-means on a seeded sample, then assigns every row.
///
/// `n_centroids` is clamped to the row count and the sample is never smaller
/// than the centroid count.
pub fn rebuild_index(store: &MemoryStore, params: &IndexParams) -> Result<IvfIndex> {
    if store.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if params.n_centroids < 1 {
        return Err(Error::invalid("n_centroids must be at least 1"));
    }
    let d = store.d;
    let n = store.len();
    let n_c = params.n_centroids.min(n);
    let sample_size = params.sample_size.max(n_c).min(n);
    let mut rng = rng::substream(params.seed, "kmeans-sample", 0);
    let sampled: Vec<usize> = sample(&mut rng, n, sample_size).into_vec();

    // Initial centroids are the first n_c sampled rows (distinct rows).
    let mut centroids: Vec<f32> = sampled[..n_c]
        .iter()
        .flat_map(|&r| store.key(r).iter().copied())
        .collect();

    for _ in 0..params.kmeans_iters {
        let mut assign: Vec<usize> = sampled
            .par_iter()
            .map(|&r| nearest_centroid(&centroids, d, store.key(r)))
            .collect();
        let mut sums = vec![0.0f64; n_c * d];
        let mut sizes = vec![0usize; n_c];
        for (&r, &c) in sampled.iter().zip(&assign) {
            sizes[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(store.key(r)) {
                *s += f64::from(x);
            }
        }
        for c in 0..n_c {
            if sizes[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = (sums[c * d + j] / sizes[c] as f64) as f32;
                }
            }
        }
        // Re-seed empty clusters from the farthest member of the largest one.
        for c in 0..n_c {
            if sizes[c] > 0 {
                continue;
            }
            let largest = (0..n_c).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
            let mut far = (f64::NEG_INFINITY, usize::MAX);
            for (i, (&r, &a)) in sampled.iter().zip(&assign).enumerate() {
                if a == largest {
                    let dist = squared_l2(&centroids[a * d..(a + 1) * d], store.key(r));
                    if dist > far.0 {
                        far = (dist, i);
                    }
                }
            }
            let i = far.1;
            let key = store.key(sampled[i]).to_vec();
            centroids[c * d..(c + 1) * d].copy_from_slice(&key);
            assign[i] = c;
            sizes[largest] -= 1;
            sizes[c] += 1;
        }
    }

    let all: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|r| nearest_centroid(&centroids, d, store.key(r)))
        .collect();
    let mut lists = vec![Vec::new(); n_c];
    for (r, &c) in all.iter().enumerate() {
        lists[c].push(r as u64);
    }
    Ok(IvfIndex {
        d,
        centroids,
        lists,
        indexed_count: n,
    })
}

impl IvfIndex {
    pub fn n_centroids(&self) -> usize {
        self.lists.len()
    }

    pub fn indexed_count(&self) -> usize {
        self.indexed_count
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<u64>] {
        &self.lists
    }

    /// Scans the `nprobe` lists with the nearest centroids plus the
    /// un-indexed tail `indexed_count..store.len()`.
    pub fn search(
        &self,
        store: &MemoryStore,
        query: &[f32],
        k: usize,
        nprobe: usize,
    ) -> Result<Vec<Neighbor>> {
        check_query(store, query, k)?;
        if nprobe < 1 || nprobe > self.n_centroids() {
            return Err(Error::invalid(format!(
                "nprobe {nprobe} outside [1, {}]",
                self.n_centroids()
            )));
        }
        if self.indexed_count > store.len() || store.d != self.d {
            return Err(Error::invalid("index does not belong to this store"));
        }
        let mut probes: Vec<Candidate> = self
            .centroids
            .chunks_exact(self.d)
            .enumerate()
            .map(|(c, centroid)| Candidate {
                dist: squared_l2(centroid, query),
                row: c,
            })
            .collect();
        if nprobe < probes.len() {
            probes.select_nth_unstable(nprobe - 1);
            probes.truncate(nprobe);
        }

        let mut top = TopK::new(k);
        for probe in &probes {
            for &row in &self.lists[probe.row] {
                let row = row as usize;
                top.offer(squared_l2(store.key(row), query), row);
            }
        }
        for row in self.indexed_count..store.len() {
            top.offer(squared_l2(store.key(row), query), row);
        }
        Ok(top.finish(store))
    }
}

/// A store plus its most recent index.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    store: MemoryStore,
    index: Option<IvfIndex>,
}

impl Memory {
    pub fn new(d: usize) -> Self {
        Self {
            store: MemoryStore::new(d),
            index: None,
        }
    }

    pub fn from_parts(store: MemoryStore, index: Option<IvfIndex>) -> Result<Self> {
        if let Some(ix) = &index {
            if ix.d != store.d || ix.indexed_count > store.len() {
                return Err(Error::corrupt("index does not match store"));
            }
        }
        Ok(Self { store, index })
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn index(&self) -> Option<&IvfIndex> {
        self.index.as_ref()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn append(&mut self, key: &[f32], value: TokenId) -> Result<usize> {
        self.store.append(key, value)
    }

    /// Builds a fresh index and swaps it in.
    pub fn rebuild(&mut self, params: &IndexParams) -> Result<()> {
        let index = rebuild_index(&self.store, params)?;
        self.index = Some(index);
        Ok(())
    }

    /// Probed search with `nprobe` clamped to the index size; without an
    /// index every row is tail and the scan is exhaustive. Empty memory
    /// yields no neighbors.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<Neighbor>> {
        if self.store.is_empty() {
            check_query(&self.store, query, k)?;
            return Ok(Vec::new());
        }
        match &self.index {
            Some(ix) => ix.search(&self.store, query, k, nprobe.clamp(1, ix.n_centroids())),
            None => brute_force_search(&self.store, query, k),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        snapshot_bytes(&self.store, self.index.as_ref())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, index) = parse_snapshot(bytes)?;
        Self::from_parts(store, index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_snapshot(&self.store, self.index.as_ref(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, index) = load_snapshot(path)?;
        Self::from_parts(store, index)
    }
}

fn snapshot_bytes(store: &MemoryStore, index: Option<&IvfIndex>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MEMORY_MAGIC);
    w.u32(store.d as u32);
    w.u64(store.len() as u64);
    for (key, value) in store.iter() {
        w.f32s(key);
        w.u32(value);
    }
    match index {
        None => w.u32(0),
        Some(ix) => {
            w.u32(ix.n_centroids() as u32);
            w.f32s(&ix.centroids);
            for list in &ix.lists {
                w.u64(list.len() as u64);
                for &r in list {
                    w.u64(r);
                }
            }
        }
    }
    w.buf
}

fn parse_snapshot(bytes: &[u8]) -> Result<(MemoryStore, Option<IvfIndex>)> {
    let mut r = Reader::new(bytes);
    r.magic(MEMORY_MAGIC)?;
    let d = r.u32()? as usize;
    let raw_rows = r.u64()?;
    let rows = r.count(raw_rows, d * 4 + 4)?;
    let mut store = MemoryStore::new(d);
    store.keys.reserve(rows * d);
    store.values.reserve(rows);
    for _ in 0..rows {
        store.keys.extend(r.f32s(d)?);
        store.values.push(r.u32()?);
    }
    let n_c = r.u32()? as usize;
    let index = if n_c == 0 {
        None
    } else {
        let centroids = r.f32s(n_c.checked_mul(d).ok_or_else(|| Error::corrupt("overflow"))?)?;
        let mut lists = Vec::with_capacity(n_c);
        let mut seen = vec![false; rows];
        let mut indexed = 0usize;
        for _ in 0..n_c {
            let raw = r.u64()?;
            let len = r.count(raw, 8)?;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let row = r.u64()?;
                let slot = seen
                    .get_mut(row as usize)
                    .ok_or_else(|| Error::corrupt("list row out of range"))?;
                if *slot {
                    return Err(Error::corrupt("row listed twice"));
                }
                *slot = true;
                list.push(row);
            }
            indexed += len;
            lists.push(list);
        }
        if seen[..indexed].iter().any(|s| !s) {
            return Err(Error::corrupt("index does not cover a row prefix"));
        }
        Some(IvfIndex {
            d,
            centroids,
            lists,
            indexed_count: indexed,
        })
    };
    r.finish()?;
    Ok((store, index))
}

pub fn save_snapshot(
    store: &MemoryStore,
    index: Option<&IvfIndex>,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, snapshot_bytes(store, index))?;
    Ok(())
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<(MemoryStore, Option<IvfIndex>)> {
    parse_snapshot(&fs::read(path)?)
}
