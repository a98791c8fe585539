//! Key-value store of (context embedding, next token) pairs with exact k-nearest-neighbor search.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ChecksumReader, ChecksumWriter};
use crate::error::{Error, Result};
use crate::types::{Embedding, TokenId};

pub const DATASTORE_MAGIC: &[u8; 4] = b"KNDS";
pub const DATASTORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredL2,
    L2,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::SquaredL2 => 0,
            Metric::L2 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Metric::SquaredL2),
            1 => Ok(Metric::L2),
            other => Err(Error::InvalidHeader(format!("unknown metric code {other}"))),
        }
    }

    /// Converts a squared Euclidean distance into this metric.
    pub fn from_squared(self, sq: f64) -> f64 {
        match self {
            Metric::SquaredL2 => sq,
            Metric::L2 => sq.sqrt(),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_l2" | "sql2" => Ok(Metric::SquaredL2),
            "l2" => Ok(Metric::L2),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::SquaredL2 => "squared_l2",
            Metric::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub token: TokenId,
    pub entry_index: usize,
}

/// Retrieved neighbors, ascending by distance with ties broken by entry index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn new(mut neighbors: Vec<Neighbor>) -> Result<Self> {
        if neighbors.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(n) = neighbors.iter().find(|n| !n.distance.is_finite() || n.distance < 0.0) {
            return Err(Error::InvalidConfig(format!("invalid distance {}", n.distance)));
        }
        neighbors.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.entry_index.cmp(&b.entry_index))
        });
        Ok(Self { neighbors })
    }

    /// Builds a set from (distance, token) pairs; entry indices follow input order.
    pub fn from_pairs(pairs: &[(f64, TokenId)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, &(distance, token))| Neighbor {
                    distance,
                    token,
                    entry_index: i,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self) -> &[Neighbor] {
        &self.neighbors
    }

    pub fn iter(&self) -> impl Iterator<Item = &Neighbor> {
        self.neighbors.iter()
    }
}

/// Four interleaved partial sums, combined in a fixed order.
fn squared_distance(key: &[f32], query: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut kc = key.chunks_exact(4);
    let mut qc = query.chunks_exact(4);
    for (k, q) in (&mut kc).zip(&mut qc) {
        for lane in 0..4 {
            let diff = f64::from(k[lane]) - q[lane];
            acc[lane] += diff * diff;
        }
    }
    for (&k, &q) in kc.remainder().iter().zip(qc.remainder()) {
        let diff = f64::from(k) - q;
        acc[0] += diff * diff;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Datastore of f32 keys in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    metric: Metric,
    keys: Vec<f32>,
    values: Vec<u32>,
}

impl Datastore {
    /// Builds a datastore from (key, next token) records. Keys are stored at f32 precision.
    pub fn build<I>(records: I, metric: Metric) -> Result<Self>
    where
        I: IntoIterator<Item = (Embedding, TokenId)>,
    {
        let mut dim = None;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (key, token) in records {
            let d = *dim.get_or_insert(key.dim());
            if key.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: key.dim(),
                });
            }
            keys.extend(key.values().iter().map(|&v| v as f32));
            values.push(token_u32(token)?);
        }
        let dim = dim.ok_or(Error::EmptyInput)?;
        Ok(Self {
            dim,
            metric,
            keys,
            values,
        })
    }

    /// Builds directly from f32 keys, as read from a trace.
    pub fn from_f32_records<'a, I>(records: I, metric: Metric) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f32], TokenId)>,
    {
        let mut dim = None;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (key, token) in records {
            let d = *dim.get_or_insert(key.len());
            if key.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: key.len(),
                });
            }
            if d == 0 || key.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("datastore key is empty or non-finite".into()));
            }
            keys.extend_from_slice(key);
            values.push(token_u32(token)?);
        }
        let dim = dim.ok_or(Error::EmptyInput)?;
        Ok(Self {
            dim,
            metric,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn key(&self, index: usize) -> &[f32] {
        &self.keys[index * self.dim..(index + 1) * self.dim]
    }

    pub fn value(&self, index: usize) -> TokenId {
        self.values[index] as TokenId
    }

    pub fn values(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.values.iter().map(|&v| v as TokenId)
    }

    /// Largest value token plus one, i.e. the smallest vocabulary this store fits in.
    pub fn min_vocab_size(&self) -> usize {
        self.values.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Squared Euclidean distance between a stored key and a query, in f64.
    pub fn squared_distance(&self, index: usize, query: &[f64]) -> f64 {
        squared_distance(self.key(index), query)
    }

    /// Exact k nearest neighbors; ordering is computed on squared distance so both metrics agree.
    pub fn query_knn(&self, query: &Embedding, k: usize) -> Result<NeighborSet> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        if k > self.len() {
            return Err(Error::KTooLarge { k, size: self.len() });
        }
        let q = query.values();
        let mut scored: Vec<(f64, usize)> = self
            .keys
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, key)| (squared_distance(key, q), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(NeighborSet {
            neighbors: scored
                .into_iter()
                .map(|(sq, i)| Neighbor {
                    distance: self.metric.from_squared(sq),
                    token: self.value(i),
                    entry_index: i,
                })
                .collect(),
        })
    }

    /// Runs `query_knn` for many queries in parallel; output order matches input order.
    pub fn query_batch(&self, queries: &[Embedding], k: usize) -> Result<Vec<NeighborSet>> {
        queries.par_iter().map(|q| self.query_knn(q, k)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ChecksumWriter::new(BufWriter::new(File::create(path)?));
        w.bytes(DATASTORE_MAGIC)?;
        w.u32(DATASTORE_VERSION)?;
        w.u8(self.metric.code())?;
        w.u32(self.dim as u32)?;
        w.u64(self.len() as u64)?;
        w.begin_payload();
        for i in 0..self.len() {
            for &v in self.key(i) {
                w.f32(v)?;
            }
            w.u32(self.values[i])?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = ChecksumReader::new(BufReader::new(File::open(path)?));
        codec::check_magic(r.magic().map_err(codec::in_header)?, DATASTORE_MAGIC)?;
        codec::check_version(r.u32().map_err(codec::in_header)?, DATASTORE_VERSION)?;
        let metric = Metric::from_code(r.u8().map_err(codec::in_header)?)?;
        let dim = r.u32().map_err(codec::in_header)? as usize;
        let count = r.u64().map_err(codec::in_header)?;
        if dim == 0 {
            return Err(Error::InvalidHeader("d must be positive".into()));
        }
        r.begin_payload();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut row = Vec::with_capacity(dim);
        for i in 0..count {
            r.f32s(&mut row, dim).map_err(codec::at_record(i))?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::corrupt(i, "non-finite key"));
            }
            keys.extend_from_slice(&row);
            values.push(r.u32().map_err(codec::at_record(i))?);
        }
        r.verify(count)?;
        Ok(Self {
            dim,
            metric,
            keys,
            values,
        })
    }
}

fn token_u32(token: TokenId) -> Result<u32> {
    u32::try_from(token).map_err(|_| Error::TokenOutOfRange {
        token,
        vocab_size: u32::MAX as usize,
    })
}
