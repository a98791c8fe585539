//! Retrieval distribution: a softmax over negative neighbor distances, aggregated per token.

use crate::datastore::NeighborSet;
use crate::error::{Error, Result};
use crate::types::DenseDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureKind {
    Fixed,
    SingleAdaptive,
    NeighborWise,
}

impl TemperatureKind {
    pub const ALL: [TemperatureKind; 3] = [
        TemperatureKind::Fixed,
        TemperatureKind::SingleAdaptive,
        TemperatureKind::NeighborWise,
    ];

    pub fn is_trainable(self) -> bool {
        !matches!(self, TemperatureKind::Fixed)
    }
}

/// Effective (positive) temperatures: one shared value, or one per neighbor rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSpec {
    kind: TemperatureKind,
    values: Vec<f64>,
}

impl TemperatureSpec {
    pub fn fixed(t: f64) -> Result<Self> {
        Self::new(TemperatureKind::Fixed, vec![t])
    }

    pub fn single(t: f64) -> Result<Self> {
        Self::new(TemperatureKind::SingleAdaptive, vec![t])
    }

    pub fn neighbor_wise(ts: Vec<f64>) -> Result<Self> {
        Self::new(TemperatureKind::NeighborWise, ts)
    }

    pub fn new(kind: TemperatureKind, values: Vec<f64>) -> Result<Self> {
        if kind != TemperatureKind::NeighborWise && values.len() != 1 {
            return Err(Error::TemperatureArityMismatch {
                expected: 1,
                found: values.len(),
            });
        }
        if values.is_empty() {
            return Err(Error::TemperatureArityMismatch { expected: 1, found: 0 });
        }
        if let Some(&t) = values.iter().find(|t| !t.is_finite() || **t <= 0.0) {
            return Err(Error::InvalidTemperature(t));
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> TemperatureKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of independent temperature parameters.
    pub fn arity(&self) -> usize {
        self.values.len()
    }

    fn at_rank(&self, rank: usize) -> f64 {
        match self.kind {
            TemperatureKind::NeighborWise => self.values[rank],
            _ => self.values[0],
        }
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.kind == TemperatureKind::NeighborWise && self.values.len() != k {
            return Err(Error::TemperatureArityMismatch {
                expected: k,
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Intermediate values of the retrieval softmax, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct KnnForward {
    pub dist: DenseDistribution,
    /// Normalized weight of each neighbor slot.
    pub slot_weights: Vec<f64>,
    /// `distance_i / t_i` per slot: the derivative of the slot score w.r.t. ln t_i.
    pub scaled_distances: Vec<f64>,
    tokens: Vec<usize>,
    temp_kind: TemperatureKind,
}

pub fn knn_forward(ns: &NeighborSet, temp: &TemperatureSpec, vocab_size: usize) -> Result<KnnForward> {
    temp.check(ns.len())?;
    let mut scores = Vec::with_capacity(ns.len());
    let mut tokens = Vec::with_capacity(ns.len());
    let mut scaled = Vec::with_capacity(ns.len());
    for (rank, n) in ns.iter().enumerate() {
        if n.token >= vocab_size {
            return Err(Error::TokenOutOfRange {
                token: n.token,
                vocab_size,
            });
        }
        let s = n.distance / temp.at_rank(rank);
        scaled.push(s);
        scores.push(-s);
        tokens.push(n.token);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    let mut probs = vec![0.0; vocab_size];
    for (&tok, &w) in tokens.iter().zip(&weights) {
        probs[tok] += w;
    }
    Ok(KnnForward {
        dist: DenseDistribution::from_raw(probs),
        slot_weights: weights,
        scaled_distances: scaled,
        tokens,
        temp_kind: temp.kind,
    })
}

impl KnnForward {
    /// Chains an upstream gradient `dl_dp` (w.r.t. each token probability) back to the
    /// log-temperature parameters. Returns one entry per temperature parameter.
    pub fn backward_log_temperature(&self, dl_dp: &[f64]) -> Vec<f64> {
        let inner: f64 = dl_dp.iter().zip(self.dist.probs()).map(|(g, p)| g * p).sum();
        let per_slot = self
            .tokens
            .iter()
            .zip(&self.slot_weights)
            .zip(&self.scaled_distances)
            .map(|((&tok, &w), &sd)| w * (dl_dp[tok] - inner) * sd);
        match self.temp_kind {
            TemperatureKind::NeighborWise => per_slot.collect(),
            _ => vec![per_slot.sum()],
        }
    }
}

/// The retrieval distribution over the vocabulary; tokens absent from `ns` get exactly 0.
pub fn knn_distribution(ns: &NeighborSet, temp: &TemperatureSpec, vocab_size: usize) -> Result<DenseDistribution> {
    Ok(knn_forward(ns, temp, vocab_size)?.dist)
}

/// Jacobian of the retrieval distribution w.r.t. the effective temperatures.
/// `rows[j][y]` is the derivative of `p[y]` w.r.t. temperature parameter `j`.
#[derive(Debug, Clone)]
pub struct TemperatureJacobian {
    pub rows: Vec<Vec<f64>>,
}

pub fn knn_distribution_grad(
    ns: &NeighborSet,
    temp: &TemperatureSpec,
    vocab_size: usize,
) -> Result<(DenseDistribution, TemperatureJacobian)> {
    let fwd = knn_forward(ns, temp, vocab_size)?;
    let p = fwd.dist.probs();
    let mut rows = vec![vec![0.0; vocab_size]; temp.arity()];
    for (rank, n) in ns.iter().enumerate() {
        let t = temp.at_rank(rank);
        let w = fwd.slot_weights[rank];
        // d s_i / d t_i with s_i = -d_i / t_i
        let ds_dt = n.distance / (t * t);
        let row = match temp.kind {
            TemperatureKind::NeighborWise => &mut rows[rank],
            _ => &mut rows[0],
        };
        for (y, r) in row.iter_mut().enumerate() {
            let indicator = if y == n.token { 1.0 } else { 0.0 };
            *r += w * (indicator - p[y]) * ds_dt;
        }
    }
    Ok((fwd.dist, TemperatureJacobian { rows }))
}
