//! Shared domain types: vocabulary, embeddings, and next-token distributions.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Floor applied to the gold-token probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the total mass of a [`DenseDistribution`].
pub const DENSE_MASS_TOL: f64 = 1e-9;

/// Tolerance on the total mass of a [`SparseTopQ`].
pub const SPARSE_MASS_TOL: f64 = 1e-6;

pub type TokenId = usize;

/// Dense token universe; ids are `0..len()` in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut seen = HashSet::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.contains('\n') {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: "token contains a newline".into(),
                });
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens })
    }

    /// Synthetic vocabulary `t0, t1, ...` used by the toy world.
    pub fn synthetic(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("t{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        Self::new(body.split('\n').map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.tokens {
            out.extend_from_slice(t.as_bytes());
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}

/// A context embedding f(x) or datastore key f(c).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("embedding has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A full next-token distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDistribution(Vec<f64>);

impl DenseDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_entries(&probs)?;
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > DENSE_MASS_TOL {
            return Err(Error::InvalidDistribution(format!("mass {mass} is not 1")));
        }
        Ok(Self(probs))
    }

    /// Validate a low-precision payload at `tol`, then renormalize in f64.
    pub fn from_f32(probs: &[f32], tol: f64) -> Result<Self> {
        let wide: Vec<f64> = probs.iter().map(|&p| f64::from(p)).collect();
        check_entries(&wide)?;
        let mass: f64 = wide.iter().sum();
        if (mass - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!("mass {mass} is not 1")));
        }
        renormalize(&wide)
    }

    /// Uniform distribution over `size` tokens.
    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn one_hot(size: usize, token: TokenId) -> Self {
        let mut p = vec![0.0; size];
        p[token] = 1.0;
        Self(p)
    }

    /// Wraps values produced by arithmetic that preserves normalization.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[token]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_entries(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
    }
    Ok(())
}

/// The q most probable tokens of a distribution, as exposed by a restricted API.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTopQ {
    entries: Vec<(TokenId, f64)>,
    vocab_size: usize,
}

impl SparseTopQ {
    pub fn new(entries: Vec<(TokenId, f64)>, vocab_size: usize) -> Result<Self> {
        if entries.is_empty() || entries.len() > vocab_size {
            return Err(Error::InvalidDistribution(format!(
                "q = {} must be in 1..={vocab_size}",
                entries.len()
            )));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for &(tok, p) in &entries {
            if tok >= vocab_size {
                return Err(Error::TokenOutOfRange { token: tok, vocab_size });
            }
            if !seen.insert(tok) {
                return Err(Error::InvalidDistribution(format!("duplicate token {tok}")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
            }
        }
        if entries.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(Error::InvalidDistribution("top-q entries not descending".into()));
        }
        let mass: f64 = entries.iter().map(|e| e.1).sum();
        if mass > 1.0 + SPARSE_MASS_TOL {
            return Err(Error::MassExceedsOne(mass));
        }
        Ok(Self { entries, vocab_size })
    }

    /// Keeps the q largest entries of `dist`; equal probabilities go to the lower token id.
    pub fn truncate(dist: &DenseDistribution, q: usize) -> Result<Self> {
        let mut order: Vec<TokenId> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist.0[b].total_cmp(&dist.0[a]).then(a.cmp(&b)));
        order.truncate(q);
        Self::new(order.into_iter().map(|t| (t, dist.0[t])).collect(), dist.len())
    }

    pub fn q(&self) -> usize {
        self.entries.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }
}

/// Divides nonnegative scores by their total.
pub fn renormalize(scores: &[f64]) -> Result<DenseDistribution> {
    if scores.is_empty() || scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::ZeroMass);
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(DenseDistribution(scores.iter().map(|s| s / total).collect()))
}

/// Negative log-likelihood in nats, with the gold probability floored at [`PROB_FLOOR`].
pub fn nll(p: &DenseDistribution, gold: TokenId) -> Result<f64> {
    let pg = *p.0.get(gold).ok_or(Error::IndexOutOfRange {
        index: gold,
        size: p.len(),
    })?;
    Ok(-pg.max(PROB_FLOOR).ln())
}

/// Pairwise summation in a fixed order; used wherever accumulated NLL must be reproducible.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn renormalize_examples() {
        assert_eq!(renormalize(&[2.0, 2.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(renormalize(&[1.0, 0.0, 0.0]).unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert_eq!(renormalize(&[1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
    }

    #[test]
    fn renormalize_rejects_bad_mass() {
        assert!(matches!(renormalize(&[0.0, 0.0]), Err(Error::ZeroMass)));
        assert!(matches!(renormalize(&[1.0, -0.5]), Err(Error::ZeroMass)));
        assert!(matches!(renormalize(&[1.0, f64::NAN]), Err(Error::ZeroMass)));
        assert!(matches!(renormalize(&[f64::INFINITY]), Err(Error::ZeroMass)));
    }

    #[test]
    fn nll_examples() {
        let one = DenseDistribution::one_hot(3, 1);
        assert_eq!(nll(&one, 1).unwrap(), 0.0);
        let half = DenseDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(nll(&half, 0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(nll(&one, 0).unwrap(), 27.631021115928547, epsilon = 1e-9);
        assert!(matches!(
            nll(&one, 3),
            Err(Error::IndexOutOfRange { index: 3, size: 3 })
        ));
    }

    #[test]
    fn dense_rejects_bad_mass() {
        assert!(DenseDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DenseDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(DenseDistribution::from_f32(&[0.5, 0.5004], 1e-3).is_ok());
        assert!(DenseDistribution::from_f32(&[0.5, 0.51], 1e-3).is_err());
    }

    #[test]
    fn sparse_invariants() {
        assert!(SparseTopQ::new(vec![(0, 0.5), (2, 0.3)], 4).is_ok());
        assert!(SparseTopQ::new(vec![(0, 0.3), (2, 0.5)], 4).is_err());
        assert!(SparseTopQ::new(vec![(0, 0.3), (0, 0.2)], 4).is_err());
        assert!(matches!(
            SparseTopQ::new(vec![(0, 0.7), (1, 0.6)], 4),
            Err(Error::MassExceedsOne(_))
        ));
        assert!(SparseTopQ::new(vec![(9, 0.1)], 4).is_err());
    }

    #[test]
    fn truncate_breaks_ties_by_lower_id() {
        let p = DenseDistribution::new(vec![0.2, 0.3, 0.3, 0.2]).unwrap();
        let top = SparseTopQ::truncate(&p, 3).unwrap();
        assert_eq!(top.entries(), &[(1, 0.3), (2, 0.3), (0, 0.2)]);
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::new(vec!["the".into(), "".into(), "ü".into()]).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        assert_eq!(v.id("ü"), Some(2));
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    proptest! {
        #[test]
        fn renormalize_is_scale_idempotent(
            scores in prop::collection::vec(0.0f64..10.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(scores.iter().sum::<f64>() > 1e-6);
            let once = renormalize(&scores).unwrap();
            let scaled: Vec<f64> = once.probs().iter().map(|p| p * c).collect();
            let twice = renormalize(&scaled).unwrap();
            for (a, b) in once.probs().iter().zip(twice.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((once.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn nll_decreases_in_gold_prob(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let d = |p: f64| DenseDistribution::new(vec![p, 1.0 - p]).unwrap();
            prop_assert!(nll(&d(lo), 0).unwrap() >= nll(&d(hi), 0).unwrap());
        }
    }
}
