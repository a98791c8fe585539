//! A synthetic world standing in for real corpora and a real model: Markov-chain
//! domains, an add-α n-gram LM trained on a source domain, and a hashed context encoder.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::adapter::EmbeddingMatrix;
use crate::datastore::{Datastore, Metric};
use crate::error::{Error, Result};
use crate::trace::{TraceAccess, TraceHeader, TraceProbs, TraceRecord};
use crate::types::{DenseDistribution, Embedding, TokenId, Vocabulary};

/// Number of trailing context tokens the encoder looks at.
pub const EMBED_WINDOW: usize = 4;
/// Weights of the trailing tokens, most recent first.
pub const POSITION_WEIGHTS: [f64; EMBED_WINDOW] = [1.0, 0.7, 0.5, 0.35];

const MAX_TABLE_CONTEXTS: usize = 1 << 22;

/// How the transition tables of a domain are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainPrior {
    /// Every row ~ symmetric Dirichlet(concentration).
    Independent,
    /// Every row ~ Dirichlet(pseudo_count · base row), where the base chain is drawn
    /// independently from `base_seed` with the same size, order and concentration.
    Perturbed { base_seed: u64, pseudo_count: f64 },
    /// Mean-preserving reshuffle around the base row: the mass the base row puts on a
    /// seeded subset of `domain_tokens` tokens is kept but redistributed as
    /// Dirichlet(domain_pseudo_count · base share); the remaining tokens are redrawn the same
    /// way with `other_pseudo_count`. A small domain count makes the base LM unreliable on
    /// exactly those tokens.
    Reshuffled {
        base_seed: u64,
        domain_tokens: usize,
        domain_pseudo_count: f64,
        other_pseudo_count: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub vocab_size: usize,
    /// Context length of the generator.
    pub order: usize,
    pub concentration: f64,
    pub seed: u64,
    pub prior: DomainPrior,
}

impl MarkovSpec {
    pub fn independent(vocab_size: usize, order: usize, concentration: f64, seed: u64) -> Self {
        Self {
            vocab_size,
            order,
            concentration,
            seed,
            prior: DomainPrior::Independent,
        }
    }

    /// `base` reshuffled strongly on a seeded subset of tokens and weakly elsewhere.
    pub fn reshuffled(
        base: &MarkovSpec,
        seed: u64,
        domain_tokens: usize,
        domain_pseudo_count: f64,
        other_pseudo_count: f64,
    ) -> Self {
        Self {
            seed,
            prior: DomainPrior::Reshuffled {
                base_seed: base.seed,
                domain_tokens,
                domain_pseudo_count,
                other_pseudo_count,
            },
            ..*base
        }
    }

    /// A domain drawn around `base`'s transition tables.
    pub fn perturbed(base: &MarkovSpec, seed: u64, pseudo_count: f64) -> Self {
        Self {
            seed,
            prior: DomainPrior::Perturbed {
                base_seed: base.seed,
                pseudo_count,
            },
            ..*base
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig("vocab_size must be at least 4".into()));
        }
        if self.order < 1 {
            return Err(Error::InvalidConfig("order must be at least 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::InvalidConfig("concentration must be positive".into()));
        }
        match self.prior {
            DomainPrior::Independent => {}
            DomainPrior::Perturbed { pseudo_count, .. } => {
                if !(pseudo_count > 0.0 && pseudo_count.is_finite()) {
                    return Err(Error::InvalidConfig("pseudo_count must be positive".into()));
                }
            }
            DomainPrior::Reshuffled {
                domain_tokens,
                domain_pseudo_count,
                other_pseudo_count,
                ..
            } => {
                if domain_tokens == 0 || domain_tokens >= self.vocab_size {
                    return Err(Error::InvalidConfig("domain_tokens must be in 1..vocab_size".into()));
                }
                for c in [domain_pseudo_count, other_pseudo_count] {
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(Error::InvalidConfig("pseudo counts must be positive".into()));
                    }
                }
            }
        }
        let contexts = self
            .vocab_size
            .checked_pow(self.order as u32)
            .filter(|&c| c <= MAX_TABLE_CONTEXTS);
        if contexts.is_none() {
            return Err(Error::InvalidConfig(
                "vocab_size^order is too large for a dense table".into(),
            ));
        }
        Ok(())
    }
}

/// Dense transition tables of a Markov chain, one cumulative row per context.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    spec: MarkovSpec,
    rows: Vec<Vec<f64>>,
}

fn dirichlet(rng: &mut ChaCha8Rng, alphas: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut draws: Vec<f64> = alphas
        .map(|a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // every gamma draw underflowed; fall back to the most likely token
        let n = draws.len();
        draws = vec![0.0; n];
        draws[0] = 1.0;
    }
    draws
}

fn domain_subset(vocab_size: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let mut all: Vec<TokenId> = (0..vocab_size).collect();
    all.shuffle(rng);
    all.truncate(size);
    all.sort_unstable();
    all
}

impl MarkovChain {
    pub fn new(spec: &MarkovSpec) -> Result<Self> {
        spec.validate()?;
        let contexts = spec.vocab_size.pow(spec.order as u32);
        let v = spec.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let rows = match spec.prior {
            DomainPrior::Independent => (0..contexts)
                .map(|_| dirichlet(&mut rng, std::iter::repeat_n(spec.concentration, v)))
                .collect(),
            DomainPrior::Perturbed {
                base_seed,
                pseudo_count,
            } => {
                let base = MarkovChain::new(&MarkovSpec {
                    seed: base_seed,
                    prior: DomainPrior::Independent,
                    ..*spec
                })?;
                base.rows
                    .iter()
                    .map(|row| {
                        let alphas = row.iter().map(|&p| pseudo_count * p + 1e-6);
                        dirichlet(&mut rng, alphas)
                    })
                    .collect()
            }
            DomainPrior::Reshuffled {
                base_seed,
                domain_tokens,
                domain_pseudo_count,
                other_pseudo_count,
            } => {
                let base = MarkovChain::new(&MarkovSpec {
                    seed: base_seed,
                    prior: DomainPrior::Independent,
                    ..*spec
                })?;
                let domain = domain_subset(v, domain_tokens, &mut rng);
                let mut in_domain = vec![false; v];
                domain.iter().for_each(|&t| in_domain[t] = true);
                let other: Vec<TokenId> = (0..v).filter(|&t| !in_domain[t]).collect();
                base.rows
                    .iter()
                    .map(|row| {
                        let mut out = vec![0.0; v];
                        for (group, count) in [(&domain, domain_pseudo_count), (&other, other_pseudo_count)] {
                            let mass: f64 = group.iter().map(|&t| row[t]).sum();
                            let alphas = group.iter().map(|&t| count * row[t] / mass + 1e-6);
                            for (&t, share) in group.iter().zip(dirichlet(&mut rng, alphas)) {
                                out[t] = mass * share;
                            }
                        }
                        out
                    })
                    .collect()
            }
        };
        Ok(Self { spec: *spec, rows })
    }

    pub fn spec(&self) -> &MarkovSpec {
        &self.spec
    }

    /// The strongly reshuffled tokens of a reshuffled domain, re-derived from the seed.
    pub fn domain_tokens(&self) -> Option<Vec<TokenId>> {
        match self.spec.prior {
            DomainPrior::Reshuffled { domain_tokens, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
                Some(domain_subset(self.spec.vocab_size, domain_tokens, &mut rng))
            }
            _ => None,
        }
    }

    fn context_index(&self, ctx: &[TokenId]) -> usize {
        ctx.iter().fold(0, |acc, &t| acc * self.spec.vocab_size + t)
    }

    /// Transition probabilities after the last `order` tokens of `ctx`.
    pub fn transition(&self, ctx: &[TokenId]) -> &[f64] {
        let tail = &ctx[ctx.len() - self.spec.order..];
        &self.rows[self.context_index(tail)]
    }

    /// Samples `length` tokens; the first `order` are uniform.
    pub fn sample(&self, length: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let v = self.spec.vocab_size;
        let mut seq = Vec::with_capacity(length);
        for _ in 0..length.min(self.spec.order) {
            seq.push(rng.random_range(0..v));
        }
        while seq.len() < length {
            let row = self.transition(&seq);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = v - 1;
            for (tok, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = tok;
                    break;
                }
            }
            seq.push(next);
        }
        seq
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5EED)))
}

/// Deterministic corpus of `length` tokens from the chain described by `spec`.
pub fn generate_corpus(spec: &MarkovSpec, length: usize) -> Result<Vec<TokenId>> {
    let chain = MarkovChain::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 0));
    Ok(chain.sample(length, &mut rng))
}

type CountTable = HashMap<Vec<TokenId>, (Vec<u32>, u64)>;

/// Add-α n-gram model with backoff to shorter contexts when a context was never seen.
#[derive(Debug, Clone)]
pub struct ToyLM {
    vocab_size: usize,
    order: usize,
    alpha: f64,
    /// `tables[n]` maps a context of length n to (next-token counts, total).
    tables: Vec<CountTable>,
}

/// Fits an n-gram LM whose contexts hold up to `order` tokens (order 1 = bigram).
pub fn fit_ngram(corpus: &[TokenId], vocab_size: usize, order: usize, alpha: f64) -> Result<ToyLM> {
    if corpus.len() <= order || corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig("alpha must be positive".into()));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, vocab_size });
    }
    let mut tables: Vec<CountTable> = vec![HashMap::new(); order + 1];
    for i in 0..corpus.len() {
        let next = corpus[i];
        for (n, table) in tables.iter_mut().enumerate() {
            if n > i {
                break;
            }
            let entry = table
                .entry(corpus[i - n..i].to_vec())
                .or_insert_with(|| (vec![0; vocab_size], 0));
            entry.0[next] += 1;
            entry.1 += 1;
        }
    }
    Ok(ToyLM {
        vocab_size,
        order,
        alpha,
        tables,
    })
}

impl ToyLM {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// p(·|context) from the longest seen suffix of the context (at most `order` tokens).
    pub fn predict(&self, context: &[TokenId]) -> DenseDistribution {
        let longest = self.order.min(context.len());
        for n in (0..=longest).rev() {
            let key = &context[context.len() - n..];
            if let Some((counts, total)) = self.tables[n].get(key) {
                let denom = *total as f64 + self.alpha * self.vocab_size as f64;
                return DenseDistribution::from_raw(
                    counts.iter().map(|&c| (f64::from(c) + self.alpha) / denom).collect(),
                );
            }
        }
        DenseDistribution::uniform(self.vocab_size)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashed bag-of-recent-tokens encoder. Each of the last [`EMBED_WINDOW`] tokens adds
/// ±weight at two distinct hashed coordinates; the result is L2-normalized.
pub fn embed_context(context: &[TokenId], d: usize, seed: u64) -> Result<Embedding> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if d < 8 {
        return Err(Error::InvalidConfig("embedding size must be at least 8".into()));
    }
    let mut v = vec![0.0; d];
    for (pos, &tok) in context.iter().rev().take(EMBED_WINDOW).enumerate() {
        let h1 = splitmix64(seed ^ splitmix64((tok as u64) << 8 | pos as u64));
        let h2 = splitmix64(h1);
        let c1 = (h1 % d as u64) as usize;
        let c2 = (c1 + 1 + (h2 % (d as u64 - 1)) as usize) % d;
        let w = POSITION_WEIGHTS[pos];
        v[c1] += if h1 >> 63 == 0 { w } else { -w };
        v[c2] += if (h2 >> 63) == 0 { w } else { -w };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Embedding::new(v)
}

/// W = {f(v)}: the encoder applied to each single-token sequence.
pub fn token_embedding_matrix(vocab_size: usize, d: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let rows = (0..vocab_size)
        .map(|v| embed_context(&[v], d, seed))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureSizes {
    pub source_corpus: usize,
    pub datastore: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        Self {
            source_corpus: 100_000,
            datastore: 20_000,
            validation: 2_000,
            test: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub source: MarkovSpec,
    pub target: MarkovSpec,
    pub sizes: FixtureSizes,
    pub d: usize,
    pub k: usize,
    pub lm_order: usize,
    pub lm_alpha: f64,
    pub embed_seed: u64,
    pub metric: Metric,
}

pub const DEFAULT_SOURCE_SEED: u64 = 1;
pub const DEFAULT_TARGET_SEED: u64 = 2;
pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_CONCENTRATION: f64 = 0.3;
/// Share of the vocabulary whose transitions are redrawn in the target domain.
pub const DOMAIN_TOKEN_DIVISOR: usize = 4;
pub const DEFAULT_DOMAIN_PSEUDO_COUNT: f64 = 0.5;
pub const DEFAULT_OTHER_PSEUDO_COUNT: f64 = 100.0;

impl FixtureConfig {
    /// The default shifted-domain fixture.
    pub fn shifted(source_seed: u64, target_seed: u64, vocab_size: usize) -> Self {
        let source = MarkovSpec::independent(vocab_size, 1, DEFAULT_CONCENTRATION, source_seed);
        let target = MarkovSpec::reshuffled(
            &source,
            target_seed,
            (vocab_size / DOMAIN_TOKEN_DIVISOR).max(1),
            DEFAULT_DOMAIN_PSEUDO_COUNT,
            DEFAULT_OTHER_PSEUDO_COUNT,
        );
        Self {
            source,
            target,
            sizes: FixtureSizes::default(),
            d: 32,
            k: 32,
            lm_order: 1,
            lm_alpha: 0.1,
            embed_seed: 0xE11C0DE,
            metric: Metric::SquaredL2,
        }
    }

    /// Source and target domains identical.
    pub fn matched(seed: u64, vocab_size: usize) -> Self {
        let mut cfg = Self::shifted(seed, seed, vocab_size);
        cfg.target = cfg.source;
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.source.vocab_size != self.target.vocab_size {
            return Err(Error::InvalidConfig("source and target vocabularies differ".into()));
        }
        let s = &self.sizes;
        if s.datastore == 0 || s.validation == 0 || s.test == 0 || s.source_corpus <= self.lm_order {
            return Err(Error::InvalidConfig("fixture split sizes must be positive".into()));
        }
        if self.k == 0 || self.k > s.datastore {
            return Err(Error::KTooLarge {
                k: self.k,
                size: s.datastore,
            });
        }
        Ok(())
    }
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self::shifted(DEFAULT_SOURCE_SEED, DEFAULT_TARGET_SEED, DEFAULT_VOCAB)
    }
}

/// Everything an end-to-end run needs.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: FixtureConfig,
    pub vocab: Vocabulary,
    pub source_corpus: Vec<TokenId>,
    pub lm: ToyLM,
    /// Target-domain events the datastore is built from.
    pub train: Vec<TraceRecord>,
    pub datastore: Datastore,
    pub validation: Vec<TraceRecord>,
    pub test: Vec<TraceRecord>,
    pub w: EmbeddingMatrix,
}

/// Split streams of the target domain.
const STREAM_DATASTORE: u64 = 1;
const STREAM_VALIDATION: u64 = 2;
const STREAM_TEST: u64 = 3;

impl Fixture {
    pub fn header(&self, records: &[TraceRecord]) -> TraceHeader {
        TraceHeader {
            version: crate::trace::TRACE_VERSION,
            vocab_size: self.vocab.len(),
            dim: self.config.d,
            access: TraceAccess::Full,
            count: records.len() as u64,
        }
    }
}

/// Prediction events for every position of a fresh sample after a warm-up window.
pub fn trace_records(
    chain: &MarkovChain,
    lm: &ToyLM,
    count: usize,
    seed: u64,
    d: usize,
    embed_seed: u64,
) -> Result<Vec<TraceRecord>> {
    let warmup = EMBED_WINDOW.max(chain.spec().order);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = chain.sample(count + warmup, &mut rng);
    let keep = EMBED_WINDOW.max(lm.order());
    (warmup..seq.len())
        .map(|i| {
            let ctx = &seq[..i];
            let f = embed_context(ctx, d, embed_seed)?;
            let p = lm.predict(ctx);
            Ok(TraceRecord {
                embedding: f.to_f32(),
                gold: seq[i] as u32,
                probs: TraceProbs::Full(p.probs().iter().map(|&x| x as f32).collect()),
                context: Some(
                    ctx[ctx.len() - keep.min(ctx.len())..]
                        .iter()
                        .map(|&t| t as u32)
                        .collect(),
                ),
            })
        })
        .collect()
}

/// Builds the source LM, the target datastore, and target validation/test traces.
pub fn build_fixture(config: &FixtureConfig) -> Result<Fixture> {
    config.validate()?;
    let vocab = Vocabulary::synthetic(config.source.vocab_size)?;
    let source_corpus = generate_corpus(&config.source, config.sizes.source_corpus)?;
    let lm = fit_ngram(&source_corpus, vocab.len(), config.lm_order, config.lm_alpha)?;
    let target = MarkovChain::new(&config.target)?;
    let seed = config.target.seed;
    let split = |stream, count| {
        trace_records(
            &target,
            &lm,
            count,
            stream_seed(seed, stream),
            config.d,
            config.embed_seed,
        )
    };
    let train = split(STREAM_DATASTORE, config.sizes.datastore)?;
    let validation = split(STREAM_VALIDATION, config.sizes.validation)?;
    let test = split(STREAM_TEST, config.sizes.test)?;
    let datastore = Datastore::from_f32_records(
        train.iter().map(|r| (r.embedding.as_slice(), r.gold as usize)),
        config.metric,
    )?;
    let w = token_embedding_matrix(vocab.len(), config.d, config.embed_seed)?;
    Ok(Fixture {
        config: *config,
        vocab,
        source_corpus,
        lm,
        train,
        datastore,
        validation,
        test,
        w,
    })
}

/// A datastore built from a different domain, sharing the fixture's encoder.
pub fn domain_datastore(
    spec: &MarkovSpec,
    size: usize,
    d: usize,
    embed_seed: u64,
    metric: Metric,
) -> Result<Datastore> {
    let chain = MarkovChain::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, STREAM_DATASTORE));
    let seq = chain.sample(size + EMBED_WINDOW, &mut rng);
    let records = (EMBED_WINDOW..seq.len())
        .map(|i| Ok((embed_context(&seq[..i], d, embed_seed)?, seq[i])))
        .collect::<Result<Vec<_>>>()?;
    Datastore::build(records, metric)
}
