//! SGD training of adapter parameters and the grid-searched kNN-LM baseline.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{interpolate_grad, predict, AdapterParams, EmbeddingMatrix, InitConfig, ParamGrad, Variant};
use crate::datastore::{Datastore, NeighborSet};
use crate::error::{Error, Result};
use crate::evaluation::{densify_topq, AccessMode};
use crate::retrieval::{knn_distribution, TemperatureSpec};
use crate::trace::{LmProbs, TraceRecord};
use crate::types::{nll, pairwise_sum, DenseDistribution, Embedding, TokenId, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the relative epoch improvement falls below this; `-inf` never stops early.
    pub plateau_tol: f64,
    pub seed: u64,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 128,
            max_epochs: 5,
            plateau_tol: 1e-4,
            seed: 0,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max epochs must be at least 1".into()));
        }
        if self.plateau_tol.is_nan() {
            return Err(Error::InvalidConfig("plateau tolerance is NaN".into()));
        }
        Ok(())
    }
}

/// One prediction event with its neighbors already retrieved.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub f_x: Embedding,
    pub gold: TokenId,
    /// The probabilities as stored in the trace.
    pub lm: LmProbs,
    /// `lm` seen through the run's access mode.
    pub p_lm: DenseDistribution,
    pub neighbors: NeighborSet,
}

impl TrainExample {
    /// Re-derives `p_lm` under another access mode.
    pub fn set_access(&mut self, mode: AccessMode) -> Result<()> {
        self.p_lm = densify_topq(&self.lm, mode, self.p_lm.len())?;
        Ok(())
    }
}

/// Retrieves the k neighbors of every record once.
pub fn precompute_examples(
    records: &[TraceRecord],
    vocab_size: usize,
    datastore: &Datastore,
    k: usize,
    mode: AccessMode,
) -> Result<Vec<TrainExample>> {
    if k > datastore.len() || k == 0 {
        return Err(Error::KTooLarge {
            k,
            size: datastore.len(),
        });
    }
    records
        .par_iter()
        .map(|r| {
            let f_x = r.embedding()?;
            let gold = r.gold as usize;
            if gold >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: gold,
                    vocab_size,
                });
            }
            let lm = r.lm_probs(vocab_size)?;
            let p_lm = densify_topq(&lm, mode, vocab_size)?;
            let neighbors = datastore.query_knn(&f_x, k)?;
            Ok(TrainExample {
                f_x,
                gold,
                lm,
                p_lm,
                neighbors,
            })
        })
        .collect()
}

fn check_examples(examples: &[TrainExample], params: &AdapterParams) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.p_lm.len() != params.vocab_size || ex.f_x.dim() != params.dim || ex.neighbors.len() != params.k {
            return Err(Error::ArityMismatch(format!(
                "example {i} has |V|={}, d={}, k={}; parameters expect |V|={}, d={}, k={}",
                ex.p_lm.len(),
                ex.f_x.dim(),
                ex.neighbors.len(),
                params.vocab_size,
                params.dim,
                params.k
            )));
        }
    }
    Ok(())
}

/// Mean NLL of the adapter prediction over `examples`, summed pairwise in example order.
pub fn mean_nll(examples: &[TrainExample], params: &AdapterParams) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let losses = examples
        .par_iter()
        .map(|ex| nll(&predict(&ex.p_lm, &ex.neighbors, params, Some(&ex.f_x))?, ex.gold))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training NLL at the initial parameters (index 0) and after each epoch.
    pub epoch_nll: Vec<f64>,
    pub params: AdapterParams,
    pub wall_time: Duration,
    pub steps: usize,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn final_nll(&self) -> f64 {
        *self.epoch_nll.last().expect("at least the initial NLL")
    }

    /// `epoch,mean_nll,perplexity` rows, epoch 0 being the initialization.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_nll,perplexity\n");
        for (e, l) in self.epoch_nll.iter().enumerate() {
            writeln!(out, "{e},{l:.10},{:.10}", l.exp()).unwrap();
        }
        out
    }
}

fn non_finite(epoch: usize, step: usize, detail: String) -> Error {
    Error::NonFiniteLoss { epoch, step, detail }
}

/// Plain mini-batch SGD on mean batch NLL starting from `initial`.
pub fn sgd_train(examples: &[TrainExample], initial: AdapterParams, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    initial.validate()?;
    check_examples(examples, &initial)?;
    let start = Instant::now();
    let mut params = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let initial_nll = mean_nll(examples, &params)?;
    if !initial_nll.is_finite() {
        return Err(non_finite(0, 0, format!("initial mean NLL {initial_nll}")));
    }
    let mut epoch_nll = vec![initial_nll];
    let mut steps = 0;
    let mut stop = StopReason::MaxEpochs;
    let trainable = params.trainable_count() > 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        if trainable {
            for batch in order.chunks(cfg.batch_size) {
                let per_example = batch
                    .par_iter()
                    .map(|&i| {
                        let ex = &examples[i];
                        interpolate_grad(&ex.p_lm, &ex.neighbors, &params, Some(&ex.f_x), ex.gold)
                    })
                    .collect::<Result<Vec<(f64, ParamGrad)>>>()?;
                let mut grad = params.zero_grad();
                let scale = 1.0 / batch.len() as f64;
                for (pos, (loss, g)) in per_example.iter().enumerate() {
                    if !loss.is_finite() || !g.is_finite() {
                        return Err(non_finite(
                            epoch,
                            steps,
                            format!("example {} gave loss {loss}", batch[pos]),
                        ));
                    }
                    grad.add_scaled(g, scale);
                }
                params = params.step(&grad, cfg.learning_rate);
                steps += 1;
            }
        } else {
            steps += order.len().div_ceil(cfg.batch_size);
        }
        let current = mean_nll(examples, &params)?;
        if !current.is_finite() {
            return Err(non_finite(epoch, steps, format!("epoch mean NLL {current}")));
        }
        let previous = *epoch_nll.last().unwrap();
        epoch_nll.push(current);
        if (previous - current) / previous.abs().max(f64::MIN_POSITIVE) < cfg.plateau_tol {
            stop = StopReason::Plateau;
            break;
        }
    }
    Ok(TrainReport {
        epoch_nll,
        params,
        wall_time: start.elapsed(),
        steps,
        stop,
    })
}

/// Infers |V|, d and k from the examples and trains `variant` from `cfg.init`.
pub fn train_variant(
    examples: &[TrainExample],
    variant: Variant,
    cfg: &TrainConfig,
    metric: crate::datastore::Metric,
    w: Option<Arc<EmbeddingMatrix>>,
) -> Result<TrainReport> {
    let first = examples.first().ok_or(Error::EmptyInput)?;
    let initial = AdapterParams::initial(
        variant,
        cfg.init,
        first.p_lm.len(),
        first.f_x.dim(),
        first.neighbors.len(),
        metric,
        w,
    )?;
    sgd_train(examples, initial, cfg)
}

pub const DEFAULT_TEMP_GRID: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

/// λ ∈ {0, 0.05, …, 1}.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub lambda: f64,
    pub t: f64,
    pub nll: f64,
}

/// Mean NLL of every fixed (λ, t) pair; returns the best, ties going to smaller λ then smaller t.
pub fn grid_search_baseline(examples: &[TrainExample], lambda_grid: &[f64], temp_grid: &[f64]) -> Result<GridResult> {
    Ok(grid_table(examples, lambda_grid, temp_grid)?
        .into_iter()
        .min_by(|a, b| {
            a.nll
                .total_cmp(&b.nll)
                .then(a.lambda.total_cmp(&b.lambda))
                .then(a.t.total_cmp(&b.t))
        })
        .expect("nonempty grid"))
}

/// Every grid cell, ordered by t then λ as given.
pub fn grid_table(examples: &[TrainExample], lambda_grid: &[f64], temp_grid: &[f64]) -> Result<Vec<GridResult>> {
    if lambda_grid.is_empty() || temp_grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(l) = lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidConfig(format!("grid lambda {l} not in [0,1]")));
    }
    let mut out = Vec::with_capacity(lambda_grid.len() * temp_grid.len());
    for &t in temp_grid {
        let temp = TemperatureSpec::fixed(t)?;
        // (p_knn[gold], p_lm[gold]) per example
        let golds = examples
            .par_iter()
            .map(|ex| {
                let a = knn_distribution(&ex.neighbors, &temp, ex.p_lm.len())?;
                Ok((a.prob(ex.gold), ex.p_lm.prob(ex.gold)))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        for &l in lambda_grid {
            let losses: Vec<f64> = golds
                .iter()
                .map(|&(a, b)| -(l * a + (1.0 - l) * b).max(PROB_FLOOR).ln())
                .collect();
            out.push(GridResult {
                lambda: l,
                t,
                nll: pairwise_sum(&losses) / losses.len() as f64,
            });
        }
    }
    Ok(out)
}
