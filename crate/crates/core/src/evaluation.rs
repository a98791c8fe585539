//! Perplexity evaluation under full or top-q access to the LM distribution.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{predict, AdapterParams};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::trace::{LmProbs, TraceRecord};
use crate::trainer::{grid_search_baseline, precompute_examples, GridResult, TrainExample};
use crate::types::{nll, pairwise_sum, DenseDistribution, SparseTopQ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AccessMode {
    #[default]
    Full,
    /// Only the q most probable tokens are visible.
    TopQ(usize),
}

impl AccessMode {
    pub fn validate(self, vocab_size: usize) -> Result<()> {
        match self {
            AccessMode::TopQ(q) if q == 0 || q >= vocab_size => Err(Error::InvalidConfig(format!(
                "top-q access needs 1 <= q < |V| = {vocab_size}, got {q}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessMode::Full => f.write_str("full"),
            AccessMode::TopQ(q) => write!(f, "top-{q}"),
        }
    }
}

impl FromStr for AccessMode {
    type Err = Error;

    /// Accepts `full`, `top-q`, `topq` and `top_q` forms.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "full" {
            return Ok(AccessMode::Full);
        }
        let digits = s
            .strip_prefix("top")
            .map(|r| r.trim_start_matches(['-', '_']))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown access mode {s:?}")))?;
        let q = digits
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("unknown access mode {s:?}")))?;
        if q == 0 {
            return Err(Error::InvalidConfig("top-q needs q >= 1".into()));
        }
        Ok(AccessMode::TopQ(q))
    }
}

impl Serialize for AccessMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AccessMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn fill(top: &SparseTopQ) -> DenseDistribution {
    let v = top.vocab_size();
    let q = top.q();
    let mass = top.mass();
    // at most SPARSE_MASS_TOL above one: scale back to exactly the simplex
    let (scale, rest) = if mass > 1.0 {
        (1.0 / mass, 0.0)
    } else if q < v {
        (1.0, (1.0 - mass) / (v - q) as f64)
    } else {
        (1.0, 0.0)
    };
    let mut probs = vec![rest; v];
    for &(tok, p) in top.entries() {
        probs[tok] = p * scale;
    }
    if q == v && mass < 1.0 {
        // a sparse record that lists every token but lost mass in storage
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    DenseDistribution::from_raw(probs)
}

/// The LM distribution as seen under `mode`: the visible top-q tokens keep their
/// probability and the remaining mass is spread uniformly over the others.
///
/// A sparse input under full access is densified with its own q.
pub fn densify_topq(p: &LmProbs, mode: AccessMode, vocab_size: usize) -> Result<DenseDistribution> {
    mode.validate(vocab_size)?;
    match (p, mode) {
        (LmProbs::Dense(d), _) if d.len() != vocab_size => Err(Error::DimensionMismatch {
            expected: vocab_size,
            found: d.len(),
        }),
        (LmProbs::TopQ(s), _) if s.vocab_size() != vocab_size => Err(Error::DimensionMismatch {
            expected: vocab_size,
            found: s.vocab_size(),
        }),
        (LmProbs::Dense(d), AccessMode::Full) => Ok(d.clone()),
        (LmProbs::Dense(d), AccessMode::TopQ(q)) => Ok(fill(&SparseTopQ::truncate(d, q)?)),
        (LmProbs::TopQ(s), AccessMode::Full) => Ok(fill(s)),
        (LmProbs::TopQ(s), AccessMode::TopQ(q)) => {
            if s.q() < q {
                return Err(Error::InvalidConfig(format!(
                    "record exposes only the top {} tokens, top-{q} requested",
                    s.q()
                )));
            }
            Ok(fill(&SparseTopQ::new(s.entries()[..q].to_vec(), vocab_size)?))
        }
    }
}

/// Which distribution gets scored.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Standard,
    /// kNN-LM (fixed λ, t) or any adapter variant.
    Adapter(AdapterParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub datastore: String,
    pub access: AccessMode,
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

fn per_token_nll(examples: &[TrainExample], model: &Model) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|ex| match model {
            Model::Standard => nll(&ex.p_lm, ex.gold),
            Model::Adapter(params) => {
                if ex.neighbors.len() != params.k {
                    return Err(Error::ArityMismatch(format!(
                        "example has {} neighbors, parameters expect k = {}",
                        ex.neighbors.len(),
                        params.k
                    )));
                }
                nll(&predict(&ex.p_lm, &ex.neighbors, params, Some(&ex.f_x))?, ex.gold)
            }
        })
        .collect()
}

/// Scores precomputed examples; their `p_lm` already reflects the access mode.
pub fn evaluate_examples(
    examples: &[TrainExample],
    model: &Model,
    model_label: &str,
    datastore_label: &str,
    access: AccessMode,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let losses = per_token_nll(examples, model)?;
    let mean_nll = pairwise_sum(&losses) / losses.len() as f64;
    Ok(EvalResult {
        model: model_label.to_string(),
        datastore: datastore_label.to_string(),
        access,
        tokens: losses.len(),
        mean_nll,
        perplexity: mean_nll.exp(),
    })
}

fn standard_results(records: &[TraceRecord], vocab_size: usize, mode: AccessMode) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| {
            let p = densify_topq(&r.lm_probs(vocab_size)?, mode, vocab_size)?;
            let gold = r.gold as usize;
            if gold >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: gold,
                    vocab_size,
                });
            }
            nll(&p, gold)
        })
        .collect()
}

/// Perplexity of one model on a trace. The standard LM ignores `datastore`.
pub fn perplexity(
    records: &[TraceRecord],
    vocab_size: usize,
    datastore: Option<&Datastore>,
    params: Option<&AdapterParams>,
    mode: AccessMode,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    match params {
        None => {
            let losses = standard_results(records, vocab_size, mode)?;
            let mean_nll = pairwise_sum(&losses) / losses.len() as f64;
            Ok(EvalResult {
                model: STANDARD_LABEL.into(),
                datastore: NO_DATASTORE.into(),
                access: mode,
                tokens: losses.len(),
                mean_nll,
                perplexity: mean_nll.exp(),
            })
        }
        Some(params) => {
            let ds = datastore.ok_or_else(|| Error::InvalidConfig("kNN models need a datastore".into()))?;
            if ds.dim() != params.dim {
                return Err(Error::DimensionMismatch {
                    expected: params.dim,
                    found: ds.dim(),
                });
            }
            let examples = precompute_examples(records, vocab_size, ds, params.k, mode)?;
            evaluate_examples(
                &examples,
                &Model::Adapter(params.clone()),
                &model_label(params),
                "",
                mode,
            )
        }
    }
}

pub const STANDARD_LABEL: &str = "standard";
pub const NO_DATASTORE: &str = "-";

/// "knn-lm" for fixed (λ, t), otherwise "adapter:<variant>".
pub fn model_label(params: &AdapterParams) -> String {
    use crate::adapter::InterpolationKind;
    use crate::retrieval::TemperatureKind;
    let v = params.variant();
    if v.interpolation == InterpolationKind::FixedLambda && v.temperature == TemperatureKind::Fixed {
        "knn-lm".into()
    } else {
        format!("adapter:{v}")
    }
}

/// How a matrix model obtains its parameters for each (datastore, access mode) cell.
#[derive(Debug, Clone)]
pub enum MatrixModel {
    Standard,
    Fixed {
        label: String,
        params: AdapterParams,
    },
    /// Fixed (λ, t) re-tuned per cell on `tuning` before scoring.
    TunedKnnLm {
        label: String,
        tuning: Vec<TraceRecord>,
        lambda_grid: Vec<f64>,
        temp_grid: Vec<f64>,
        k: usize,
    },
}

#[derive(Debug, Clone)]
pub struct NamedTrace<'a> {
    pub label: String,
    pub vocab_size: usize,
    pub records: &'a [TraceRecord],
}

#[derive(Debug, Clone, Copy)]
pub struct NamedDatastore<'a> {
    pub label: &'a str,
    pub datastore: &'a Datastore,
}

/// One evaluated cell, with the tuned grid point when the model was tuned.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub trace: String,
    pub result: EvalResult,
    pub tuned: Option<GridResult>,
}

/// Cartesian product of traces × modes × (models × datastores). The standard LM is
/// independent of the datastore and emits one shared row per trace and mode.
pub fn run_matrix(
    traces: &[NamedTrace<'_>],
    datastores: &[NamedDatastore<'_>],
    models: &[MatrixModel],
    modes: &[AccessMode],
) -> Result<Vec<MatrixRow>> {
    let mut rows = Vec::new();
    for trace in traces {
        for &mode in modes {
            mode.validate(trace.vocab_size)?;
            for model in models {
                match model {
                    MatrixModel::Standard => {
                        let result = perplexity(trace.records, trace.vocab_size, None, None, mode)?;
                        rows.push(MatrixRow {
                            trace: trace.label.clone(),
                            result,
                            tuned: None,
                        });
                    }
                    MatrixModel::Fixed { label, params } => {
                        for ds in datastores {
                            let mut result =
                                perplexity(trace.records, trace.vocab_size, Some(ds.datastore), Some(params), mode)?;
                            result.model = label.clone();
                            result.datastore = ds.label.to_string();
                            rows.push(MatrixRow {
                                trace: trace.label.clone(),
                                result,
                                tuned: None,
                            });
                        }
                    }
                    MatrixModel::TunedKnnLm {
                        label,
                        tuning,
                        lambda_grid,
                        temp_grid,
                        k,
                    } => {
                        for ds in datastores {
                            let tune = precompute_examples(tuning, trace.vocab_size, ds.datastore, *k, mode)?;
                            let best = grid_search_baseline(&tune, lambda_grid, temp_grid)?;
                            let params = AdapterParams::knn_lm(
                                best.lambda,
                                best.t,
                                trace.vocab_size,
                                ds.datastore.dim(),
                                *k,
                                ds.datastore.metric(),
                            )?;
                            let mut result =
                                perplexity(trace.records, trace.vocab_size, Some(ds.datastore), Some(&params), mode)?;
                            result.model = label.clone();
                            result.datastore = ds.label.to_string();
                            rows.push(MatrixRow {
                                trace: trace.label.clone(),
                                result,
                                tuned: Some(best),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub const RESULTS_CSV_HEADER: &str = "model,datastore,access_mode,tokens,mean_nll,perplexity";

pub fn results_csv<'a>(results: impl IntoIterator<Item = &'a EvalResult>) -> String {
    let mut out = format!("{RESULTS_CSV_HEADER}\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{:.10},{:.6}",
            r.model, r.datastore, r.access, r.tokens, r.mean_nll, r.perplexity
        )
        .unwrap();
    }
    out
}

/// Aligned text table with one row per model and one perplexity column per access mode.
pub fn results_table<'a>(results: impl IntoIterator<Item = &'a EvalResult>) -> String {
    let results: Vec<&EvalResult> = results.into_iter().collect();
    let mut modes: Vec<AccessMode> = Vec::new();
    let mut rows: Vec<(String, String)> = Vec::new();
    for r in &results {
        if !modes.contains(&r.access) {
            modes.push(r.access);
        }
        let key = (r.model.clone(), r.datastore.clone());
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    let model_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("model".len());
    let ds_w = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("datastore".len());
    let mut out = format!("{:<model_w$}  {:<ds_w$}", "model", "datastore");
    for m in &modes {
        write!(out, "  {:>10}", m.to_string()).unwrap();
    }
    out.push('\n');
    for (model, ds) in &rows {
        write!(out, "{model:<model_w$}  {ds:<ds_w$}").unwrap();
        for m in &modes {
            match results
                .iter()
                .find(|r| &r.model == model && &r.datastore == ds && r.access == *m)
            {
                Some(r) => write!(out, "  {:>10.3}", r.perplexity).unwrap(),
                None => write!(out, "  {:>10}", "").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}
