//! The adapter forward pass: interpolating the LM and retrieval distributions with
//! trainable coefficients, and its exact gradient.
//!
//! Raw parameters are unconstrained. Interpolation coefficients pass through the
//! logistic function; adaptive temperatures are stored as `ln t`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datastore::{Metric, NeighborSet};
use crate::error::{Error, Result};
use crate::retrieval::{knn_forward, TemperatureKind, TemperatureSpec};
use crate::types::{renormalize, DenseDistribution, Embedding, TokenId, PROB_FLOOR};

/// Bounds of the context-aware coefficient, and of every initial coefficient value.
pub const LAMBDA_EPS: f64 = 1e-4;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; the argument is clamped to `[LAMBDA_EPS, 1 - LAMBDA_EPS]`.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationKind {
    FixedLambda,
    SingleAdaptive,
    TokenWise,
    ContextAware,
}

impl InterpolationKind {
    pub const ALL: [InterpolationKind; 4] = [
        InterpolationKind::FixedLambda,
        InterpolationKind::SingleAdaptive,
        InterpolationKind::TokenWise,
        InterpolationKind::ContextAware,
    ];

    /// Scalar kinds mix two normalized distributions and need no renormalization.
    pub fn is_scalar(self) -> bool {
        matches!(self, InterpolationKind::FixedLambda | InterpolationKind::SingleAdaptive)
    }
}

/// A (interpolation, temperature) design choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub interpolation: InterpolationKind,
    pub temperature: TemperatureKind,
}

impl Variant {
    pub const fn new(interpolation: InterpolationKind, temperature: TemperatureKind) -> Self {
        Self {
            interpolation,
            temperature,
        }
    }

    /// Token-wise coefficients with one adaptive temperature.
    pub const DEFAULT: Variant = Variant::new(InterpolationKind::TokenWise, TemperatureKind::SingleAdaptive);

    pub fn all() -> impl Iterator<Item = Variant> {
        InterpolationKind::ALL
            .into_iter()
            .flat_map(|i| TemperatureKind::ALL.into_iter().map(move |t| Variant::new(i, t)))
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = match self.interpolation {
            InterpolationKind::FixedLambda => "fixed",
            InterpolationKind::SingleAdaptive => "single",
            InterpolationKind::TokenWise => "token",
            InterpolationKind::ContextAware => "context",
        };
        let t = match self.temperature {
            TemperatureKind::Fixed => "fixed",
            TemperatureKind::SingleAdaptive => "single",
            TemperatureKind::NeighborWise => "neighbor",
        };
        write!(f, "{i}×{t}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Parses `token×single`, `token:single`, `token-single` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown variant {s:?}; expected e.g. token×single"));
        let (i, t) = s
            .split_once('×')
            .or_else(|| s.split_once([':', ',', '-', '/']))
            .ok_or_else(bad)?;
        let interpolation = match i.trim() {
            "fixed" => InterpolationKind::FixedLambda,
            "single" => InterpolationKind::SingleAdaptive,
            "token" => InterpolationKind::TokenWise,
            "context" => InterpolationKind::ContextAware,
            _ => return Err(bad()),
        };
        let temperature = match t.trim() {
            "fixed" => TemperatureKind::Fixed,
            "single" => TemperatureKind::SingleAdaptive,
            "neighbor" => TemperatureKind::NeighborWise,
            _ => return Err(bad()),
        };
        Ok(Variant::new(interpolation, temperature))
    }
}

/// Raw interpolation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterpolationSpec {
    FixedLambda {
        fixed_value: f64,
    },
    SingleAdaptive {
        theta_lambda: f64,
    },
    TokenWise {
        theta_lambda: Vec<f64>,
    },
    ContextAware {
        theta_lambda: Vec<f64>,
        theta_sigma: Vec<f64>,
    },
}

impl InterpolationSpec {
    pub fn kind(&self) -> InterpolationKind {
        match self {
            InterpolationSpec::FixedLambda { .. } => InterpolationKind::FixedLambda,
            InterpolationSpec::SingleAdaptive { .. } => InterpolationKind::SingleAdaptive,
            InterpolationSpec::TokenWise { .. } => InterpolationKind::TokenWise,
            InterpolationSpec::ContextAware { .. } => InterpolationKind::ContextAware,
        }
    }
}

/// Raw temperature parameters. Adaptive kinds hold `ln t`; the fixed kind holds `t` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureParams {
    Fixed { t: f64 },
    SingleAdaptive { log_t: f64 },
    NeighborWise { log_t: Vec<f64> },
}

impl TemperatureParams {
    pub fn kind(&self) -> TemperatureKind {
        match self {
            TemperatureParams::Fixed { .. } => TemperatureKind::Fixed,
            TemperatureParams::SingleAdaptive { .. } => TemperatureKind::SingleAdaptive,
            TemperatureParams::NeighborWise { .. } => TemperatureKind::NeighborWise,
        }
    }

    pub fn effective(&self) -> Result<TemperatureSpec> {
        match self {
            TemperatureParams::Fixed { t } => TemperatureSpec::fixed(*t),
            TemperatureParams::SingleAdaptive { log_t } => TemperatureSpec::single(log_t.exp()),
            TemperatureParams::NeighborWise { log_t } => {
                TemperatureSpec::neighbor_wise(log_t.iter().map(|l| l.exp()).collect())
            }
        }
    }
}

/// The fixed token-embedding matrix W, one row per vocabulary token, stored at f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab_size: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(vocab_size: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != vocab_size * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab_size * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("W has non-finite entries".into()));
        }
        Ok(Self { vocab_size, dim, data })
    }

    pub fn from_rows(rows: &[Embedding]) -> Result<Self> {
        let dim = rows.first().ok_or(Error::EmptyInput)?.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.dim(),
                });
            }
            data.extend(r.to_f32());
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: TokenId) -> &[f32] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Effective initial values per parameter class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub lambda: f64,
    pub token_lambda: f64,
    pub context_lambda: f64,
    pub t: f64,
    pub neighbor_t: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            token_lambda: 0.1,
            context_lambda: 0.1,
            t: 1.0,
            neighbor_t: 1.0,
        }
    }
}

impl InitConfig {
    /// Sets the initial coefficient used by the given interpolation kind.
    pub fn with_lambda_for(mut self, kind: InterpolationKind, value: f64) -> Self {
        match kind {
            InterpolationKind::FixedLambda | InterpolationKind::SingleAdaptive => self.lambda = value,
            InterpolationKind::TokenWise => self.token_lambda = value,
            InterpolationKind::ContextAware => self.context_lambda = value,
        }
        self
    }

    pub fn with_t_for(mut self, kind: TemperatureKind, value: f64) -> Self {
        match kind {
            TemperatureKind::Fixed | TemperatureKind::SingleAdaptive => self.t = value,
            TemperatureKind::NeighborWise => self.neighbor_t = value,
        }
        self
    }
}

/// A full snapshot of adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub interp: InterpolationSpec,
    pub temp: TemperatureParams,
    pub k: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub metric: Metric,
    pub init: InitConfig,
    pub w: Option<Arc<EmbeddingMatrix>>,
}

impl AdapterParams {
    /// Parameters at their initial values: raw = logit(init) and ln(init t). Context weights start at 0.
    pub fn initial(
        variant: Variant,
        init: InitConfig,
        vocab_size: usize,
        dim: usize,
        k: usize,
        metric: Metric,
        w: Option<Arc<EmbeddingMatrix>>,
    ) -> Result<Self> {
        let interp = match variant.interpolation {
            InterpolationKind::FixedLambda => {
                if !(0.0..=1.0).contains(&init.lambda) {
                    return Err(Error::InvalidConfig(format!(
                        "fixed lambda {} not in [0,1]",
                        init.lambda
                    )));
                }
                InterpolationSpec::FixedLambda {
                    fixed_value: init.lambda,
                }
            }
            InterpolationKind::SingleAdaptive => InterpolationSpec::SingleAdaptive {
                theta_lambda: logit(init.lambda),
            },
            InterpolationKind::TokenWise => InterpolationSpec::TokenWise {
                theta_lambda: vec![logit(init.token_lambda); vocab_size],
            },
            InterpolationKind::ContextAware => InterpolationSpec::ContextAware {
                theta_lambda: vec![logit(init.context_lambda); vocab_size],
                theta_sigma: vec![0.0; dim],
            },
        };
        let positive = |t: f64| {
            if t.is_finite() && t > 0.0 {
                Ok(t)
            } else {
                Err(Error::InvalidTemperature(t))
            }
        };
        let temp = match variant.temperature {
            TemperatureKind::Fixed => TemperatureParams::Fixed { t: positive(init.t)? },
            TemperatureKind::SingleAdaptive => TemperatureParams::SingleAdaptive {
                log_t: positive(init.t)?.ln(),
            },
            TemperatureKind::NeighborWise => TemperatureParams::NeighborWise {
                log_t: vec![positive(init.neighbor_t)?.ln(); k],
            },
        };
        let params = Self {
            interp,
            temp,
            k,
            vocab_size,
            dim,
            metric,
            init,
            w,
        };
        params.validate()?;
        Ok(params)
    }

    /// Plain kNN-LM with fixed coefficient and temperature.
    pub fn knn_lm(lambda: f64, t: f64, vocab_size: usize, dim: usize, k: usize, metric: Metric) -> Result<Self> {
        let init = InitConfig {
            lambda,
            t,
            ..InitConfig::default()
        };
        Self::initial(
            Variant::new(InterpolationKind::FixedLambda, TemperatureKind::Fixed),
            init,
            vocab_size,
            dim,
            k,
            metric,
            None,
        )
    }

    pub fn variant(&self) -> Variant {
        Variant::new(self.interp.kind(), self.temp.kind())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.vocab_size == 0 || self.dim == 0 {
            return Err(Error::ArityMismatch("k, |V| and d must be positive".into()));
        }
        let arity = |what: &str, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(Error::ArityMismatch(format!(
                    "{what}: expected {expected}, found {found}"
                )))
            }
        };
        match &self.interp {
            InterpolationSpec::FixedLambda { fixed_value } => {
                if !(0.0..=1.0).contains(fixed_value) {
                    return Err(Error::ArityMismatch(format!("fixed lambda {fixed_value} not in [0,1]")));
                }
            }
            InterpolationSpec::SingleAdaptive { .. } => {}
            InterpolationSpec::TokenWise { theta_lambda } => {
                arity("theta_lambda", self.vocab_size, theta_lambda.len())?
            }
            InterpolationSpec::ContextAware {
                theta_lambda,
                theta_sigma,
            } => {
                arity("theta_lambda", self.vocab_size, theta_lambda.len())?;
                arity("theta_sigma", self.dim, theta_sigma.len())?;
                let w = self.w.as_ref().ok_or(Error::MissingW)?;
                arity("W rows", self.vocab_size, w.vocab_size())?;
                arity("W columns", self.dim, w.dim())?;
            }
        }
        if let TemperatureParams::NeighborWise { log_t } = &self.temp {
            arity("log_t", self.k, log_t.len())?;
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        let interp = match &self.interp {
            InterpolationSpec::FixedLambda { .. } => 0,
            InterpolationSpec::SingleAdaptive { .. } => 1,
            InterpolationSpec::TokenWise { theta_lambda } => theta_lambda.len(),
            InterpolationSpec::ContextAware {
                theta_lambda,
                theta_sigma,
            } => theta_lambda.len() + theta_sigma.len(),
        };
        let temp = match &self.temp {
            TemperatureParams::Fixed { .. } => 0,
            TemperatureParams::SingleAdaptive { .. } => 1,
            TemperatureParams::NeighborWise { log_t } => log_t.len(),
        };
        interp + temp
    }

    /// Context-free per-token coefficient: the context term of the context-aware kind is dropped.
    pub fn token_lambda(&self) -> Vec<f64> {
        match &self.interp {
            InterpolationSpec::FixedLambda { fixed_value } => vec![*fixed_value; self.vocab_size],
            InterpolationSpec::SingleAdaptive { theta_lambda } => vec![sigmoid(*theta_lambda); self.vocab_size],
            InterpolationSpec::TokenWise { theta_lambda } | InterpolationSpec::ContextAware { theta_lambda, .. } => {
                theta_lambda.iter().map(|&t| sigmoid(t)).collect()
            }
        }
    }

    pub fn zero_grad(&self) -> ParamGrad {
        let (lambda, sigma) = match &self.interp {
            InterpolationSpec::FixedLambda { .. } => (0, 0),
            InterpolationSpec::SingleAdaptive { .. } => (1, 0),
            InterpolationSpec::TokenWise { theta_lambda } => (theta_lambda.len(), 0),
            InterpolationSpec::ContextAware {
                theta_lambda,
                theta_sigma,
            } => (theta_lambda.len(), theta_sigma.len()),
        };
        let temp = match &self.temp {
            TemperatureParams::Fixed { .. } => 0,
            TemperatureParams::SingleAdaptive { .. } => 1,
            TemperatureParams::NeighborWise { log_t } => log_t.len(),
        };
        ParamGrad {
            lambda: vec![0.0; lambda],
            sigma: vec![0.0; sigma],
            log_t: vec![0.0; temp],
        }
    }

    /// New snapshot after a gradient step of size `lr`.
    pub fn step(&self, grad: &ParamGrad, lr: f64) -> AdapterParams {
        let mut next = self.clone();
        let update = |theta: &mut [f64], g: &[f64]| {
            for (t, g) in theta.iter_mut().zip(g) {
                *t -= lr * g;
            }
        };
        match &mut next.interp {
            InterpolationSpec::FixedLambda { .. } => {}
            InterpolationSpec::SingleAdaptive { theta_lambda } => *theta_lambda -= lr * grad.lambda[0],
            InterpolationSpec::TokenWise { theta_lambda } => update(theta_lambda, &grad.lambda),
            InterpolationSpec::ContextAware {
                theta_lambda,
                theta_sigma,
            } => {
                update(theta_lambda, &grad.lambda);
                update(theta_sigma, &grad.sigma);
            }
        }
        match &mut next.temp {
            TemperatureParams::Fixed { .. } => {}
            TemperatureParams::SingleAdaptive { log_t } => *log_t -= lr * grad.log_t[0],
            TemperatureParams::NeighborWise { log_t } => update(log_t, &grad.log_t),
        }
        next
    }

    /// Every raw parameter in a fixed order: lambda block, sigma block, temperature block.
    pub fn raw_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.interp {
            InterpolationSpec::FixedLambda { .. } => {}
            InterpolationSpec::SingleAdaptive { theta_lambda } => out.push(*theta_lambda),
            InterpolationSpec::TokenWise { theta_lambda } => out.extend(theta_lambda),
            InterpolationSpec::ContextAware {
                theta_lambda,
                theta_sigma,
            } => {
                out.extend(theta_lambda);
                out.extend(theta_sigma);
            }
        }
        match &self.temp {
            TemperatureParams::Fixed { .. } => {}
            TemperatureParams::SingleAdaptive { log_t } => out.push(*log_t),
            TemperatureParams::NeighborWise { log_t } => out.extend(log_t),
        }
        out
    }

    /// Inverse of [`raw_vector`](Self::raw_vector).
    pub fn with_raw_vector(&self, raw: &[f64]) -> Result<AdapterParams> {
        let expected = self.trainable_count();
        if raw.len() != expected {
            return Err(Error::ArityMismatch(format!(
                "raw vector: expected {expected}, found {}",
                raw.len()
            )));
        }
        let mut next = self.clone();
        let mut it = raw.iter().copied();
        let mut fill = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x = it.next().unwrap());
        match &mut next.interp {
            InterpolationSpec::FixedLambda { .. } => {}
            InterpolationSpec::SingleAdaptive { theta_lambda } => fill(std::slice::from_mut(theta_lambda)),
            InterpolationSpec::TokenWise { theta_lambda } => fill(theta_lambda),
            InterpolationSpec::ContextAware {
                theta_lambda,
                theta_sigma,
            } => {
                fill(theta_lambda);
                fill(theta_sigma);
            }
        }
        match &mut next.temp {
            TemperatureParams::Fixed { .. } => {}
            TemperatureParams::SingleAdaptive { log_t } => fill(std::slice::from_mut(log_t)),
            TemperatureParams::NeighborWise { log_t } => fill(log_t),
        }
        Ok(next)
    }
}

/// Gradient w.r.t. every raw parameter, shaped like [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    /// theta_lambda (length 1 for single adaptive, |V| for token-wise kinds, 0 when fixed).
    pub lambda: Vec<f64>,
    /// theta_sigma (context-aware only).
    pub sigma: Vec<f64>,
    /// ln t or ln T_i (empty when the temperature is fixed).
    pub log_t: Vec<f64>,
}

impl ParamGrad {
    pub fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        for (a, b) in self
            .lambda
            .iter_mut()
            .chain(self.sigma.iter_mut())
            .chain(self.log_t.iter_mut())
            .zip(other.lambda.iter().chain(&other.sigma).chain(&other.log_t))
        {
            *a += scale * b;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.lambda
            .iter()
            .chain(&self.sigma)
            .chain(&self.log_t)
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|g| g.is_finite())
    }
}

struct LambdaEval {
    values: Vec<f64>,
    /// Derivative of each effective entry w.r.t. its own theta_lambda; 0 where clamped.
    slope: Vec<f64>,
    /// Context-aware only: entries inside the clamp range.
    active: Vec<bool>,
    /// Context-aware only: f(x), needed for the theta_sigma gradient.
    context: Option<Vec<f64>>,
}

fn eval_lambda(params: &AdapterParams, f_x: Option<&Embedding>) -> Result<LambdaEval> {
    let v = params.vocab_size;
    Ok(match &params.interp {
        InterpolationSpec::FixedLambda { fixed_value } => LambdaEval {
            values: vec![*fixed_value; v],
            slope: vec![0.0; v],
            active: Vec::new(),
            context: None,
        },
        InterpolationSpec::SingleAdaptive { theta_lambda } => {
            let s = sigmoid(*theta_lambda);
            LambdaEval {
                values: vec![s; v],
                slope: vec![s * (1.0 - s); v],
                active: Vec::new(),
                context: None,
            }
        }
        InterpolationSpec::TokenWise { theta_lambda } => {
            let values: Vec<f64> = theta_lambda.iter().map(|&t| sigmoid(t)).collect();
            let slope = values.iter().map(|s| s * (1.0 - s)).collect();
            LambdaEval {
                values,
                slope,
                active: Vec::new(),
                context: None,
            }
        }
        InterpolationSpec::ContextAware {
            theta_lambda,
            theta_sigma,
        } => {
            let f_x = f_x.ok_or(Error::MissingContext)?;
            let w = params.w.as_ref().ok_or(Error::MissingW)?;
            if f_x.dim() != params.dim {
                return Err(Error::DimensionMismatch {
                    expected: params.dim,
                    found: f_x.dim(),
                });
            }
            let gated: Vec<f64> = theta_sigma.iter().zip(f_x.values()).map(|(s, f)| s * f).collect();
            let mut values = Vec::with_capacity(v);
            let mut slope = Vec::with_capacity(v);
            let mut active = Vec::with_capacity(v);
            for (tok, &theta) in theta_lambda.iter().enumerate() {
                let base = sigmoid(theta);
                let shift: f64 = w.row(tok).iter().zip(&gated).map(|(&wv, g)| f64::from(wv) * g).sum();
                let raw = base + shift;
                let inside = (LAMBDA_EPS..=1.0 - LAMBDA_EPS).contains(&raw);
                values.push(raw.clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS));
                slope.push(if inside { base * (1.0 - base) } else { 0.0 });
                active.push(inside);
            }
            LambdaEval {
                values,
                slope,
                active,
                context: Some(f_x.values().to_vec()),
            }
        }
    })
}

/// Effective per-token interpolation coefficients.
pub fn effective_lambda(params: &AdapterParams, f_x: Option<&Embedding>) -> Result<Vec<f64>> {
    Ok(eval_lambda(params, f_x)?.values)
}

fn check_lengths(p_lm: &DenseDistribution, p_knn: &DenseDistribution, vocab_size: usize) -> Result<()> {
    for len in [p_lm.len(), p_knn.len()] {
        if len != vocab_size {
            return Err(Error::DimensionMismatch {
                expected: vocab_size,
                found: len,
            });
        }
    }
    Ok(())
}

fn mix(lambda: &[f64], p_lm: &DenseDistribution, p_knn: &DenseDistribution) -> Vec<f64> {
    lambda
        .iter()
        .zip(p_knn.probs())
        .zip(p_lm.probs())
        .map(|((&l, &a), &b)| l * a + (1.0 - l) * b)
        .collect()
}

/// Mixes the retrieval and LM distributions. Scalar kinds return the convex combination
/// directly; per-token kinds renormalize it.
pub fn interpolate(
    p_lm: &DenseDistribution,
    p_knn: &DenseDistribution,
    params: &AdapterParams,
    f_x: Option<&Embedding>,
) -> Result<DenseDistribution> {
    check_lengths(p_lm, p_knn, params.vocab_size)?;
    let lambda = eval_lambda(params, f_x)?;
    let s = mix(&lambda.values, p_lm, p_knn);
    if params.interp.kind().is_scalar() {
        Ok(DenseDistribution::from_raw(s))
    } else {
        renormalize(&s)
    }
}

/// Full forward pass from neighbors: retrieval distribution, then interpolation.
pub fn predict(
    p_lm: &DenseDistribution,
    ns: &NeighborSet,
    params: &AdapterParams,
    f_x: Option<&Embedding>,
) -> Result<DenseDistribution> {
    let temp = params.temp.effective()?;
    let fwd = knn_forward(ns, &temp, params.vocab_size)?;
    interpolate(p_lm, &fwd.dist, params, f_x)
}

/// Loss `-ln p[gold]` of the adapter prediction and its gradient w.r.t. every raw parameter,
/// including the temperatures through the retrieval softmax.
pub fn interpolate_grad(
    p_lm: &DenseDistribution,
    ns: &NeighborSet,
    params: &AdapterParams,
    f_x: Option<&Embedding>,
    gold: TokenId,
) -> Result<(f64, ParamGrad)> {
    let v = params.vocab_size;
    if gold >= v {
        return Err(Error::TokenOutOfRange {
            token: gold,
            vocab_size: v,
        });
    }
    let temp = params.temp.effective()?;
    let fwd = knn_forward(ns, &temp, v)?;
    let p_knn = &fwd.dist;
    check_lengths(p_lm, p_knn, v)?;
    let lambda = eval_lambda(params, f_x)?;
    let s = mix(&lambda.values, p_lm, p_knn);
    let scalar = params.interp.kind().is_scalar();
    let total: f64 = if scalar { 1.0 } else { s.iter().sum() };
    if !scalar && (total.is_nan() || total <= 0.0) {
        return Err(Error::ZeroMass);
    }
    let p_gold = s[gold] / total;
    let mut grad = params.zero_grad();
    if p_gold < PROB_FLOOR {
        // the floored loss is flat in every parameter
        return Ok((-PROB_FLOOR.ln(), grad));
    }
    let loss = -p_gold.ln();

    // dL/ds_v: scalar kinds have no normalizer
    let inv_total = if scalar { 0.0 } else { 1.0 / total };
    let mut dl_ds = vec![inv_total; v];
    dl_ds[gold] -= 1.0 / s[gold];

    let a = p_knn.probs();
    let b = p_lm.probs();
    let dl_dlambda: Vec<f64> = (0..v).map(|y| dl_ds[y] * (a[y] - b[y])).collect();

    match &params.interp {
        InterpolationSpec::FixedLambda { .. } => {}
        InterpolationSpec::SingleAdaptive { .. } => {
            let sum: f64 = dl_dlambda.iter().sum();
            grad.lambda[0] = sum * lambda.slope[0];
        }
        InterpolationSpec::TokenWise { .. } => {
            for ((g, &dl), &slope) in grad.lambda.iter_mut().zip(&dl_dlambda).zip(&lambda.slope) {
                *g = dl * slope;
            }
        }
        InterpolationSpec::ContextAware { .. } => {
            let w = params.w.as_ref().ok_or(Error::MissingW)?;
            let f = lambda.context.as_ref().ok_or(Error::MissingContext)?;
            let mut row_acc = vec![0.0; params.dim];
            for (y, (g, &dl)) in grad.lambda.iter_mut().zip(&dl_dlambda).enumerate() {
                *g = dl * lambda.slope[y];
                if lambda.active[y] {
                    for (acc, &wv) in row_acc.iter_mut().zip(w.row(y)) {
                        *acc += dl * f64::from(wv);
                    }
                }
            }
            for (g, (acc, fj)) in grad.sigma.iter_mut().zip(row_acc.iter().zip(f)) {
                *g = acc * fj;
            }
        }
    }

    if params.temp.kind().is_trainable() {
        let dl_da: Vec<f64> = (0..v).map(|y| dl_ds[y] * lambda.values[y]).collect();
        grad.log_t = fwd.backward_log_temperature(&dl_da);
    }
    Ok((loss, grad))
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    vocab_size: usize,
    dim: usize,
    k: usize,
    metric: Metric,
    interpolation: InterpolationSpec,
    temperature: TemperatureParams,
    init: InitConfig,
}

const PARAMS_FORMAT: &str = "knn-adapter-params";
const PARAMS_VERSION: u32 = 1;

impl AdapterParams {
    pub fn to_json(&self) -> Result<String> {
        let file = ParamsFile {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            vocab_size: self.vocab_size,
            dim: self.dim,
            k: self.k,
            metric: self.metric,
            interpolation: self.interp.clone(),
            temperature: self.temp.clone(),
            init: self.init,
        };
        let mut text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialize parameters: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    /// Parses a parameter file. `w` must be supplied for the context-aware kind.
    pub fn from_json(text: &str, w: Option<Arc<EmbeddingMatrix>>) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            detail: e.to_string(),
        })?;
        if file.format != PARAMS_FORMAT {
            return Err(Error::InvalidHeader(format!(
                "unknown parameter format {:?}",
                file.format
            )));
        }
        if file.version != PARAMS_VERSION {
            return Err(Error::FormatVersionMismatch {
                expected: PARAMS_VERSION,
                found: file.version,
            });
        }
        let w = match file.interpolation {
            InterpolationSpec::ContextAware { .. } => w,
            _ => None,
        };
        let params = Self {
            interp: file.interpolation,
            temp: file.temperature,
            k: file.k,
            vocab_size: file.vocab_size,
            dim: file.dim,
            metric: file.metric,
            init: file.init,
            w,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, w: Option<Arc<EmbeddingMatrix>>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, w)
    }
}
