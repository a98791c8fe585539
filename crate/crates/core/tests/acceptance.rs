//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and exits
//! nonzero if any fails. Criteria 5 to 9 share the default seeded toy fixture.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use knn_adapter::adapter::{
    interpolate, predict, AdapterParams, EmbeddingMatrix, InitConfig, InterpolationKind, Variant,
};
use knn_adapter::analysis::{group_lambda, spearman, TagMap};
use knn_adapter::datastore::{Datastore, Metric, NeighborSet};
use knn_adapter::error::Error;
use knn_adapter::evaluation::{
    evaluate_examples, run_matrix, AccessMode, MatrixModel, Model, NamedDatastore, NamedTrace, STANDARD_LABEL,
};
use knn_adapter::retrieval::{knn_distribution, TemperatureKind, TemperatureSpec};
use knn_adapter::toy::{build_fixture, domain_datastore, Fixture, FixtureConfig, MarkovSpec};
use knn_adapter::trace::{
    read_all, read_embedding_matrix, write_embedding_matrix, write_trace, Encoding, TraceAccess, TraceHeader,
    TraceProbs, TraceRecord,
};
use knn_adapter::trainer::{
    default_lambda_grid, grid_search_baseline, precompute_examples, train_variant, TrainConfig, TrainExample,
    DEFAULT_TEMP_GRID,
};
use knn_adapter::types::{nll, DenseDistribution, Embedding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// (id, name, runtime limit in seconds, check).
type Criterion<'a> = (u32, &'static str, u64, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- random instances

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> DenseDistribution {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    DenseDistribution::new(raw.iter().map(|x| x / total).collect()).unwrap()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.iter().map(|x| x / n).collect()).unwrap()
}

fn random_neighbors(rng: &mut ChaCha8Rng, k: usize, v: usize, max_dist: f64) -> NeighborSet {
    let pairs: Vec<(f64, usize)> = (0..k)
        .map(|_| (rng.random_range(0.0..max_dist), rng.random_range(0..v)))
        .collect();
    NeighborSet::from_pairs(&pairs).unwrap()
}

fn random_w(rng: &mut ChaCha8Rng, v: usize, d: usize, scale: f32) -> Arc<EmbeddingMatrix> {
    let data = (0..v * d).map(|_| rng.random_range(-scale..scale)).collect();
    Arc::new(EmbeddingMatrix::new(v, d, data).unwrap())
}

struct Instance {
    params: AdapterParams,
    p_lm: DenseDistribution,
    ns: NeighborSet,
    f_x: Embedding,
    gold: usize,
}

/// Random parameters for `variant`; `wide` allows extreme values that hit clamps.
fn random_instance(rng: &mut ChaCha8Rng, variant: Variant, max_v: usize, max_k: usize, wide: bool) -> Instance {
    let v = rng.random_range(2..=max_v);
    let k = rng.random_range(1..=max_k);
    let d = rng.random_range(2..=8);
    let (theta, sigma, log_t, w_scale, max_dist) = if wide {
        (8.0, 3.0, 3.0, 1.0, 50.0)
    } else {
        (2.0, 0.1, 1.0, 0.3, 3.0)
    };
    let init = InitConfig {
        lambda: rng.random_range(0.0..=1.0),
        t: rng.random_range(0.5..3.0),
        ..InitConfig::default()
    };
    let w = (variant.interpolation == InterpolationKind::ContextAware).then(|| random_w(rng, v, d, w_scale));
    let base = AdapterParams::initial(variant, init, v, d, k, Metric::SquaredL2, w).unwrap();
    let n_lambda = match variant.interpolation {
        InterpolationKind::FixedLambda => 0,
        InterpolationKind::SingleAdaptive => 1,
        _ => v,
    };
    let n_sigma = if variant.interpolation == InterpolationKind::ContextAware {
        d
    } else {
        0
    };
    let mut raw = Vec::new();
    raw.extend((0..n_lambda).map(|_| rng.random_range(-theta..theta)));
    raw.extend((0..n_sigma).map(|_| rng.random_range(-sigma..sigma)));
    while raw.len() < base.trainable_count() {
        raw.push(rng.random_range(-log_t..log_t));
    }
    let params = base.with_raw_vector(&raw).unwrap();
    Instance {
        params,
        p_lm: random_simplex(rng, v),
        ns: random_neighbors(rng, k, v, max_dist),
        f_x: random_unit(rng, d),
        gold: rng.random_range(0..v),
    }
}

// ---------------------------------------------------------------- criteria 1 to 4

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let variants: Vec<Variant> = Variant::all().collect();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let variant = variants[i % variants.len()];
        let inst = random_instance(&mut rng, variant, 32, 16, true);
        let out = predict(&inst.p_lm, &inst.ns, &inst.params, Some(&inst.f_x)).map_err(err)?;
        let sum: f64 = out.probs().iter().sum();
        worst = worst.max((sum - 1.0).abs());
        check(out.probs().iter().all(|&p| p >= 0.0), || {
            format!("negative entry for {variant}")
        })?;
        check((sum - 1.0).abs() <= 1e-9, || {
            format!("instance {i} ({variant}) sums to {sum}")
        })?;
    }
    Ok(format!("1000 instances over 12 variants, max |sum-1| = {worst:.1e}"))
}

fn degenerate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..200 {
        let v = rng.random_range(2..40);
        let p_lm = random_simplex(&mut rng, v);
        let p_knn = random_simplex(&mut rng, v);
        for (lambda, expect) in [(0.0, &p_lm), (1.0, &p_knn)] {
            let params = AdapterParams::knn_lm(lambda, 1.0, v, 4, 1, Metric::SquaredL2).map_err(err)?;
            let out = interpolate(&p_lm, &p_knn, &params, None).map_err(err)?;
            check(out.probs() == expect.probs(), || {
                format!("lambda {lambda} is not bit-exact")
            })?;
        }
    }
    Ok("200 random pairs, lambda 0 and 1 bit-exact".into())
}

fn loss(inst: &Instance, params: &AdapterParams) -> f64 {
    nll(
        &predict(&inst.p_lm, &inst.ns, params, Some(&inst.f_x)).unwrap(),
        inst.gold,
    )
    .unwrap()
}

/// Relative error with the denominator floored at 1e-5, below which central differences
/// at h = 1e-5 carry ~1e-10 absolute noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let trainable: Vec<Variant> = Variant::all()
        .filter(|v| v.interpolation != InterpolationKind::FixedLambda || v.temperature.is_trainable())
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let configs = 132;
    for i in 0..configs {
        let variant = trainable[i % trainable.len()];
        let inst = random_instance(&mut rng, variant, 16, 8, false);
        let (_, grad) =
            knn_adapter::adapter::interpolate_grad(&inst.p_lm, &inst.ns, &inst.params, Some(&inst.f_x), inst.gold)
                .map_err(err)?;
        let analytic = grad.flat();
        let raw = inst.params.raw_vector();
        check(analytic.len() == raw.len(), || "gradient arity".into())?;
        for j in 0..raw.len() {
            let mut up = raw.clone();
            up[j] += h;
            let mut down = raw.clone();
            down[j] -= h;
            let fu = loss(&inst, &inst.params.with_raw_vector(&up).unwrap());
            let fd = loss(&inst, &inst.params.with_raw_vector(&down).unwrap());
            let numeric = (fu - fd) / (2.0 * h);
            let e = rel_err(analytic[j], numeric);
            worst = worst.max(e);
            checked += 1;
            check(e <= 1e-4, || {
                format!("{variant} param {j}: analytic {} vs numeric {numeric}", analytic[j])
            })?;
        }
    }
    Ok(format!(
        "{configs} configs, {checked} partials, max rel err {worst:.1e}"
    ))
}

fn random_datastore(rng: &mut ChaCha8Rng, n: usize, d: usize, v: usize, metric: Metric) -> Datastore {
    let mut recs: Vec<(Embedding, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        // duplicate some keys so distance ties occur
        let key = if i > 0 && rng.random_bool(0.1) {
            recs[rng.random_range(0..i)].0.clone()
        } else {
            Embedding::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        recs.push((key, rng.random_range(0..v)));
    }
    Datastore::build(recs, metric).unwrap()
}

fn naive_sq(ds: &Datastore, i: usize, q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (k, x) in ds.key(i).iter().zip(q) {
        s += (f64::from(*k) - x).powi(2);
    }
    s
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let v = rng.random_range(2..=12);
        let metric = if trial % 2 == 0 { Metric::SquaredL2 } else { Metric::L2 };
        let ds = random_datastore(&mut rng, n, d, v, metric);
        let q = Embedding::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ns = ds.query_knn(&q, n).map_err(err)?;
        // direct softmax over every entry, ranks from an independent full sort
        let mut all: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let sq = naive_sq(&ds, i, q.values());
                (if metric == Metric::L2 { sq.sqrt() } else { sq }, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let temps: Vec<f64> = if trial % 3 == 0 {
            (0..n).map(|_| rng.random_range(0.5..4.0)).collect()
        } else {
            vec![rng.random_range(0.5..4.0); n]
        };
        let spec = if trial % 3 == 0 {
            TemperatureSpec::neighbor_wise(temps.clone())
        } else {
            TemperatureSpec::fixed(temps[0])
        }
        .map_err(err)?;
        let p = knn_distribution(&ns, &spec, v).map_err(err)?;
        let mut oracle = vec![0.0; v];
        for (rank, &(dist, i)) in all.iter().enumerate() {
            oracle[ds.value(i)] += (-dist / temps[rank]).exp();
        }
        let z: f64 = oracle.iter().sum();
        for (a, b) in p.probs().iter().zip(&oracle) {
            let e = (a - b / z).abs();
            worst = worst.max(e);
            check(e <= 1e-12, || format!("trial {trial}: {a} vs {}", b / z))?;
        }
    }
    let softmax_worst = worst;
    let mut sets = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=512);
        let d = rng.random_range(1..=16);
        let ds = random_datastore(&mut rng, n, d, 20, Metric::SquaredL2);
        let q = Embedding::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = rng.random_range(1..=n);
        let got = ds.query_knn(&q, k).map_err(err)?;
        let mut all: Vec<(f64, usize)> = (0..n).map(|i| (ds.squared_distance(i, q.values()), i)).collect();
        for &(sq, i) in &all {
            let naive = naive_sq(&ds, i, q.values());
            check((sq - naive).abs() <= 1e-12 * naive.max(1.0), || {
                format!("distance {sq} vs {naive}")
            })?;
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<(f64, usize, usize)> = all[..k].iter().map(|&(s, i)| (s, i, ds.value(i))).collect();
        let found: Vec<(f64, usize, usize)> = got.iter().map(|nb| (nb.distance, nb.entry_index, nb.token)).collect();
        check(found == expect, || {
            format!("query_knn differs from full sort (n={n}, k={k})")
        })?;
        sets += 1;
    }
    Ok(format!(
        "200 softmax trials max err {softmax_worst:.1e}; {sets} top-k sets identical to full sort"
    ))
}

// ---------------------------------------------------------------- toy fixture criteria

/// The training schedule used for adapter variants on the fixture. The adapter has up to
/// |V| + d + k + 2 parameters, and per-token coefficients see ~1/|V| of each batch
/// gradient, so convergence needs a larger step than the interactive default.
fn schedule(init: InitConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: 2.0,
        batch_size: 128,
        max_epochs: 100,
        plateau_tol: f64::NEG_INFINITY,
        seed: 7,
        init,
    }
}

struct Shared {
    fixture: Fixture,
}

impl Shared {
    fn examples(&self, records: &[TraceRecord], mode: AccessMode) -> Result<Vec<TrainExample>, String> {
        let fx = &self.fixture;
        precompute_examples(records, fx.vocab.len(), &fx.datastore, fx.config.k, mode).map_err(err)
    }

    fn knn_lm(&self, lambda: f64, t: f64) -> AdapterParams {
        let c = &self.fixture.config;
        AdapterParams::knn_lm(lambda, t, self.fixture.vocab.len(), c.d, c.k, c.metric).unwrap()
    }
}

fn fixed_t(kind: InterpolationKind) -> Variant {
    Variant::new(kind, TemperatureKind::Fixed)
}

fn dominance(s: &Shared) -> Outcome {
    let val = s.examples(&s.fixture.validation, AccessMode::Full)?;
    let grid = grid_search_baseline(&val, &default_lambda_grid(), &DEFAULT_TEMP_GRID).map_err(err)?;
    let cfg = schedule(InitConfig {
        t: grid.t,
        ..InitConfig::default()
    });
    let metric = s.fixture.config.metric;
    let single = train_variant(&val, fixed_t(InterpolationKind::SingleAdaptive), &cfg, metric, None).map_err(err)?;
    let token = train_variant(&val, fixed_t(InterpolationKind::TokenWise), &cfg, metric, None).map_err(err)?;
    let (g, a, b) = (grid.nll, single.final_nll(), token.final_nll());
    check(a <= g + 1e-3, || format!("single {a:.6} > grid {g:.6} + 1e-3"))?;
    check(b <= a + 1e-3, || format!("token-wise {b:.6} > single {a:.6} + 1e-3"))?;
    Ok(format!(
        "train NLL grid {g:.5} (lambda={}, t={}) >= single {a:.5} >= token-wise {b:.5}",
        grid.lambda, grid.t
    ))
}

struct ModeRow {
    standard: f64,
    tuned_knn: f64,
    adapter: f64,
    untuned_knn: f64,
}

fn evaluate_mode(s: &Shared, mode: AccessMode, untuned: (f64, f64)) -> Result<ModeRow, String> {
    let val = s.examples(&s.fixture.validation, mode)?;
    let test = s.examples(&s.fixture.test, mode)?;
    let grid = grid_search_baseline(&val, &default_lambda_grid(), &DEFAULT_TEMP_GRID).map_err(err)?;
    let metric = s.fixture.config.metric;
    let adapter = train_variant(&val, Variant::DEFAULT, &schedule(InitConfig::default()), metric, None).map_err(err)?;
    let ppl = |m: Model| {
        evaluate_examples(&test, &m, "", "", mode)
            .map(|r| r.perplexity)
            .map_err(err)
    };
    Ok(ModeRow {
        standard: ppl(Model::Standard)?,
        tuned_knn: ppl(Model::Adapter(s.knn_lm(grid.lambda, grid.t)))?,
        adapter: ppl(Model::Adapter(adapter.params))?,
        untuned_knn: ppl(Model::Adapter(s.knn_lm(untuned.0, untuned.1)))?,
    })
}

fn full_access_ordering(s: &Shared) -> Outcome {
    let r = evaluate_mode(s, AccessMode::Full, (0.25, 1.0))?;
    check(r.standard > r.tuned_knn && r.tuned_knn > r.adapter, || {
        format!(
            "ordering broken: standard {:.4}, kNN-LM {:.4}, adapter {:.4}",
            r.standard, r.tuned_knn, r.adapter
        )
    })?;
    Ok(format!(
        "test ppl standard {:.3} > tuned kNN-LM {:.3} > token-wise adapter {:.3} (gain {:.3})",
        r.standard,
        r.tuned_knn,
        r.adapter,
        r.tuned_knn - r.adapter
    ))
}

fn limited_access_sweep(s: &Shared) -> Outcome {
    let modes = [
        AccessMode::Full,
        AccessMode::TopQ(10),
        AccessMode::TopQ(5),
        AccessMode::TopQ(3),
        AccessMode::TopQ(1),
    ];
    // the untuned reference keeps the full-access grid optimum fixed across modes
    let val = s.examples(&s.fixture.validation, AccessMode::Full)?;
    let full_grid = grid_search_baseline(&val, &default_lambda_grid(), &DEFAULT_TEMP_GRID).map_err(err)?;
    let mut rows = Vec::new();
    for mode in modes {
        rows.push((mode, evaluate_mode(s, mode, (full_grid.lambda, full_grid.t))?));
    }
    let mut summary = Vec::new();
    for (i, (mode, r)) in rows.iter().enumerate() {
        if i > 0 {
            let prev = rows[i - 1].1.standard;
            check(r.standard >= prev, || {
                format!("standard ppl fell from {prev:.4} to {:.4} at {mode}", r.standard)
            })?;
        }
        check(r.adapter <= r.tuned_knn, || {
            format!("{mode}: adapter {:.4} > tuned kNN-LM {:.4}", r.adapter, r.tuned_knn)
        })?;
        summary.push(format!(
            "{mode}: {:.2}/{:.2}/{:.2} (untuned kNN {:.2})",
            r.standard, r.tuned_knn, r.adapter, r.untuned_knn
        ));
    }
    Ok(format!("standard/tuned kNN-LM/adapter: {}", summary.join("; ")))
}

fn datastore_matrix(s: &Shared) -> Outcome {
    let fx = &s.fixture;
    let c = &fx.config;
    let source = domain_datastore(&c.source, c.sizes.datastore, c.d, c.embed_seed, c.metric).map_err(err)?;
    let unrelated_spec = MarkovSpec::independent(c.source.vocab_size, c.source.order, c.source.concentration, 99);
    let unrelated = domain_datastore(&unrelated_spec, c.sizes.datastore, c.d, c.embed_seed, c.metric).map_err(err)?;
    let datastores = [
        NamedDatastore {
            label: "target",
            datastore: &fx.datastore,
        },
        NamedDatastore {
            label: "source",
            datastore: &source,
        },
        NamedDatastore {
            label: "unrelated",
            datastore: &unrelated,
        },
    ];
    let traces = [NamedTrace {
        label: "target-test".into(),
        vocab_size: fx.vocab.len(),
        records: &fx.test,
    }];
    let models = [
        MatrixModel::Standard,
        MatrixModel::TunedKnnLm {
            label: "knn-lm".into(),
            tuning: fx.validation.clone(),
            lambda_grid: default_lambda_grid(),
            temp_grid: DEFAULT_TEMP_GRID.to_vec(),
            k: c.k,
        },
    ];
    let rows = run_matrix(&traces, &datastores, &models, &[AccessMode::Full]).map_err(err)?;
    check(rows.len() == 4, || format!("expected 4 rows, got {}", rows.len()))?;
    let standard: Vec<_> = rows.iter().filter(|r| r.result.model == STANDARD_LABEL).collect();
    check(standard.len() == 1, || "expected one shared standard row".into())?;
    let mut cells = BTreeMap::new();
    for r in rows.iter().filter(|r| r.result.model == "knn-lm") {
        cells.insert(r.result.datastore.clone(), r.result.perplexity);
    }
    check(cells.len() == 3, || "missing kNN-LM cells".into())?;
    let std_ppl = standard[0].result.perplexity;
    let matched = cells["target"];
    check(matched < std_ppl, || {
        format!("matched kNN-LM {matched:.4} >= standard {std_ppl:.4}")
    })?;
    Ok(format!(
        "standard {std_ppl:.3}; kNN-LM target {matched:.3}, source {:.3}, unrelated {:.3}",
        cells["source"], cells["unrelated"]
    ))
}

fn init_sweep(s: &Shared) -> Outcome {
    let val = s.examples(&s.fixture.validation, AccessMode::Full)?;
    let mut finals = Vec::new();
    for i in 0..=5 {
        let init = i as f64 / 10.0;
        let cfg = TrainConfig {
            max_epochs: 20,
            init: InitConfig::default().with_lambda_for(InterpolationKind::TokenWise, init),
            ..TrainConfig::default()
        };
        let report = train_variant(&val, Variant::DEFAULT, &cfg, s.fixture.config.metric, None).map_err(err)?;
        let curve = &report.epoch_nll;
        check(curve.len() >= 2, || format!("init {init}: empty curve"))?;
        for w in curve[1..].windows(2) {
            check(w[1] <= w[0], || {
                format!("init {init}: NLL rose from {} to {}", w[0], w[1])
            })?;
        }
        finals.push(format!("{init:.1}->{:.3}", report.final_nll().exp()));
    }
    Ok(format!("6 monotone curves, final train ppl {}", finals.join(", ")))
}

// ---------------------------------------------------------------- criteria 10 and 11

fn midrank_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn analysis_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(3..60);
        let levels = rng.random_range(2..8);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        match spearman(&xs, &ys) {
            Ok(r) => {
                let e = (r.rho - midrank_oracle(&xs, &ys)).abs();
                worst = worst.max(e);
                check(e <= 1e-12, || format!("rho {} vs oracle", r.rho))?;
                done += 1;
            }
            Err(Error::DegenerateInput(_)) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    let mut group_worst = 0.0f64;
    for _ in 0..200 {
        let v = rng.random_range(1..300);
        let lam: Vec<f64> = (0..v).map(|_| rng.random_range(0.0..=1.0)).collect();
        let tags = TagMap::new((0..v).map(|_| format!("tag{}", rng.random_range(0..12))).collect());
        let min_group = rng.random_range(0..25);
        let report = group_lambda(&lam, &tags, min_group, None).map_err(err)?;
        let mean = lam.iter().sum::<f64>() / v as f64;
        let e = (report.reconstructed_mean() - mean).abs();
        group_worst = group_worst.max(e);
        check(e <= 1e-12, || format!("group reconstruction off by {e}"))?;
    }
    Ok(format!(
        "spearman max err {worst:.1e} on 200 tied vectors; group means reconstruct within {group_worst:.1e}"
    ))
}

fn expect_format_error(
    result: knn_adapter::Result<impl Sized>,
    what: &str,
    want: fn(&Error) -> bool,
) -> Result<(), String> {
    match result {
        Ok(_) => Err(format!("{what}: accepted")),
        Err(e) if want(&e) && e.is_format_error() => Ok(()),
        Err(e) => Err(format!("{what}: wrong error {e:?}")),
    }
}

fn corruptions(
    path: &Path,
    header_len: usize,
    load: &dyn Fn(&Path) -> knn_adapter::Result<()>,
) -> Result<usize, String> {
    let bytes = std::fs::read(path).map_err(err)?;
    let dir = path.parent().unwrap();
    let tmp = dir.join("corrupt.bin");
    let mut cases = 0;
    let run = |data: &[u8]| -> knn_adapter::Result<()> {
        std::fs::write(&tmp, data).unwrap();
        load(&tmp)
    };
    // every truncation point past the header
    for cut in (header_len..bytes.len()).step_by(7) {
        expect_format_error(run(&bytes[..cut]), &format!("truncated at {cut}"), |e| {
            matches!(e, Error::Corrupt { .. })
        })?;
        cases += 1;
    }
    for cut in [0, 3, header_len - 1] {
        expect_format_error(run(&bytes[..cut]), "truncated header", |e| {
            matches!(e, Error::InvalidHeader(_) | Error::BadMagic { .. })
        })?;
        cases += 1;
    }
    for pos in (header_len..bytes.len()).step_by(11) {
        let mut flipped = bytes.clone();
        flipped[pos] ^= 0x10;
        expect_format_error(run(&flipped), &format!("bit flip at {pos}"), |e| {
            matches!(e, Error::Corrupt { .. })
        })?;
        cases += 1;
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    expect_format_error(run(&magic), "bad magic", |e| matches!(e, Error::BadMagic { .. }))?;
    let mut version = bytes.clone();
    version[4] = 99;
    expect_format_error(run(&version), "bad version", |e| {
        matches!(e, Error::FormatVersionMismatch { found: 99, .. })
    })?;
    let mut extra = bytes.clone();
    extra.push(0);
    expect_format_error(run(&extra), "trailing byte", |e| matches!(e, Error::Corrupt { .. }))?;
    Ok(cases + 3)
}

fn formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut cases = 0;

    let ds = random_datastore(&mut rng, 40, 6, 9, Metric::L2);
    let a = dir.path().join("a.knds");
    let b = dir.path().join("b.knds");
    ds.save(&a).map_err(err)?;
    let back = Datastore::load(&a).map_err(err)?;
    check(back == ds, || "datastore differs after load".into())?;
    back.save(&b).map_err(err)?;
    check(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), || {
        "datastore bytes differ".into()
    })?;
    cases += corruptions(&a, 21, &|p| Datastore::load(p).map(|_| ()))?;

    let v = 12;
    for access in [TraceAccess::Full, TraceAccess::TopQ(3)] {
        let records: Vec<TraceRecord> = (0..25)
            .map(|_| {
                let p = random_simplex(&mut rng, v);
                let probs = match access {
                    TraceAccess::Full => TraceProbs::Full(p.probs().iter().map(|&x| x as f32).collect()),
                    TraceAccess::TopQ(q) => TraceProbs::TopQ(
                        knn_adapter::SparseTopQ::truncate(&p, q)
                            .unwrap()
                            .entries()
                            .iter()
                            .map(|&(t, x)| (t as u32, x as f32))
                            .collect(),
                    ),
                };
                TraceRecord {
                    embedding: random_unit(&mut rng, 5).to_f32(),
                    gold: rng.random_range(0..v as u32),
                    probs,
                    context: None,
                }
            })
            .collect();
        let header = TraceHeader::new(v, 5, access, records.len() as u64).map_err(err)?;
        let a = dir.path().join("a.knnt");
        let b = dir.path().join("b.knnt");
        write_trace(&header, &records, &a, Encoding::Binary).map_err(err)?;
        let (h2, back) = read_all(&a).map_err(err)?;
        check(h2 == header && back == records, || "trace differs after read".into())?;
        write_trace(&h2, &back, &b, Encoding::Binary).map_err(err)?;
        check(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), || {
            "trace bytes differ".into()
        })?;
        cases += corruptions(&a, 29, &|p| read_all(p).map(|_| ()))?;
    }

    let w = random_w(&mut rng, 7, 4, 1.0);
    let a = dir.path().join("a.knnw");
    let b = dir.path().join("b.knnw");
    write_embedding_matrix(&w, &a).map_err(err)?;
    let back = read_embedding_matrix(&a).map_err(err)?;
    write_embedding_matrix(&back, &b).map_err(err)?;
    check(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), || {
        "matrix bytes differ".into()
    })?;
    cases += corruptions(&a, 16, &|p| read_embedding_matrix(p).map(|_| ()))?;
    Ok(format!(
        "datastore, full and top-3 trace, and W roundtrip byte-identically; {cases} corruptions rejected"
    ))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let fixture_start = Instant::now();
    let shared = match build_fixture(&FixtureConfig::default()) {
        Ok(fixture) => Shared { fixture },
        Err(e) => {
            println!("FAIL fixture: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("fixture built in {:.2?}", fixture_start.elapsed());
    let s = &shared;
    let criteria: Vec<Criterion> = vec![
        (1, "normalization suite", 5, Box::new(normalization)),
        (2, "degenerate coefficients", 1, Box::new(degenerate)),
        (3, "gradient correctness", 10, Box::new(gradients)),
        (4, "retrieval oracle", 5, Box::new(retrieval_oracle)),
        (5, "optimizer dominance", 60, Box::new(|| dominance(s))),
        (6, "full-access ordering", 300, Box::new(|| full_access_ordering(s))),
        (7, "limited-access sweep", 600, Box::new(|| limited_access_sweep(s))),
        (8, "cross-datastore matrix", 300, Box::new(|| datastore_matrix(s))),
        (9, "init-sensitivity sweep", 600, Box::new(|| init_sweep(s))),
        (10, "analysis oracles", 5, Box::new(analysis_oracles)),
        (11, "format suite", 5, Box::new(formats)),
    ];
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > Duration::from_secs(limit) => {
                Err(format!("{detail}; took {took:.2?}, limit {limit} s"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name} [{took:.2?}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name} [{took:.2?}]: {detail}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
