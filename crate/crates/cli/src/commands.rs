use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{Context, Result};
use knn_adapter::analysis::{
    correlation_csv, datastore_frequency, group_lambda, groups_csv, spearman, FrequencyTable, TagMap,
};
use knn_adapter::evaluation::{
    model_label, results_csv, results_table, run_matrix, AccessMode, MatrixModel, NamedDatastore, NamedTrace,
};
use knn_adapter::toy::{build_fixture, FixtureConfig, FixtureSizes};
use knn_adapter::trace::{
    read_all, read_embedding_matrix, validate_trace, write_embedding_matrix, write_trace, Encoding,
};
use knn_adapter::trainer::{default_lambda_grid, grid_table, precompute_examples, sgd_train, GridResult, TrainConfig};
use knn_adapter::{AdapterParams, Datastore, EmbeddingMatrix, InitConfig, InterpolationKind, Variant};

use crate::manifest::{sidecar, Outcome};
use crate::{
    AnalyzeArgs, BuildDatastoreArgs, EvalArgs, Exit, GenToyArgs, SweepInitArgs, TrainArgs, TrainOpts, TuneArgs, Usage,
    ValidateArgs, EXIT_DATA,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_list(text: &str, flag: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{flag}: cannot parse {s:?} as a number")))
        })
        .collect()
}

fn parse_access(text: &str) -> Result<AccessMode> {
    AccessMode::from_str(text).map_err(anyhow::Error::from)
}

/// `LABEL=PATH` or `PATH`, the label defaulting to the file stem.
fn labelled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (label, path)
        }
    }
}

fn load_trace(path: &Path) -> Result<(knn_adapter::trace::TraceHeader, Vec<knn_adapter::trace::TraceRecord>)> {
    read_all(path).with_context(|| format!("reading trace {}", path.display()))
}

fn load_datastore(path: &Path) -> Result<Datastore> {
    Datastore::load(path).with_context(|| format!("reading datastore {}", path.display()))
}

fn load_w(path: Option<&Path>) -> Result<Option<Arc<EmbeddingMatrix>>> {
    path.map(|p| {
        read_embedding_matrix(p)
            .map(Arc::new)
            .with_context(|| format!("reading embedding matrix {}", p.display()))
    })
    .transpose()
}

fn load_params(path: &Path, w: Option<&Path>) -> Result<AdapterParams> {
    AdapterParams::load(path, load_w(w)?).with_context(|| format!("reading parameters {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn gen_toy(a: &GenToyArgs) -> Result<Outcome> {
    let sizes: Vec<usize> = a
        .sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| usage(format!("--sizes: cannot parse {s:?}")))
        })
        .collect::<Result<_>>()?;
    let [source_corpus, datastore, validation, test] = sizes[..] else {
        return Err(usage("--sizes expects source_corpus,datastore,validation,test"));
    };
    let mut cfg = FixtureConfig::shifted(a.source_seed, a.target_seed, a.vocab);
    cfg.d = a.d;
    cfg.k = a.k;
    cfg.sizes = FixtureSizes {
        source_corpus,
        datastore,
        validation,
        test,
    };
    let fixture = build_fixture(&cfg)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let path = |name: &str| a.out_dir.join(name);
    let mut outputs = Vec::new();
    for (name, records) in [
        ("train.knnt", &fixture.train),
        ("validation.knnt", &fixture.validation),
        ("test.knnt", &fixture.test),
    ] {
        write_trace(&fixture.header(records), records, path(name), Encoding::Binary)?;
        outputs.push(path(name));
    }
    fixture.datastore.save(path("datastore.knds"))?;
    outputs.push(path("datastore.knds"));
    fixture.vocab.save(path("vocab.txt"))?;
    outputs.push(path("vocab.txt"));
    write_embedding_matrix(&fixture.w, path("w.knnw"))?;
    outputs.push(path("w.knnw"));
    println!(
        "wrote fixture to {}: |V| = {}, d = {}, datastore {} entries, validation {}, test {}",
        a.out_dir.display(),
        fixture.vocab.len(),
        cfg.d,
        fixture.datastore.len(),
        fixture.validation.len(),
        fixture.test.len()
    );
    Ok(Outcome {
        outputs,
        notes: vec![
            format!("fixture: {}", serde_json::to_string(&cfg)?),
            "f(x): hashed position-weighted bag of the last 4 context tokens, L2-normalized".into(),
        ],
        manifest: Some(path("manifest.json")),
        ..Outcome::default()
    }
    .seed("source_seed", cfg.source.seed)
    .seed("target_seed", cfg.target.seed)
    .seed("embed_seed", cfg.embed_seed))
}

pub fn build_datastore(a: &BuildDatastoreArgs) -> Result<Outcome> {
    let (_, records) = load_trace(&a.trace)?;
    let ds = Datastore::from_f32_records(
        records.iter().map(|r| (r.embedding.as_slice(), r.gold as usize)),
        a.metric.into(),
    )?;
    ds.save(&a.out)?;
    println!("datastore: {} entries, d = {}, {:?}", ds.len(), ds.dim(), ds.metric());
    Ok(Outcome {
        inputs: vec![a.trace.clone()],
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
        ..Outcome::default()
    })
}

fn train_config(opts: &TrainOpts, variant: Variant, init_lambda: Option<f64>) -> TrainConfig {
    let mut init = InitConfig::default();
    if let Some(l) = init_lambda {
        init = init.with_lambda_for(variant.interpolation, l);
    }
    if let Some(t) = opts.init_t {
        init = init.with_t_for(variant.temperature, t);
    }
    TrainConfig {
        learning_rate: opts.lr,
        batch_size: opts.batch,
        max_epochs: opts.epochs,
        plateau_tol: opts.plateau_tol,
        seed: opts.seed,
        init,
    }
}

struct TrainSetup {
    variant: Variant,
    access: AccessMode,
    examples: Vec<knn_adapter::trainer::TrainExample>,
    datastore: Datastore,
    vocab_size: usize,
    w: Option<Arc<EmbeddingMatrix>>,
}

fn train_setup(trace: &Path, datastore: &Path, opts: &TrainOpts) -> Result<TrainSetup> {
    let variant = Variant::from_str(&opts.variant)?;
    let access = parse_access(&opts.access)?;
    let w = load_w(opts.w.as_deref())?;
    if variant.interpolation == InterpolationKind::ContextAware && w.is_none() {
        return Err(usage("context-aware variants need --w"));
    }
    let (header, records) = load_trace(trace)?;
    access.validate(header.vocab_size)?;
    let ds = load_datastore(datastore)?;
    if ds.dim() != header.dim {
        return Err(usage(format!(
            "datastore d = {} but trace d = {}",
            ds.dim(),
            header.dim
        )));
    }
    let examples = precompute_examples(&records, header.vocab_size, &ds, opts.k, access)?;
    Ok(TrainSetup {
        variant,
        access,
        examples,
        datastore: ds,
        vocab_size: header.vocab_size,
        w,
    })
}

fn initial_params(s: &TrainSetup, cfg: &TrainConfig, k: usize) -> Result<AdapterParams> {
    Ok(AdapterParams::initial(
        s.variant,
        cfg.init,
        s.vocab_size,
        s.datastore.dim(),
        k,
        s.datastore.metric(),
        s.w.clone(),
    )?)
}

fn train_inputs(trace: &Path, datastore: &Path, w: Option<&PathBuf>) -> Vec<PathBuf> {
    let mut v = vec![trace.to_path_buf(), datastore.to_path_buf()];
    v.extend(w.cloned());
    v
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let setup = train_setup(&a.train_trace, &a.datastore, &a.opts)?;
    let cfg = train_config(&a.opts, setup.variant, a.init_lambda);
    let report = sgd_train(&setup.examples, initial_params(&setup, &cfg, a.opts.k)?, &cfg)?;
    report.params.save(&a.out_params)?;
    let curve = a
        .curve_csv
        .clone()
        .unwrap_or_else(|| a.out_params.with_extension("epochs.csv"));
    write_text(&curve, &report.to_csv())?;
    println!(
        "{} ({}): {} epochs, {} steps, train NLL {:.6} -> {:.6} (ppl {:.4})",
        setup.variant,
        setup.access,
        report.epoch_nll.len() - 1,
        report.steps,
        report.epoch_nll[0],
        report.final_nll(),
        report.final_nll().exp()
    );
    Ok(Outcome {
        inputs: train_inputs(&a.train_trace, &a.datastore, a.opts.w.as_ref()),
        outputs: vec![a.out_params.clone(), curve],
        manifest: Some(sidecar(&a.out_params)),
        ..Outcome::default()
    }
    .seed("shuffle_seed", cfg.seed))
}

pub fn tune(a: &TuneArgs) -> Result<Outcome> {
    let access = parse_access(&a.access)?;
    let lambdas = match &a.lambda_grid {
        Some(text) => parse_list(text, "--lambda-grid")?,
        None => default_lambda_grid(),
    };
    let temps = parse_list(&a.temp_grid, "--temp-grid")?;
    let (header, records) = load_trace(&a.trace)?;
    access.validate(header.vocab_size)?;
    let ds = load_datastore(&a.datastore)?;
    let examples = precompute_examples(&records, header.vocab_size, &ds, a.k, access)?;
    let table = grid_table(&examples, &lambdas, &temps)?;
    let best: GridResult = *table
        .iter()
        .min_by(|x, y| {
            x.nll
                .total_cmp(&y.nll)
                .then(x.lambda.total_cmp(&y.lambda))
                .then(x.t.total_cmp(&y.t))
        })
        .expect("nonempty grid");
    let params = AdapterParams::knn_lm(best.lambda, best.t, header.vocab_size, ds.dim(), a.k, ds.metric())?;
    params.save(&a.out_params)?;
    let mut outputs = vec![a.out_params.clone()];
    if let Some(path) = &a.grid_csv {
        let mut csv = String::from("lambda,t,mean_nll\n");
        for g in &table {
            writeln!(csv, "{},{},{:.10}", g.lambda, g.t, g.nll)?;
        }
        write_text(path, &csv)?;
        outputs.push(path.clone());
    }
    println!(
        "best lambda = {}, t = {}: NLL {:.6} (ppl {:.4}) over {} cells",
        best.lambda,
        best.t,
        best.nll,
        best.nll.exp(),
        table.len()
    );
    Ok(Outcome {
        inputs: vec![a.trace.clone(), a.datastore.clone()],
        outputs,
        manifest: Some(sidecar(&a.out_params)),
        ..Outcome::default()
    })
}

pub fn eval(a: &EvalArgs) -> Result<Outcome> {
    let modes = a.access.iter().map(|s| parse_access(s)).collect::<Result<Vec<_>>>()?;
    let (header, records) = load_trace(&a.test_trace)?;
    let mut inputs = vec![a.test_trace.clone()];

    let mut models = Vec::new();
    if a.standard {
        models.push(MatrixModel::Standard);
    }
    if let Some(path) = &a.params {
        let params = load_params(path, a.w.as_deref())?;
        if params.vocab_size != header.vocab_size {
            return Err(usage(format!(
                "parameters are for |V| = {} but the trace has |V| = {}",
                params.vocab_size, header.vocab_size
            )));
        }
        inputs.push(path.clone());
        inputs.extend(a.w.clone());
        models.push(MatrixModel::Fixed {
            label: model_label(&params),
            params,
        });
    }
    let fixed = a.fixed_lambda.zip(a.fixed_t);
    if models.is_empty() && fixed.is_none() {
        return Err(usage(
            "choose a model: --params, --fixed-lambda with --fixed-t, or --standard",
        ));
    }
    let needs_datastore = models.len() > usize::from(a.standard) || fixed.is_some();
    if needs_datastore && a.datastore.is_empty() {
        return Err(usage("kNN models need at least one --datastore"));
    }

    let mut stores = Vec::new();
    for spec in &a.datastore {
        let (label, path) = labelled(spec);
        if stores.iter().any(|(l, _)| l == &label) {
            return Err(usage(format!("duplicate datastore label {label:?}")));
        }
        let ds = load_datastore(&path)?;
        inputs.push(path);
        stores.push((label, ds));
    }
    if let Some((lambda, t)) = fixed {
        let first = &stores[0].1;
        for (label, ds) in &stores[1..] {
            if ds.dim() != first.dim() || ds.metric() != first.metric() {
                return Err(usage(format!("datastore {label:?} differs in dimension or metric")));
            }
        }
        let params = AdapterParams::knn_lm(lambda, t, header.vocab_size, first.dim(), a.k, first.metric())?;
        models.push(MatrixModel::Fixed {
            label: model_label(&params),
            params,
        });
    }

    let named: Vec<NamedDatastore> = stores
        .iter()
        .map(|(label, ds)| NamedDatastore { label, datastore: ds })
        .collect();
    let trace = NamedTrace {
        label: "test".into(),
        vocab_size: header.vocab_size,
        records: &records,
    };
    let rows = run_matrix(&[trace], &named, &models, &modes)?;
    let results: Vec<_> = rows.iter().map(|r| &r.result).collect();
    print!("{}", results_table(results.iter().copied()));
    let mut outputs = Vec::new();
    if let Some(path) = &a.csv {
        write_text(path, &results_csv(results.iter().copied()))?;
        outputs.push(path.clone());
    }
    Ok(Outcome {
        inputs,
        outputs,
        manifest: a.csv.as_deref().map(sidecar),
        ..Outcome::default()
    })
}

pub fn analyze(a: &AnalyzeArgs) -> Result<Outcome> {
    let params = load_params(&a.params, a.w.as_deref())?;
    let v = params.vocab_size;
    let lambda = params.token_lambda();
    let mut inputs = vec![a.params.clone()];
    inputs.extend(a.w.clone());

    let mut tables = Vec::new();
    if let Some(path) = &a.datastore {
        tables.push(datastore_frequency(&load_datastore(path)?, v)?);
        inputs.push(path.clone());
    }
    for spec in &a.freq_file {
        let (label, path) = labelled(spec);
        tables.push(
            FrequencyTable::load(&path, v, &label)
                .with_context(|| format!("reading frequencies {}", path.display()))?,
        );
        inputs.push(path);
    }
    let tags = match &a.tag_file {
        Some(path) => {
            inputs.push(path.clone());
            TagMap::load(path, v).with_context(|| format!("reading tags {}", path.display()))?
        }
        None => TagMap::uniform(v, "all"),
    };

    let correlations: Vec<_> = tables
        .iter()
        .map(|t| (t.source.clone(), spearman(&t.as_f64(), &lambda)))
        .collect();
    let groups = group_lambda(&lambda, &tags, a.min_group, tables.first())?;

    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let corr_path = a.out.join("correlation.csv");
    let groups_path = a.out.join("groups.csv");
    write_text(&corr_path, &correlation_csv(&correlations))?;
    write_text(&groups_path, &groups_csv(&groups))?;
    for (source, r) in &correlations {
        match r {
            Ok(s) => println!("{source}: rho = {:.4}, p = {:.3e}", s.rho, s.p_value),
            Err(e) => println!("{source}: {e}"),
        }
    }
    println!(
        "{} groups, {} tokens omitted (groups smaller than {})",
        groups.groups.len(),
        groups.omitted_count,
        a.min_group
    );
    Ok(Outcome {
        inputs,
        outputs: vec![corr_path, groups_path],
        manifest: Some(a.out.join("manifest.json")),
        ..Outcome::default()
    })
}

pub fn sweep_init(a: &SweepInitArgs) -> Result<Outcome> {
    let inits = parse_list(&a.inits, "--inits")?;
    let setup = train_setup(&a.train_trace, &a.datastore, &a.opts)?;
    let eval = match &a.eval_trace {
        Some(path) => {
            let (h, records) = load_trace(path)?;
            if h.vocab_size != setup.vocab_size {
                return Err(usage("evaluation and training traces differ in |V|"));
            }
            Some(precompute_examples(
                &records,
                h.vocab_size,
                &setup.datastore,
                a.opts.k,
                setup.access,
            )?)
        }
        None => None,
    };
    let mut curves = String::from("init_lambda,epoch,mean_nll,perplexity\n");
    let mut summary = String::from("init_lambda,epochs,train_nll,train_perplexity,eval_perplexity\n");
    for &init in &inits {
        let cfg = train_config(&a.opts, setup.variant, Some(init));
        let report = sgd_train(&setup.examples, initial_params(&setup, &cfg, a.opts.k)?, &cfg)?;
        for (e, l) in report.epoch_nll.iter().enumerate() {
            writeln!(curves, "{init},{e},{l:.10},{:.10}", l.exp())?;
        }
        let eval_ppl = match &eval {
            Some(ex) => {
                let r = knn_adapter::evaluation::evaluate_examples(
                    ex,
                    &knn_adapter::evaluation::Model::Adapter(report.params.clone()),
                    "",
                    "",
                    setup.access,
                )?;
                format!("{:.6}", r.perplexity)
            }
            None => String::new(),
        };
        let f = report.final_nll();
        writeln!(
            summary,
            "{init},{},{f:.10},{:.6},{eval_ppl}",
            report.epoch_nll.len() - 1,
            f.exp()
        )?;
        println!("init {init}: train ppl {:.4} {eval_ppl}", f.exp());
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let curves_path = a.out_dir.join("curves.csv");
    let summary_path = a.out_dir.join("summary.csv");
    write_text(&curves_path, &curves)?;
    write_text(&summary_path, &summary)?;
    let mut inputs = train_inputs(&a.train_trace, &a.datastore, a.opts.w.as_ref());
    inputs.extend(a.eval_trace.clone());
    Ok(Outcome {
        inputs,
        outputs: vec![curves_path, summary_path],
        manifest: Some(a.out_dir.join("manifest.json")),
        ..Outcome::default()
    }
    .seed("shuffle_seed", a.opts.seed))
}

pub fn validate(a: &ValidateArgs) -> Result<Outcome> {
    let mut magic = [0u8; 4];
    let n = {
        use std::io::Read;
        fs::File::open(&a.path)
            .with_context(|| format!("cannot open {}", a.path.display()))?
            .read(&mut magic)?
    };
    let outcome = Outcome {
        inputs: vec![a.path.clone()],
        ..Outcome::default()
    };
    match &magic[..n] {
        b"KNDS" => {
            let ds = load_datastore(&a.path)?;
            println!("datastore ok: {} entries, d = {}", ds.len(), ds.dim());
            return Ok(outcome);
        }
        b"KNNW" => {
            let w = read_embedding_matrix(&a.path)?;
            println!("embedding matrix ok: |V| = {}, d = {}", w.vocab_size(), w.dim());
            return Ok(outcome);
        }
        _ => {}
    }
    let report = validate_trace(&a.path, a.strict)?;
    for v in &report.violations {
        println!("record {}: {}: {}", v.record, v.kind.name(), v.detail);
    }
    if let Some(e) = &report.decode_error {
        println!("decode error: {e}");
    }
    println!(
        "{} records checked, {} violations",
        report.records_checked,
        report.violations.len()
    );
    if !report.is_clean() {
        return Err(Exit {
            code: EXIT_DATA,
            kind: "Validation",
            message: format!(
                "{} violations{}",
                report.violations.len(),
                if report.decode_error.is_some() {
                    " and a decode error"
                } else {
                    ""
                }
            ),
        }
        .into());
    }
    Ok(outcome)
}
