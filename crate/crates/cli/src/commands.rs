use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nmsparse::mask::{decode_masks, encode_dense_masks, encode_masks, LayerMask, Pattern};
use nmsparse::models::{
    decode_model, encode_model, eval_batches, pretrain_dense, synthetic_text, BatchIter, Corpus, Domain, Model,
    ModelKind, ModelSpec, PretrainConfig, TokenBatch, TransformerLm,
};
use nmsparse::optim::AdamWConfig;
use nmsparse::pruners::{calibrate, import_external_masks, magnitude_masks, prunable_shapes, wanda_masks};
use nmsparse::scalar::Scalar;
use nmsparse::seeds::{split_seed, stream};
use nmsparse::sparse::{benchmark, configured_threads, BenchReport};
use nmsparse::trainer::{
    drop_dense, evaluate_loss, layer_sensitivity, metrics_text, parse_kv, remaining_weight_l2, train_masks,
    transfer_masks, Checkpoint, SensitivityRow, SensitivityStrategy, TrainConfig, TrainError, TrainReport, TransferBase,
    CHECKPOINT_MAGIC,
};

use crate::{
    io_err, parse_pattern, split_list, BenchArgs, CliError, CommonArgs, DataArgs, EvalArgs, LearnArgs, Manifest,
    PackArgs, PretrainArgs, PruneArgs, TrainFlags, TransferArgs,
};

type Lm = TransformerLm<f32>;

const SYNTHETIC_LEN: usize = 200_000;

fn out_dir(common: &CommonArgs) -> Result<&Path, CliError> {
    fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
    Ok(&common.out)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn load_corpus(data: &DataArgs, seed: u64) -> Result<Corpus, CliError> {
    if let Some(rest) = data.corpus.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let domain: Domain = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e| CliError::Validation(format!("--corpus: {e}")))?;
        let len = match parts.next() {
            Some(n) => n
                .parse()
                .map_err(|e| CliError::Validation(format!("--corpus: bad length '{n}': {e}")))?,
            None => SYNTHETIC_LEN,
        };
        let text = synthetic_text(domain, len, split_seed(seed, stream::SYNTHETIC));
        return Ok(Corpus::from_bytes(&text, data.val_fraction)?);
    }
    let path = Path::new(&data.corpus);
    let bytes = read(path)?;
    Ok(Corpus::from_bytes(&bytes, data.val_fraction)?)
}

fn load_model(path: &Path) -> Result<Lm, CliError> {
    let (spec, params) = decode_model::<f32>(&read(path)?)?;
    if spec.kind != ModelKind::TransformerLm {
        return Err(CliError::Validation(format!(
            "{}: expected a transformer_lm model, found {}",
            path.display(),
            spec.kind
        )));
    }
    Ok(TransformerLm::from_params(spec, params)?)
}

fn val_batches(corpus: &Corpus, data: &DataArgs, batch: usize, ctx: usize) -> Result<Vec<TokenBatch>, CliError> {
    let mut b = eval_batches(corpus.val(), batch, ctx)?;
    b.truncate(data.eval_batches.max(1));
    Ok(b)
}

/// Defaults, then the config file, then explicit flags.
fn train_config(flags: &TrainFlags, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut c = TrainConfig::default();
    if let Some(path) = &flags.config {
        let text = String::from_utf8(read(path)?)
            .map_err(|_| CliError::Validation(format!("{}: config is not UTF-8", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            c.set(&k, &v)?;
        }
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(s) = flags.steps {
        c.steps = s;
    }
    if let Some(a) = flags.alpha {
        c.prior_strength = a;
    }
    if let Some(l) = flags.lambda {
        c.lambda_reg = l;
    }
    if let Some(s) = &flags.skip_layers {
        c.layers_to_skip = split_list(s);
    }
    if let Some(p) = &flags.pattern {
        c.pattern = parse_pattern(p)?;
    }
    c.validate()?;
    Ok(c)
}

fn finite_check(name: &str, v: f64, positive: bool) -> Result<(), CliError> {
    if !v.is_finite() || (positive && v <= 0.0) || v < 0.0 {
        return Err(CliError::Validation(format!("--{name}: invalid value {v}")));
    }
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<String, CliError> {
    let seed = args.common.seed.unwrap_or(0);
    finite_check("lr", args.lr, true)?;
    finite_check("weight-decay", args.weight_decay, false)?;
    if args.batch_size == 0 {
        return Err(CliError::Validation("--batch-size: must be positive".into()));
    }
    let spec = ModelSpec::transformer(256, args.embed_dim, args.layers, args.heads, args.context);
    spec.validate()?;
    let corpus = load_corpus(&args.data, seed)?;
    let dir = out_dir(&args.common)?;
    let mut model = Lm::new(spec, split_seed(seed, stream::MODEL_INIT))?;
    let mut data = BatchIter::new(corpus.train().clone(), args.batch_size, spec.context_length, split_seed(seed, stream::DATA))?;
    let val = val_batches(&corpus, &args.data, args.batch_size, spec.context_length)?;
    let cfg = PretrainConfig {
        steps: args.steps,
        optimizer: AdamWConfig {
            lr: args.lr,
            weight_decay: args.weight_decay,
            ..AdamWConfig::default()
        },
        ..PretrainConfig::default()
    };
    let report = pretrain_dense(&mut model, &mut data, &val, &cfg)?;
    write(dir, "model.nmd", encode_model(&spec, model.params()))?;
    let mut text = String::new();
    for (i, l) in report.train_losses.iter().enumerate() {
        let _ = writeln!(text, "step={i} loss={l:?}");
    }
    let summary = format!("initial_val_loss={:?}\nfinal_val_loss={:?}\n", report.initial_val, report.final_val);
    text.push_str(&summary);
    write(dir, "pretrain.txt", &text)?;
    let mut m = Manifest::new("pretrain", seed);
    m.set("corpus", &args.data.corpus)
        .set("val_fraction", args.data.val_fraction)
        .set("eval_batches", args.data.eval_batches)
        .set("steps", args.steps)
        .set("batch_size", args.batch_size)
        .set("lr", args.lr)
        .set("weight_decay", args.weight_decay)
        .set("embed_dim", args.embed_dim)
        .set("layers", args.layers)
        .set("heads", args.heads)
        .set("context", args.context);
    m.write(dir)?;
    Ok(summary)
}

/// One-shot masks of every prunable tensor.
fn one_shot(
    model: &Lm,
    corpus: &Corpus,
    method: &str,
    pattern: Pattern,
    batch: usize,
    samples: usize,
) -> Result<Vec<LayerMask>, CliError> {
    match method {
        "magnitude" => Ok(magnitude_masks(model, pattern, &[])?),
        "wanda" => {
            let calib = eval_batches(corpus.train(), batch, model.spec().context_length)?;
            let stats = calibrate(model, &calib, samples)?;
            Ok(wanda_masks(model, &stats, pattern, &[])?)
        }
        other => Err(CliError::Validation(format!(
            "unknown pruning method '{other}' (expected magnitude or wanda)"
        ))),
    }
}

fn masked_report(model: &Lm, masks: &[LayerMask], val: &[TokenBatch]) -> Result<String, CliError> {
    let dense = evaluate_loss(model, None, val)?;
    let masked = evaluate_loss(model, Some(masks), val)?;
    let mut s = String::new();
    let _ = writeln!(s, "dense_loss={dense:?}");
    let _ = writeln!(s, "dense_ppl={:?}", dense.exp());
    let _ = writeln!(s, "masked_loss={masked:?}");
    let _ = writeln!(s, "masked_ppl={:?}", masked.exp());
    let _ = writeln!(s, "remaining_l2={:?}", remaining_weight_l2(model, masks)?);
    let _ = writeln!(s, "masked_tensors={}", masks.len());
    Ok(s)
}

fn archive_line(bytes: &[u8]) -> Result<String, CliError> {
    let a = decode_masks(bytes)?;
    Ok(format!(
        "archive_version={}\nparams={}\npayload_bytes={}\nbits_per_param={:.6}\n",
        a.version,
        a.param_count(),
        a.payload_bytes,
        a.bits_per_param()
    ))
}

pub fn prune(args: &PruneArgs) -> Result<String, CliError> {
    let seed = args.common.seed.unwrap_or(0);
    let pattern = parse_pattern(&args.pattern)?;
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.data, seed)?;
    let masks = one_shot(&model, &corpus, &args.method, pattern, args.batch_size, args.calibration_samples)?;
    let masks = drop_dense(&masks, &split_list(&args.skip_layers))?;
    let dir = out_dir(&args.common)?;
    let archive = encode_masks(&masks, pattern)?;
    write(dir, "masks.nmmk", &archive)?;
    let val = val_batches(&corpus, &args.data, args.batch_size, model.spec().context_length)?;
    let mut report = format!("method={}\n", args.method);
    report.push_str(&masked_report(&model, &masks, &val)?);
    report.push_str(&archive_line(&archive)?);
    write(dir, "report.txt", &report)?;
    let mut m = Manifest::new("prune", seed);
    m.set("model", args.model.display())
        .set("corpus", &args.data.corpus)
        .set("val_fraction", args.data.val_fraction)
        .set("eval_batches", args.data.eval_batches)
        .set("method", &args.method)
        .set("pattern", pattern)
        .set("skip_layers", &args.skip_layers)
        .set("calibration_samples", args.calibration_samples)
        .set("batch_size", args.batch_size);
    m.write(dir)?;
    Ok(report)
}

/// Writes the checkpoint carried by a numerical failure before reporting it.
fn save_failure(dir: &Path, e: TrainError) -> CliError {
    if let TrainError::NonFinite { checkpoint, .. } | TrainError::Diverged { checkpoint, .. } = &e {
        if let Err(w) = write(dir, "checkpoint.nmck", checkpoint) {
            return w;
        }
    }
    e.into()
}

fn write_training(
    dir: &Path,
    model: &Lm,
    config: &TrainConfig,
    report: &TrainReport<f32>,
    val: &[TokenBatch],
    header: &str,
) -> Result<String, CliError> {
    let archive = encode_masks(&report.masks, config.pattern)?;
    write(dir, "masks.nmmk", &archive)?;
    write(dir, "metrics.txt", metrics_text(&report.metrics))?;
    write(dir, "checkpoint.nmck", report.checkpoint.to_bytes())?;
    write(dir, "config.txt", config.to_kv_text())?;
    let mut text = header.to_string();
    let _ = writeln!(text, "steps={}", config.steps);
    text.push_str(&masked_report(model, &report.masks, val)?);
    text.push_str(&archive_line(&archive)?);
    write(dir, "report.txt", &text)?;
    Ok(text)
}

fn data_manifest(m: &mut Manifest, model: &Path, data: &DataArgs, config: &TrainConfig) {
    m.set("model", model.display())
        .set("corpus", &data.corpus)
        .set("val_fraction", data.val_fraction)
        .set("eval_batches", data.eval_batches)
        .extend_kv("config", &config.to_kv_text());
}

pub fn learn(args: &LearnArgs) -> Result<String, CliError> {
    let config = train_config(&args.train, args.common.seed)?;
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.data, config.seed)?;
    let ctx = model.spec().context_length;
    let prior = match args.prior.as_str() {
        "none" => None,
        m @ ("magnitude" | "wanda") => Some(one_shot(
            &model,
            &corpus,
            m,
            config.pattern,
            config.batch_size,
            args.calibration_samples,
        )?),
        path => Some(import_external_masks(&read(Path::new(path))?, &prunable_shapes(&model), config.pattern)?),
    };
    let dir = out_dir(&args.common)?;
    let mut data = BatchIter::new(corpus.train().clone(), config.batch_size, ctx, split_seed(config.seed, stream::DATA))?;
    let val = val_batches(&corpus, &args.data, config.batch_size, ctx)?;
    let report = train_masks(&model, &mut data, &config, prior.as_deref()).map_err(|e| save_failure(dir, e))?;
    let text = write_training(dir, &model, &config, &report, &val, &format!("prior={}\n", args.prior))?;
    let mut m = Manifest::new("learn", config.seed);
    m.set("prior", &args.prior).set("calibration_samples", args.calibration_samples);
    data_manifest(&mut m, &args.model, &args.data, &config);
    m.write(dir)?;
    Ok(text)
}

pub fn transfer(args: &TransferArgs) -> Result<String, CliError> {
    let config = train_config(&args.train, args.common.seed)?;
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.data, config.seed)?;
    let ctx = model.spec().context_length;
    let bytes = read(&args.base)?;
    let dir = out_dir(&args.common)?;
    let mut data = BatchIter::new(corpus.train().clone(), config.batch_size, ctx, split_seed(config.seed, stream::DATA))?;
    let val = val_batches(&corpus, &args.data, config.batch_size, ctx)?;
    let report = if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ckpt = Checkpoint::<f32>::from_bytes(&bytes).map_err(|e| CliError::Validation(e.to_string()))?;
        transfer_masks(&model, TransferBase::Checkpoint(&ckpt), &mut data, &config)
    } else {
        let masks = import_external_masks(&bytes, &prunable_shapes(&model), config.pattern)?;
        transfer_masks(&model, TransferBase::Masks(&masks), &mut data, &config)
    }
    .map_err(|e| save_failure(dir, e))?;
    let text = write_training(dir, &model, &config, &report, &val, &format!("base={}\n", args.base.display()))?;
    let mut m = Manifest::new("transfer", config.seed);
    m.set("base", args.base.display());
    data_manifest(&mut m, &args.model, &args.data, &config);
    m.write(dir)?;
    Ok(text)
}

fn strategy(s: &str) -> Result<SensitivityStrategy, CliError> {
    let count = |k: &str| {
        k.parse::<usize>()
            .map_err(|e| CliError::Validation(format!("--skip-layers: bad count '{k}': {e}")))
    };
    Ok(match s {
        "each" => SensitivityStrategy::LeaveOneDense,
        _ => {
            if let Some(k) = s.strip_prefix("first:") {
                SensitivityStrategy::SkipFirst(count(k)?)
            } else if let Some(k) = s.strip_prefix("last:") {
                SensitivityStrategy::SkipLast(count(k)?)
            } else {
                SensitivityStrategy::Explicit(split_list(s))
            }
        }
    })
}

pub fn eval(args: &EvalArgs) -> Result<String, CliError> {
    let seed = args.common.seed.unwrap_or(0);
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.data, seed)?;
    let val = val_batches(&corpus, &args.data, args.batch_size, model.spec().context_length)?;
    let dense = evaluate_loss(&model, None, &val)?;
    let mut report = format!("label=dense dense=all ppl={:?}\n", dense.exp());
    if let Some(path) = &args.masks {
        let bytes = read(path)?;
        let masks = import_external_masks(&bytes, &prunable_shapes(&model), pattern_of(&bytes)?)?;
        let rows = match &args.skip_layers {
            Some(s) => layer_sensitivity(&model, &masks, &val, &strategy(s)?)?,
            None => vec![SensitivityRow {
                label: "all_sparse".into(),
                dense_layers: Vec::new(),
                perplexity: evaluate_loss(&model, Some(&masks), &val)?.exp(),
            }],
        };
        for r in rows {
            report.push_str(&r.to_line());
            report.push('\n');
        }
    } else if args.skip_layers.is_some() {
        return Err(CliError::Validation("--skip-layers requires --masks".into()));
    }
    let dir = out_dir(&args.common)?;
    write(dir, "report.txt", &report)?;
    let mut m = Manifest::new("eval", seed);
    m.set("model", args.model.display())
        .set("corpus", &args.data.corpus)
        .set("val_fraction", args.data.val_fraction)
        .set("eval_batches", args.data.eval_batches)
        .set("batch_size", args.batch_size);
    if let Some(p) = &args.masks {
        m.set("masks", p.display());
    }
    if let Some(s) = &args.skip_layers {
        m.set("skip_layers", s);
    }
    m.write(dir)?;
    Ok(report)
}

fn pattern_of(bytes: &[u8]) -> Result<Pattern, CliError> {
    Ok(decode_masks(bytes)?.pattern)
}

pub fn pack(args: &PackArgs) -> Result<String, CliError> {
    let archive = decode_masks(&read(&args.input)?)?;
    let coded = encode_masks(&archive.masks, archive.pattern)?;
    let dir = out_dir(&args.common)?;
    write(dir, "masks.nmmk", &coded)?;
    let report = archive_line(&coded)?;
    write(dir, "report.txt", &report)?;
    let mut m = Manifest::new("pack", args.common.seed.unwrap_or(0));
    m.set("input", args.input.display());
    m.write(dir)?;
    Ok(report)
}

pub fn unpack(args: &PackArgs) -> Result<String, CliError> {
    let bytes = read(&args.input)?;
    let archive = decode_masks(&bytes)?;
    let dense = encode_dense_masks(&archive.masks, archive.pattern)?;
    let dir = out_dir(&args.common)?;
    write(dir, "masks.dense", &dense)?;
    let report = archive_line(&bytes)?;
    write(dir, "report.txt", &report)?;
    let mut m = Manifest::new("unpack", args.common.seed.unwrap_or(0));
    m.set("input", args.input.display());
    m.write(dir)?;
    Ok(report)
}

fn run_bench<S: Scalar>(sizes: &[usize], args: &BenchArgs, seed: u64) -> Result<Vec<BenchReport>, CliError> {
    Ok(benchmark::<S>(
        sizes,
        args.rhs_cols,
        args.repeats,
        configured_threads(),
        split_seed(seed, stream::DATA),
    )?)
}

pub fn bench(args: &BenchArgs) -> Result<String, CliError> {
    let seed = args.common.seed.unwrap_or(0);
    let sizes = split_list(&args.sizes)
        .iter()
        .map(|s| match s.parse::<usize>() {
            Ok(n) if n > 0 && n % 4 == 0 => Ok(n),
            _ => Err(CliError::Validation(format!(
                "--sizes: '{s}' is not a positive multiple of 4"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if sizes.is_empty() || args.repeats == 0 || args.rhs_cols == 0 {
        return Err(CliError::Validation("--sizes, --repeats and --rhs-cols must be non-empty and positive".into()));
    }
    let reports = match args.dtype.as_str() {
        "f32" => run_bench::<f32>(&sizes, args, seed)?,
        "f64" => run_bench::<f64>(&sizes, args, seed)?,
        other => return Err(CliError::Validation(format!("--dtype: unknown '{other}' (expected f32 or f64)"))),
    };
    let text = reports.iter().map(BenchReport::to_text).collect::<Vec<_>>().join("\n");
    let dir = out_dir(&args.common)?;
    write(dir, "bench.txt", &text)?;
    let mut m = Manifest::new("bench", seed);
    m.set("sizes", &args.sizes)
        .set("rhs_cols", args.rhs_cols)
        .set("repeats", args.repeats)
        .set("dtype", &args.dtype)
        .set("threads", configured_threads());
    m.write(dir)?;
    Ok(text)
}
