use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sspc::corpus::{self, Dataset, ParagraphProblem};
use sspc::eval::{self, BaselineKind, BaselinePredictor, EvalReport, SspcPredictor};
use sspc::featurize::{self, FeatureBackend, FeatureConfig, Featurizer};
use sspc::llm_baseline::{self, HttpTransport, LlmConfig, SystemClock};
use sspc::model::ModelConfig;
use sspc::synthetic::{self, SyntheticConfig};
use sspc::train::{self, TrainConfig, Trainer};
use sspc::Error;

const GIT_DESCRIBE: &str = env!("SSPC_GIT_DESCRIBE");

#[derive(Parser, Debug)]
#[command(name = "sspc", version, about = "Sentence-level style change detection")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Suppress progress and config echo on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus statistics of a PAN-format split.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert paragraph-segmented documents (JSON array or JSONL of
    /// `{id, paragraphs}`) into a sentence-level PAN split.
    #[command(name = "convert-2024")]
    Convert2024 {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints to `--out`.
    Train(TrainArgs),
    /// Write solution files for every problem of a split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only needed as `emb:<path>` for checkpoints trained on embeddings.
        #[arg(long)]
        features: Option<String>,
    },
    /// Score a checkpoint in-process or a directory of solution files.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "solutions", required_unless_present = "solutions")]
        model: Option<PathBuf>,
        #[arg(long)]
        solutions: Option<PathBuf>,
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trivial baselines: random, predict-1, predict-0 or all.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot labels from a chat-completion endpoint, scored like a model.
    #[command(name = "llm-baseline")]
    LlmBaseline(LlmArgs),
    /// Generate a synthetic two-author corpus.
    #[command(name = "gen-synthetic")]
    GenSynthetic(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation split; without it a fraction of `--data` is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
    #[arg(long, default_value = "ngram")]
    features: String,
    /// Feature dimension for ngram/stylo backends (defaults to the model input dim).
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Seeds model init, data order and dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    val_every: Option<u64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Continue from a checkpoint; its model and train config are reused.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LlmArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with llm settings; flags override it.
    #[arg(long)]
    llm_config: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// API key is read from `SSPC_API_KEY_<NAME>`.
    #[arg(long)]
    api_key_name: Option<String>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    rpm: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    authors: usize,
    #[arg(long, default_value_t = 100)]
    n_problems: usize,
    #[arg(long, default_value_t = 5)]
    min_sentences: usize,
    #[arg(long, default_value_t = 15)]
    max_sentences: usize,
    #[arg(long, default_value_t = 3)]
    min_words: usize,
    #[arg(long, default_value_t = 12)]
    max_words: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.3)]
    change_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    duplicate_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => 1,
            Error::Io { .. } | Error::Shape(_) => 2,
            e if e.is_data_error() => 2,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    git_describe: &'static str,
    command: String,
    argv: Vec<String>,
    seed: Option<u64>,
    threads: Option<usize>,
    effective_config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

struct Run {
    argv: Vec<String>,
    quiet: bool,
    format: Format,
}

impl Run {
    fn echo(&self, label: &str, value: &serde_json::Value) {
        if !self.quiet {
            eprintln!("{label}: {value}");
        }
    }

    fn progress(&self, line: &str) {
        if !self.quiet {
            eprintln!("{line}");
        }
    }

    fn manifest(
        &self,
        command: &str,
        dir: Option<&Path>,
        seed: Option<u64>,
        threads: Option<usize>,
        effective_config: serde_json::Value,
        inputs: &[&Path],
    ) -> CliResult<()> {
        let mut sums = BTreeMap::new();
        for input in inputs {
            sums.insert(input.display().to_string(), checksum_path(input)?);
        }
        let manifest = RunManifest {
            tool: "sspc",
            version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            command: command.into(),
            argv: self.argv.clone(),
            seed,
            threads,
            effective_config,
            inputs: sums,
        };
        let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
        let path = dir.join("run-manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| runtime(&path, e))?;
        Ok(())
    }
}

fn runtime(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 3, message: format!("{}: {e}", path.display()) }
}

fn input_error(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

/// SHA-256 of a file, or of a directory's sorted relative paths and contents.
fn checksum_path(path: &Path) -> CliResult<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = fs::read(path.join(&rel)).map_err(|e| input_error(&rel, e))?;
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
    } else {
        hasher.update(fs::read(path).map_err(|e| input_error(path, e))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| input_error(dir, e))? {
        let entry = entry.map_err(|e| input_error(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "run-manifest.json") {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn split_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn load(dir: &Path) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(Failure { code: 2, message: format!("{}: not a dataset directory", dir.display()) });
    }
    Ok(corpus::load_dataset(dir, &split_name(dir))?)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| input_error(path, e))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

enum FeatureSpec {
    Ngram,
    Stylo,
    Emb(PathBuf),
}

fn parse_features(spec: &str) -> CliResult<FeatureSpec> {
    match spec {
        "ngram" => Ok(FeatureSpec::Ngram),
        "stylo" => Ok(FeatureSpec::Stylo),
        s => match s.strip_prefix("emb:") {
            Some(path) if !path.is_empty() => Ok(FeatureSpec::Emb(PathBuf::from(path))),
            _ => Err(Failure::usage(format!(
                "--features must be ngram, stylo or emb:<path>, got {s:?}"
            ))),
        },
    }
}

fn load_store(path: &Path) -> CliResult<Arc<featurize::EmbeddingStore>> {
    Ok(Arc::new(featurize::load_embedding_file(path)?))
}

/// Builds the featurizer for training and fixes the model input dim to match.
fn training_featurizer(
    spec: &FeatureSpec,
    feature_dim: Option<usize>,
    model_cfg: &mut ModelConfig,
) -> CliResult<Featurizer> {
    let mut config = FeatureConfig::default();
    let mut store = None;
    match spec {
        FeatureSpec::Ngram | FeatureSpec::Stylo => {
            config.backend = if matches!(spec, FeatureSpec::Ngram) {
                FeatureBackend::HashedCharNgram
            } else {
                FeatureBackend::Stylometric
            };
            config.dim = feature_dim.unwrap_or(model_cfg.input_dim);
        }
        FeatureSpec::Emb(path) => {
            let s = load_store(path)?;
            config.backend = FeatureBackend::ExternalEmbeddings;
            config.dim = s.dim();
            store = Some(s);
        }
    }
    model_cfg.input_dim = config.dim;
    Ok(Featurizer::new(config, store)?)
}

/// Featurizer for a trained checkpoint; embedding checkpoints need the file.
fn checkpoint_featurizer(config: &FeatureConfig, features: Option<&str>) -> CliResult<Featurizer> {
    let store = match features.map(parse_features).transpose()? {
        Some(FeatureSpec::Emb(path)) => Some(load_store(&path)?),
        Some(_) | None if config.backend == FeatureBackend::ExternalEmbeddings => {
            return Err(Failure::usage(
                "checkpoint was trained on embeddings: pass --features emb:<path>",
            ))
        }
        _ => None,
    };
    Ok(Featurizer::new(config.clone(), store)?)
}

fn print_reports(run: &Run, reports: &[&EvalReport]) {
    match run.format {
        Format::Table => print!("{}", eval::render_table(reports)),
        Format::Json => {
            let summary: Vec<serde_json::Value> = reports.iter().map(|r| summary_json(r)).collect();
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
        }
    }
}

fn summary_json(r: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "model": r.model,
        "dataset": r.dataset,
        "macro_f1": r.macro_f1,
        "f1_class0": r.f1_class0,
        "f1_class1": r.f1_class1,
        "per_problem_mean_macro_f1": r.per_problem_mean_macro_f1,
        "confusion": r.confusion,
        "n_problems": r.n_problems,
    })
}

fn write_report(dir: Option<&Path>, name: &str, body: &str) -> CliResult<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| runtime(&path, e))?;
    }
    Ok(())
}

fn cmd_stats(run: &Run, data: &Path, out: Option<&Path>) -> CliResult<()> {
    let dataset = load(data)?;
    let stats = corpus::compute_stats(&dataset)?;
    match run.format {
        Format::Table => print!("{stats}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(&stats).expect("serializes")),
    }
    write_report(out, "stats.json", &serde_json::to_string_pretty(&stats).expect("serializes"))?;
    run.manifest("stats", out, None, None, serde_json::json!({ "data": data }), &[data])
}

fn read_paragraph_input(path: &Path) -> CliResult<Vec<ParagraphProblem>> {
    let text = fs::read_to_string(path).map_err(|e| input_error(path, e))?;
    let bad = |e: serde_json::Error| Failure { code: 2, message: format!("{}: {e}", path.display()) };
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(bad);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(bad))
        .collect()
}

fn cmd_convert(run: &Run, input: &Path, out: &Path) -> CliResult<()> {
    let problems = read_paragraph_input(input)?;
    let dataset = corpus::convert_paragraph_dataset(&problems)?;
    corpus::write_dataset(&dataset, out)?;
    run.progress(&format!(
        "wrote {} problems, {} adjacencies to {}",
        dataset.len(),
        dataset.total_adjacencies(),
        out.display()
    ));
    run.manifest("convert-2024", Some(out), None, None, serde_json::json!({ "input": input, "out": out }), &[input])
}

fn cmd_train(run: &Run, args: &TrainArgs, threads: Option<usize>) -> CliResult<()> {
    let train_set = load(&args.data)?;
    let (train_set, val_set) = match (&args.val, args.val_fraction) {
        (Some(dir), _) => (train_set, Some(load(dir)?)),
        (None, f) if f > 0.0 => {
            let (t, v) = corpus::split_train_val(&train_set, f, args.seed.unwrap_or(0))?;
            (t, Some(v))
        }
        _ => (train_set, None),
    };
    let spec = parse_features(&args.features)?;
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(v) = &args.val {
        inputs.push(v);
    }
    if let FeatureSpec::Emb(p) = &spec {
        inputs.push(p);
    }

    let mut trainer = if let Some(resume) = &args.resume {
        inputs.push(resume);
        let mut ckpt = train::load_checkpoint(resume)?;
        ckpt.train_config.checkpoint_dir = Some(args.out.clone());
        let featurizer = checkpoint_featurizer(&ckpt.feature_config, Some(&args.features))?;
        run.echo("model config", &to_json(&ckpt.params.config));
        run.echo("train config", &to_json(&ckpt.train_config));
        run.echo("feature config", &to_json(&featurizer.config));
        let effective = serde_json::json!({
            "resume": resume,
            "resumed_at_step": ckpt.step,
            "model": ckpt.params.config,
            "train": ckpt.train_config,
            "features": featurizer.config,
        });
        let seed = ckpt.train_config.seed;
        run.manifest("train", Some(&args.out), Some(seed), threads, effective, &inputs)?;
        Trainer::from_checkpoint(ckpt, &train_set, val_set.as_ref(), &featurizer)?
    } else {
        let mut model_cfg: ModelConfig = match &args.model_config {
            Some(p) => {
                inputs.push(p);
                read_toml(p)?
            }
            None => ModelConfig::default(),
        };
        let mut train_cfg: TrainConfig = match &args.train_config {
            Some(p) => {
                inputs.push(p);
                read_toml(p)?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = args.seed {
            model_cfg.seed = seed;
            train_cfg.seed = seed;
        }
        if let Some(h) = args.hidden_dim {
            model_cfg.hidden_dim = h;
        }
        if let Some(l) = args.layers {
            model_cfg.bilstm_layers = l;
        }
        if let Some(v) = args.steps {
            train_cfg.total_steps = v;
        }
        if let Some(v) = args.warmup {
            train_cfg.warmup_steps = v;
        }
        if let Some(v) = args.lr {
            train_cfg.peak_lr = v;
        }
        if let Some(v) = args.min_lr {
            train_cfg.min_lr = v;
        }
        if let Some(v) = args.batch_size {
            train_cfg.batch_size = v;
        }
        if let Some(v) = args.val_every {
            train_cfg.val_every = v;
        }
        train_cfg.checkpoint_dir = Some(args.out.clone());
        let featurizer = training_featurizer(&spec, args.feature_dim, &mut model_cfg)?;
        model_cfg.validate()?;
        train_cfg.validate()?;
        run.echo("model config", &to_json(&model_cfg));
        run.echo("train config", &to_json(&train_cfg));
        run.echo("feature config", &to_json(&featurizer.config));
        let effective = serde_json::json!({
            "model": model_cfg,
            "train": train_cfg,
            "features": featurizer.config,
            "val": args.val,
            "val_fraction": args.val_fraction,
        });
        run.manifest("train", Some(&args.out), Some(train_cfg.seed), threads, effective, &inputs)?;
        Trainer::new(&model_cfg, &train_cfg, &train_set, val_set.as_ref(), &featurizer)?
    };

    let log_every = trainer.checkpoint().train_config.log_every;
    while !trainer.is_done() {
        let report = trainer.train_step()?;
        let val = trainer
            .history()
            .records
            .last()
            .filter(|r| r.step == report.step)
            .and_then(|r| r.val_macro_f1);
        if report.step % log_every == 0 || val.is_some() {
            let val = val.map(|f| format!(" val_macro_f1 {f:.4}")).unwrap_or_default();
            run.progress(&format!("step {} lr {:.3e} loss {:.5}{val}", report.step, report.lr, report.loss));
        }
    }
    // Already finished; this only writes final.ckpt and history.jsonl.
    trainer.run()?;
    let best = trainer.best();
    let summary = serde_json::json!({
        "steps": trainer.step(),
        "checksum": trainer.params().checksum(),
        "best": best,
        "out": args.out,
    });
    match run.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary).expect("serializes")),
        Format::Table => {
            println!("steps     {}", trainer.step());
            println!("checksum  {}", trainer.params().checksum());
            if let Some(b) = best {
                println!("best val  {:.4} at step {}", b.macro_f1, b.step);
            }
            println!("output    {}", args.out.display());
        }
    }
    Ok(())
}

fn cmd_predict(run: &Run, model: &Path, data: &Path, out: &Path, features: Option<&str>) -> CliResult<()> {
    let ckpt = train::load_checkpoint(model)?;
    let featurizer = checkpoint_featurizer(&ckpt.feature_config, features)?;
    let dataset = load(data)?;
    let predictor = SspcPredictor { params: &ckpt.params, featurizer: &featurizer };
    let preds = eval::predict_dataset(&predictor, &dataset)?;
    eval::write_solutions(&preds, out)?;
    run.progress(&format!("wrote {} solution files to {}", preds.len(), out.display()));
    let mut inputs = vec![model, data];
    let emb = features.map(parse_features).transpose()?;
    if let Some(FeatureSpec::Emb(p)) = &emb {
        inputs.push(p);
    }
    let effective = serde_json::json!({ "model": ckpt.params.config, "features": featurizer.config });
    run.manifest("predict", Some(out), Some(ckpt.params.config.seed), None, effective, &inputs)
}

fn cmd_evaluate(
    run: &Run,
    data: &Path,
    model: Option<&Path>,
    solutions: Option<&Path>,
    features: Option<&str>,
    out: Option<&Path>,
) -> CliResult<()> {
    let dataset = load(data)?;
    let mut inputs = vec![data];
    let (report, effective) = match (model, solutions) {
        (Some(model), _) => {
            inputs.push(model);
            let ckpt = train::load_checkpoint(model)?;
            let featurizer = checkpoint_featurizer(&ckpt.feature_config, features)?;
            let predictor = SspcPredictor { params: &ckpt.params, featurizer: &featurizer };
            let report = eval::evaluate_dataset(&predictor, &dataset)?;
            (report, serde_json::json!({ "model": ckpt.params.config, "features": featurizer.config }))
        }
        (None, Some(dir)) => {
            inputs.push(dir);
            let solutions = eval::read_solutions(dir).map_err(|e| Failure { code: 2, message: e.to_string() })?;
            let report = eval::score_solutions(&split_name(dir), &dataset, &solutions)?;
            (report, serde_json::json!({ "solutions": dir }))
        }
        (None, None) => return Err(Failure::usage("pass --model or --solutions")),
    };
    print_reports(run, &[&report]);
    write_report(out, "report.json", &report.to_json())?;
    run.manifest("evaluate", out, None, None, effective, &inputs)
}

fn cmd_baseline(run: &Run, data: &Path, kind: &str, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let kinds = if kind == "all" {
        vec![BaselineKind::Random, BaselineKind::Predict1, BaselineKind::Predict0]
    } else {
        vec![kind.parse::<BaselineKind>().map_err(Failure::from)?]
    };
    let dataset = load(data)?;
    let reports = kinds
        .iter()
        .map(|&kind| eval::evaluate_dataset(&BaselinePredictor { kind, seed }, &dataset))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&EvalReport> = reports.iter().collect();
    print_reports(run, &refs);
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    write_report(
        out,
        "baselines.json",
        &serde_json::to_string_pretty(&reports).expect("serializes"),
    )?;
    run.manifest("baseline", out, Some(seed), None, serde_json::json!({ "kinds": names, "seed": seed }), &[data])
}

fn cmd_llm(run: &Run, args: &LlmArgs, threads: Option<usize>) -> CliResult<()> {
    let mut cfg: LlmConfig = match &args.llm_config {
        Some(p) => read_toml(p)?,
        None => LlmConfig::default(),
    };
    if let Some(v) = &args.endpoint {
        cfg.endpoint = v.clone();
    }
    if let Some(v) = &args.model {
        cfg.model = v.clone();
    }
    if let Some(v) = &args.api_key_name {
        cfg.api_key_env = format!("SSPC_API_KEY_{}", v.to_uppercase());
    }
    if let Some(v) = &args.template {
        cfg.template_path = Some(v.clone());
    }
    if let Some(v) = &args.cache_dir {
        cfg.cache_dir = v.clone();
    }
    if let Some(v) = args.rpm {
        cfg.requests_per_minute = v;
    }
    if let Some(v) = args.retries {
        cfg.max_retries = v;
    }
    if let Some(v) = args.timeout {
        cfg.timeout_secs = v;
    }
    if let Some(v) = args.max_in_flight {
        cfg.max_in_flight = v;
    }
    if let Some(t) = threads {
        cfg.max_in_flight = cfg.max_in_flight.min(t.max(1));
    }
    cfg.validate()?;
    run.echo("llm config", &to_json(&cfg));
    let dataset = load(&args.data)?;
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(p) = &cfg.template_path {
        inputs.push(p);
    }
    run.manifest("llm-baseline", args.out.as_deref(), None, threads, to_json(&cfg), &inputs)?;
    let transport = HttpTransport::from_config(&cfg);
    let result = llm_baseline::run_llm_baseline(&cfg, &dataset, &transport, &SystemClock::default())?;
    print_reports(run, &[&result.report]);
    run.progress(&format!(
        "requests {} cache hits {} parse failures {} ({:.1}%) transport failures {}",
        result.network_requests,
        result.cache_hits,
        result.parse_failures,
        100.0 * result.parse_failure_rate,
        result.transport_failures
    ));
    write_report(
        args.out.as_deref(),
        "llm-report.json",
        &serde_json::to_string_pretty(&result).expect("serializes"),
    )
}

fn cmd_synth(run: &Run, args: &SynthArgs) -> CliResult<()> {
    let cfg = SyntheticConfig {
        authors: args.authors,
        n_problems: args.n_problems,
        min_sentences: args.min_sentences,
        max_sentences: args.max_sentences,
        min_words: args.min_words,
        max_words: args.max_words,
        separation: args.separation,
        change_prob: args.change_prob,
        duplicate_rate: args.duplicate_rate,
        seed: args.seed,
    };
    cfg.validate()?;
    run.echo("synthetic config", &to_json(&cfg));
    let dataset = synthetic::gen_synthetic(&cfg, &args.out)?;
    run.progress(&format!("wrote {} problems to {}", dataset.len(), args.out.display()));
    run.manifest("gen-synthetic", Some(&args.out), Some(cfg.seed), None, to_json(&cfg), &[])
}

fn dispatch(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 3, message: e.to_string() })?;
    }
    let run = Run { argv, quiet: cli.quiet, format: cli.format };
    match &cli.command {
        Command::Stats { data, out } => cmd_stats(&run, data, out.as_deref()),
        Command::Convert2024 { input, out } => cmd_convert(&run, input, out),
        Command::Train(args) => cmd_train(&run, args, cli.threads),
        Command::Predict { model, data, out, features } => {
            cmd_predict(&run, model, data, out, features.as_deref())
        }
        Command::Evaluate { data, model, solutions, features, out } => cmd_evaluate(
            &run,
            data,
            model.as_deref(),
            solutions.as_deref(),
            features.as_deref(),
            out.as_deref(),
        ),
        Command::Baseline { data, kind, seed, out } => cmd_baseline(&run, data, kind, *seed, out.as_deref()),
        Command::LlmBaseline(args) => cmd_llm(&run, args, cli.threads),
        Command::GenSynthetic(args) => cmd_synth(&run, args),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
