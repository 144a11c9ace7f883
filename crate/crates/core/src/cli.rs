//! Batch-experiment front door: dataset generation, training, evaluation,
//! variant comparison, and attention inspection. Every command is
//! deterministic given its flags; all randomness comes from explicit seeds.
//!
//! Exit codes: 0 success, 2 usage/validation, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{greedy_decode, ModelDims, ModelParams};
use crate::checkpoint;
use crate::grounding::{grounding_f1, top1_region, EvalReport, Prediction};
use crate::prophet::{Divergence, Variant};
use crate::synthdata::{make_split, read_dataset, write_dataset, Catalog, GenConfig, Instance};
use crate::training::{fit, OptimizerKind, TrainConfig};

pub const OUT_ENV_VAR: &str = "PROPHET_LAB_OUT";

#[derive(Parser)]
#[command(name = "prophet-lab", version, about = "Attention-regularization training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits of the synthetic benchmark.
    GenData(GenDataArgs),
    /// Train a captioner (baseline, cpa, or dpa variant).
    Train(TrainArgs),
    /// Greedy-decode a test split and report grounding metrics.
    Eval(EvalArgs),
    /// Tabulate several eval reports against the first one.
    Compare(CompareArgs),
    /// Dump the attention trace for one test instance.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// train,val,test instance counts.
    #[arg(long, default_value = "200,50,50")]
    sizes: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    n_min: usize,
    #[arg(long, default_value_t = 5)]
    n_max: usize,
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    ambiguity: f64,
    /// Tag caption articles as non-visual words.
    #[arg(long, default_value_t = false)]
    articles_nv: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing train.jsonl) or a .jsonl file.
    #[arg(long)]
    data: PathBuf,
    /// baseline | cpa | dpa
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// l1 | l2 | kl
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    detach_prophet: Option<bool>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with a partial train config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    embed_dim: usize,
    #[arg(long, default_value_t = 48)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    attn_dim: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock seconds in the runlog (breaks byte determinism).
    #[arg(long, default_value_t = false)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (containing test.jsonl) or a .jsonl file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more report.json paths; deltas are taken against the first.
    #[arg(long, num_args = 2.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Command failure with its process exit code.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

type CmdResult = std::result::Result<(), Failure>;

/// Parse process arguments and execute; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses 0 for --help/--version and 2 for bad usage.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn resolve_out(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUT_ENV_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path)
        .map_err(|e| runtime(format!("cannot create output directory {}: {e}", path.display())))
}

fn sha256_hex(path: &Path) -> std::result::Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn dataset_file(data: &Path, default_name: &str) -> std::result::Result<PathBuf, Failure> {
    let path = if data.is_dir() {
        data.join(default_name)
    } else {
        data.to_path_buf()
    };
    if !path.is_file() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    Ok(path)
}

fn load_instances(path: &Path) -> std::result::Result<Vec<Instance>, Failure> {
    read_dataset(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, Failure> {
    match s {
        "baseline" => Ok(Variant::Baseline),
        "cpa" => Ok(Variant::Cpa),
        "dpa" => Ok(Variant::Dpa),
        _ => Err(usage(format!("unknown variant `{s}` (expected baseline|cpa|dpa)"))),
    }
}

fn parse_divergence(s: &str) -> std::result::Result<Divergence, Failure> {
    match s {
        "l1" => Ok(Divergence::L1),
        "l2" => Ok(Divergence::L2),
        "kl" => Ok(Divergence::Kl),
        _ => Err(usage(format!("unknown divergence `{s}` (expected l1|l2|kl)"))),
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Serialize)]
struct GenManifest<'a> {
    tool_version: &'a str,
    seed: u64,
    sizes: (usize, usize, usize),
    config: GenConfig,
    files: Vec<String>,
}

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let sizes = parse_sizes(&args.sizes)?;
    let config = GenConfig {
        n_min: args.n_min,
        n_max: args.n_max,
        feat_dim: args.feat_dim,
        noise_sigma: args.noise,
        articles_as_nv: args.articles_nv,
        ambiguity_fraction: args.ambiguity,
    };
    let catalog = Catalog::default();
    let (train, val, test) =
        make_split(args.seed, &catalog, sizes, &config).map_err(|e| usage(e.to_string()))?;

    let out = resolve_out(args.out);
    ensure_dir(&out)?;
    let files = [("train.jsonl", &train), ("val.jsonl", &val), ("test.jsonl", &test)];
    for (name, instances) in &files {
        write_dataset(&out.join(name), instances).map_err(runtime)?;
    }
    let manifest = GenManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: args.seed,
        sizes,
        config,
        files: files.iter().map(|(n, _)| n.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} train / {} val / {} test instances to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn parse_sizes(s: &str) -> std::result::Result<(usize, usize, usize), Failure> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(usage(format!("--sizes expects train,val,test; got `{s}`")));
    }
    let mut nums = [0usize; 3];
    for (slot, part) in nums.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad size `{part}` in --sizes")))?;
        if *slot == 0 {
            return Err(usage("sizes must be positive".to_string()));
        }
    }
    Ok((nums[0], nums[1], nums[2]))
}

// ── train ────────────────────────────────────────────────────────────

/// Partial config read from --config; every field optional.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrainConfig {
    lambda: Option<f64>,
    pretrain_epochs: Option<usize>,
    total_epochs: Option<usize>,
    learning_rate: Option<f64>,
    optimizer: Option<String>,
    divergence: Option<String>,
    detach_prophet: Option<bool>,
    variant: Option<String>,
    seed: Option<u64>,
    grad_clip: Option<f64>,
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    tool_version: &'a str,
    dataset: String,
    dims: [usize; 5],
    config: &'a TrainConfig,
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    tool_version: &'a str,
    seed: u64,
    dataset: String,
    config: String,
    checkpoint: String,
    runlog: String,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let data_file = dataset_file(&args.data, "train.jsonl")?;
    let instances = load_instances(&data_file)?;
    if instances.is_empty() {
        return Err(usage(format!("dataset {} is empty", data_file.display())));
    }

    // Precedence: built-in defaults < config file < flags.
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let partial: PartialTrainConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        apply_partial(&mut config, &partial)?;
    }
    let flags = PartialTrainConfig {
        lambda: args.lambda,
        pretrain_epochs: args.pretrain_epochs,
        total_epochs: args.epochs,
        learning_rate: args.lr,
        optimizer: args.optimizer.clone(),
        divergence: args.divergence.clone(),
        detach_prophet: args.detach_prophet,
        variant: args.variant.clone(),
        seed: args.seed,
        grad_clip: args.grad_clip,
    };
    apply_partial(&mut config, &flags)?;
    config.validate().map_err(|e| usage(e.to_string()))?;

    let catalog = Catalog::default();
    let feat_dim = instances[0].features.feat_dim();
    for inst in &instances {
        if inst.features.feat_dim() != feat_dim {
            return Err(runtime("dataset mixes feature dimensions"));
        }
    }
    let dims = ModelDims {
        vocab: catalog.vocab_size(),
        embed: args.embed_dim,
        feat: feat_dim,
        hidden: args.hidden_dim,
        attn: args.attn_dim,
    };
    let params = ModelParams::init(dims, config.seed);
    let (params, runlog) = fit(&instances, &config, params).map_err(runtime)?;

    let out = resolve_out(args.out);
    ensure_dir(&out)?;
    let ckpt_path = out.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &params).map_err(runtime)?;
    fs::write(out.join("runlog.csv"), runlog.to_csv(args.timing)).map_err(runtime)?;
    let snapshot = TrainSnapshot {
        tool_version: env!("CARGO_PKG_VERSION"),
        dataset: data_file.display().to_string(),
        dims: [dims.vocab, dims.embed, dims.feat, dims.hidden, dims.attn],
        config: &config,
    };
    write_json(&out.join("config.json"), &snapshot)?;
    let manifest = TrainManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        dataset: data_file.display().to_string(),
        config: "config.json".into(),
        checkpoint: "checkpoint.bin".into(),
        runlog: "runlog.csv".into(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let last = runlog.rows.last().unwrap();
    println!(
        "trained {} epochs ({} pretrain); final total {:.4}; checkpoint at {}",
        config.total_epochs,
        config.pretrain_epochs,
        last.total,
        ckpt_path.display()
    );
    Ok(())
}

fn apply_partial(config: &mut TrainConfig, partial: &PartialTrainConfig) -> CmdResult {
    if let Some(v) = partial.lambda {
        config.lambda = v;
    }
    if let Some(v) = partial.pretrain_epochs {
        config.pretrain_epochs = v;
    }
    if let Some(v) = partial.total_epochs {
        config.total_epochs = v;
    }
    if let Some(v) = partial.learning_rate {
        config.learning_rate = v;
    }
    if let Some(s) = &partial.optimizer {
        config.optimizer = match s.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::default_adam(),
            _ => return Err(usage(format!("unknown optimizer `{s}` (expected sgd|adam)"))),
        };
    }
    if let Some(s) = &partial.divergence {
        config.divergence = parse_divergence(s)?;
    }
    if let Some(v) = partial.detach_prophet {
        config.detach_prophet = v;
    }
    if let Some(s) = &partial.variant {
        config.variant = parse_variant(s)?;
    }
    if let Some(v) = partial.seed {
        config.seed = v;
    }
    if let Some(v) = partial.grad_clip {
        config.grad_clip = if v == 0.0 { None } else { Some(v) };
    }
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct ReportFile {
    pub tool_version: String,
    pub checkpoint: String,
    pub dataset: String,
    pub test_set_hash: String,
    pub instances: usize,
    pub report: EvalReport,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    index: usize,
    tokens: &'a [usize],
    words: Vec<String>,
    trace: &'a [Vec<f64>],
}

fn load_model(path: &Path, instances: &[Instance]) -> std::result::Result<ModelParams, Failure> {
    let params = checkpoint::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let catalog = Catalog::default();
    if params.dims.vocab != catalog.vocab_size() {
        return Err(runtime(format!(
            "checkpoint vocab {} does not match catalog vocab {}",
            params.dims.vocab,
            catalog.vocab_size()
        )));
    }
    for inst in instances {
        if inst.features.feat_dim() != params.dims.feat {
            return Err(runtime(format!(
                "checkpoint feature dim {} does not match dataset feature dim {}",
                params.dims.feat,
                inst.features.feat_dim()
            )));
        }
    }
    Ok(params)
}

fn decode_all(
    params: &ModelParams,
    instances: &[Instance],
    max_len: usize,
) -> std::result::Result<Vec<Prediction>, Failure> {
    instances
        .iter()
        .map(|inst| {
            greedy_decode(&inst.features, params, max_len)
                .map(|(tokens, trace)| Prediction { tokens, trace })
                .map_err(runtime)
        })
        .collect()
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "f1_all,f1_loc,grounding_accuracy,token_exact_rate,backward_grounded_rate,object_accuracy,attribute_accuracy,relation_accuracy\n",
    );
    out.push_str(&format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        report.f1_all,
        report.f1_loc,
        report.grounding_accuracy,
        report.token_exact_rate,
        report.backward_grounded_rate,
        report.object_accuracy.rate(),
        report.attribute_accuracy.rate(),
        report.relation_accuracy.rate(),
    ));
    out
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let data_file = dataset_file(&args.data, "test.jsonl")?;
    let instances = load_instances(&data_file)?;
    let params = load_model(&args.checkpoint, &instances)?;
    let predictions = decode_all(&params, &instances, args.max_len)?;

    let catalog = Catalog::default();
    let references: Vec<_> = instances.iter().map(|i| i.caption.clone()).collect();
    let report = grounding_f1(&predictions, &references, &catalog).map_err(runtime)?;

    let out = resolve_out(args.out);
    ensure_dir(&out)?;
    let file = ReportFile {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint: args.checkpoint.display().to_string(),
        dataset: data_file.display().to_string(),
        test_set_hash: sha256_hex(&data_file)?,
        instances: instances.len(),
        report,
    };
    write_json(&out.join("report.json"), &file)?;
    fs::write(out.join("report.csv"), report_csv(&file.report)).map_err(runtime)?;

    let mut traces = String::new();
    for (index, prediction) in predictions.iter().enumerate() {
        let record = TraceRecord {
            index,
            tokens: &prediction.tokens,
            words: prediction.tokens.iter().map(|&t| catalog.word(t).to_string()).collect(),
            trace: &prediction.trace,
        };
        traces.push_str(&serde_json::to_string(&record).map_err(runtime)?);
        traces.push('\n');
    }
    fs::write(out.join("traces.jsonl"), traces).map_err(runtime)?;

    println!(
        "evaluated {} instances: f1_all {:.4}, f1_loc {:.4}, grounding {:.4}, backward {:.4}",
        file.instances,
        file.report.f1_all,
        file.report.f1_loc,
        file.report.grounding_accuracy,
        file.report.backward_grounded_rate
    );
    Ok(())
}

// ── compare ──────────────────────────────────────────────────────────

const COMPARE_COLUMNS: [&str; 8] = [
    "f1_all",
    "f1_loc",
    "grounding_accuracy",
    "token_exact_rate",
    "backward_grounded_rate",
    "object_accuracy",
    "attribute_accuracy",
    "relation_accuracy",
];

fn report_values(r: &EvalReport) -> [f64; 8] {
    [
        r.f1_all,
        r.f1_loc,
        r.grounding_accuracy,
        r.token_exact_rate,
        r.backward_grounded_rate,
        r.object_accuracy.rate(),
        r.attribute_accuracy.rate(),
        r.relation_accuracy.rate(),
    ]
}

fn cmd_compare(args: CompareArgs) -> CmdResult {
    let mut files = Vec::new();
    for path in &args.reports {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let file: ReportFile =
            serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        files.push((path.clone(), file));
    }
    let base_hash = &files[0].1.test_set_hash;
    for (path, file) in &files[1..] {
        if &file.test_set_hash != base_hash {
            return Err(runtime(format!(
                "reports are not comparable: {} was evaluated on a different test set",
                path.display()
            )));
        }
    }

    let base = report_values(&files[0].1.report);
    // Fixed column order: report path, the metric columns, then one delta
    // column per metric, all relative to the first report.
    let mut csv = String::from("report");
    for col in COMPARE_COLUMNS {
        csv.push_str(&format!(",{col}"));
    }
    for col in COMPARE_COLUMNS {
        csv.push_str(&format!(",delta_{col}"));
    }
    csv.push('\n');
    let mut text = format!("{:<40}", "report");
    for col in COMPARE_COLUMNS {
        text.push_str(&format!(" {col:>22}"));
    }
    text.push('\n');
    for (path, file) in &files {
        let values = report_values(&file.report);
        csv.push_str(&path.display().to_string());
        for v in values {
            csv.push_str(&format!(",{v:.6}"));
        }
        for (v, b) in values.iter().zip(&base) {
            csv.push_str(&format!(",{:+.6}", v - b));
        }
        csv.push('\n');
        text.push_str(&format!("{:<40}", path.display()));
        for (v, b) in values.iter().zip(&base) {
            text.push_str(&format!(" {:>12.4} ({:+.4})", v, v - b));
        }
        text.push('\n');
    }

    let out = resolve_out(args.out);
    ensure_dir(&out)?;
    fs::write(out.join("comparison.csv"), &csv).map_err(runtime)?;
    fs::write(out.join("comparison.txt"), &text).map_err(runtime)?;
    print!("{text}");
    Ok(())
}

// ── inspect ──────────────────────────────────────────────────────────

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    let data_file = dataset_file(&args.data, "test.jsonl")?;
    let instances = load_instances(&data_file)?;
    if args.index >= instances.len() {
        return Err(runtime(format!(
            "index {} out of range ({} instances)",
            args.index,
            instances.len()
        )));
    }
    let params = load_model(&args.checkpoint, &instances)?;
    let instance = &instances[args.index];
    let (tokens, trace) =
        greedy_decode(&instance.features, &params, args.max_len).map_err(runtime)?;

    let catalog = Catalog::default();
    let ref_end = instance.caption.tokens.len() - 1;
    let ref_tokens = &instance.caption.tokens[1..ref_end];
    let ref_gold = &instance.caption.gold_regions[1..ref_end];

    let mut csv = String::from("step,token,word,top1_region,gold_region,match,alpha\n");
    for (step, (&token, alpha)) in tokens.iter().zip(&trace).enumerate() {
        let top1 = top1_region(alpha);
        let gold = if ref_tokens.get(step) == Some(&token) {
            ref_gold[step]
        } else {
            None
        };
        let matched = gold == Some(top1);
        let alpha_field: Vec<String> = alpha.iter().map(|v| format!("{v:.12}")).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            step,
            token,
            catalog.word(token),
            top1,
            gold.map_or(String::new(), |g| g.to_string()),
            matched,
            alpha_field.join(";")
        ));
    }

    let out = resolve_out(args.out);
    ensure_dir(&out)?;
    let path = out.join(format!("inspect_{}.csv", args.index));
    fs::write(&path, &csv).map_err(runtime)?;
    print!("{csv}");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}
