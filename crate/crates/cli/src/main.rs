//! `wgat`: preprocess interaction logs, train Gaussian-embedding recommenders,
//! evaluate them and run the uncertainty analyses.
//!
//! Exit codes: 0 success, 1 numerical or acceptance failure, 2 usage or IO error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use wgat_core::data::{self, ColumnMap, PreprocessConfig};
use wgat_core::encoder::{EncoderKind, NodeTables, VarianceRule};
use wgat_core::eval::{evaluate_all, popularity_baseline};
use wgat_core::graph::build_graph;
use wgat_core::losses::LossKind;
use wgat_core::synth::{self, SynthConfig};
use wgat_core::trainer::{self, Checkpoint, GradcheckConfig, TrainConfig};
use wgat_core::uncertainty::{self as unc, CategoryTable, VarianceSummary};

#[derive(Parser, Debug)]
#[command(name = "wgat", version, about = "Gaussian-embedding recommender with Wasserstein graph attention")]
struct Cli {
    /// Worker threads for propagation and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, k-core filter, split and cache an interaction log.
    Preprocess(PreprocessArgs),
    /// Write a synthetic MovieLens-format dataset.
    Synth(SynthArgs),
    /// Train a model on a cache.
    Train(TrainArgs),
    /// Recall/NDCG of a checkpoint on the cached test split.
    Evaluate(EvaluateArgs),
    /// Variance and diversity reports for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the full objective on a toy graph.
    Gradcheck(GradcheckArgs),
    /// Loss curves of the w2 and kl arms across batch sizes.
    Stability(StabilityArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Movielens,
    Delimited,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "movielens")]
    format: Format,
    /// Field delimiter for `--format delimited`; `\t` for tabs.
    #[arg(long, default_value = ",")]
    delimiter: String,
    /// Zero-based user,item[,rating[,timestamp]] columns; omit to detect a header.
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    k_core: usize,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ratings below this are dropped before binarization.
    #[arg(long, default_value_t = 1.0)]
    min_rating: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 943)]
    users: usize,
    #[arg(long, default_value_t = 1682)]
    items: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// L2 regularization weight λ.
    #[arg(long, default_value_t = 1e-5)]
    reg: f64,
    #[arg(long, default_value_t = 0.25)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    #[arg(long, default_value = "wgat")]
    encoder: EncoderKind,
    #[arg(long, default_value = "a2")]
    variance_rule: VarianceRule,
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            layers: self.layers,
            lr: self.lr,
            lambda: self.reg,
            tau: self.tau,
            omega: self.omega,
            encoder: self.encoder,
            variance_rule: self.variance_rule,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2048)]
    batch: usize,
    #[arg(long, default_value = "bpr+wpc")]
    loss: LossKind,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Evaluate on the test split every N epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 20)]
    topk: usize,
    /// Also write per-user metrics.
    #[arg(long)]
    per_user: bool,
    /// Report the item-popularity baseline alongside.
    #[arg(long)]
    popularity: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Report {
    O1,
    O2,
    Labels,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// MovieLens-style `item::title::A|B` category file.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long, value_enum)]
    report: Report,
    /// Also render a markdown table.
    #[arg(long)]
    markdown: bool,
    /// Summarize variances by their entry mean instead of the L2 norm.
    #[arg(long)]
    entry_mean: bool,
    /// Use the layer-0 variances instead of the propagated ones.
    #[arg(long)]
    layer0: bool,
    #[arg(long, default_value_t = 20)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    users: usize,
    #[arg(long, default_value_t = 7)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    edges: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value = "bpr+wpc")]
    loss: LossKind,
    #[arg(long, default_value = "wgat")]
    encoder: EncoderKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048")]
    batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "w2,kl")]
    arms: Vec<String>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "42")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<wgat_core::Error> for Failure {
    fn from(e: wgat_core::Error) -> Self {
        use wgat_core::Error as E;
        let code = match e {
            E::Diverged { .. } | E::NonFiniteGradient | E::NonPositiveVariance { .. } | E::Contract(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| io_err(path, e))
}

/// Written once per run next to its outputs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    config: serde_json::Value,
    cache_checksum: Option<String>,
    timings: Vec<(String, f64)>,
}

struct Timer {
    start: Instant,
    phases: Vec<(String, f64)>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            phases: Vec::new(),
        }
    }

    fn lap(&mut self, phase: &str) {
        self.phases.push((phase.to_string(), self.start.elapsed().as_secs_f64()));
        self.start = Instant::now();
    }
}

fn write_manifest(out: &Path, command: &str, config: serde_json::Value, cache_checksum: Option<String>, timer: Timer) -> CmdResult {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        config,
        cache_checksum,
        timings: timer.phases,
    };
    let path = out.join("manifest.json");
    write_file(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(Checkpoint::read(BufReader::new(file))?)
}

fn check_shapes(ckpt: &Checkpoint, bundle: &data::DatasetBundle) -> CmdResult {
    if ckpt.num_users != bundle.num_users() || ckpt.num_items != bundle.num_items() {
        return Err(Failure::usage(format!(
            "checkpoint is {}x{} but cache is {}x{}",
            ckpt.num_users,
            ckpt.num_items,
            bundle.num_users(),
            bundle.num_items()
        )));
    }
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> CmdResult {
    let mut timer = Timer::new();
    let parsed = match a.format {
        Format::Movielens => data::parse_movielens(&a.input)?,
        Format::Delimited => {
            let delimiter = match a.delimiter.as_str() {
                "\\t" | "tab" => b'\t',
                d if d.len() == 1 => d.as_bytes()[0],
                d => return Err(Failure::usage(format!("delimiter must be one byte, got `{d}`"))),
            };
            let columns = match a.columns.as_deref() {
                None => None,
                Some([u, i, rest @ ..]) if rest.len() <= 2 => Some(ColumnMap {
                    user: *u,
                    item: *i,
                    rating: rest.first().copied(),
                    timestamp: rest.get(1).copied(),
                }),
                Some(_) => return Err(Failure::usage("--columns takes 2 to 4 indices")),
            };
            data::parse_delimited(&a.input, delimiter, columns)?
        }
    };
    timer.lap("parse");
    let cfg = PreprocessConfig {
        k_core: a.k_core,
        ratio: a.ratio,
        seed: a.seed,
        min_rating: a.min_rating,
    };
    let bundle = data::preprocess(&parsed.records, &cfg)?;
    timer.lap("preprocess");
    let checksum = data::write_cache(&a.out, &bundle)?;
    timer.lap("write");
    println!(
        "users={} items={} train={} test={} malformed={} cache={}",
        bundle.num_users(),
        bundle.num_items(),
        bundle.train.len(),
        bundle.test.len(),
        parsed.malformed,
        checksum
    );
    let config = serde_json::json!({
        "input": a.input, "format": format!("{:?}", a.format).to_lowercase(),
        "k_core": a.k_core, "ratio": a.ratio, "seed": a.seed, "min_rating": a.min_rating,
    });
    write_manifest(&a.out, "preprocess", config, Some(checksum), timer)
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let mut timer = Timer::new();
    let cfg = SynthConfig {
        users: a.users,
        items: a.items,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let d = synth::generate(&cfg)?;
    d.write_movielens(&a.out)?;
    timer.lap("generate");
    println!("interactions={} -> {}", d.interactions.len(), a.out.display());
    let config = serde_json::json!({ "users": a.users, "items": a.items, "seed": a.seed });
    write_manifest(&a.out, "synth", config, None, timer)
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut timer = Timer::new();
    let cfg = TrainConfig {
        batch_size: a.batch,
        loss: a.loss,
        epochs: a.epochs,
        seed: a.seed,
        eval_every: a.eval_every,
        ..a.model.config()
    };
    cfg.validate()?;
    let (bundle, checksum) = data::read_cache(&a.cache)?;
    create_out(&a.out)?;
    timer.lap("load");
    let held_out = (a.eval_every > 0).then_some(&bundle.test);
    let outcome = trainer::train(&cfg, &bundle.train, held_out)?;
    timer.lap("train");
    let last = outcome.log.records.last();
    if let Some(r) = last {
        if !r.total.is_finite() {
            return Err(Failure::numeric(format!("final loss is {}", r.total)));
        }
        println!("epochs={} final_loss={:.6}", r.epoch, r.total);
    }
    write_file(&a.out.join("checkpoint.bin"), |w| Checkpoint::new(&outcome.params, &cfg).write(w))?;
    write_file(&a.out.join("train_log.csv"), |w| outcome.log.write_csv(w))?;
    timer.lap("write");
    let config = serde_json::to_value(cfg).map_err(|e| Failure::usage(e.to_string()))?;
    write_manifest(&a.out, "train", config, Some(checksum), timer)
}

fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    let mut timer = Timer::new();
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let (bundle, checksum) = data::read_cache(&a.cache)?;
    check_shapes(&ckpt, &bundle)?;
    create_out(&a.out)?;
    let graph = build_graph(&bundle.train)?;
    let tables = wgat_core::encoder::Encoder::new(&graph, ckpt.encoder_config())
        .forward(&ckpt.base_tables())?
        .output;
    timer.lap("forward");
    let report = evaluate_all(&tables, &graph, &bundle.test, a.topk)?;
    timer.lap("evaluate");
    println!("{}", report.summary());
    if report.short_lists > 0 {
        log::warn!("{} users had fewer than {} rankable items", report.short_lists, a.topk);
    }
    let mut summary = format!("model,recall@{k},ndcg@{k}\nmodel,{},{}\n", report.recall, report.ndcg, k = a.topk);
    if a.popularity {
        let pop = popularity_baseline(&graph, &bundle.test, a.topk)?;
        println!("popularity {}", pop.summary());
        summary.push_str(&format!("popularity,{},{}\n", pop.recall, pop.ndcg));
    }
    write_file(&a.out.join("metrics.csv"), |w| w.write_all(summary.as_bytes()))?;
    if a.per_user {
        write_file(&a.out.join("per_user.csv"), |w| report.write_per_user_csv(w))?;
    }
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "topk": a.topk, "encoder": ckpt.encoder.as_str(),
        "loss": ckpt.loss.as_str(), "variance_rule": ckpt.variance_rule.as_str(), "layers": ckpt.layers,
    });
    write_manifest(&a.out, "evaluate", config, Some(checksum), timer)
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let mut timer = Timer::new();
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let (bundle, checksum) = data::read_cache(&a.cache)?;
    check_shapes(&ckpt, &bundle)?;
    let categories = match (&a.categories, a.report) {
        (Some(path), _) => {
            let labels = data::parse_categories(path)?;
            Some(CategoryTable::from_tokens(&labels, &bundle.item_index()).0)
        }
        (None, Report::O1) => None,
        (None, _) => return Err(Failure::usage("--categories is required for the o2 and labels reports")),
    };
    create_out(&a.out)?;
    let graph = build_graph(&bundle.train)?;
    let tables: NodeTables = if a.layer0 {
        ckpt.base_tables()
    } else {
        wgat_core::encoder::Encoder::new(&graph, ckpt.encoder_config())
            .forward(&ckpt.base_tables())?
            .output
    };
    timer.lap("forward");
    let how = if a.entry_mean {
        VarianceSummary::EntryMean
    } else {
        VarianceSummary::L2Norm
    };
    let nu = bundle.num_users();
    let user_norms = unc::node_variance_norms(&tables, 0..nu, how);
    let (name, buckets) = match a.report {
        Report::O1 => {
            let counts: Vec<usize> = (0..nu as u32).map(|u| graph.user_items(u).len()).collect();
            let b = unc::group_by_o1(&user_norms, &counts, &unc::DEFAULT_O1_EDGES)?;
            let logs: Vec<f64> = counts.iter().map(|&c| (c as f64).log10()).collect();
            if let Some(rho) = unc::spearman(&logs, &user_norms) {
                println!("spearman(log10 count, variance) = {rho:.4}");
            }
            ("o1", b)
        }
        Report::O2 => {
            let cats = categories.as_ref().expect("checked above");
            let o2 = unc::o2_per_user(&tables, &graph, cats, a.topk);
            write_file(&a.out.join("o2_per_user.csv"), |w| {
                writeln!(w, "user_id,o2,variance")?;
                for (u, (o, v)) in o2.iter().zip(&user_norms).enumerate() {
                    writeln!(w, "{u},{},{v}", o.map(|x| x.to_string()).unwrap_or_default())?;
                }
                Ok(())
            })?;
            ("o2", unc::group_by_key(&user_norms, &o2, &unc::DEFAULT_O2_EDGES)?)
        }
        Report::Labels => {
            let cats = categories.as_ref().expect("checked above");
            let item_norms = unc::node_variance_norms(&tables, nu..nu + bundle.num_items(), how);
            ("labels", unc::variance_by_label_count(&item_norms, cats)?)
        }
    };
    timer.lap("analyze");
    write_file(&a.out.join(format!("{name}.csv")), |w| unc::write_buckets_csv(w, name, &buckets))?;
    let md = unc::render_markdown(name, &buckets);
    print!("{md}");
    if a.markdown {
        write_file(&a.out.join(format!("{name}.md")), |w| w.write_all(md.as_bytes()))?;
    }
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "report": name, "topk": a.topk,
        "summary": if a.entry_mean { "entry_mean" } else { "l2" }, "layer0": a.layer0,
    });
    write_manifest(&a.out, "analyze", config, Some(checksum), timer)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let mut timer = Timer::new();
    if a.step > 1e-3 {
        log::warn!("step {} is large; truncation error will dominate the comparison", a.step);
    }
    let cfg = GradcheckConfig {
        users: a.users,
        items: a.items,
        edges: a.edges,
        dim: a.dim,
        samples: a.samples,
        step: a.step,
        seed: a.seed,
        train: TrainConfig {
            loss: a.loss,
            encoder: a.encoder,
            ..GradcheckConfig::default().train
        },
    };
    let report = trainer::gradient_check(&cfg)?;
    timer.lap("gradcheck");
    let passed = report.passed(a.tolerance);
    println!(
        "{} max_rel_error={:.3e} evaluated={} non_finite={}",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.evaluated,
        report.non_finite
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        let config = serde_json::json!({
            "users": a.users, "items": a.items, "edges": a.edges, "dim": a.dim, "samples": a.samples,
            "step": a.step, "seed": a.seed, "tolerance": a.tolerance, "max_rel_error": report.max_rel_error,
        });
        write_manifest(out, "gradcheck", config, None, timer)?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::numeric(format!("max relative error {:.3e} ≥ {}", report.max_rel_error, a.tolerance)))
    }
}

fn cmd_stability(a: &StabilityArgs) -> CmdResult {
    let mut timer = Timer::new();
    let arms = a
        .arms
        .iter()
        .map(|s| unc::parse_arm(s))
        .collect::<wgat_core::Result<Vec<LossKind>>>()?;
    let base = TrainConfig {
        epochs: a.epochs,
        ..a.model.config()
    };
    base.validate()?;
    let (bundle, checksum) = data::read_cache(&a.cache)?;
    create_out(&a.out)?;
    let graph = build_graph(&bundle.train)?;
    timer.lap("load");
    let runs = unc::stability_runs(&graph, &base, &arms, &a.batch_sizes, &a.seeds)?;
    timer.lap("train");
    for r in &runs {
        println!("{} batch={} seed={} oscillation={:.6}", r.arm, r.batch_size, r.seed, r.statistic());
    }
    write_file(&a.out.join("curves.csv"), |w| unc::write_curves_csv(w, &runs))?;
    write_file(&a.out.join("stability.csv"), |w| unc::write_stability_summary_csv(w, &runs))?;
    let config = serde_json::json!({
        "train": base, "batch_sizes": a.batch_sizes, "arms": a.arms, "seeds": a.seeds,
    });
    write_manifest(&a.out, "stability", config, Some(checksum), timer)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "debug" } else { "info" }))
        .format_timestamp_secs()
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Stability(a) => cmd_stability(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
