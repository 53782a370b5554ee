//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 partial batch failure, 3 total failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::metrics::{evaluate, EvalItem, EvalReport, Metric, ObjectVocabulary};
use crate::pipeline::{read_manifest, Mode, Pipeline, RunConfig};
use crate::store::ResponseCache;
use crate::synthbench::{self, BenchConfig, ErrorModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "patchcap", version, about = "Region-wise image captioning with candidate filtering")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption one image.
    Caption(CaptionArgs),
    /// Caption every image in a JSONL manifest.
    Batch(BatchArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Run the synthetic benchmark.
    Bench(BenchArgs),
    /// Manage the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pipeline mode, overriding the config file and environment.
    #[arg(long)]
    mode: Option<Mode>,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    image: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Write the full record as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the record as JSON instead of the caption.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct BatchArgs {
    /// JSONL lines of {"image_id", "path"}.
    manifest: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Receives records.jsonl and report.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSONL lines of {"image_id", "candidate"}.
    #[arg(long)]
    predictions: PathBuf,
    /// JSONL lines of {"image_id", "references", "gt_objects"}.
    #[arg(long)]
    references: PathBuf,
    /// Comma-separated: bleu, rouge_l, cider, chair, length.
    #[arg(long, value_delimiter = ',', default_value = "bleu,rouge_l,cider,length")]
    metrics: Vec<String>,
    /// Object vocabulary JSON, or "coco" for the bundled list.
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    detail_recall: Option<f64>,
    #[arg(long)]
    hallucination_rate: Option<f64>,
    #[arg(long)]
    contradiction_rate: Option<f64>,
    #[arg(long)]
    scorer_noise: Option<f64>,
    /// Comma-separated modes; all of them by default.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<Mode>,
    /// Candidates per patch.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Pipeline thresholds; backend bindings in it are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Receives report.json, report.txt, references.jsonl and predictions per mode.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    /// Delete every cached response.
    Clear {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

struct Exit {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Exit {
    Exit { code: EXIT_USAGE, message: message.into() }
}

fn failure(message: impl Into<String>) -> Exit {
    Exit { code: EXIT_FAILURE, message: message.into() }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let result = match cli.command {
        Command::Caption(a) => caption(a),
        Command::Batch(a) => batch(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Cache { action: CacheAction::Clear { config, cache_dir } } => cache_clear(config, cache_dir),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// File, then environment, then flags.
fn load_config(run: &RunArgs) -> Result<RunConfig, Exit> {
    let mut config = match &run.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    config.apply_env().map_err(|e| usage(e.to_string()))?;
    if let Some(mode) = run.mode {
        config.mode = mode;
    }
    if let Some(dir) = &run.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    Ok(config)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Exit> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| failure(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| failure(format!("cannot write {}: {e}", path.display())))
}

fn caption(a: CaptionArgs) -> Result<i32, Exit> {
    let config = load_config(&a.run)?;
    let pipeline = Pipeline::from_config(config).map_err(|e| usage(e.to_string()))?;
    let img = crate::imaging::SourceImage::load(&a.image).map_err(|e| failure(e.to_string()))?;
    let record = pipeline.run_image(&img);
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    if a.json {
        println!("{json}");
    } else if let Some(c) = &record.final_caption {
        println!("{c}");
    }
    if record.is_ok() {
        Ok(EXIT_OK)
    } else {
        Err(failure(format!(
            "{} failed at {}: {}",
            record.image_id,
            record.failed_stage.as_deref().unwrap_or("?"),
            record.error.as_deref().unwrap_or("")
        )))
    }
}

fn batch(a: BatchArgs) -> Result<i32, Exit> {
    let mut config = load_config(&a.run)?;
    if let Some(w) = a.workers {
        config.batch_workers = w;
    }
    let pipeline = Pipeline::from_config(config).map_err(|e| usage(e.to_string()))?;
    let manifest = read_manifest(&a.manifest).map_err(|e| usage(e.to_string()))?;
    let outcome = pipeline.run_batch(&manifest);

    fs::create_dir_all(&a.out_dir).map_err(|e| failure(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let path = a.out_dir.join("records.jsonl");
    let file = File::create(&path).map_err(|e| failure(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in &outcome.records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        writeln!(w).and_then(|_| w.flush()).map_err(|e| failure(format!("cannot write {}: {e}", path.display())))?;
    }
    let report = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    write_file(&a.out_dir.join("report.json"), &report)?;

    let r = &outcome.report;
    if a.json {
        println!("{report}");
    } else {
        println!("{} images: {} ok, {} failed", r.total, r.succeeded, r.failed);
        for id in &r.failed_images {
            println!("  failed: {id}");
        }
        println!("backend calls: {} live, {} cached", r.live_calls, r.cache_hits);
    }
    Ok(r.exit_code())
}

#[derive(Deserialize)]
struct Prediction {
    image_id: String,
    candidate: String,
}

#[derive(Deserialize)]
struct Reference {
    image_id: String,
    references: Vec<String>,
    #[serde(default)]
    gt_objects: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Exit> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| usage(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

fn eval(a: EvalArgs) -> Result<i32, Exit> {
    let metrics: Vec<Metric> = a
        .metrics
        .iter()
        .map(|m| Metric::parse(m).ok_or_else(|| usage(format!("unknown metric {m:?}"))))
        .collect::<Result<_, _>>()?;
    let vocab = match a.vocab.as_deref() {
        None if metrics.contains(&Metric::Chair) => return Err(usage("chair needs --vocab (a file or \"coco\")")),
        None => None,
        Some("coco") => Some(ObjectVocabulary::coco_default()),
        Some(path) => Some(ObjectVocabulary::load(path).map_err(|e| usage(e.to_string()))?),
    };
    let preds: Vec<Prediction> = read_jsonl(&a.predictions)?;
    let refs: Vec<Reference> = read_jsonl(&a.references)?;
    let mut by_id: HashMap<String, Reference> = HashMap::new();
    for r in refs {
        if by_id.contains_key(&r.image_id) {
            return Err(usage(format!("duplicate reference for {}", r.image_id)));
        }
        by_id.insert(r.image_id.clone(), r);
    }
    if preds.len() != by_id.len() {
        return Err(usage(format!("{} predictions but {} references", preds.len(), by_id.len())));
    }
    let items: Vec<EvalItem> = preds
        .into_iter()
        .map(|p| {
            let r = by_id.remove(&p.image_id).ok_or_else(|| usage(format!("no reference for {}", p.image_id)))?;
            Ok(EvalItem { image_id: p.image_id, candidate: p.candidate, references: r.references, gt_objects: r.gt_objects })
        })
        .collect::<Result<_, Exit>>()?;
    let report = evaluate(&items, &metrics, vocab.as_ref()).map_err(|e| usage(e.to_string()))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", render_eval(&report));
    }
    Ok(EXIT_OK)
}

fn render_eval(r: &EvalReport) -> String {
    let mut out = format!("items      {}\n", r.n);
    if let Some(b) = r.bleu {
        for (i, v) in b.iter().enumerate() {
            out += &format!("BLEU-{}     {v:.4}\n", i + 1);
        }
    }
    if let Some(v) = r.rouge_l {
        out += &format!("ROUGE-L    {v:.4}\n");
    }
    if let Some(v) = r.cider {
        out += &format!("CIDEr-D    {v:.4}\n");
    }
    if let Some(c) = &r.chair {
        out += &format!("CHAIRs     {:.4}\nCHAIRi     {:.4}\n", c.chairs, c.chairi);
    }
    if let Some(l) = &r.length {
        out += &format!("words      {:.2}\n", l.mean_words);
    }
    out
}

fn bench(a: BenchArgs) -> Result<i32, Exit> {
    let defaults = ErrorModel::default();
    let error_model = ErrorModel {
        detail_recall: a.detail_recall.unwrap_or(defaults.detail_recall),
        hallucination_rate: a.hallucination_rate.unwrap_or(defaults.hallucination_rate),
        contradiction_rate: a.contradiction_rate.unwrap_or(defaults.contradiction_rate),
        scorer_noise: a.scorer_noise.unwrap_or(defaults.scorer_noise),
    };
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(k) = a.k {
        run.k_candidates = k;
    }
    run.validate().map_err(|e| usage(e.to_string()))?;
    let config = BenchConfig {
        seed: a.seed,
        n_scenes: a.scenes,
        error_model,
        modes: if a.modes.is_empty() { Mode::ALL.to_vec() } else { a.modes.clone() },
        workers: a.workers,
        run,
        ..BenchConfig::default()
    };
    let out = synthbench::run_bench(&config).map_err(|e| usage(e.to_string()))?;
    let json = out.report.to_json();
    let table = out.report.render_table();
    if let Some(dir) = &a.out_dir {
        write_file(&dir.join("report.json"), &json)?;
        write_file(&dir.join("report.txt"), &table)?;
        let io = |e: std::io::Error| failure(format!("cannot write to {}: {e}", dir.display()));
        synthbench::write_references(&out.scenes, File::create(dir.join("references.jsonl")).map_err(io)?)
            .map_err(io)?;
        for (mode, records) in &out.records {
            let f = File::create(dir.join(format!("predictions_{mode}.jsonl"))).map_err(io)?;
            synthbench::write_predictions(records, f).map_err(io)?;
        }
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{table}");
    }
    Ok(if out.report.failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn cache_clear(config: Option<PathBuf>, cache_dir: Option<PathBuf>) -> Result<i32, Exit> {
    let run = RunArgs { config, mode: None, cache_dir };
    let config = load_config(&run)?;
    let dir = config.cache_dir.ok_or_else(|| usage("no cache directory configured"))?;
    if !dir.exists() {
        println!("cache at {} is already empty", dir.display());
        return Ok(EXIT_OK);
    }
    let cache = ResponseCache::open(&dir).map_err(|e| failure(e.to_string()))?;
    let n = cache.len().map_err(|e| failure(e.to_string()))?;
    cache.clear().map_err(|e| failure(e.to_string()))?;
    println!("removed {n} cached responses from {}", dir.display());
    Ok(EXIT_OK)
}
