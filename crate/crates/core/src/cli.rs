//! Command-line driver: ingest, select, build-prompts, score, probe.
//!
//! Exit codes: 0 success, 1 internal error, 2 user or configuration error.
//! Settings come from an optional `--config` file (TOML or JSON) and are
//! overridden by flags.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention_probe::{run_probe, InterleaveLayout};
use crate::dataset::{bind, load_records, BoundSet, Record, TaskKind};
use crate::embedding_store::{EmbeddingMatrix, EmbeddingStore, StoreManifest};
use crate::metrics::{aggregate_runs, load_responses, score_cider, score_vqa, ScoreReport};
use crate::par;
use crate::perturbations::{apply, build_donor_index, PerturbContext, PerturbationKind, PerturbationSetting};
use crate::prompting::{build_prompt, emit_prompts, order_demos, OrderPolicy, PromptMeta, PromptSpec, RankedDemo, TemplateSet};
use crate::selectors::{select_batch, Method, SelectError, SelectionConfig, SelectionResult};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn user(message: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn internal(message: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mmices", version, about = "Mixed-modality in-context demonstration selection toolkit")]
pub struct Cli {
    /// TOML or JSON file with default settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate manifest, embeddings and records; print a binding summary.
    Ingest(IngestArgs),
    /// Select demonstrations for every query.
    Select(SelectArgs),
    /// Assemble interleaved prompts from selections.
    BuildPrompts(PromptArgs),
    /// Score model responses.
    Score(ScoreArgs),
    /// Run the masked cross-attention probe.
    Probe(ProbeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Support (demonstration pool) records, JSONL.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Query records, JSONL.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// vqa or captioning.
    #[arg(long)]
    pub task: Option<TaskKind>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// One method, a comma-separated list, or "all". Several methods write
    /// one `<method>.jsonl` per method into the --out directory.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Prefilter size K for mmices / text_image (default 200).
    #[arg(long)]
    pub prefilter: Option<usize>,
    /// Seed for random selection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow a query to select its own record when it is in the support set.
    #[arg(long)]
    pub include_self: bool,
    /// Output JSONL file, or directory for a method sweep.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Selection JSONL produced by `select`.
    #[arg(long)]
    pub selections: Option<PathBuf>,
    /// Template set, TOML or JSON.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// ascending_similarity or given; default: ascending when scores exist.
    #[arg(long)]
    pub order: Option<OrderPolicy>,
    /// standard, demo_no_images, demo_blank_images, no_query_image,
    /// diff_answer_same_question, random_question or random_words_labels.
    #[arg(long)]
    pub perturb: Option<String>,
    /// Seed for the random perturbations.
    #[arg(long)]
    pub perturb_seed: Option<u64>,
    /// File with one word per line for random_words_labels.
    #[arg(long)]
    pub word_pool: Option<PathBuf>,
    /// Output prompts JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// vqa or cider.
    #[arg(long)]
    pub metric: Option<String>,
    /// Model responses JSONL: {"query_id", "response"} per line.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Records holding gold answers (vqa) or reference captions (cider).
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Glob of per-seed response files to score and aggregate.
    #[arg(long)]
    pub runs: Option<String>,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Segments as IMGxTXT token counts, query last, e.g. "1x2,1x2,1x1".
    #[arg(long)]
    pub segments: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    pub seed_offset: Option<u64>,
    /// Blocks (cross-attention + self-attention) in the toy model.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings file. Every field is optional; flags take precedence.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub support: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub task: Option<TaskKind>,
    pub method: Option<String>,
    pub shots: Option<usize>,
    pub prefilter: Option<usize>,
    pub seed: Option<u64>,
    pub exclude_self: Option<bool>,
    pub selections: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub order: Option<OrderPolicy>,
    pub perturb: Option<String>,
    pub perturb_seed: Option<u64>,
    pub word_pool: Option<PathBuf>,
    pub metric: Option<String>,
    pub responses: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub runs: Option<String>,
    pub segments: Option<String>,
    pub dim: Option<usize>,
    pub seeds: Option<usize>,
    pub seed_offset: Option<u64>,
    pub depth: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::user(format!("{}: {e}", path.display())))
    }
}

fn at<E: fmt::Display>(p: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::user(format!("{}: {e}", p.display()))
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::user(format!("missing required --{flag}")))
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.or(cfg.threads);
    if threads == Some(0) {
        return Err(CliError::user("--threads must be at least 1"));
    }
    let json = cli.json;
    let command = cli.command;
    let summary = par::with_threads(threads, move || match command {
        Command::Ingest(a) => cmd_ingest(&a, &cfg),
        Command::Select(a) => cmd_select(&a, &cfg),
        Command::BuildPrompts(a) => cmd_build_prompts(&a, &cfg),
        Command::Score(a) => cmd_score(&a, &cfg),
        Command::Probe(a) => cmd_probe(&a, &cfg),
    })
    .map_err(CliError::internal)??;
    let mut stdout = std::io::stdout().lock();
    let written = if json {
        writeln!(stdout, "{}", serde_json::to_string(&summary.json).expect("summary serializes"))
    } else {
        writeln!(stdout, "{}", summary.text)
    };
    written.map_err(CliError::internal)
}

pub struct Summary {
    pub text: String,
    pub json: serde_json::Value,
}

struct Data {
    store: EmbeddingStore,
    support: BoundSet,
    queries: BoundSet,
}

fn load_data(a: &DataArgs, cfg: &RunConfig) -> CliResult<Data> {
    let manifest_path = required(a.manifest.clone().or(cfg.manifest.clone()), "manifest")?;
    let support_path = required(a.support.clone().or(cfg.support.clone()), "support")?;
    let queries_path = required(a.queries.clone().or(cfg.queries.clone()), "queries")?;
    let task = a.task.or(cfg.task).unwrap_or(TaskKind::Vqa);
    let manifest = StoreManifest::load(&manifest_path).map_err(CliError::user)?;
    let store = EmbeddingStore::open(&manifest).map_err(CliError::user)?;
    let check_dims = |kind: &str, s: &EmbeddingMatrix, q: &EmbeddingMatrix| {
        if s.dim() != q.dim() {
            return Err(CliError::user(format!(
                "{kind} dimension mismatch: support matrix has {} dims, query matrix has {}",
                s.dim(),
                q.dim()
            )));
        }
        Ok(())
    };
    check_dims("visual", &store.visual, &store.query_visual)?;
    check_dims("textual", &store.textual, &store.query_textual)?;
    let support_records = load_records(&support_path, task).map_err(at(&support_path))?;
    let query_records = load_records(&queries_path, task).map_err(at(&queries_path))?;
    let support = bind(support_records, Arc::clone(&store.visual), Arc::clone(&store.textual), task)
        .map_err(at(&support_path))?;
    let queries = bind(
        query_records,
        Arc::clone(&store.query_visual),
        Arc::clone(&store.query_textual),
        task,
    )
    .map_err(at(&queries_path))?;
    Ok(Data {
        store,
        support,
        queries,
    })
}

pub fn cmd_ingest(a: &IngestArgs, cfg: &RunConfig) -> CliResult<Summary> {
    let d = load_data(&a.data, cfg)?;
    let json = json!({
        "task": d.support.task().to_string(),
        "n_support": d.support.len(),
        "n_query": d.queries.len(),
        "visual_dim": d.store.visual.dim(),
        "textual_dim": d.store.textual.dim(),
        "visual_rows": d.store.visual.n_rows(),
        "textual_rows": d.store.textual.n_rows(),
        "blank_image_id": d.store.blank_image_id,
    });
    let text = format!(
        "task={} n_support={} n_query={} visual_dim={} textual_dim={}",
        d.support.task(),
        d.support.len(),
        d.queries.len(),
        d.store.visual.dim(),
        d.store.textual.dim()
    );
    Ok(Summary { text, json })
}

fn parse_methods(spec: &str) -> CliResult<Vec<Method>> {
    if spec == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        let m: Method = part.parse().map_err(CliError::user)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// Creates the parent directory of an output file.
fn prepare_out(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| CliError::internal(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    prepare_out(path)?;
    fs::write(path, text).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    prepare_out(path)?;
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(CliError::internal)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

pub fn cmd_select(a: &SelectArgs, cfg: &RunConfig) -> CliResult<Summary> {
    let methods = parse_methods(&required(a.method.clone().or(cfg.method.clone()), "method")?)?;
    let shots = required(a.shots.or(cfg.shots), "shots")?;
    let prefilter = a.prefilter.or(cfg.prefilter);
    let seed = a.seed.or(cfg.seed);
    let exclude_self = !a.include_self && cfg.exclude_self.unwrap_or(true);
    let out = required(a.out.clone().or(cfg.out.clone()), "out")?;
    if let [m] = methods.as_slice() {
        if prefilter.is_some() && !m.is_two_stage() {
            return Err(CliError::user(format!("--prefilter applies only to mmices and text_image, not {m}")));
        }
    }
    if methods.contains(&Method::Random) && seed.is_none() {
        return Err(CliError::user("random selection requires --seed"));
    }
    let d = load_data(&a.data, cfg)?;
    let sweep = methods.len() > 1;
    if sweep {
        fs::create_dir_all(&out).map_err(|e| CliError::internal(format!("{}: {e}", out.display())))?;
    }
    let mut outputs = Vec::new();
    for &method in &methods {
        let mut sc = SelectionConfig::for_method(method, shots, prefilter, seed.unwrap_or(0));
        sc.exclude_self = exclude_self;
        let results = select_batch(&d.queries, &d.support, &sc).map_err(|e| {
            let (_, first) = &e.failures[0];
            let mut msg = format!("{method}: {first}");
            if e.failures.len() > 1 {
                msg.push_str(&format!(" ({} of {} queries failed)", e.failures.len(), e.total));
            }
            if matches!(first, SelectError::SupportTooSmall { .. }) {
                msg.push_str("; lower --shots or enlarge the support set");
            }
            CliError::user(msg)
        })?;
        let path = if sweep {
            out.join(format!("{method}.jsonl"))
        } else {
            out.clone()
        };
        write_jsonl(&path, &results)?;
        outputs.push(path);
    }
    let json = json!({
        "methods": methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "n_query": d.queries.len(),
        "shots": shots,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let text = format!(
        "selected {} shots for {} queries with {}",
        shots,
        d.queries.len(),
        methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
    );
    Ok(Summary { text, json })
}

fn read_selections(path: &Path) -> CliResult<Vec<SelectionResult>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::user(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_word_pool(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn cmd_build_prompts(a: &PromptArgs, cfg: &RunConfig) -> CliResult<Summary> {
    let task = a.data.task.or(cfg.task).unwrap_or(TaskKind::Vqa);
    let support_path = required(a.data.support.clone().or(cfg.support.clone()), "support")?;
    let queries_path = required(a.data.queries.clone().or(cfg.queries.clone()), "queries")?;
    let selections_path = required(a.selections.clone().or(cfg.selections.clone()), "selections")?;
    let out = required(a.out.clone().or(cfg.out.clone()), "out")?;
    let templates = match a.templates.clone().or(cfg.templates.clone()) {
        Some(p) => TemplateSet::load(&p).map_err(CliError::user)?,
        None => TemplateSet::default(),
    };
    let kind: PerturbationKind = a
        .perturb
        .clone()
        .or(cfg.perturb.clone())
        .as_deref()
        .unwrap_or("standard")
        .parse()
        .map_err(CliError::user)?;
    let word_pool = match a.word_pool.clone().or(cfg.word_pool.clone()) {
        Some(p) => read_word_pool(&p)?,
        None => Vec::new(),
    };
    let setting = PerturbationSetting {
        kind,
        seed: a.perturb_seed.or(cfg.perturb_seed),
        word_pool,
    };
    setting.validate().map_err(CliError::user)?;
    let blank_image_id = match a.data.manifest.clone().or(cfg.manifest.clone()) {
        Some(p) => StoreManifest::load(&p).map_err(CliError::user)?.blank_image_id,
        None => None,
    };
    let order = a.order.or(cfg.order);

    let support = load_records(&support_path, task).map_err(at(&support_path))?;
    let queries = load_records(&queries_path, task).map_err(at(&queries_path))?;
    let selections = read_selections(&selections_path)?;
    let support_pos: HashMap<&str, usize> = support.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let query_by_id: HashMap<&str, &Record> = queries.iter().map(|r| (r.id.as_str(), r)).collect();
    let donors = build_donor_index(&support);
    let pctx = PerturbContext {
        task: Some(task),
        blank_image_id: blank_image_id.as_deref(),
        donors: Some(&donors),
        question_pool: Some(&support),
    };

    let built = par::map(&selections, |sel| -> CliResult<(PromptSpec, Vec<String>)> {
        let query = *query_by_id
            .get(sel.query_id.as_str())
            .ok_or_else(|| CliError::user(format!("selection for unknown query {:?}", sel.query_id)))?;
        let scores = sel.final_scores();
        if scores.is_some_and(|s| s.len() != sel.demo_ids.len()) {
            return Err(CliError::user(format!("query {:?}: score list length differs from demo_ids", sel.query_id)));
        }
        let ranked = sel
            .demo_ids
            .iter()
            .enumerate()
            .map(|(j, id)| {
                let index = *support_pos
                    .get(id.as_str())
                    .ok_or_else(|| CliError::user(format!("query {:?}: unknown demo {id:?}", sel.query_id)))?;
                Ok(RankedDemo {
                    index,
                    score: scores.map(|s| s[j]),
                    item: &support[index],
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let policy = order.unwrap_or(if scores.is_some() {
            OrderPolicy::AscendingSimilarity
        } else {
            OrderPolicy::Given
        });
        let ordered = order_demos(ranked, policy).map_err(|e| CliError::user(format!("query {:?}: {e}", sel.query_id)))?;
        let demos: Vec<Record> = ordered.into_iter().map(|d| d.item.clone()).collect();
        let perturbed = apply(&setting, &demos, query, &pctx).map_err(CliError::user)?;
        let meta = PromptMeta {
            method: sel.method.to_string(),
            shots: sel.shots,
            perturbation: kind.to_string(),
            prefilter: sel.prefilter,
            seed: sel.seed,
            perturb_seed: setting.seed,
        };
        let spec = build_prompt(&perturbed.query, &perturbed.demos, task, &templates, meta).map_err(CliError::user)?;
        Ok((spec, perturbed.skipped))
    });
    let mut specs = Vec::with_capacity(built.len());
    let mut skipped = 0usize;
    for b in built {
        let (spec, s) = b?;
        for id in &s {
            log::warn!("{}: demo {id} has no same-question donor; answer kept", spec.query_id);
        }
        skipped += s.len();
        specs.push(spec);
    }
    prepare_out(&out)?;
    emit_prompts(&specs, &out).map_err(CliError::internal)?;
    let json = json!({
        "prompts": specs.len(),
        "perturbation": kind.as_str(),
        "skipped_demos": skipped,
        "out": out.display().to_string(),
    });
    let text = format!("wrote {} prompts ({}) to {}", specs.len(), kind, out.display());
    Ok(Summary { text, json })
}

pub fn cmd_score(a: &ScoreArgs, cfg: &RunConfig) -> CliResult<Summary> {
    let metric = required(a.metric.clone().or(cfg.metric.clone()), "metric")?;
    let task = match metric.as_str() {
        "vqa" => TaskKind::Vqa,
        "cider" => TaskKind::Captioning,
        other => return Err(CliError::user(format!("unknown metric {other:?} (expected vqa or cider)"))),
    };
    let records_path = required(a.records.clone().or(cfg.records.clone()), "records")?;
    let records = load_records(&records_path, task).map_err(|e| CliError::user(format!("{}: {e}", records_path.display())))?;
    let mut files: Vec<PathBuf> = Vec::new();
    if let Some(p) = a.responses.clone().or(cfg.responses.clone()) {
        files.push(p);
    }
    if let Some(pattern) = a.runs.clone().or(cfg.runs.clone()) {
        let mut matched: Vec<PathBuf> = glob::glob(&pattern)
            .map_err(|e| CliError::user(format!("--runs {pattern:?}: {e}")))?
            .collect::<Result<_, _>>()
            .map_err(CliError::user)?;
        if matched.is_empty() {
            return Err(CliError::user(format!("--runs {pattern:?} matched no files")));
        }
        matched.sort();
        files.extend(matched);
    }
    if files.is_empty() {
        return Err(CliError::user("missing required --responses or --runs"));
    }
    let mut reports = Vec::with_capacity(files.len());
    for f in &files {
        let responses = load_responses(f).map_err(|e| CliError::user(format!("{}: {e}", f.display())))?;
        let report = match task {
            TaskKind::Vqa => score_vqa(&responses, &records),
            TaskKind::Captioning => score_cider(&responses, &records),
        }
        .map_err(|e| CliError::user(format!("{}: {e}", f.display())))?;
        reports.push(report);
    }
    let report: ScoreReport = if reports.len() == 1 {
        reports.pop().expect("one report")
    } else {
        aggregate_runs(&reports).map_err(CliError::user)?
    };
    if let Some(out) = a.out.clone().or(cfg.out.clone()) {
        let mut text = serde_json::to_string_pretty(&report).map_err(CliError::internal)?;
        text.push('\n');
        write_text(&out, &text)?;
    }
    let json = json!({
        "metric": report.metric,
        "n": report.per_query.len(),
        "mean": report.mean,
        "runs": report.runs.len(),
        "mean_of_runs": report.mean_of_runs,
        "std_of_runs": report.std_of_runs,
    });
    let text = format!(
        "{metric}: mean={:.6} over {} queries; runs={} mean_of_runs={:.6} std_of_runs={:.6}",
        report.mean,
        report.per_query.len(),
        report.runs.len(),
        report.mean_of_runs,
        report.std_of_runs
    );
    Ok(Summary { text, json })
}

pub fn cmd_probe(a: &ProbeArgs, cfg: &RunConfig) -> CliResult<Summary> {
    let segments = a
        .segments
        .clone()
        .or(cfg.segments.clone())
        .unwrap_or_else(|| "1x2,1x2,1x1".into());
    let layout: InterleaveLayout = segments.parse().map_err(CliError::user)?;
    let dim = a.dim.or(cfg.dim).unwrap_or(32);
    let n_seeds = a.seeds.or(cfg.seeds).unwrap_or(100);
    let offset = a.seed_offset.or(cfg.seed_offset).unwrap_or(0);
    let depth = a.depth.or(cfg.depth).unwrap_or(1);
    let seeds: Vec<u64> = (offset..offset + n_seeds as u64).collect();
    let report = run_probe(&layout, &seeds, dim, depth).map_err(CliError::user)?;
    if let Some(out) = a.out.clone().or(cfg.out.clone()) {
        let mut text = serde_json::to_string_pretty(&report).map_err(CliError::internal)?;
        text.push('\n');
        write_text(&out, &text)?;
    }
    let json = json!({
        "layout": layout.to_string(),
        "dim": dim,
        "depth": depth,
        "seeds": n_seeds,
        "cos_hidden_mask_demo": report.cos_hidden_mask_demo,
        "cos_hidden_mask_query": report.cos_hidden_mask_query,
        "cos_attn_mask_demo": report.cos_attn_mask_demo,
        "cos_attn_mask_query": report.cos_attn_mask_query,
    });
    let text = format!(
        "layout={} dim={} seeds={}\nhidden: mask_demo={:.4} mask_query={:.4}\nattn:   mask_demo={:.4} mask_query={:.4}",
        layout,
        dim,
        n_seeds,
        report.cos_hidden_mask_demo,
        report.cos_hidden_mask_query,
        report.cos_attn_mask_demo,
        report.cos_attn_mask_query
    );
    Ok(Summary { text, json })
}
