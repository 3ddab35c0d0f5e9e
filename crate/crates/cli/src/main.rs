//! `groundcoach` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a fatal error, 2 on a usage error.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use groundcoach_core::coach::{
    summarize, Coach, CoachSummary, ExternalCommand, ExternalPolicy, ExternalSelector, HintOnlyPrompter, Policy,
    RenderingPrompter, ScriptedPolicy, Selector, StepOutcome, TableSelector, VisualPrompter,
};
use groundcoach_core::config::Config;
use groundcoach_core::io::{load_dataset, read_all, write_jsonl, write_jsonl_to, Loaded, MetricsInput, SampleRecord, TraceRecord};
use groundcoach_core::pipeline::{build_labels, coach_sample, score_traces, LabelRun, MetricsReport};
use groundcoach_core::prompts::{
    build_prompted_sample, load_frames, save_frames, FileRelevanceProvider, GaussianBumpProvider, PromptInput, PromptKind,
    RelevanceProvider,
};
use groundcoach_core::selector_data::LabelInput;

#[derive(Parser, Debug)]
#[command(name = "groundcoach", version, about = "Grounded video reasoning rewards and visual-prompt coaching")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "GROUNDCOACH_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0, env = "GROUNDCOACH_SEED")]
    seed: u64,
    /// Worker threads. Does not change outputs.
    #[arg(long, global = true, default_value_t = 1, env = "GROUNDCOACH_JOBS", value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json, env = "GROUNDCOACH_FORMAT")]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Score rollouts against a dataset; writes reward JSONL.
    Score(ScoreArgs),
    /// Render one visual prompt for one sample.
    Prompt(PromptArgs),
    /// Run the coach loop over a dataset.
    CoachSim(CoachArgs),
    /// Aggregate metrics from chain rows, interval pairs or scored rollouts.
    Metrics(MetricsArgs),
    /// Build prompt-selector pseudo-labels from reasoner outputs.
    BuildLabels(LabelArgs),
    /// Reference external policy: answers JSON-line requests on stdin.
    #[command(hide = true)]
    EchoPolicy(EchoPolicyArgs),
    /// Reference external selector: answers JSON-line requests on stdin.
    #[command(hide = true)]
    EchoSelector(EchoSelectorArgs),
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    kind: PromptKind,
    /// Directory for the prompted frames.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    relevance: RelevanceArgs,
}

#[derive(Args, Debug)]
struct RelevanceArgs {
    /// Precomputed relevance grids at `<dir>/<sample_id>/<frame>.txt`.
    #[arg(long, conflicts_with = "gaussian_relevance")]
    relevance_dir: Option<PathBuf>,
    /// Synthetic centered Gaussian relevance.
    #[arg(long)]
    gaussian_relevance: bool,
}

impl RelevanceArgs {
    fn provider(&self) -> Option<Box<dyn RelevanceProvider>> {
        match (&self.relevance_dir, self.gaussian_relevance) {
            (Some(d), _) => Some(Box::new(FileRelevanceProvider::new(d))),
            (None, true) => Some(Box::new(GaussianBumpProvider::default())),
            (None, false) => None,
        }
    }
}

#[derive(Args, Debug)]
struct CoachArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Scripted completions JSONL.
    #[arg(long, conflicts_with = "policy_cmd", required_unless_present = "policy_cmd")]
    scripted: Option<PathBuf>,
    /// External policy command line (split on whitespace), one JSON line per request.
    #[arg(long)]
    policy_cmd: Option<String>,
    /// Fixed prompt kind for every hard sample.
    #[arg(long, conflicts_with_all = ["selector_table", "selector_cmd"])]
    selector: Option<PromptKind>,
    /// JSONL of `{sample_id, label}` rows.
    #[arg(long, conflicts_with = "selector_cmd")]
    selector_table: Option<PathBuf>,
    /// External selector command line (split on whitespace).
    #[arg(long)]
    selector_cmd: Option<String>,
    /// Render prompted frames under this directory instead of passing hints only.
    #[arg(long)]
    render_dir: Option<PathBuf>,
    #[command(flatten)]
    relevance: RelevanceArgs,
    /// Directive log JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Label JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EchoPolicyArgs {
    /// Answer placed in every completion.
    #[arg(long, default_value = "A")]
    answer: String,
}

#[derive(Args, Debug)]
struct EchoSelectorArgs {
    #[arg(long, default_value = "numpro")]
    prompt: PromptKind,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version exit 0, usage errors 2.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}

/// Joins the cause chain, dropping causes already spelled out by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs as usize;
    match cli.cmd {
        Cmd::EchoPolicy(a) => return echo_policy(&a),
        Cmd::EchoSelector(a) => return echo_selector(&a),
        _ => {}
    }
    let cfg = Config::load(cli.config.as_deref()).context("loading config")?;
    match cli.cmd {
        Cmd::Score(a) => score(&a, &cfg, jobs, cli.format),
        Cmd::Prompt(a) => prompt(&a, &cfg, cli.format),
        Cmd::CoachSim(a) => coach_sim(&a, &cfg, cli.seed, jobs, cli.format),
        Cmd::Metrics(a) => metrics(&a, cli.format),
        Cmd::BuildLabels(a) => labels(&a, &cfg, jobs, cli.format),
        Cmd::EchoPolicy(_) | Cmd::EchoSelector(_) => unreachable!(),
    }
}

fn load<T>(path: &Path) -> Result<Loaded<T>>
where
    T: serde::de::DeserializeOwned + groundcoach_core::io::Validate,
{
    let loaded = read_all::<T>(path).with_context(|| format!("reading {}", path.display()))?;
    if !loaded.diagnostics.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), loaded.diagnostics.len());
    }
    Ok(loaded)
}

fn dataset(path: &Path) -> Result<Loaded<SampleRecord>> {
    let loaded = load_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if !loaded.diagnostics.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), loaded.diagnostics.len());
    }
    Ok(loaded)
}

fn emit_jsonl<T: Serialize>(out: Option<&Path>, records: &[T]) -> Result<()> {
    match out {
        Some(p) => write_jsonl(p, None, records)?,
        None => write_jsonl_to(io::stdout().lock(), None, records)?,
    }
    Ok(())
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn print_pairs(rows: &[(&str, String)]) -> Result<()> {
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = io::stdout().lock();
    for (k, v) in rows {
        writeln!(out, "{k:<w$}  {v}")?;
    }
    Ok(())
}

fn score(a: &ScoreArgs, cfg: &Config, jobs: usize, format: Format) -> Result<()> {
    let data = dataset(&a.dataset)?;
    let mut reward = cfg.reward.clone();
    if let Some(h) = &data.header {
        reward.extract.convention = h.box_convention;
    }
    let traces = load::<TraceRecord>(&a.traces)?;
    let results = score_traces(&traces.records, &data.records, &reward, jobs)?;
    let mut scored = Vec::with_capacity(results.len());
    let mut failed = 0usize;
    for r in results {
        match r {
            Ok(s) => scored.push(s),
            Err(e) => {
                failed += 1;
                log::warn!("not scored: {e}");
            }
        }
    }
    emit_jsonl(a.out.as_deref(), &scored)?;
    if a.out.is_some() {
        let inputs: Vec<MetricsInput> = scored.into_iter().map(MetricsInput::Scored).collect();
        let report = MetricsReport::from_inputs(&inputs).map_err(anyhow::Error::msg)?;
        let skipped = traces.diagnostics.len();
        match format {
            Format::Json => print_json(&json!({"scored": inputs.len(), "failed": failed, "skipped": skipped, "report": report}))?,
            Format::Table => {
                print_pairs(&[
                    ("scored", inputs.len().to_string()),
                    ("failed", failed.to_string()),
                    ("skipped", skipped.to_string()),
                ])?;
                print!("\n{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn prompt(a: &PromptArgs, cfg: &Config, format: Format) -> Result<()> {
    let data = dataset(&a.dataset)?;
    let rec = data
        .records
        .iter()
        .find(|r| r.sample_id == a.sample)
        .with_context(|| format!("sample {} not in {}", a.sample, a.dataset.display()))?;
    let sample = coach_sample(rec, cfg.coach.frames_per_sample);
    if sample.frame_paths.is_empty() {
        bail!("sample {} has no frames in {}", rec.sample_id, rec.frame_dir.display());
    }
    let frames = load_frames(&sample.frame_paths)?;
    let input = PromptInput {
        sample_id: &sample.sample_id,
        frames: &frames,
        question: &sample.question,
        keyframes: &sample.keyframes,
    };
    let provider = a.relevance.provider();
    let out = build_prompted_sample(&input, a.kind, provider.as_deref(), &cfg.prompts)?;
    let paths = save_frames(&out.frames, &a.out)?;
    match format {
        Format::Json => print_json(&json!({
            "sample_id": sample.sample_id,
            "prompt": out.applied,
            "question": out.question,
            "frames": paths,
            "keyframe_indices": out.keyframe_indices,
        })),
        Format::Table => print_pairs(&[
            ("sample_id", sample.sample_id.clone()),
            ("prompt", out.applied.to_string()),
            ("frames", format!("{} in {}", paths.len(), a.out.display())),
            ("keyframes", format!("{:?}", out.keyframe_indices)),
            ("question", out.question.replace('\n', " | ")),
        ]),
    }
}

fn coach_sim(a: &CoachArgs, cfg: &Config, seed: u64, jobs: usize, format: Format) -> Result<()> {
    let data = dataset(&a.dataset)?;
    let mut reward = cfg.reward.clone();
    if let Some(h) = &data.header {
        reward.extract.convention = h.box_convention;
    }
    let policy: Box<dyn Policy> = match (&a.scripted, &a.policy_cmd) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Box::new(ScriptedPolicy::from_jsonl(&text).map_err(anyhow::Error::msg)?)
        }
        (None, Some(cmd)) => Box::new(ExternalPolicy(spawn(cmd)?)),
        (None, None) => bail!("no policy given"),
    };
    let selector: Box<dyn Selector> = match (&a.selector, &a.selector_table, &a.selector_cmd) {
        (Some(k), _, _) => Box::new(*k),
        (None, Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Box::new(TableSelector::from_jsonl(&text, None).map_err(anyhow::Error::msg)?)
        }
        (None, None, Some(cmd)) => Box::new(ExternalSelector(spawn(cmd)?)),
        (None, None, None) => Box::new(PromptKind::FrameNumber),
    };
    let prompter: Box<dyn VisualPrompter> = match &a.render_dir {
        Some(d) => Box::new(RenderingPrompter::new(cfg.prompts.clone(), d, a.relevance.provider())),
        None => Box::new(HintOnlyPrompter { cfg: cfg.prompts.clone() }),
    };
    let coach = Coach::new(policy.as_ref(), selector.as_ref(), prompter.as_ref(), cfg.coach.clone(), reward, seed)?;
    let samples: Vec<_> = data
        .records
        .iter()
        .map(|r| coach_sample(r, cfg.coach.frames_per_sample))
        .collect();
    let outcomes: Vec<StepOutcome> = coach.run(&samples, jobs)?;
    emit_jsonl(a.out.as_deref(), &outcomes)?;
    if a.out.is_some() {
        let summary = summarize(&outcomes);
        match format {
            Format::Json => print_json(&summary)?,
            Format::Table => print_summary(&summary)?,
        }
    }
    Ok(())
}

fn spawn(cmd: &str) -> Result<ExternalCommand> {
    let words: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    let (program, args) = words.split_first().context("empty command")?;
    ExternalCommand::spawn(program, args).map_err(anyhow::Error::msg)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |g| format!("{g:.1}%"))
}

fn print_summary(s: &CoachSummary) -> Result<()> {
    let mut rows = vec![
        ("samples", s.samples.to_string()),
        ("failed", s.failed.to_string()),
        ("hard", s.hard.to_string()),
        ("easy", s.easy.to_string()),
        ("with_sd_targets", s.with_sd_targets.to_string()),
        ("sd_targets", s.sd_targets.to_string()),
        ("mean_baseline_total", format!("{:.4}", s.mean_baseline_total)),
        ("mean_relative_gain", opt_pct(s.mean_relative_gain)),
        ("mean_relative_gain_candidate", opt_pct(s.mean_relative_gain_candidate)),
    ];
    let prompts: Vec<String> = s
        .selected_prompts
        .iter()
        .map(|p| format!("{} {} ({:.1}%)", p.kind, p.count, p.percent))
        .collect();
    rows.push(("selected_prompts", prompts.join(", ")));
    print_pairs(&rows)
}

fn metrics(a: &MetricsArgs, format: Format) -> Result<()> {
    let inputs = load::<MetricsInput>(&a.input)?;
    let report = MetricsReport::from_inputs(&inputs.records).map_err(anyhow::Error::msg)?;
    match format {
        Format::Json => print_json(&report),
        Format::Table => {
            print!("{}", report.to_table());
            Ok(())
        }
    }
}

fn labels(a: &LabelArgs, cfg: &Config, jobs: usize, format: Format) -> Result<()> {
    let inputs = load::<LabelInput>(&a.input)?;
    let run: LabelRun = build_labels(&inputs.records, &cfg.labels, jobs)?;
    emit_jsonl(a.out.as_deref(), &run.labels)?;
    if a.out.is_some() {
        match format {
            Format::Json => print_json(&json!({
                "labels": run.labels.len(),
                "failed": run.failures.len(),
                "distribution": run.distribution,
            }))?,
            Format::Table => {
                let mut out = io::stdout().lock();
                writeln!(out, "{:<10}  {:>5}  {:>7}", "prompt", "count", "percent")?;
                for s in &run.distribution {
                    writeln!(out, "{:<10}  {:>5}  {:>7.1}", s.kind.token(), s.count, s.percent)?;
                }
                writeln!(out, "{:<10}  {:>5}", "failed", run.failures.len())?;
            }
        }
    }
    Ok(())
}

/// Serves requests until EOF, one reply line per request line.
fn serve(mut handle: impl FnMut(&Value) -> Result<Value, String>) -> Result<()> {
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = serde_json::from_str::<Value>(&line)
            .map_err(|e| format!("bad request: {e}"))
            .and_then(|req| handle(&req))
            .unwrap_or_else(|e| json!({ "error": e }));
        serde_json::to_writer(&mut out, &reply)?;
        writeln!(out)?;
        out.flush()?;
    }
    Ok(())
}

fn expect_type(req: &Value, ty: &str) -> Result<(), String> {
    match req.get("type").and_then(Value::as_str) {
        Some(t) if t == ty => Ok(()),
        other => Err(format!("expected a {ty} request, got {other:?}")),
    }
}

fn echo_policy(a: &EchoPolicyArgs) -> Result<()> {
    serve(|req| {
        expect_type(req, "policy")?;
        let g = req.get("g").and_then(Value::as_u64).ok_or("request lacks g")?;
        let prompt = req.get("prompt").and_then(Value::as_str).unwrap_or("raw");
        let seed = req.get("seed").and_then(Value::as_u64).unwrap_or(0);
        let completions: Vec<String> = (0..g)
            .map(|i| format!("<think>echo {prompt} seed {seed} #{i}</think><answer>{}</answer>", a.answer))
            .collect();
        Ok(json!({ "completions": completions }))
    })
}

fn echo_selector(a: &EchoSelectorArgs) -> Result<()> {
    serve(|req| {
        expect_type(req, "selector")?;
        req.get("sample_id").and_then(Value::as_str).ok_or("request lacks sample_id")?;
        Ok(json!({ "prompt": a.prompt.token() }))
    })
}
