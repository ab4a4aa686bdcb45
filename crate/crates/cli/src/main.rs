use std::collections::HashSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fusion_core::autoeval::{
    build_comparison_report, build_output_sets, common_dialogue_ids, sample_ids, score_outputs,
    uniqueness_filter, CommandScorer, ConstantScorer, LengthRatioScorer, MetricSpec, Orientation,
    Scorer, WilcoxonMode, DEFAULT_ALPHA, DEFAULT_MIN_DISTINCT,
};
use fusion_core::corpus::{load_corpus, Corpus};
use fusion_core::humeval::{
    aggregate_judgments, build_pairs, read_jsonl, select_eval_utterances, AggregationMode,
    EvalSystems, HiddenAssignment, Judgment, DEFAULT_DIALOGUES, DEFAULT_PER_DIALOGUE,
};
use fusion_core::pipeline::{CancelToken, Pipeline, PipelineError, RunConfig};
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "fusion",
    version,
    about = "Dialogue-level ensemble translation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate a corpus with K hypothesis backends and a refiner.
    Translate {
        #[arg(long)]
        corpus: PathBuf,
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run recorded in the configured checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score four systems with reference-free metrics and test for differences.
    Evaluate {
        /// Source-language corpus.
        #[arg(long)]
        source: PathBuf,
        /// `id=path` for each of the four translated corpora.
        #[arg(long = "outputs", value_parser = parse_system, num_args = 1.., required = true)]
        outputs: Vec<(String, PathBuf)>,
        /// System id of the proposed system; the others are baselines.
        #[arg(long)]
        proposed: String,
        /// Default scorer: `constant:<v>`, `length-ratio`, or a command line
        /// using `{input}` and optionally `{output}`.
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        metric_config: PathBuf,
        /// JSON report path; an aligned text table is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Build the blinded pairwise task set and its sealed assignment file.
    BuildTasks {
        #[arg(long, value_parser = parse_system)]
        proposed: (String, PathBuf),
        #[arg(long = "baseline", value_parser = parse_system, required = true)]
        baselines: Vec<(String, PathBuf)>,
        #[arg(long, default_value_t = DEFAULT_DIALOGUES)]
        dialogues: usize,
        #[arg(long, default_value_t = DEFAULT_PER_DIALOGUE)]
        per_dialogue: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
    },
    /// Unblind a judgment log and report win/lose per baseline.
    HumevalReport {
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Pooled)]
        mode: Mode,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve tasks to annotators over HTTP.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Sealed assignment file; enables /api/results.
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory with the web UI bundle.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        #[arg(long, default_value_t = 600)]
        lease_secs: u64,
        /// Comma-separated allow-list of annotator ids.
        #[arg(long, value_delimiter = ',')]
        annotators: Option<Vec<String>>,
        #[arg(long)]
        allow_undecided: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pooled,
    MajorityVote,
}

fn parse_system(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected id=path, got {s:?}"))?;
    if id.is_empty() || path.is_empty() {
        return Err(format!("expected id=path, got {s:?}"));
    }
    Ok((id.to_string(), PathBuf::from(path)))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn translate(corpus: &Path, config: &Path, out: &Path, resume: bool) -> Result<()> {
    let run_config: RunConfig = read_toml(config)?;
    let corpus = load(corpus)?;
    let pipeline = Pipeline::from_config(run_config)?;
    let cancel = CancelToken::new();
    let handler = cancel.clone();
    ctrlc::set_handler(move || {
        eprintln!("interrupt received; finishing in-flight work and checkpointing");
        handler.cancel();
    })?;
    let result = if resume {
        pipeline.resume(&corpus, &cancel)
    } else {
        pipeline.run(&corpus, &cancel)
    };
    let output = match result {
        Err(e @ PipelineError::Interrupted { .. }) => {
            eprintln!("{e}");
            std::process::exit(130);
        }
        other => other?,
    };
    output.write_to(out)?;
    print!("{}", output.report.summary());
    Ok(())
}

fn default_sample() -> usize {
    200
}

fn default_min_distinct() -> usize {
    DEFAULT_MIN_DISTINCT
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Deserialize)]
struct MetricEntry {
    metric_id: String,
    orientation: Orientation,
    range: (f64, f64),
    /// Overrides `--scorer` for this metric.
    scorer: Option<String>,
}

#[derive(Debug, Deserialize)]
struct MetricConfig {
    #[serde(default = "default_sample")]
    sample_dialogues: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_min_distinct")]
    min_distinct: usize,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    mode: WilcoxonMode,
    metrics: Vec<MetricEntry>,
}

fn make_scorer(id: &str, spec: &str) -> Result<Box<dyn Scorer>> {
    if spec == "length-ratio" {
        return Ok(Box::new(LengthRatioScorer));
    }
    if let Some(v) = spec.strip_prefix("constant:") {
        return Ok(Box::new(ConstantScorer::new(
            v.parse().context("constant scorer value")?,
        )));
    }
    match CommandScorer::from_command_line(id, spec) {
        Some(c) => Ok(Box::new(c)),
        None => bail!("empty scorer command for {id}"),
    }
}

fn evaluate(
    source: &Path,
    outputs: &[(String, PathBuf)],
    proposed: &str,
    scorer: Option<&str>,
    metric_config: &Path,
    report_path: &Path,
) -> Result<()> {
    let config: MetricConfig = read_toml(metric_config)?;
    let source = load(source)?;
    let corpora: Vec<(String, Corpus)> = outputs
        .iter()
        .map(|(id, path)| Ok((id.clone(), load(path)?)))
        .collect::<Result<_>>()?;
    if !corpora.iter().any(|(id, _)| id == proposed) {
        bail!("--proposed {proposed} is not among --outputs");
    }
    let systems: Vec<(String, &Corpus)> = corpora.iter().map(|(id, c)| (id.clone(), c)).collect();
    let common = common_dialogue_ids(&source, &systems);
    let common_refs: Vec<&str> = common.iter().map(String::as_str).collect();
    let sample = sample_ids(
        &common_refs,
        config.sample_dialogues.min(common.len()),
        config.seed,
    )?;
    let sets = build_output_sets(&source, &systems, &sample)?;
    let kept = uniqueness_filter(&sets, config.min_distinct);
    eprintln!(
        "{} dialogues sampled, {} of {} utterances kept by the distinct-output filter",
        sample.len(),
        kept.len(),
        sets.len()
    );

    let mut records = Vec::new();
    let mut metrics = Vec::new();
    for entry in &config.metrics {
        let metric = MetricSpec {
            metric_id: entry.metric_id.clone(),
            orientation: entry.orientation,
            range: entry.range,
        };
        let spec = entry
            .scorer
            .as_deref()
            .or(scorer)
            .with_context(|| format!("no scorer for metric {}", entry.metric_id))?;
        let scorer = make_scorer(&entry.metric_id, spec)?;
        records.extend(score_outputs(&kept, scorer.as_ref(), &metric)?);
        metrics.push(metric);
    }
    let baselines: Vec<String> = corpora
        .iter()
        .map(|(id, _)| id.clone())
        .filter(|id| id != proposed)
        .collect();
    let report = build_comparison_report(
        &records,
        proposed,
        &baselines,
        &metrics,
        config.alpha,
        config.mode,
    )?;
    fs::write(report_path, report.to_json())?;
    let table = report.render_table();
    fs::write(report_path.with_extension("txt"), &table)?;
    let mut scores = String::new();
    for r in &records {
        scores.push_str(&serde_json::to_string(r)?);
        scores.push('\n');
    }
    fs::write(report_path.with_extension("scores.jsonl"), scores)?;
    print!("{table}");
    Ok(())
}

fn build_tasks(
    proposed: &(String, PathBuf),
    baselines: &[(String, PathBuf)],
    dialogues: usize,
    per_dialogue: usize,
    seed: u64,
    tasks: &Path,
    assignments: &Path,
) -> Result<()> {
    let proposed_corpus = load(&proposed.1)?;
    let baseline_corpora: Vec<(String, Corpus)> = baselines
        .iter()
        .map(|(id, path)| Ok((id.clone(), load(path)?)))
        .collect::<Result<_>>()?;
    let systems = EvalSystems {
        proposed: (&proposed.0, &proposed_corpus),
        baselines: &baseline_corpora,
    };
    let selection = select_eval_utterances(&systems, dialogues, per_dialogue, seed)?;
    for r in &selection.rejected {
        eprintln!(
            "rejected {} ({} eligible utterances)",
            r.dialogue_id, r.eligible
        );
    }
    let set = build_pairs(&selection.keys, &systems, seed)?;
    set.write(tasks, assignments)?;
    println!(
        "{} utterances, {} pairs written to {}",
        selection.keys.len(),
        set.pairs.len(),
        tasks.display()
    );
    Ok(())
}

fn humeval_report(
    assignments: &Path,
    judgments: &Path,
    mode: Mode,
    json: Option<&Path>,
) -> Result<()> {
    let assignments: Vec<HiddenAssignment> = read_jsonl(assignments)?;
    let judgments: Vec<Judgment> = read_jsonl(judgments)?;
    let mode = match mode {
        Mode::Pooled => AggregationMode::Pooled,
        Mode::MajorityVote => AggregationMode::MajorityVote,
    };
    let report = aggregate_judgments(&assignments, &judgments, mode)?;
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Translate {
            corpus,
            config,
            out,
            resume,
        } => translate(&corpus, &config, &out, resume),
        Command::Evaluate {
            source,
            outputs,
            proposed,
            scorer,
            metric_config,
            report,
        } => evaluate(
            &source,
            &outputs,
            &proposed,
            scorer.as_deref(),
            &metric_config,
            &report,
        ),
        Command::BuildTasks {
            proposed,
            baselines,
            dialogues,
            per_dialogue,
            seed,
            tasks,
            assignments,
        } => build_tasks(
            &proposed,
            &baselines,
            dialogues,
            per_dialogue,
            seed,
            &tasks,
            &assignments,
        ),
        Command::HumevalReport {
            assignments,
            judgments,
            mode,
            json,
        } => humeval_report(&assignments, &judgments, mode, json.as_deref()),
        Command::Serve {
            tasks,
            log,
            assignments,
            port,
            host,
            static_dir,
            replicas,
            lease_secs,
            annotators,
            allow_undecided,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .with_context(|| format!("bad listen address {host}:{port}"))?;
            let options = annotation_service::ServeOptions {
                tasks,
                log,
                assignments,
                static_dir,
                addr,
                config: annotation_service::ServiceConfig {
                    lease_ttl: Duration::from_secs(lease_secs),
                    required_replicas: replicas.max(1),
                    annotators: annotators.map(|a| a.into_iter().collect::<HashSet<_>>()),
                    allow_undecided,
                },
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(annotation_service::serve(options))?;
            Ok(())
        }
    }
}
