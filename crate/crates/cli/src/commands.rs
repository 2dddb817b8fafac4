use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use recon_core::backend::{GenerationBackend, HttpGenerationBackend, HttpJsonClient, ScriptedBackend};
use recon_core::condenser::{Condenser, ExtractiveCondenser, RemoteCondenser};
use recon_core::distill::{build_triplets, collect_queries, emit_dataset, EmitOptions};
use recon_core::evalkit::{accumulate_metrics, compare_reports, MetricsReport, QaRecord};
use recon_core::io::{read_jsonl, write_jsonl};
use recon_core::relevance::{load_dataset, synthetic_separable, train_relevance};
use recon_core::retrieval::{RemoteRetriever, Retriever};
use recon_core::rl::toy::train_toy;
use recon_core::{AspectId, CorpusIndex, RolloutConfig, RolloutEngine, TrajectoryRecord};

use crate::config::RunConfig;
use crate::{Cli, Command, RolloutArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require(path: Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| usage(format!("no {what}: pass {flag} or set it in the config file")))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `<path>.config.json` next to an artifact that has no room for the config.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

fn append_run(path: &Path, record: &Value) -> Result<()> {
    ensure_parent(path)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening runs log {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = cli.runs_log {
        config.paths.runs_log = Some(p);
    }
    let started = SystemTime::now();
    let name = subcommand_name(&cli.command);
    let outputs = match cli.command {
        Command::Ingest { corpus, out } => ingest(&mut config, corpus, out)?,
        Command::Rollout(args) => rollout(&mut config, args)?,
        Command::TrainToy { iterations, raw, out } => toy(&mut config, iterations, raw, out)?,
        Command::TrainRelevance {
            data,
            synthetic,
            epochs,
            out,
        } => relevance(&mut config, data, synthetic, epochs, out)?,
        Command::BuildDistill {
            log,
            out,
            dataset,
            aspects,
            teacher,
            max_in_flight,
        } => distill(&mut config, log, out, dataset, aspects, teacher, max_in_flight)?,
        Command::Eval { datasets, out, csv } => eval(&mut config, datasets, out, csv)?,
        Command::Report { baseline, ours, out } => report(&config, baseline, ours, out)?,
    };

    let runs_log = config.paths.runs_log.clone().unwrap_or_else(|| {
        config
            .paths
            .reports
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
            .join("runs.jsonl")
    });
    let record = json!({
        "command": name,
        "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "elapsed_s": started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "outputs": outputs,
        "config": config.to_json(),
    });
    append_run(&runs_log, &record)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::Rollout(_) => "rollout",
        Command::TrainToy { .. } => "train-toy",
        Command::TrainRelevance { .. } => "train-relevance",
        Command::BuildDistill { .. } => "build-distill",
        Command::Eval { .. } => "eval",
        Command::Report { .. } => "report",
    }
}

fn ingest(config: &mut RunConfig, corpus: Option<PathBuf>, out: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let corpus = require(corpus.or(config.paths.corpus.clone()), "corpus", "--corpus")?;
    let out = require(out.or(config.paths.index.clone()), "index output path", "--out")?;
    config.paths.corpus = Some(corpus.clone());
    config.paths.index = Some(out.clone());
    let index = CorpusIndex::ingest(&corpus)?;
    ensure_parent(&out)?;
    index.save(&out)?;
    write_json(&sidecar(&out), &config.to_json())?;
    println!(
        "indexed {} documents (avg length {:.1} terms) -> {}",
        index.len(),
        index.avg_doc_length(),
        out.display()
    );
    Ok(vec![out])
}

fn client(config: &RunConfig) -> HttpJsonClient {
    HttpJsonClient::new(Duration::from_secs(config.endpoints.timeout_s.max(1)))
}

fn local_index(config: &RunConfig) -> Result<CorpusIndex> {
    if let Some(p) = &config.paths.index {
        return Ok(CorpusIndex::load(p)?);
    }
    if let Some(p) = &config.paths.corpus {
        return Ok(CorpusIndex::ingest(p)?);
    }
    Err(usage("no retriever: configure endpoints.retriever, paths.index or paths.corpus"))
}

fn retriever(config: &RunConfig) -> Result<Box<dyn Retriever>> {
    Ok(match &config.endpoints.retriever {
        Some(url) => Box::new(RemoteRetriever::new(url, client(config))),
        None => Box::new(local_index(config)?),
    })
}

fn apply_rollout_flags(config: &mut RunConfig, args: &RolloutArgs) -> Result<()> {
    if args.baseline {
        let b = RolloutConfig::baseline();
        config.rollout.budget = b.budget;
        config.rollout.top_k = b.top_k;
        config.rollout.condense = b.condense;
    }
    if let Some(n) = args.turns_max {
        config.rollout.budget = n;
    }
    if let Some(k) = args.top_k {
        config.rollout.top_k = k;
    }
    if args.no_condense {
        config.rollout.condense = false;
    }
    if let Some(a) = args.aspect {
        config.rollout.aspect = a;
    }
    if args.parallel == 0 {
        return Err(usage("--parallel must be at least 1"));
    }
    config.rollout.validate().map_err(|e| usage(e.to_string()))
}

fn rollout(config: &mut RunConfig, args: RolloutArgs) -> Result<Vec<PathBuf>> {
    apply_rollout_flags(config, &args)?;
    let qa_path = require(args.qa.clone().or(config.paths.qa.clone()), "QA file", "--qa")?;
    let out = require(args.out.clone().or(config.paths.logs.clone()), "log output path", "--out")?;
    config.paths.qa = Some(qa_path.clone());
    config.paths.logs = Some(out.clone());

    let policy: Box<dyn GenerationBackend> = match (&config.endpoints.policy, &args.script) {
        (Some(url), _) => Box::new(HttpGenerationBackend::new(url, client(config))),
        (None, Some(script)) => Box::new(ScriptedBackend::load(script)?),
        (None, None) => return Err(usage("no policy: configure endpoints.policy or pass --script")),
    };
    let retriever = retriever(config)?;
    let condenser: Box<dyn Condenser> = match &config.endpoints.summarizer {
        Some(url) => Box::new(RemoteCondenser::new(
            Box::new(HttpGenerationBackend::new(url, client(config))),
            config.rollout.aspect,
        )),
        None => {
            let mut c = ExtractiveCondenser::new(config.sentence_budget);
            c.aspect = config.rollout.aspect;
            Box::new(c)
        }
    };

    let qa: Vec<QaRecord> = read_jsonl(&qa_path)?;
    let mut questions: Vec<String> = qa.into_iter().map(|r| r.question).collect();
    if let Some(n) = args.limit {
        questions.truncate(n);
    }
    let engine = RolloutEngine::new(policy.as_ref(), retriever.as_ref(), condenser.as_ref(), config.rollout.clone());
    let records = engine.run_batch(&questions, args.parallel);
    ensure_parent(&out)?;
    write_jsonl(&out, &records)?;
    write_json(&sidecar(&out), &config.to_json())?;

    let failed = records.iter().filter(|r| r.trajectory.failed()).count();
    let answered = records.iter().filter(|r| r.trajectory.final_answer.is_some()).count();
    println!(
        "{} rollouts ({answered} answered, {failed} failed) -> {}",
        records.len(),
        out.display()
    );
    Ok(vec![out])
}

fn reports_dir(config: &RunConfig, out: Option<PathBuf>, default: &str) -> PathBuf {
    out.or_else(|| config.paths.reports.as_ref().map(|r| r.join(default)))
        .unwrap_or_else(|| PathBuf::from(default))
}

fn toy(config: &mut RunConfig, iterations: Option<usize>, raw: bool, out: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    if let Some(n) = iterations {
        config.toy.iterations = n;
    }
    if raw {
        config.rollout.condense = false;
    }
    let dir = reports_dir(config, out, "toy");
    let result = train_toy(&config.toy_config()).map_err(|e| match e {
        recon_core::rl::RlError::Config(m) => usage(m),
        other => anyhow!(other),
    })?;
    std::fs::create_dir_all(&dir)?;
    let curve = dir.join("curve.jsonl");
    write_jsonl(&curve, &result.curve)?;
    let summary = dir.join("summary.json");
    write_json(
        &summary,
        &json!({
            "eval": result.eval,
            "updates": result.updates,
            "drift": result.drift,
            "policy": result.policy,
            "critic": result.critic,
            "config": config.to_json(),
        }),
    )?;
    println!(
        "toy: {} updates, EM {:.3}, {:.1} context tokens/trajectory, drift {:.3} -> {}",
        result.updates,
        result.eval.mean_em,
        result.eval.mean_context_tokens,
        result.drift,
        dir.display()
    );
    Ok(vec![curve, summary])
}

fn relevance(
    config: &mut RunConfig,
    data: Option<PathBuf>,
    synthetic: Option<usize>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<Vec<PathBuf>> {
    if let Some(e) = epochs {
        config.relevance.epochs = e;
    }
    let (examples, dropped) = match (data, synthetic) {
        (Some(p), _) => load_dataset(&p)?,
        (None, Some(n)) => (synthetic_separable(n, config.seed), 0),
        (None, None) => return Err(usage("pass --data FILE or --synthetic N")),
    };
    if dropped > 0 {
        log::warn!("dropped {dropped} unlabeled examples");
    }
    let trained = train_relevance(&examples, &config.relevance_config())?;
    let out = reports_dir(config, out, "relevance_model.json");
    write_json(
        &out,
        &json!({
            "model": trained.model,
            "epoch_losses": trained.epoch_losses,
            "examples": examples.len(),
            "dropped_unlabeled": dropped,
            "config": config.to_json(),
        }),
    )?;
    println!(
        "relevance: {} examples, final epoch loss {:.4} -> {}",
        examples.len(),
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(vec![out])
}

fn distill(
    config: &mut RunConfig,
    log: Option<PathBuf>,
    out: PathBuf,
    dataset: String,
    aspects: Vec<AspectId>,
    teacher: Option<String>,
    max_in_flight: usize,
) -> Result<Vec<PathBuf>> {
    let log = require(log.or(config.paths.logs.clone()), "trajectory log", "--log")?;
    if teacher.is_some() {
        config.endpoints.teacher = teacher;
    }
    if max_in_flight == 0 {
        return Err(usage("--max-in-flight must be at least 1"));
    }
    let aspects = if aspects.is_empty() { AspectId::ALL.to_vec() } else { aspects };
    let queries = collect_queries(&log)?;
    let retriever = retriever(config)?;
    let (triplets, skips) = build_triplets(&queries, retriever.as_ref(), &aspects);
    let teacher_backend = config
        .endpoints
        .teacher
        .as_ref()
        .map(|url| HttpGenerationBackend::new(url, client(config)));
    let opts = EmitOptions {
        dataset,
        max_in_flight,
        ..EmitOptions::default()
    };
    ensure_parent(&out)?;
    let stats = emit_dataset(
        &triplets,
        &out,
        teacher_backend.as_ref().map(|t| t as &dyn GenerationBackend),
        &opts,
    )?;
    let stats_path = {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".stats.json");
        out.with_file_name(name)
    };
    write_json(
        &stats_path,
        &json!({ "stats": stats, "skips": skips, "questions": queries.len(), "config": config.to_json() }),
    )?;
    print!("{}", stats.summary());
    if !skips.is_empty() {
        println!("{} queries skipped (see {})", skips.len(), stats_path.display());
    }
    Ok(vec![out, stats_path])
}

fn parse_dataset_spec(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--dataset {spec:?}: expected NAME=LOG:QA")))?;
    let (log, qa) = rest
        .split_once(':')
        .ok_or_else(|| usage(format!("--dataset {spec:?}: expected NAME=LOG:QA")))?;
    if name.is_empty() || log.is_empty() || qa.is_empty() {
        return Err(usage(format!("--dataset {spec:?}: empty component")));
    }
    Ok((name.to_string(), log.into(), qa.into()))
}

fn eval(config: &mut RunConfig, datasets: Vec<String>, out: Option<PathBuf>, csv: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for spec in &datasets {
        let (name, log, qa) = parse_dataset_spec(spec)?;
        let records: Vec<TrajectoryRecord> = read_jsonl(&log)?;
        let gold: Vec<QaRecord> = read_jsonl(&qa)?;
        rows.push(accumulate_metrics(&name, &records, &gold).with_context(|| format!("dataset {name}"))?);
    }
    let mut report = MetricsReport::from_rows(rows);
    report.config = Some(config.to_json());
    print!("{}", report.to_table());
    let out = reports_dir(config, out, "report.json");
    write_json(&out, &report)?;
    let mut written = vec![out];
    if let Some(csv) = csv {
        std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        write_json(&sidecar(&csv), &config.to_json())?;
        written.push(csv);
    }
    Ok(written)
}

fn report(config: &RunConfig, baseline: PathBuf, ours: PathBuf, out: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let load = |p: &Path| -> Result<MetricsReport> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", p.display()))
    };
    let cmp = compare_reports(&load(&baseline)?, &load(&ours)?)?;
    print!("{}", cmp.to_table());
    let mut written = Vec::new();
    if let Some(out) = out {
        write_json(&out, &json!({ "comparison": cmp, "config": config.to_json() }))?;
        written.push(out);
    }
    Ok(written)
}
