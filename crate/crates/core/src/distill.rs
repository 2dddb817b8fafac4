//! Building summarizer distillation data from trajectory logs.
//!
//! Queries the policy actually issued are harvested per source question,
//! re-retrieved, and paired with every aspect to form
//! `(query, documents, aspect)` triplets whose rendered prompt can be sent
//! to a teacher model.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, Sampling};
use crate::condenser::{build_summary_prompt, AspectId};
use crate::io::{read_jsonl, JsonlError};
use crate::retrieval::{Document, Retriever};
use crate::rollout::Trajectory;

/// Passages retrieved per step query.
pub const DISTILL_TOP_K: usize = 5;

/// Triplet totals of the original large-scale construction, printed next to
/// local counts for scale.
pub const REFERENCE_SCALE: &str = "reference scale: 468,547 HotpotQA + 1,002,329 NQ triplets";

pub type QueryMap = IndexMap<String, Vec<String>>;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialize triplet: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillTriplet {
    pub source_question: String,
    pub step_query: String,
    pub documents: Vec<Document>,
    pub aspect: AspectId,
    pub rendered_prompt: String,
    pub teacher_summary: Option<String>,
}

/// Why a `(question, query)` pair produced no triplets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSkip {
    pub source_question: String,
    pub step_query: String,
    pub reason: String,
    /// Triplets lost, one per requested aspect.
    pub dropped: usize,
}

/// Per-question search queries from already parsed trajectories. Queries are
/// trimmed and exact duplicates dropped (first occurrence wins). Duplicates
/// under different questions are kept apart.
pub fn collect_queries_from<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> QueryMap {
    let mut map = QueryMap::new();
    for t in trajectories {
        let list = map.entry(t.question.clone()).or_default();
        list.extend(t.search_queries());
    }
    dedup_query_map(map)
}

/// Read a trajectory log and collect its queries. Malformed lines are
/// reported with their line number.
pub fn collect_queries(log: &Path) -> Result<QueryMap, DistillError> {
    let trajectories: Vec<Trajectory> = read_jsonl(log)?;
    Ok(collect_queries_from(&trajectories))
}

/// Trim every query and drop repeats within each question's list.
pub fn dedup_query_map(map: QueryMap) -> QueryMap {
    map.into_iter()
        .map(|(question, queries)| {
            let mut seen = HashSet::new();
            let kept = queries
                .into_iter()
                .map(|q| q.trim().to_string())
                .filter(|q| !q.is_empty() && seen.insert(q.clone()))
                .collect();
            (question, kept)
        })
        .collect()
}

/// Retrieve the top passages for every harvested query and pair them with
/// each aspect. Retrieval failures and empty result lists skip the pair.
pub fn build_triplets(
    queries: &QueryMap,
    retriever: &dyn Retriever,
    aspects: &[AspectId],
) -> (Vec<DistillTriplet>, Vec<TripletSkip>) {
    let pairs: Vec<(&String, &String)> = queries
        .iter()
        .flat_map(|(question, qs)| qs.iter().map(move |q| (question, q)))
        .collect();
    let per_pair: Vec<Result<Vec<DistillTriplet>, TripletSkip>> = pairs
        .par_iter()
        .map(|&(question, query)| {
            let skip = |reason: String| TripletSkip {
                source_question: question.clone(),
                step_query: query.clone(),
                reason,
                dropped: aspects.len(),
            };
            let docs = retriever
                .search(query, DISTILL_TOP_K)
                .map_err(|e| skip(format!("retrieval failed: {e}")))?;
            if docs.is_empty() {
                return Err(skip("no documents retrieved".to_string()));
            }
            aspects
                .iter()
                .map(|&aspect| {
                    let rendered_prompt = build_summary_prompt(question, query, &docs, aspect)
                        .map_err(|e| skip(e.to_string()))?;
                    Ok(DistillTriplet {
                        source_question: question.clone(),
                        step_query: query.clone(),
                        documents: docs.clone(),
                        aspect,
                        rendered_prompt,
                        teacher_summary: None,
                    })
                })
                .collect()
        })
        .collect();

    let mut triplets = Vec::new();
    let mut skips = Vec::new();
    for r in per_pair {
        match r {
            Ok(t) => triplets.extend(t),
            Err(s) => {
                log::warn!("skipping query {:?} of {:?}: {}", s.step_query, s.source_question, s.reason);
                skips.push(s);
            }
        }
    }
    (triplets, skips)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitOptions {
    /// Source dataset label counted in the stats.
    pub dataset: String,
    /// Concurrent teacher requests.
    pub max_in_flight: usize,
    /// Extra attempts after a retryable teacher failure.
    pub retries: u32,
    /// Delay before the first retry; doubles each time.
    pub backoff_ms: u64,
    pub sampling: Sampling,
    pub max_tokens: usize,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            dataset: "default".into(),
            max_in_flight: 4,
            retries: 2,
            backoff_ms: 200,
            sampling: Sampling::SUMMARIZER,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmitStats {
    pub written: usize,
    pub per_aspect: BTreeMap<String, usize>,
    pub per_dataset: BTreeMap<String, usize>,
    pub teacher_filled: usize,
    /// One entry per triplet whose teacher call failed for good.
    pub teacher_errors: Vec<String>,
    pub reference: String,
}

impl EmitStats {
    pub fn summary(&self) -> String {
        let mut out = format!("{} triplets written, {} with teacher summaries\n", self.written, self.teacher_filled);
        for (a, n) in &self.per_aspect {
            out.push_str(&format!("  aspect {a}: {n}\n"));
        }
        for (d, n) in &self.per_dataset {
            out.push_str(&format!("  dataset {d}: {n}\n"));
        }
        if !self.teacher_errors.is_empty() {
            out.push_str(&format!("  teacher errors: {}\n", self.teacher_errors.len()));
        }
        out.push_str(&self.reference);
        out.push('\n');
        out
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport(_) | BackendError::Timeout => true,
        BackendError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn call_teacher(teacher: &dyn GenerationBackend, prompt: &str, opts: &EmitOptions) -> Result<String, BackendError> {
    let request = GenerationRequest::new(prompt, opts.max_tokens, opts.sampling);
    let mut delay = opts.backoff_ms;
    let mut attempt = 0;
    loop {
        match teacher.generate(&request) {
            Ok(r) => return Ok(r.text.trim().to_string()),
            Err(e) if attempt < opts.retries && retryable(&e) => {
                log::debug!("teacher attempt {attempt} failed ({e}); retrying in {delay} ms");
                thread::sleep(Duration::from_millis(delay));
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Write triplets as JSON lines, filling `teacher_summary` when a teacher is
/// given. Teacher failures leave the summary null and are noted in the stats.
pub fn emit_dataset(
    triplets: &[DistillTriplet],
    path: &Path,
    teacher: Option<&dyn GenerationBackend>,
    opts: &EmitOptions,
) -> Result<EmitStats, DistillError> {
    let write_err = |source| DistillError::Write {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(write_err)?;
    let mut out = std::io::BufWriter::new(file);
    let mut stats = EmitStats {
        reference: REFERENCE_SCALE.to_string(),
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .ok();

    for chunk in triplets.chunks(opts.max_in_flight.max(1) * 4) {
        let summaries: Vec<Option<Result<String, BackendError>>> = match teacher {
            None => vec![None; chunk.len()],
            Some(t) => {
                let run = || -> Vec<_> {
                    chunk
                        .par_iter()
                        .map(|tr| Some(call_teacher(t, &tr.rendered_prompt, opts)))
                        .collect()
                };
                match &pool {
                    Some(p) => p.install(run),
                    None => chunk.iter().map(|tr| Some(call_teacher(t, &tr.rendered_prompt, opts))).collect(),
                }
            }
        };
        for (triplet, summary) in chunk.iter().zip(summaries) {
            let mut record = triplet.clone();
            match summary {
                Some(Ok(text)) => {
                    record.teacher_summary = Some(text);
                    stats.teacher_filled += 1;
                }
                Some(Err(e)) => {
                    record.teacher_summary = None;
                    stats.teacher_errors.push(format!(
                        "{:?} / {}: {e}",
                        record.step_query,
                        record.aspect.as_str()
                    ));
                }
                None => {}
            }
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(write_err)?;
            stats.written += 1;
            *stats.per_aspect.entry(record.aspect.as_str().to_string()).or_default() += 1;
            *stats.per_dataset.entry(opts.dataset.clone()).or_default() += 1;
        }
    }
    out.flush().map_err(write_err)?;
    Ok(stats)
}
