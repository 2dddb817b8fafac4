//! Exact-match scoring and efficiency accounting over trajectory logs.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::TrajectoryRecord;

/// How context length is counted in every report.
pub const CONTEXT_NOTE: &str =
    "context tokens = all trajectory segment tokens (policy text, information blocks, rethink strings)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("no trajectories to score")]
    EmptyLog,
    #[error("questions missing from the QA file: {0:?}")]
    Unmatched(Vec<String>),
    #[error("report rows differ: baseline {baseline:?} vs ours {ours:?}")]
    RowMismatch { baseline: Vec<String>, ours: Vec<String> },
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 when the normalized prediction equals some normalized gold answer.
pub fn em_score<S: AsRef<str>>(prediction: Option<&str>, gold_answers: &[S]) -> Result<u8, EvalError> {
    if gold_answers.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let Some(pred) = prediction else {
        return Ok(0);
    };
    let pred = normalize_answer(pred);
    Ok(u8::from(
        gold_answers.iter().any(|g| normalize_answer(g.as_ref()) == pred),
    ))
}

/// One line of a QA file. Extra fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub golden_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub mean_context_tokens: f64,
    pub mean_wall_clock_s: f64,
    pub mean_turns: f64,
    #[serde(default)]
    pub em: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregate: MetricsRow,
    #[serde(default)]
    pub note: String,
    /// Effective run configuration, when produced by a run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

impl MetricsReport {
    /// Aggregate row is the unweighted mean of `rows`.
    pub fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let em = if !rows.is_empty() && rows.iter().all(|r| r.em.is_some()) {
            Some(mean(rows.iter().map(|r| r.em.unwrap())))
        } else {
            None
        };
        let aggregate = MetricsRow {
            name: "Avg.".into(),
            mean_context_tokens: mean(rows.iter().map(|r| r.mean_context_tokens)),
            mean_wall_clock_s: mean(rows.iter().map(|r| r.mean_wall_clock_s)),
            mean_turns: mean(rows.iter().map(|r| r.mean_turns)),
            em,
        };
        Self {
            rows,
            aggregate,
            note: CONTEXT_NOTE.into(),
            config: None,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("# {}\n", self.note);
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>10} {:>8} {:>8}",
            "dataset", "context", "time_s", "turns", "em"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let em = r.em.map_or("-".to_string(), |e| format!("{e:.3}"));
            let _ = writeln!(
                out,
                "{:<16} {:>12.1} {:>10.2} {:>8.2} {:>8}",
                r.name, r.mean_context_tokens, r.mean_wall_clock_s, r.mean_turns, em
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mean_context_tokens,mean_wall_clock_s,mean_turns,em\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let name = if r.name.contains([',', '"']) {
                format!("\"{}\"", r.name.replace('"', "\"\""))
            } else {
                r.name.clone()
            };
            let em = r.em.map_or(String::new(), |e| e.to_string());
            let _ = writeln!(
                out,
                "{name},{},{},{},{em}",
                r.mean_context_tokens, r.mean_wall_clock_s, r.mean_turns
            );
        }
        out
    }
}

/// One dataset row from a trajectory log joined to its QA file on `question`.
pub fn accumulate_metrics(
    name: &str,
    log: &[TrajectoryRecord],
    qa: &[QaRecord],
) -> Result<MetricsRow, EvalError> {
    if log.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let gold: HashMap<&str, &[String]> = qa
        .iter()
        .map(|r| (r.question.as_str(), r.golden_answers.as_slice()))
        .collect();
    let unmatched: Vec<String> = log
        .iter()
        .filter(|r| !gold.contains_key(r.trajectory.question.as_str()))
        .map(|r| r.trajectory.question.clone())
        .collect();
    if !unmatched.is_empty() {
        return Err(EvalError::Unmatched(unmatched));
    }
    let mut em_total = 0.0;
    for r in log {
        let t = &r.trajectory;
        em_total += f64::from(em_score(t.final_answer.as_deref(), gold[t.question.as_str()])?);
    }
    let n = log.len() as f64;
    Ok(MetricsRow {
        name: name.to_string(),
        mean_context_tokens: mean(log.iter().map(|r| r.trajectory.total_tokens() as f64)),
        mean_wall_clock_s: mean(log.iter().map(|r| r.wall_clock_ms / 1e3)),
        mean_turns: mean(log.iter().map(|r| r.trajectory.search_count() as f64)),
        em: Some(em_total / n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDelta {
    pub name: String,
    /// Percent reductions, `(baseline - ours) / baseline * 100`; `None`
    /// when the baseline value is zero.
    pub context_reduction_pct: Option<f64>,
    pub time_reduction_pct: Option<f64>,
    pub turns_reduction_pct: Option<f64>,
    /// `ours - baseline`.
    pub em_diff: Option<f64>,
    pub baseline: MetricsRow,
    pub ours: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<RowDelta>,
    pub aggregate: RowDelta,
}

fn reduction_pct(baseline: f64, ours: f64) -> Option<f64> {
    if baseline == 0.0 {
        return (ours == 0.0).then_some(0.0);
    }
    Some((baseline - ours) / baseline * 100.0)
}

fn row_delta(b: &MetricsRow, o: &MetricsRow) -> RowDelta {
    RowDelta {
        name: b.name.clone(),
        context_reduction_pct: reduction_pct(b.mean_context_tokens, o.mean_context_tokens),
        time_reduction_pct: reduction_pct(b.mean_wall_clock_s, o.mean_wall_clock_s),
        turns_reduction_pct: reduction_pct(b.mean_turns, o.mean_turns),
        em_diff: b.em.zip(o.em).map(|(b, o)| o - b),
        baseline: b.clone(),
        ours: o.clone(),
    }
}

/// Per-row and aggregate reductions of `ours` relative to `baseline`.
pub fn compare_reports(baseline: &MetricsReport, ours: &MetricsReport) -> Result<Comparison, EvalError> {
    let names = |r: &MetricsReport| r.rows.iter().map(|x| x.name.clone()).collect::<Vec<_>>();
    if names(baseline) != names(ours) {
        return Err(EvalError::RowMismatch {
            baseline: names(baseline),
            ours: names(ours),
        });
    }
    Ok(Comparison {
        rows: baseline
            .rows
            .iter()
            .zip(&ours.rows)
            .map(|(b, o)| row_delta(b, o))
            .collect(),
        aggregate: row_delta(&baseline.aggregate, &ours.aggregate),
    })
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}%"));
        let mut out = format!("# {CONTEXT_NOTE}\n");
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "dataset", "ctx_base", "ctx_ours", "ctx_red", "time_red", "turn_b", "turn_o", "em_diff"
        );
        for d in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let em = d.em_diff.map_or("-".to_string(), |e| format!("{e:+.3}"));
            let _ = writeln!(
                out,
                "{:<16} {:>10.1} {:>10.1} {:>8} {:>8} {:>8.2} {:>8.2} {:>8}",
                d.name,
                d.baseline.mean_context_tokens,
                d.ours.mean_context_tokens,
                pct(d.context_reduction_pct),
                pct(d.time_reduction_pct),
                d.baseline.mean_turns,
                d.ours.mean_turns,
                em
            );
        }
        out
    }
}
