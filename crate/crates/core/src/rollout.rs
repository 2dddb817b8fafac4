//! The multi-turn search/answer rollout.
//!
//! Each action iteration asks the policy for one emission, cuts it at the
//! first stop token, and then either retrieves and injects an information
//! block (search), finishes (answer), or injects the rethink string
//! (anything else). At most `budget` iterations run.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{GenerationBackend, GenerationRequest, GenerationResponse, Sampling, TurnContext};
use crate::condenser::{format_raw_documents, AspectId, Condenser};
use crate::protocol::{
    parse_segment, wrap_information, Action, StopReason, StopScanner, ANSWER_CLOSE, ANSWER_OPEN, RETHINK,
    SEARCH_CLOSE, SEARCH_OPEN, STOP_STRINGS,
};
use crate::retrieval::Retriever;
use crate::tokenize::{Tokenizer, WhitespaceTokenizer};

pub const QUESTION_PLACEHOLDER: &str = "{question}";

/// Neutral instruction template for the policy.
pub const DEFAULT_SYSTEM_TEMPLATE: &str = include_str!("../assets/policy_template.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Maximum action iterations.
    pub budget: usize,
    pub top_k: usize,
    pub max_prompt_tokens: usize,
    /// Per-action generation cap.
    pub max_response_tokens: usize,
    /// Route retrieved documents through the condenser; off injects them raw.
    pub condense: bool,
    pub aspect: AspectId,
    pub sampling: Sampling,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            budget: 5,
            top_k: 5,
            max_prompt_tokens: 4096,
            max_response_tokens: 500,
            condense: true,
            aspect: AspectId::Clarity,
            sampling: Sampling::POLICY,
        }
    }
}

impl RolloutConfig {
    /// Uncondensed wiring with three turns and three passages.
    pub fn baseline() -> Self {
        Self {
            budget: 3,
            top_k: 3,
            condense: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.budget == 0 {
            return Err(ConfigError("budget must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(ConfigError("top_k must be at least 1".into()));
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature <= 0.0 {
            return Err(ConfigError("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid rollout config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Generated by the policy.
    PolicyText,
    /// Injected `<information>` block.
    Information,
    /// Injected continuation after an unparseable emission.
    Rethink,
}

impl SegmentKind {
    pub fn is_policy(self) -> bool {
        self == SegmentKind::PolicyText
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub token_count: usize,
    /// What ended generation, for policy segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub segments: Vec<Segment>,
    pub final_answer: Option<String>,
    pub turns_used: usize,
    pub stop: StopReason,
    /// Set when a backend failed mid-rollout; segments so far are kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Trajectory {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            segments: Vec::new(),
            final_answer: None,
            turns_used: 0,
            stop: StopReason::BudgetExhausted,
            error: None,
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: SegmentKind, text: String, tokenizer: &dyn Tokenizer) {
        let token_count = tokenizer.count(&text);
        self.segments.push(Segment {
            kind,
            text,
            token_count,
            stop: None,
        });
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.token_count).sum()
    }

    pub fn policy_tokens(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind.is_policy())
            .map(|s| s.token_count)
            .sum()
    }

    pub fn search_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Information)
            .count()
    }

    /// Queries of the policy segments that were answered by an information block.
    pub fn search_queries(&self) -> Vec<String> {
        self.segments
            .windows(2)
            .filter(|w| w[0].kind.is_policy() && w[1].kind == SegmentKind::Information)
            .filter_map(|w| match parse_segment(&w[0].text) {
                Action::Search(q) => Some(q),
                _ => None,
            })
            .collect()
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("system template has no {QUESTION_PLACEHOLDER} placeholder")]
    MissingPlaceholder,
    #[error("prompt exceeds {limit} tokens at segment {segment} ({tokens} tokens so far)")]
    Overflow {
        /// Index of the first segment that does not fit.
        segment: usize,
        tokens: usize,
        limit: usize,
    },
    #[error("system template alone is {tokens} tokens, over the {limit} limit")]
    TemplateOverflow { tokens: usize, limit: usize },
}

/// System template with the question filled in, then every segment on its
/// own line. Never truncates.
pub fn build_prompt(
    trajectory: &Trajectory,
    system_template: &str,
    tokenizer: &dyn Tokenizer,
    max_prompt_tokens: usize,
) -> Result<String, PromptError> {
    if !system_template.contains(QUESTION_PLACEHOLDER) {
        return Err(PromptError::MissingPlaceholder);
    }
    let mut prompt = system_template.replace(QUESTION_PLACEHOLDER, &trajectory.question);
    let mut tokens = tokenizer.count(&prompt);
    if tokens > max_prompt_tokens {
        return Err(PromptError::TemplateOverflow {
            tokens,
            limit: max_prompt_tokens,
        });
    }
    for (i, seg) in trajectory.segments.iter().enumerate() {
        if tokens + seg.token_count > max_prompt_tokens {
            return Err(PromptError::Overflow {
                segment: i,
                tokens: tokens + seg.token_count,
                limit: max_prompt_tokens,
            });
        }
        tokens += seg.token_count;
        if !prompt.ends_with('\n') {
            prompt.push('\n');
        }
        prompt.push_str(&seg.text);
    }
    Ok(prompt)
}

/// Cut a backend response into the policy segment for this action.
///
/// Returns the kept text, the stop reason, and any discarded tail.
pub fn cut_emission(
    response: &GenerationResponse,
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
) -> (String, StopReason, Option<String>) {
    let text = response.text.as_str();
    let mut scanner = StopScanner::new();
    if let Some(hit) = scanner.push(text) {
        let tail = text[hit.offset..].trim();
        let (kept, reason) = (text[..hit.offset].to_string(), hit.reason);
        if tokenizer.count(&kept) <= max_tokens {
            return (kept, reason, (!tail.is_empty()).then(|| tail.to_string()));
        }
    }

    let mut kept = text.to_string();
    let mut reason = if response.finish_reason == "length" {
        StopReason::BudgetExhausted
    } else {
        StopReason::EndOfSequence
    };
    // servers that honor `stop` usually strip the matched string
    if response.finish_reason == "stop" && scanner.finish().reason == StopReason::EndOfSequence {
        if let Some((close, r)) = unclosed_action(&kept) {
            kept.push_str(close);
            reason = r;
        }
    }
    let pieces = tokenizer.tokenize(&kept);
    if pieces.len() > max_tokens {
        let last = pieces[max_tokens - 1];
        let end = last.as_ptr() as usize - kept.as_ptr() as usize + last.len();
        let tail = kept[end..].trim().to_string();
        kept.truncate(end);
        return (kept, StopReason::BudgetExhausted, Some(tail));
    }
    (kept, reason, None)
}

/// Closing tag for an action tag left open at the end of `text`.
fn unclosed_action(text: &str) -> Option<(&'static str, StopReason)> {
    let open_after_close = |open: &str, close: &str| match (text.rfind(open), text.rfind(close)) {
        (Some(o), Some(c)) => o > c,
        (Some(_), None) => true,
        _ => false,
    };
    let search = open_after_close(SEARCH_OPEN, SEARCH_CLOSE).then(|| text.rfind(SEARCH_OPEN).unwrap());
    let answer = open_after_close(ANSWER_OPEN, ANSWER_CLOSE).then(|| text.rfind(ANSWER_OPEN).unwrap());
    match (search, answer) {
        (Some(s), Some(a)) if a > s => Some((ANSWER_CLOSE, StopReason::CloseAnswer)),
        (Some(_), _) => Some((SEARCH_CLOSE, StopReason::CloseSearch)),
        (None, Some(_)) => Some((ANSWER_CLOSE, StopReason::CloseAnswer)),
        (None, None) => None,
    }
}

/// Everything a rollout talks to.
pub struct RolloutEngine<'a> {
    pub policy: &'a dyn GenerationBackend,
    pub retriever: &'a dyn Retriever,
    pub condenser: &'a dyn Condenser,
    pub tokenizer: Arc<dyn Tokenizer>,
    pub system_template: String,
    pub config: RolloutConfig,
}

impl<'a> RolloutEngine<'a> {
    pub fn new(
        policy: &'a dyn GenerationBackend,
        retriever: &'a dyn Retriever,
        condenser: &'a dyn Condenser,
        config: RolloutConfig,
    ) -> Self {
        Self {
            policy,
            retriever,
            condenser,
            tokenizer: Arc::new(WhitespaceTokenizer),
            system_template: DEFAULT_SYSTEM_TEMPLATE.to_string(),
            config,
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.system_template = template.into();
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    /// Run one rollout. Backend failures end the rollout early with
    /// `error` set rather than discarding the partial trajectory.
    pub fn run_rollout(&self, question: &str) -> Trajectory {
        let tok = self.tokenizer.as_ref();
        let cfg = &self.config;
        let mut traj = Trajectory::new(question);
        let mut turn = 0;
        while turn < cfg.budget {
            traj.turns_used = turn;
            let prompt = match build_prompt(&traj, &self.system_template, tok, cfg.max_prompt_tokens) {
                Ok(p) => p,
                Err(e) => return fail(traj, e.to_string()),
            };
            let request = GenerationRequest {
                stop: STOP_STRINGS.iter().map(|s| s.to_string()).collect(),
                context: Some(TurnContext {
                    question: question.to_string(),
                    turn,
                }),
                ..GenerationRequest::new(prompt, cfg.max_response_tokens, cfg.sampling)
            };
            let response = match self.policy.generate(&request) {
                Ok(r) => r,
                Err(e) => return fail(traj, format!("policy: {e}")),
            };
            let (text, reason, tail) = cut_emission(&response, tok, cfg.max_response_tokens);
            if let Some(tail) = tail {
                traj.notes
                    .push(format!("turn {turn}: discarded text after stop: {tail:?}"));
            }
            let action = parse_segment(&text);
            traj.push(SegmentKind::PolicyText, text, tok);
            traj.segments.last_mut().unwrap().stop = Some(reason);
            traj.stop = reason;

            match action {
                Action::Search(query) => {
                    let docs = match self.retriever.search(&query, cfg.top_k) {
                        Ok(d) => d,
                        Err(e) => return fail(traj, format!("retriever: {e}")),
                    };
                    let evidence = if cfg.condense {
                        match self.condenser.condense(question, &query, &docs) {
                            Ok(s) => s.text,
                            Err(e) => return fail(traj, format!("condenser: {e}")),
                        }
                    } else {
                        format_raw_documents(&docs)
                    };
                    traj.push(SegmentKind::Information, wrap_information(&evidence), tok);
                }
                Action::Answer(answer) => {
                    traj.final_answer = Some(answer);
                    traj.stop = StopReason::CloseAnswer;
                    return traj;
                }
                Action::Invalid => traj.push(SegmentKind::Rethink, RETHINK.to_string(), tok),
            }
            turn += 1;
        }
        traj.turns_used = turn;
        traj.stop = StopReason::BudgetExhausted;
        traj
    }

    pub fn run_timed(&self, question: &str) -> TrajectoryRecord {
        let start = Instant::now();
        let trajectory = self.run_rollout(question);
        TrajectoryRecord {
            trajectory,
            wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }

    /// Independent rollouts over `questions`, up to `parallel` at a time.
    /// Output order follows input order.
    pub fn run_batch(&self, questions: &[String], parallel: usize) -> Vec<TrajectoryRecord> {
        use rayon::prelude::*;
        if parallel <= 1 {
            return questions.iter().map(|q| self.run_timed(q)).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(parallel).build() {
            Ok(pool) => pool.install(|| questions.par_iter().map(|q| self.run_timed(q)).collect()),
            Err(e) => {
                log::warn!("thread pool unavailable ({e}); running sequentially");
                questions.iter().map(|q| self.run_timed(q)).collect()
            }
        }
    }
}

fn fail(mut traj: Trajectory, error: String) -> Trajectory {
    log::warn!("rollout for {:?} failed: {error}", traj.question);
    traj.error = Some(error);
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, ScriptedBackend};
    use crate::condenser::{ExtractiveCondenser, RawConcatenation};
    use crate::retrieval::{CorpusIndex, Document};

    fn corpus() -> CorpusIndex {
        CorpusIndex::from_documents([
            Document::new("d1", "Paris", "Paris is the capital of France. It is large."),
            Document::new("d2", "Lyon", "Lyon is a city in France."),
        ])
        .unwrap()
    }

    fn engine<'a>(
        policy: &'a dyn GenerationBackend,
        idx: &'a CorpusIndex,
        cond: &'a dyn Condenser,
        config: RolloutConfig,
    ) -> RolloutEngine<'a> {
        RolloutEngine::new(policy, idx, cond, config).with_template("Q: {question}")
    }

    #[test]
    fn search_then_answer() {
        let idx = corpus();
        let policy = ScriptedBackend::uniform(["<search> paris </search>", "<answer> A </answer>"]);
        let cond = RawConcatenation::default();
        let t = engine(&policy, &idx, &cond, RolloutConfig::default()).run_rollout("q");
        let kinds: Vec<_> = t.segments.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            [SegmentKind::PolicyText, SegmentKind::Information, SegmentKind::PolicyText]
        );
        assert_eq!(t.turns_used, 1);
        assert_eq!(t.final_answer.as_deref(), Some("A"));
        assert_eq!(t.stop, StopReason::CloseAnswer);
        assert_eq!(
            t.segments[1].text,
            "<information> Doc 1 (Title: Paris) Paris is the capital of France. It is large. </information>"
        );
    }

    #[test]
    fn invalid_until_budget() {
        let idx = corpus();
        let policy = ScriptedBackend::uniform(["hmm", "still thinking"]);
        let cond = RawConcatenation::default();
        let cfg = RolloutConfig {
            budget: 2,
            ..RolloutConfig::default()
        };
        let t = engine(&policy, &idx, &cond, cfg).run_rollout("q");
        assert_eq!(t.final_answer, None);
        assert_eq!(t.stop, StopReason::BudgetExhausted);
        assert_eq!(t.turns_used, 2);
        let rethinks: Vec<_> = t
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Rethink)
            .map(|s| s.text.as_str())
            .collect();
        assert_eq!(rethinks, [RETHINK, RETHINK]);
    }

    #[test]
    fn uncondensed_injects_ranked_docs() {
        let idx = corpus();
        let policy = ScriptedBackend::uniform(["<search> france </search>"]);
        let cond = ExtractiveCondenser::new(1);
        let cfg = RolloutConfig {
            budget: 1,
            condense: false,
            ..RolloutConfig::default()
        };
        let t = engine(&policy, &idx, &cond, cfg).run_rollout("q");
        let expected = format_raw_documents(&idx.search("france", 5).unwrap());
        assert_eq!(t.segments[1].text, wrap_information(&expected));
        assert!(expected.starts_with("Doc 1") && expected.contains("\nDoc 2"));
    }

    #[test]
    fn zero_hits_use_placeholder() {
        let idx = corpus();
        let policy = ScriptedBackend::uniform(["<search> berlin </search>"]);
        let cond = ExtractiveCondenser::new(1);
        let cfg = RolloutConfig {
            budget: 1,
            ..RolloutConfig::default()
        };
        let t = engine(&policy, &idx, &cond, cfg).run_rollout("q");
        assert_eq!(
            t.segments[1].text,
            "<information> No relevant information found. </information>"
        );
    }

    struct Flaky;
    impl GenerationBackend for Flaky {
        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
            match req.context.as_ref().unwrap().turn {
                0 => Ok(GenerationResponse::stop("<search> paris </search>")),
                _ => Err(BackendError::Timeout),
            }
        }
    }

    #[test]
    fn backend_failure_keeps_partial_segments() {
        let idx = corpus();
        let cond = RawConcatenation::default();
        let t = engine(&Flaky, &idx, &cond, RolloutConfig::default()).run_rollout("q");
        assert!(t.failed());
        assert_eq!(t.segments.len(), 2);
        assert!(t.error.as_deref().unwrap().contains("timed out"));
    }

    #[test]
    fn tail_after_answer_is_discarded_and_noted() {
        let idx = corpus();
        let policy = ScriptedBackend::uniform(["<answer> x </answer> and more"]);
        let cond = RawConcatenation::default();
        let t = engine(&policy, &idx, &cond, RolloutConfig::default()).run_rollout("q");
        assert_eq!(t.segments[0].text, "<answer> x </answer>");
        assert_eq!(t.notes.len(), 1);
    }

    #[test]
    fn cut_restores_stripped_stop_and_caps_length() {
        let tok = WhitespaceTokenizer;
        let (text, reason, _) = cut_emission(&GenerationResponse::stop("ok <search> q "), &tok, 100);
        assert_eq!(text, "ok <search> q </search>");
        assert_eq!(reason, StopReason::CloseSearch);

        let long = GenerationResponse {
            text: "a b c d e".into(),
            finish_reason: "length".into(),
        };
        let (text, reason, tail) = cut_emission(&long, &tok, 3);
        assert_eq!(text, "a b c");
        assert_eq!(reason, StopReason::BudgetExhausted);
        assert_eq!(tail.as_deref(), Some("d e"));

        let (text, reason, _) = cut_emission(&GenerationResponse::stop("plain"), &tok, 10);
        assert_eq!((text.as_str(), reason), ("plain", StopReason::EndOfSequence));
    }

    #[test]
    fn prompt_rendering_and_overflow() {
        let tok = WhitespaceTokenizer;
        let mut t = Trajectory::new("who?");
        assert_eq!(build_prompt(&t, "Q: {question}", &tok, 10).unwrap(), "Q: who?");
        t.push(SegmentKind::PolicyText, "<search> x </search>".into(), &tok);
        t.push(SegmentKind::Information, "<information> y </information>".into(), &tok);
        assert_eq!(
            build_prompt(&t, "Q: {question}", &tok, 10).unwrap(),
            "Q: who?\n<search> x </search>\n<information> y </information>"
        );
        assert_eq!(
            build_prompt(&t, "Q: {question}", &tok, 7),
            Err(PromptError::Overflow {
                segment: 1,
                tokens: 8,
                limit: 7
            })
        );
        assert_eq!(build_prompt(&t, "no slot", &tok, 10), Err(PromptError::MissingPlaceholder));
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        assert!(RolloutConfig { budget: 0, ..Default::default() }.validate().is_err());
        assert!(RolloutConfig { top_k: 0, ..Default::default() }.validate().is_err());
        let mut c = RolloutConfig::default();
        c.sampling.temperature = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn record_log_shape() {
        let idx = corpus();
        let policy = ScriptedBackend::uniform(["<answer> A </answer>"]);
        let cond = RawConcatenation::default();
        let rec = engine(&policy, &idx, &cond, RolloutConfig::default()).run_timed("q");
        let v = serde_json::to_value(&rec).unwrap();
        for key in ["question", "segments", "final_answer", "turns_used", "stop", "wall_clock_ms"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["segments"][0]["kind"], "PolicyText");
        let back: TrajectoryRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back.trajectory, rec.trajectory);
    }
}
