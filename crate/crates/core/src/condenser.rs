//! Evidence condensation: the teacher/summarizer prompt with its six focus
//! aspects, a deterministic extractive condenser, the raw-concatenation
//! pass-through, and a client for a served summarizer.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, Sampling};
use crate::retrieval::Document;
use crate::tokenize::{terms, Tokenizer, WhitespaceTokenizer};

/// Shipped `(id, name, explanation)` table for the six aspects.
pub const ASPECTS_JSON: &str = include_str!("../assets/aspects.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AspectId {
    #[default]
    Clarity,
    Coherence,
    Completeness,
    Coverage,
    FactualCorrectness,
    Logicality,
}

impl AspectId {
    pub const ALL: [AspectId; 6] = [
        AspectId::Clarity,
        AspectId::Coherence,
        AspectId::Completeness,
        AspectId::Coverage,
        AspectId::FactualCorrectness,
        AspectId::Logicality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AspectId::Clarity => "clarity",
            AspectId::Coherence => "coherence",
            AspectId::Completeness => "completeness",
            AspectId::Coverage => "coverage",
            AspectId::FactualCorrectness => "factual_correctness",
            AspectId::Logicality => "logicality",
        }
    }

    pub fn spec(self) -> &'static AspectSpec {
        REGISTRY
            .iter()
            .find(|s| s.id == self)
            .expect("aspect registry covers every id")
    }
}

impl fmt::Display for AspectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown aspect {given:?}; valid aspects: clarity, coherence, completeness, coverage, factual_correctness, logicality")]
pub struct UnknownAspect {
    pub given: String,
}

impl FromStr for AspectId {
    type Err = UnknownAspect;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AspectId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| UnknownAspect { given: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSpec {
    pub id: AspectId,
    pub name: String,
    pub explanation: String,
}

static REGISTRY: LazyLock<Vec<AspectSpec>> =
    LazyLock::new(|| serde_json::from_str(ASPECTS_JSON).expect("bundled aspects.json parses"));

pub fn aspect_registry() -> &'static [AspectSpec] {
    &REGISTRY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub source_query: String,
    pub source_doc_ids: Vec<String>,
    pub aspect: AspectId,
    pub token_count: usize,
}

impl Summary {
    pub fn new(
        text: String,
        query: &str,
        docs: &[Document],
        aspect: AspectId,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let token_count = tokenizer.count(&text);
        Self {
            text,
            source_query: query.to_string(),
            source_doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
            aspect,
            token_count,
        }
    }
}

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("sentence budget must be at least 1")]
    ZeroBudget,
    #[error("summary prompt needs at least one document")]
    NoDocuments,
}

/// The condensation step between retrieval and information injection.
pub trait Condenser: Send + Sync {
    fn condense(&self, question: &str, query: &str, docs: &[Document]) -> Result<Summary, CondenseError>;
}

/// `(Title: …) text`, or just the text when the title is empty.
pub fn render_document(doc: &Document) -> String {
    if doc.title.is_empty() {
        doc.text.clone()
    } else {
        format!("(Title: {}) {}", doc.title, doc.text)
    }
}

/// Baseline evidence block: one `Doc k (Title: …) text` line per document.
pub fn format_raw_documents(docs: &[Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("Doc {} {}", i + 1, render_document(d)))
        .collect::<Vec<_>>()
        .join("\n")
}

const PROMPT_HEAD: &str = "\
You are a helpful assistant in a retrieval-augmented question-answering system.

You will be given:
- A user question
- A search prompt (query) used to retrieve information
- A set of documents retrieved using that query

Your task is to generate a support context — a concise, well-structured summary that captures all the key facts from the documents which are relevant to answering the user question.

Important Instructions:
- Do not answer the question directly.
- Do not add external knowledge or hallucinate any content.
- Use only the information found in the retrieved documents.
- Rephrase and compress where appropriate, but preserve factual meaning.
- Maintain consistent tone and structure throughout.
- Focus on maximizing the following aspect in your output:
";

const PROMPT_TAIL: &str =
    "Please write the support context for me. Make it clear, factual, and optimized for the aspect defined above.";

/// Render the summarizer instruction prompt with one `[Doc k]` entry per document.
pub fn build_summary_prompt(
    question: &str,
    query: &str,
    docs: &[Document],
    aspect: AspectId,
) -> Result<String, CondenseError> {
    if docs.is_empty() {
        return Err(CondenseError::NoDocuments);
    }
    let spec = aspect.spec();
    let mut out = String::with_capacity(2048);
    out.push_str(PROMPT_HEAD);
    out.push_str(&format!(
        "\nFocus Aspect: {}\n→ {}\n\nUser Question:\n{}\n\nSearch Query (used by the retriever):\n{}\n\nRetrieved Documents:\n",
        spec.name, spec.explanation, question, query
    ));
    for (i, d) in docs.iter().enumerate() {
        out.push_str(&format!("[Doc {}] {}\n", i + 1, render_document(d)));
    }
    out.push('\n');
    out.push_str(PROMPT_TAIL);
    out.push('\n');
    Ok(out)
}

/// Split on `.`, `!`, `?` (a run of terminators stays with its sentence).
pub fn split_sentences(text: &str) -> Vec<&str> {
    let is_term = |c: char| matches!(c, '.' | '!' | '?');
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if is_term(c) && !chars.peek().is_some_and(|&(_, n)| is_term(n)) {
            let end = i + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest);
    }
    out
}

/// Keep the `sentence_budget` sentences sharing the most distinct query terms,
/// emitted in document-rank then position order. Empty text when no sentence
/// shares any term with the query.
pub fn condense_extractive(
    query: &str,
    docs: &[Document],
    sentence_budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Summary, CondenseError> {
    if sentence_budget == 0 {
        return Err(CondenseError::ZeroBudget);
    }
    let query_terms: std::collections::HashSet<String> = terms(query).into_iter().collect();
    // (score, rank, position, sentence); rank/position order is the Vec order
    let scored: Vec<(usize, &str)> = docs
        .iter()
        .flat_map(|d| split_sentences(&d.text))
        .map(|s| {
            let st: std::collections::HashSet<String> = terms(s).into_iter().collect();
            (st.intersection(&query_terms).count(), s)
        })
        .collect();

    if scored.iter().all(|(score, _)| *score == 0) {
        return Ok(Summary::new(String::new(), query, docs, AspectId::default(), tokenizer));
    }

    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.cmp(&scored[a].0).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(sentence_budget).collect();
    keep.sort_unstable();
    let text = keep.iter().map(|&i| scored[i].1).collect::<Vec<_>>().join(" ");
    Ok(Summary::new(text, query, docs, AspectId::default(), tokenizer))
}

/// Extractive stand-in for the trained summarizer.
#[derive(Debug, Clone)]
pub struct ExtractiveCondenser {
    pub sentence_budget: usize,
    pub aspect: AspectId,
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl ExtractiveCondenser {
    pub fn new(sentence_budget: usize) -> Self {
        Self {
            sentence_budget,
            aspect: AspectId::default(),
            tokenizer: Arc::new(WhitespaceTokenizer),
        }
    }
}

impl Condenser for ExtractiveCondenser {
    fn condense(&self, _question: &str, query: &str, docs: &[Document]) -> Result<Summary, CondenseError> {
        let mut s = condense_extractive(query, docs, self.sentence_budget, self.tokenizer.as_ref())?;
        s.aspect = self.aspect;
        Ok(s)
    }
}

/// Identity condenser: the raw `Doc k` block, exactly what the uncondensed
/// wiring injects.
#[derive(Debug, Clone)]
pub struct RawConcatenation {
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl Default for RawConcatenation {
    fn default() -> Self {
        Self {
            tokenizer: Arc::new(WhitespaceTokenizer),
        }
    }
}

impl Condenser for RawConcatenation {
    fn condense(&self, _question: &str, query: &str, docs: &[Document]) -> Result<Summary, CondenseError> {
        Ok(Summary::new(
            format_raw_documents(docs),
            query,
            docs,
            AspectId::default(),
            self.tokenizer.as_ref(),
        ))
    }
}

/// Send the rendered summary prompt to a generation backend.
#[allow(clippy::too_many_arguments)]
pub fn condense_remote(
    backend: &dyn GenerationBackend,
    question: &str,
    query: &str,
    docs: &[Document],
    aspect: AspectId,
    sampling: Sampling,
    max_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Summary, CondenseError> {
    let prompt = build_summary_prompt(question, query, docs, aspect)?;
    let response = backend.generate(&GenerationRequest::new(prompt, max_tokens, sampling))?;
    log::debug!("summarizer: question={question:?} query={query:?} aspect={aspect}");
    Ok(Summary::new(response.text.trim().to_string(), query, docs, aspect, tokenizer))
}

pub struct RemoteCondenser {
    pub backend: Box<dyn GenerationBackend>,
    pub aspect: AspectId,
    pub sampling: Sampling,
    pub max_tokens: usize,
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl RemoteCondenser {
    pub fn new(backend: Box<dyn GenerationBackend>, aspect: AspectId) -> Self {
        Self {
            backend,
            aspect,
            sampling: Sampling::SUMMARIZER,
            max_tokens: 512,
            tokenizer: Arc::new(WhitespaceTokenizer),
        }
    }
}

impl Condenser for RemoteCondenser {
    fn condense(&self, question: &str, query: &str, docs: &[Document]) -> Result<Summary, CondenseError> {
        // the prompt needs documents; an empty hit list goes straight to the placeholder
        if docs.is_empty() {
            return Ok(Summary::new(String::new(), query, docs, self.aspect, self.tokenizer.as_ref()));
        }
        condense_remote(
            self.backend.as_ref(),
            question,
            query,
            docs,
            self.aspect,
            self.sampling,
            self.max_tokens,
            self.tokenizer.as_ref(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(id: &str, text: &str) -> Document {
        Document::new(id, "", text)
    }

    #[test]
    fn registry_has_six_distinct_aspects() {
        let reg = aspect_registry();
        assert_eq!(reg.len(), 6);
        for id in AspectId::ALL {
            assert_eq!(reg.iter().filter(|s| s.id == id).count(), 1);
        }
        assert_eq!(AspectId::FactualCorrectness.spec().name, "Factual Correctness");
    }

    #[test]
    fn aspect_parse() {
        assert_eq!("logicality".parse::<AspectId>().unwrap(), AspectId::Logicality);
        let err = "brevity".parse::<AspectId>().unwrap_err();
        assert!(err.to_string().contains("factual_correctness"));
    }

    #[test]
    fn clarity_prompt() {
        let docs = [d("1", "a"), d("2", "b"), d("3", "c")];
        let p = build_summary_prompt("q", "query", &docs, AspectId::Clarity).unwrap();
        assert!(p.contains("Focus Aspect: Clarity\n→ Write in a clear, accessible manner"));
        assert!(p.lines().any(|l| l.ends_with("Do not answer the question directly.")));
    }

    #[test]
    fn prompt_scales_with_docs() {
        let docs: Vec<Document> = (1..=5).map(|i| d(&i.to_string(), "text")).collect();
        let p = build_summary_prompt("q", "s", &docs, AspectId::Coverage).unwrap();
        assert_eq!(p.matches("[Doc ").count(), 5);
        for k in 1..=5 {
            assert!(p.contains(&format!("[Doc {k}] text\n")));
        }
        assert!(matches!(
            build_summary_prompt("q", "s", &[], AspectId::Coverage),
            Err(CondenseError::NoDocuments)
        ));
    }

    #[test]
    fn sentence_split() {
        assert_eq!(
            split_sentences("Hi there. Really?! yes"),
            vec!["Hi there.", "Really?!", "yes"]
        );
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn extractive_picks_best_sentence() {
        let docs = [d("x", "Paris is the capital of France. It rains often.")];
        let s = condense_extractive("capital france", &docs, 1, &WhitespaceTokenizer).unwrap();
        assert_eq!(s.text, "Paris is the capital of France.");
        assert_eq!(s.token_count, 6);
        let all = condense_extractive("capital france", &docs, 5, &WhitespaceTokenizer).unwrap();
        assert_eq!(all.text, "Paris is the capital of France. It rains often.");
    }

    #[test]
    fn extractive_tie_prefers_higher_rank() {
        let docs = [d("r1", "Zero here. Alpha one."), d("r2", "Alpha two.")];
        let s = condense_extractive("alpha", &docs, 1, &WhitespaceTokenizer).unwrap();
        assert_eq!(s.text, "Alpha one.");
        // rank order preserved in output even when a later doc scores higher
        let docs = [d("r1", "alpha."), d("r2", "alpha beta.")];
        let s = condense_extractive("alpha beta", &docs, 2, &WhitespaceTokenizer).unwrap();
        assert_eq!(s.text, "alpha. alpha beta.");
    }

    #[test]
    fn extractive_no_overlap_is_empty() {
        let docs = [d("x", "Nothing relevant. At all.")];
        let s = condense_extractive("quantum", &docs, 2, &WhitespaceTokenizer).unwrap();
        assert!(s.text.is_empty());
        assert_eq!(s.token_count, 0);
        assert!(matches!(
            condense_extractive("q", &docs, 0, &WhitespaceTokenizer),
            Err(CondenseError::ZeroBudget)
        ));
    }

    #[test]
    fn raw_format() {
        let docs = [Document::new("a", "Paris", "Capital."), d("b", "Plain.")];
        assert_eq!(format_raw_documents(&docs), "Doc 1 (Title: Paris) Capital.\nDoc 2 Plain.");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn doc_text() -> impl Strategy<Value = String> {
            prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,4}[.!?]", 1..5).prop_map(|v| v.join(" "))
        }

        proptest! {
            #[test]
            fn compressive_and_faithful(texts in prop::collection::vec(doc_text(), 1..4),
                                        query in "[a-e]{1,3}( [a-e]{1,3}){0,2}",
                                        budget in 1usize..6) {
                let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| d(&i.to_string(), t)).collect();
                let s = condense_extractive(&query, &docs, budget, &WhitespaceTokenizer).unwrap();
                let total: usize = docs.iter().map(|d| WhitespaceTokenizer.count(&d.text)).sum();
                prop_assert!(s.token_count <= total);
                let n_sent: usize = docs.iter().map(|d| split_sentences(&d.text).len()).sum();
                if !s.text.is_empty() && budget < n_sent {
                    prop_assert!(s.token_count < total);
                }
                for sent in split_sentences(&s.text) {
                    prop_assert!(docs.iter().any(|d| d.text.contains(sent)));
                }
            }

            #[test]
            fn prompt_is_pure(q in ".{0,20}", s in ".{0,20}", t in "[a-z ]{1,30}", ai in 0usize..6) {
                let docs = [d("1", &t)];
                let a = AspectId::ALL[ai];
                prop_assert_eq!(build_summary_prompt(&q, &s, &docs, a).unwrap(),
                                build_summary_prompt(&q, &s, &docs, a).unwrap());
            }
        }
    }
}
