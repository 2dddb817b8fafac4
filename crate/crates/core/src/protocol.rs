//! Tag grammar of the search/answer loop.
//!
//! A policy emission is parsed into an [`Action`] by looking for the first
//! *closed* `<search>…</search>` or `<answer>…</answer>` pair. Generation is cut
//! at the first stop token by [`StopScanner`], which tolerates tokens split
//! across arbitrary chunk boundaries.

use serde::{Deserialize, Serialize};

pub const SEARCH_OPEN: &str = "<search>";
pub const SEARCH_CLOSE: &str = "</search>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const INFORMATION_OPEN: &str = "<information>";
pub const INFORMATION_CLOSE: &str = "</information>";
pub const EOS: &str = "<eos>";

/// Sentence wrapped when the condenser produced nothing.
pub const EMPTY_INFORMATION: &str = "No relevant information found.";

/// Continuation injected after an emission with no closed action pair.
pub const RETHINK: &str = "My action is not correct. Let me rethink.";

/// Stop strings handed to generation backends.
pub const STOP_STRINGS: [&str; 2] = [SEARCH_CLOSE, ANSWER_CLOSE];

/// Parsed outcome of one policy emission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Search(String),
    Answer(String),
    Invalid,
}

/// Why a per-action generation loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StopReason {
    CloseSearch,
    CloseAnswer,
    EndOfSequence,
    BudgetExhausted,
}

/// First closed `open…close` pair: (inner text, byte offset just past `close`).
fn first_closed_pair<'a>(segment: &'a str, open: &str, close: &str) -> Option<(&'a str, usize)> {
    let start = segment.find(open)? + open.len();
    let end = segment[start..].find(close)? + start;
    Some((&segment[start..end], end + close.len()))
}

/// Parse the text generated during one action loop.
///
/// When both a search pair and an answer pair are closed, the one whose closing
/// tag comes first wins. Unclosed tags yield [`Action::Invalid`].
pub fn parse_segment(segment: &str) -> Action {
    let search = first_closed_pair(segment, SEARCH_OPEN, SEARCH_CLOSE);
    let answer = first_closed_pair(segment, ANSWER_OPEN, ANSWER_CLOSE);
    match (search, answer) {
        (Some((q, qe)), Some((a, ae))) => {
            if qe <= ae {
                Action::Search(q.trim().to_string())
            } else {
                Action::Answer(a.trim().to_string())
            }
        }
        (Some((q, _)), None) => Action::Search(q.trim().to_string()),
        (None, Some((a, _))) => Action::Answer(a.trim().to_string()),
        (None, None) => Action::Invalid,
    }
}

/// `<information> {summary} </information>`, with a placeholder for empty input.
pub fn wrap_information(summary: &str) -> String {
    let body = if summary.trim().is_empty() {
        EMPTY_INFORMATION
    } else {
        summary
    };
    format!("{INFORMATION_OPEN} {body} {INFORMATION_CLOSE}")
}

/// A stop token located in a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopHit {
    pub reason: StopReason,
    /// Byte offset immediately after the stop token (or end of stream).
    pub offset: usize,
}

const STOP_TOKENS: [(&str, StopReason); 3] = [
    (SEARCH_CLOSE, StopReason::CloseSearch),
    (ANSWER_CLOSE, StopReason::CloseAnswer),
    (EOS, StopReason::EndOfSequence),
];

/// Incremental stop-token detector.
///
/// Keeps only the unconsumed tail that could still be the prefix of a stop
/// token, so memory stays bounded by the longest token.
#[derive(Debug, Default, Clone)]
pub struct StopScanner {
    /// Bytes seen so far across all chunks.
    consumed: usize,
    /// Suffix of the stream that may begin a stop token.
    carry: String,
    hit: Option<StopHit>,
}

impl StopScanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed a chunk. Returns the hit once the first stop token completes;
    /// later calls keep returning that same hit.
    pub fn push(&mut self, chunk: &str) -> Option<StopHit> {
        if self.hit.is_some() {
            return self.hit;
        }
        let base = self.consumed - self.carry.len();
        self.carry.push_str(chunk);
        self.consumed += chunk.len();

        let earliest = STOP_TOKENS
            .iter()
            .filter_map(|(tok, reason)| self.carry.find(tok).map(|i| (i + tok.len(), *reason)))
            .min_by_key(|(end, _)| *end);
        if let Some((end, reason)) = earliest {
            self.hit = Some(StopHit {
                reason,
                offset: base + end,
            });
            return self.hit;
        }

        let keep = longest_partial_suffix(&self.carry);
        let cut = self.carry.len() - keep;
        self.carry.drain(..cut);
        None
    }

    /// Close the stream. Without a stop token this is `EndOfSequence` at the
    /// final offset.
    pub fn finish(&self) -> StopHit {
        self.hit.unwrap_or(StopHit {
            reason: StopReason::EndOfSequence,
            offset: self.consumed,
        })
    }
}

/// Length of the longest suffix of `s` that is a proper prefix of some stop token.
fn longest_partial_suffix(s: &str) -> usize {
    let max = STOP_TOKENS.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
    (1..max.min(s.len() + 1))
        .rev()
        .find(|&n| {
            s.is_char_boundary(s.len() - n)
                && STOP_TOKENS
                    .iter()
                    .any(|(tok, _)| tok.starts_with(&s[s.len() - n..]))
        })
        .unwrap_or(0)
}

/// Run a whole chunk sequence through a fresh scanner.
pub fn scan_stop<'a, I>(chunks: I) -> StopHit
where
    I: IntoIterator<Item = &'a str>,
{
    let mut scanner = StopScanner::new();
    for chunk in chunks {
        if let Some(hit) = scanner.push(chunk) {
            return hit;
        }
    }
    scanner.finish()
}
