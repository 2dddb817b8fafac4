//! Lexical BM25 retrieval over an in-memory passage corpus, and a client for
//! a remote retriever speaking `{query, k} -> {documents}`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, HttpJsonClient};
use crate::io::{read_jsonl, JsonlError};
use crate::tokenize::terms;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Remote(#[from] BackendError),
    #[error("index file {path}: {message}")]
    IndexFile { path: PathBuf, message: String },
}

/// Anything that can answer a top-k passage query.
pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<Document>, RetrievalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Ordinal into the id-sorted document store.
    pub doc: u32,
    pub tf: u32,
}

/// Immutable inverted index. Documents are stored sorted by id, so posting
/// lists ordered by ordinal are also ordered by document id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusIndex {
    documents: Vec<Document>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub document: &'a Document,
    pub score: f64,
}

impl CorpusIndex {
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self, RetrievalError> {
        let mut documents: Vec<Document> = docs.into_iter().collect();
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(RetrievalError::DuplicateId(d.id.clone()));
            }
            if d.text.trim().is_empty() {
                return Err(RetrievalError::EmptyText(d.id.clone()));
            }
        }
        documents.sort_by(|a, b| a.id.cmp(&b.id));

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(documents.len());
        for (ord, d) in documents.iter().enumerate() {
            let toks = terms(&d.text);
            doc_lengths.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ord as u32,
                    tf,
                });
            }
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Self {
            documents,
            postings,
            doc_lengths,
            avg_doc_length,
        })
    }

    /// Load a line-delimited `{id, title, text}` corpus file.
    pub fn ingest(path: &Path) -> Result<Self, RetrievalError> {
        let docs: Vec<Document> = read_jsonl(path)?;
        Self::from_documents(docs)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file_err = |message: String| RetrievalError::IndexFile {
            path: path.to_path_buf(),
            message,
        };
        let json = serde_json::to_vec(self).map_err(|e| file_err(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| file_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file_err = |message: String| RetrievalError::IndexFile {
            path: path.to_path_buf(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| file_err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| file_err(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    /// Non-negative BM25 idf.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.documents.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` documents by BM25 over the distinct query terms. Descending
    /// score, ties by ascending id; documents sharing no term are left out.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Hit<'_>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let mut seen = HashSet::new();
        let query_terms: Vec<String> = terms(query).into_iter().filter(|t| seen.insert(t.clone())).collect();

        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &query_terms {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let tf = f64::from(p.tf);
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_doc_length);
                *scores.entry(p.doc).or_insert(0.0) += idf * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }

        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .map(|(doc, score)| Hit {
                document: &self.documents[doc as usize],
                score,
            })
            .collect())
    }
}

impl Retriever for CorpusIndex {
    fn search(&self, query: &str, k: usize) -> Result<Vec<Document>, RetrievalError> {
        Ok(self
            .retrieve(query, k)?
            .into_iter()
            .map(|h| h.document.clone())
            .collect())
    }
}

#[derive(Debug, Serialize)]
struct RemoteQuery<'a> {
    query: &'a str,
    k: usize,
}

#[derive(Debug, Deserialize)]
struct RemoteHits {
    documents: Vec<Document>,
}

/// Client for a served retriever (e.g. a dense index behind HTTP).
#[derive(Debug, Clone)]
pub struct RemoteRetriever {
    endpoint: String,
    client: HttpJsonClient,
}

impl RemoteRetriever {
    pub fn new(endpoint: impl Into<String>, client: HttpJsonClient) -> Self {
        Self {
            endpoint: endpoint.into(),
            client,
        }
    }

    /// Documents in the order the service ranked them.
    pub fn remote_retrieve(&self, query: &str, k: usize) -> Result<Vec<Document>, BackendError> {
        let hits: RemoteHits = self.client.post(&self.endpoint, &RemoteQuery { query, k })?;
        Ok(hits.documents)
    }
}

impl Retriever for RemoteRetriever {
    fn search(&self, query: &str, k: usize) -> Result<Vec<Document>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        Ok(self.remote_retrieve(query, k)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, "", text)
    }

    #[test]
    fn three_doc_statistics() {
        let idx = CorpusIndex::from_documents([
            doc("a", "one two three"),
            doc("b", "one"),
            doc("c", "one two"),
        ])
        .unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.avg_doc_length(), 2.0);
        assert_eq!(idx.postings("one").len(), 3);
        assert!(idx.postings("one").windows(2).all(|w| w[0].doc < w[1].doc));
    }

    #[test]
    fn single_doc_score_by_hand() {
        let idx = CorpusIndex::from_documents([doc("d1", "paris capital france")]).unwrap();
        let hits = idx.retrieve("paris", 5).unwrap();
        assert_eq!(hits.len(), 1);
        // N=1, df=1: idf = ln(1 + 0.5/1.5); dl = avgdl so tf part = 2.2/2.2 = 1
        let expected = (1.0f64 + 0.5 / 1.5).ln();
        assert!((hits[0].score - expected).abs() < 1e-15);
    }

    #[test]
    fn no_matching_terms() {
        let idx = CorpusIndex::from_documents([doc("d1", "paris capital france")]).unwrap();
        assert!(idx.retrieve("berlin", 3).unwrap().is_empty());
        assert!(idx.retrieve("!!!", 3).unwrap().is_empty());
        assert!(matches!(idx.retrieve("paris", 0), Err(RetrievalError::ZeroK)));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = CorpusIndex::from_documents([doc("d2", "alpha beta"), doc("d1", "alpha beta")]).unwrap();
        let hits = idx.retrieve("alpha", 2).unwrap();
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!(hits[0].document.id, "d1");
        assert_eq!(hits[1].document.id, "d2");
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let err = CorpusIndex::from_documents([doc("d1", "x"), doc("d1", "y")]).unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicateId(ref id) if id == "d1"));
        let err = CorpusIndex::from_documents([doc("d1", "  ")]).unwrap_err();
        assert!(matches!(err, RetrievalError::EmptyText(_)));
    }

    #[test]
    fn empty_index() {
        let idx = CorpusIndex::from_documents([]).unwrap();
        assert!(idx.is_empty());
        assert!(idx.retrieve("anything", 5).unwrap().is_empty());
    }

    #[test]
    fn ingest_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"d1\",\"title\":\"t\",\"text\":\"a\"}\n{\"id\":\"d1\",\"title\":\"t\",\"text\":\"b\"}\n",
        )
        .unwrap();
        assert!(matches!(CorpusIndex::ingest(&p), Err(RetrievalError::DuplicateId(_))));
        std::fs::write(&p, "{\"id\":\"d1\",\"text\":\"a\"}\nnot json\n").unwrap();
        match CorpusIndex::ingest(&p) {
            Err(RetrievalError::Jsonl(JsonlError::Malformed { line, .. })) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "").unwrap();
        assert!(CorpusIndex::ingest(&p).unwrap().is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.json");
        let idx = CorpusIndex::from_documents([doc("a", "x y"), doc("b", "y z")]).unwrap();
        idx.save(&p).unwrap();
        let back = CorpusIndex::load(&p).unwrap();
        assert_eq!(idx.retrieve("y z", 2).unwrap(), back.retrieve("y z", 2).unwrap());
    }
}
