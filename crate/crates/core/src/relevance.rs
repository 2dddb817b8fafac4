//! Listwise passage-relevance objective at desk scale.
//!
//! A linear model over hashed query/passage features scores each of the ten
//! candidates for a query; training minimises softmax cross-entropy against
//! the single relevant candidate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_jsonl, JsonlError};
use crate::tokenize::terms;

pub const CANDIDATES: usize = 10;
pub const DEFAULT_FEATURE_DIM: usize = 1 << 16;

/// Dense slots ahead of the hashed region.
const SLOT_LENGTH_RATIO: usize = 0;
const SLOT_OVERLAP_FRACTION: usize = 1;
const SLOT_TF_MASS: usize = 2;
const RESERVED: usize = 3;

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("example {index}: expected {CANDIDATES} passages, found {found}")]
    PassageCount { index: usize, found: usize },
    #[error("example {index}: label {label} out of range")]
    LabelRange { index: usize, label: usize },
    #[error("example has no relevant passage")]
    Unlabeled,
    #[error("non-finite score for passage {0}")]
    NonFiniteScore(usize),
    #[error("loss diverged at step {step} (epoch {epoch})")]
    Diverged { epoch: usize, step: usize },
    #[error("no labeled examples to train on")]
    EmptyDataset,
    #[error("feature_dim must be a power of two greater than {RESERVED}")]
    FeatureDim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceExample {
    pub query: String,
    pub passages: Vec<String>,
    pub label: Option<usize>,
}

/// Sorted, duplicate-free sparse vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseFeatures(pub Vec<(usize, f64)>);

impl SparseFeatures {
    fn from_map(map: BTreeMap<usize, f64>) -> Self {
        Self(map.into_iter().filter(|(_, v)| *v != 0.0).collect())
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0
            .binary_search_by_key(&index, |(i, _)| *i)
            .map_or(0.0, |k| self.0[k].1)
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.0.iter().map(|&(i, v)| weights[i] * v).sum()
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn hashed_slot(kind: &str, term: &str, dim: usize) -> usize {
    let h = fnv1a(format!("{kind}\u{1f}{term}").as_bytes());
    RESERVED + (h % (dim - RESERVED) as u64) as usize
}

/// Hashed overlap indicators and tf products for shared terms, plus the
/// overlap fraction, log tf mass, and a length-ratio feature.
pub fn featurize(query: &str, passage: &str, dim: usize) -> SparseFeatures {
    let q = terms(query);
    let p = terms(passage);
    let mut q_tf: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &q {
        *q_tf.entry(t).or_default() += 1.0;
    }
    let mut p_tf: HashMap<&str, f64> = HashMap::new();
    for t in &p {
        *p_tf.entry(t).or_default() += 1.0;
    }

    let mut map = BTreeMap::new();
    let mut shared = 0usize;
    let mut tf_mass = 0.0;
    for (term, qtf) in &q_tf {
        if let Some(ptf) = p_tf.get(term) {
            shared += 1;
            tf_mass += qtf * ptf;
            *map.entry(hashed_slot("ov", term, dim)).or_insert(0.0) += 1.0;
            *map.entry(hashed_slot("tf", term, dim)).or_insert(0.0) += qtf * ptf;
        }
    }
    if !q_tf.is_empty() {
        map.insert(SLOT_OVERLAP_FRACTION, shared as f64 / q_tf.len() as f64);
    }
    map.insert(SLOT_TF_MASS, tf_mass.ln_1p());
    let (lq, lp) = (q.len() as f64, p.len() as f64);
    if lq > 0.0 && lp > 0.0 {
        map.insert(SLOT_LENGTH_RATIO, lq.min(lp) / lq.max(lp));
    }
    SparseFeatures::from_map(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_dim: usize,
}

impl RelevanceModel {
    pub fn zeros(feature_dim: usize) -> Result<Self, RelevanceError> {
        if !feature_dim.is_power_of_two() || feature_dim <= RESERVED {
            return Err(RelevanceError::FeatureDim);
        }
        Ok(Self {
            weights: vec![0.0; feature_dim],
            bias: 0.0,
            feature_dim,
        })
    }

    pub fn score(&self, features: &SparseFeatures) -> f64 {
        features.dot(&self.weights) + self.bias
    }
}

/// Raw scores and the first index attaining the maximum.
pub fn score_candidates(model: &RelevanceModel, query: &str, passages: &[String]) -> (Vec<f64>, usize) {
    let scores: Vec<f64> = passages
        .iter()
        .map(|p| model.score(&featurize(query, p, model.feature_dim)))
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    (scores, best)
}

/// Gradient of the loss: sparse over weights plus the bias term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceGradient {
    pub weights: BTreeMap<usize, f64>,
    pub bias: f64,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(z)[label]` and its exact gradient.
pub fn relevance_loss(
    model: &RelevanceModel,
    example: &RelevanceExample,
) -> Result<(f64, RelevanceGradient), RelevanceError> {
    let label = example.label.ok_or(RelevanceError::Unlabeled)?;
    let feats: Vec<SparseFeatures> = example
        .passages
        .iter()
        .map(|p| featurize(&example.query, p, model.feature_dim))
        .collect();
    let z: Vec<f64> = feats.iter().map(|f| model.score(f)).collect();
    if let Some(j) = z.iter().position(|s| !s.is_finite()) {
        return Err(RelevanceError::NonFiniteScore(j));
    }
    let lse = log_sum_exp(&z);
    let loss = lse - z[label];

    let mut grad = RelevanceGradient::default();
    for (j, f) in feats.iter().enumerate() {
        let coeff = (z[j] - lse).exp() - if j == label { 1.0 } else { 0.0 };
        grad.bias += coeff;
        for &(i, v) in &f.0 {
            *grad.weights.entry(i).or_insert(0.0) += coeff * v;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub feature_dim: usize,
}

impl Default for RelevanceTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 20,
            seed: 1,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTraining {
    pub model: RelevanceModel,
    /// Mean loss per epoch, measured while the epoch runs.
    pub epoch_losses: Vec<f64>,
}

/// Seeded SGD over shuffled examples, starting from the zero model.
pub fn train_relevance(
    dataset: &[RelevanceExample],
    config: &RelevanceTrainConfig,
) -> Result<RelevanceTraining, RelevanceError> {
    let labeled: Vec<&RelevanceExample> = dataset.iter().filter(|e| e.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(RelevanceError::EmptyDataset);
    }
    let mut model = RelevanceModel::zeros(config.feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grad) = relevance_loss(&model, labeled[i])
                .map_err(|_| RelevanceError::Diverged { epoch, step })?;
            if !loss.is_finite() {
                return Err(RelevanceError::Diverged { epoch, step });
            }
            total += loss;
            for (k, g) in grad.weights {
                model.weights[k] -= config.lr * g;
                if !model.weights[k].is_finite() {
                    return Err(RelevanceError::Diverged { epoch, step });
                }
            }
            model.bias -= config.lr * grad.bias;
            step += 1;
        }
        epoch_losses.push(total / labeled.len() as f64);
    }
    Ok(RelevanceTraining {
        model,
        epoch_losses,
    })
}

/// Load a `{query, passages, label}` file. Unlabeled examples are dropped;
/// the second value counts them.
pub fn load_dataset(path: &Path) -> Result<(Vec<RelevanceExample>, usize), RelevanceError> {
    let all: Vec<RelevanceExample> = read_jsonl(path)?;
    let total = all.len();
    let mut kept = Vec::with_capacity(total);
    for (index, ex) in all.into_iter().enumerate() {
        if ex.passages.len() != CANDIDATES {
            return Err(RelevanceError::PassageCount {
                index,
                found: ex.passages.len(),
            });
        }
        match ex.label {
            Some(label) if label >= CANDIDATES => return Err(RelevanceError::LabelRange { index, label }),
            Some(_) => kept.push(ex),
            None => {}
        }
    }
    let dropped = total - kept.len();
    Ok((kept, dropped))
}

/// Separable fixture: the relevant passage repeats at least three query
/// terms, distractors share none.
pub fn synthetic_separable(n: usize, seed: u64) -> Vec<RelevanceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng, prefix: &str, vocab: usize| format!("{prefix}{}", rng.gen_range(0..vocab));
    (0..n)
        .map(|_| {
            let mut query_terms: Vec<String> = Vec::new();
            while query_terms.len() < 4 {
                let w = word(&mut rng, "q", 400);
                if !query_terms.contains(&w) {
                    query_terms.push(w);
                }
            }
            let label = rng.gen_range(0..CANDIDATES);
            let passages = (0..CANDIDATES)
                .map(|j| {
                    let filler = rng.gen_range(4..10);
                    let mut words: Vec<String> = (0..filler).map(|_| word(&mut rng, "f", 300)).collect();
                    if j == label {
                        let shared = rng.gen_range(3..=4);
                        let mut picks = query_terms.clone();
                        picks.shuffle(&mut rng);
                        words.extend(picks.into_iter().take(shared));
                        words.shuffle(&mut rng);
                    }
                    words.join(" ")
                })
                .collect();
            RelevanceExample {
                query: query_terms.join(" "),
                passages,
                label: Some(label),
            }
        })
        .collect()
}
