//! A small fact-lookup environment for exercising PPO end to end.
//!
//! Each question asks for the code of one registry key. The policy is a
//! table of logits indexed by how many information blocks it has seen so
//! far (capped at 2), over four canned emissions. Only the first token of
//! an emission is stochastic; the remaining tokens are determined by the
//! choice. Rollouts go through [`RolloutEngine`] with a real BM25 index and
//! a real condenser, so the masking and reward code sees real trajectories.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, GenerationResponse};
use crate::condenser::{Condenser, ExtractiveCondenser, RawConcatenation};
use crate::evalkit::em_score;
use crate::protocol::{ANSWER_OPEN, INFORMATION_CLOSE, INFORMATION_OPEN, SEARCH_OPEN};
use crate::retrieval::{CorpusIndex, Document};
use crate::rollout::{RolloutConfig, RolloutEngine, SegmentKind, Trajectory};

use super::{
    compute_rewards, compute_token_mask, gae_advantages, logits_gradients, ppo_loss, token_logprob_entropy, Adam,
    PpoConfig, PpoStats, PpoSequence, RlError, TokenDist,
};

pub const N_STATES: usize = 3;
pub const N_CHOICES: usize = 4;
pub const N_PARAMS: usize = N_STATES * N_CHOICES;

/// Prompt template for toy rollouts.
pub const TOY_TEMPLATE: &str = "Question: {question}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    SearchKey,
    SearchVague,
    AnswerFromInfo,
    Think,
}

impl Choice {
    pub const ALL: [Choice; N_CHOICES] = [Choice::SearchKey, Choice::SearchVague, Choice::AnswerFromInfo, Choice::Think];

    fn index(self) -> usize {
        self as usize
    }

    fn render(self, key: &str, info: Option<&str>) -> String {
        match self {
            Choice::SearchKey => format!("<search> code of {key} </search>"),
            Choice::SearchVague => "<search> registry entry </search>".to_string(),
            Choice::AnswerFromInfo => {
                let answer = info.and_then(first_answer_term).unwrap_or_else(|| "unknown".to_string());
                format!("<answer> {answer} </answer>")
            }
            Choice::Think => "let me think".to_string(),
        }
    }

    /// Recover the choice from an emitted policy segment.
    fn decode(text: &str) -> Choice {
        if text.starts_with(ANSWER_OPEN) {
            Choice::AnswerFromInfo
        } else if text.contains("registry entry") {
            Choice::SearchVague
        } else if text.starts_with(SEARCH_OPEN) {
            Choice::SearchKey
        } else {
            Choice::Think
        }
    }
}

fn is_answer_term(w: &str) -> bool {
    w.len() == 3 && w.starts_with('v') && w[1..].bytes().all(|b| b.is_ascii_digit())
}

fn is_key_term(w: &str) -> bool {
    w.len() == 3 && w.starts_with('k') && w[1..].bytes().all(|b| b.is_ascii_digit())
}

fn first_answer_term(text: &str) -> Option<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_ascii_alphanumeric()))
        .find(|w| is_answer_term(w))
        .map(str::to_string)
}

/// Tabular softmax policy: `logits[state * N_CHOICES + choice]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub logits: Vec<f64>,
}

impl Default for ToyPolicy {
    fn default() -> Self {
        Self {
            logits: vec![0.0; N_PARAMS],
        }
    }
}

impl ToyPolicy {
    pub fn state_logits(&self, state: usize) -> &[f64] {
        &self.logits[state * N_CHOICES..(state + 1) * N_CHOICES]
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let l = self.state_logits(state);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    fn dist(&self, state: usize, choice: usize) -> TokenDist {
        TokenDist::Categorical {
            logits: self.state_logits(state).to_vec(),
            chosen: choice,
        }
    }

    /// Mean over states of `KL(self || reference)`.
    pub fn drift_from(&self, reference: &ToyPolicy) -> f64 {
        (0..N_STATES)
            .map(|s| {
                let p = self.probs(s);
                let q = reference.probs(s);
                p.iter().zip(&q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum::<f64>()
            })
            .sum::<f64>()
            / N_STATES as f64
    }
}

/// Sampling backend driven by a [`ToyPolicy`]. It reads the key, the number
/// of information blocks and the latest block out of the prompt.
pub struct ToyBackend {
    policy: ToyPolicy,
    rng: Mutex<ChaCha8Rng>,
}

impl ToyBackend {
    pub fn new(policy: ToyPolicy, seed: u64) -> Self {
        Self {
            policy,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl GenerationBackend for ToyBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let prompt = &request.prompt;
        let key = prompt
            .split_whitespace()
            .find(|w| is_key_term(w))
            .ok_or_else(|| BackendError::Other("toy prompt names no key".into()))?;
        let state = prompt.matches(INFORMATION_OPEN).count().min(N_STATES - 1);
        let last_info = prompt.rfind(INFORMATION_OPEN).map(|start| {
            let body = &prompt[start + INFORMATION_OPEN.len()..];
            &body[..body.find(INFORMATION_CLOSE).unwrap_or(body.len())]
        });
        let probs = self.policy.probs(state);
        let u: f64 = self.rng.lock().expect("rng lock").gen();
        let mut acc = 0.0;
        let mut pick = N_CHOICES - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        Ok(GenerationResponse::stop(Choice::ALL[pick].render(key, last_info)))
    }
}

/// The fact table, its corpus and its questions.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub facts: Vec<(String, String)>,
    pub index: CorpusIndex,
}

impl ToyEnv {
    pub fn new(n_facts: usize) -> Result<Self, RlError> {
        if n_facts == 0 || n_facts > 100 {
            return Err(RlError::Env(format!("n_facts must be in 1..=100, got {n_facts}")));
        }
        let facts: Vec<(String, String)> = (0..n_facts).map(|i| (format!("k{i:02}"), format!("v{i:02}"))).collect();
        let docs = facts.iter().map(|(k, v)| {
            Document::new(
                k.clone(),
                k.clone(),
                format!(
                    "{k} is a registry entry. The code of {k} is {v}. Entries like {k} are archived weekly. \
                     Audits of the registry happen rarely."
                ),
            )
        });
        let index = CorpusIndex::from_documents(docs).map_err(|e| RlError::Env(e.to_string()))?;
        Ok(Self { facts, index })
    }

    pub fn question(&self, i: usize) -> String {
        format!("what is the code of {} ?", self.facts[i].0)
    }

    pub fn answer(&self, i: usize) -> &str {
        &self.facts[i].1
    }

    /// Every distinct whitespace token the policy can emit.
    pub fn policy_vocabulary(&self) -> Vec<String> {
        let mut vocab: Vec<String> = Vec::new();
        for (k, v) in &self.facts {
            for c in Choice::ALL {
                let info = format!("The code of {k} is {v}.");
                for w in c.render(k, Some(&info)).split_whitespace().chain(c.render(k, None).split_whitespace()) {
                    vocab.push(w.to_string());
                }
            }
        }
        vocab.sort();
        vocab.dedup();
        vocab
    }

    fn rollout(&self, policy: &ToyPolicy, condenser: &dyn Condenser, config: &RolloutConfig, i: usize, seed: u64) -> Trajectory {
        let backend = ToyBackend::new(policy.clone(), seed);
        RolloutEngine::new(&backend, &self.index, condenser, config.clone())
            .with_template(TOY_TEMPLATE)
            .run_rollout(&self.question(i))
    }
}

/// Position of one response token: the state it was produced in, and the
/// sampled choice if it is the stochastic first token of a policy segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyToken {
    pub state: usize,
    pub choice: Option<usize>,
}

/// A rollout decoded into token positions plus everything frozen at
/// collection time.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub tokens: Vec<ToyToken>,
    pub mask: Vec<u8>,
    pub logprob_old: Vec<f64>,
    pub logprob_ref: Vec<f64>,
    pub value_old: Vec<f64>,
    pub reward: Vec<f64>,
    pub advantage: Vec<f64>,
    pub return_target: Vec<f64>,
    pub em: u8,
    pub context_tokens: usize,
}

fn decode_tokens(traj: &Trajectory) -> Vec<ToyToken> {
    let mut out = Vec::with_capacity(traj.total_tokens());
    let mut seen_info = 0;
    for seg in &traj.segments {
        let state = seen_info.min(N_STATES - 1);
        for t in 0..seg.token_count {
            let choice = (seg.kind == SegmentKind::PolicyText && t == 0).then(|| Choice::decode(&seg.text).index());
            out.push(ToyToken { state, choice });
        }
        if seg.kind == SegmentKind::Information {
            seen_info += 1;
        }
    }
    out
}

fn token_dists(policy: &ToyPolicy, tokens: &[ToyToken]) -> Vec<TokenDist> {
    tokens
        .iter()
        .map(|t| match t.choice {
            Some(c) => policy.dist(t.state, c),
            None => TokenDist::Fixed,
        })
        .collect()
}

/// Freeze a trajectory into a training sample. GAE runs over the policy
/// tokens only, with injected tokens removed from the sequence.
pub fn build_sample(
    traj: &Trajectory,
    gold: &str,
    policy_old: &ToyPolicy,
    reference: &ToyPolicy,
    critic: &[f64],
    config: &PpoConfig,
) -> Result<ToySample, RlError> {
    let mask = compute_token_mask(traj)?;
    let tokens = decode_tokens(traj);
    if tokens.len() != mask.len() {
        return Err(RlError::LengthMismatch(format!("{} decoded tokens vs {} mask entries", tokens.len(), mask.len())));
    }
    let lp = |p: &ToyPolicy| -> Vec<f64> { token_dists(p, &tokens).iter().map(|d| token_logprob_entropy(d).0).collect() };
    let logprob_old = lp(policy_old);
    let logprob_ref = lp(reference);
    let reward = compute_rewards(traj, &[gold], &logprob_old, &logprob_ref, config.kl_beta)?;
    let value_old: Vec<f64> = tokens
        .iter()
        .zip(&mask)
        .map(|(t, &m)| if m == 1 { critic[t.state] } else { 0.0 })
        .collect();

    let idx: Vec<usize> = (0..mask.len()).filter(|&t| mask[t] == 1).collect();
    let r: Vec<f64> = idx.iter().map(|&t| reward[t]).collect();
    let v: Vec<f64> = idx.iter().map(|&t| value_old[t]).collect();
    let (adv, ret) = gae_advantages(&r, &v, config.gamma, config.lambda)?;
    let mut advantage = vec![0.0; mask.len()];
    let mut return_target = vec![0.0; mask.len()];
    for (j, &t) in idx.iter().enumerate() {
        advantage[t] = adv[j];
        return_target[t] = ret[j];
    }
    Ok(ToySample {
        em: em_score(traj.final_answer.as_deref(), &[gold])?,
        context_tokens: traj.total_tokens(),
        tokens,
        mask,
        logprob_old,
        logprob_ref,
        value_old,
        reward,
        advantage,
        return_target,
    })
}

/// Losses and analytic gradients for the current parameters.
#[derive(Debug, Clone)]
pub struct ToyLoss {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub policy_grad: Vec<f64>,
    pub critic_grad: Vec<f64>,
    pub stats: PpoStats,
}

pub fn evaluate_toy_loss(
    policy: &ToyPolicy,
    critic: &[f64],
    samples: &[ToySample],
    config: &PpoConfig,
) -> Result<ToyLoss, RlError> {
    let dists: Vec<Vec<TokenDist>> = samples.iter().map(|s| token_dists(policy, &s.tokens)).collect();
    let seqs: Vec<PpoSequence> = samples
        .iter()
        .zip(&dists)
        .map(|(s, d)| {
            let (logprob_new, entropy): (Vec<f64>, Vec<f64>) = d.iter().map(token_logprob_entropy).unzip();
            PpoSequence {
                logprob_new,
                logprob_old: s.logprob_old.clone(),
                logprob_ref: s.logprob_ref.clone(),
                entropy,
                value: s
                    .tokens
                    .iter()
                    .zip(&s.mask)
                    .map(|(t, &m)| if m == 1 { critic[t.state] } else { 0.0 })
                    .collect(),
                value_old: s.value_old.clone(),
                reward: s.reward.clone(),
                mask: s.mask.clone(),
                advantage: s.advantage.clone(),
                return_target: s.return_target.clone(),
            }
        })
        .collect();
    let out = ppo_loss(&seqs, config)?;

    let mut policy_grad = vec![0.0; N_PARAMS];
    let mut critic_grad = vec![0.0; critic.len()];
    for ((s, d), g) in samples.iter().zip(&dists).zip(&out.grads) {
        for (t, gl) in logits_gradients(d, g).into_iter().enumerate() {
            let state = s.tokens[t].state;
            for (j, x) in gl.into_iter().enumerate() {
                policy_grad[state * N_CHOICES + j] += x;
            }
            critic_grad[state] += g.value[t];
        }
    }
    Ok(ToyLoss {
        policy_loss: out.policy_loss,
        value_loss: out.value_loss,
        policy_grad,
        critic_grad,
        stats: out.stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub ppo: PpoConfig,
    pub rollout: RolloutConfig,
    /// Number of rollout/update iterations.
    pub iterations: usize,
    pub batch_size: usize,
    pub mini_batch_size: usize,
    /// Sentences kept by the extractive condenser.
    pub sentence_budget: usize,
    pub n_facts: usize,
    /// Rollouts per fact in the final evaluation.
    pub eval_samples: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            rollout: RolloutConfig::default(),
            iterations: 200,
            batch_size: 32,
            mini_batch_size: 32,
            sentence_budget: 1,
            n_facts: 16,
            eval_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub mean_em: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean `logp_old - logp_ref` over policy tokens of the batch.
    pub kl_mean: f64,
    pub mean_context_tokens: f64,
    pub mean_turns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEval {
    pub mean_em: f64,
    pub mean_context_tokens: f64,
    pub mean_turns: f64,
    pub rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTraining {
    pub curve: Vec<IterationLog>,
    pub policy: ToyPolicy,
    pub critic: Vec<f64>,
    /// Optimizer steps taken on the policy.
    pub updates: usize,
    /// Mean per-state KL from the initial policy.
    pub drift: f64,
    pub eval: ToyEval,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

fn make_condenser(config: &ToyTrainConfig) -> Arc<dyn Condenser + Send + Sync> {
    if config.rollout.condense {
        Arc::new(ExtractiveCondenser::new(config.sentence_budget))
    } else {
        Arc::new(RawConcatenation::default())
    }
}

/// Sample `eval_samples` rollouts per fact and score them.
pub fn evaluate_toy(env: &ToyEnv, policy: &ToyPolicy, config: &ToyTrainConfig, seed: u64) -> ToyEval {
    let condenser = make_condenser(config);
    let jobs: Vec<(usize, usize)> = (0..env.facts.len())
        .flat_map(|i| (0..config.eval_samples).map(move |k| (i, k)))
        .collect();
    let results: Vec<(u8, usize, usize)> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let traj = env.rollout(policy, condenser.as_ref(), &config.rollout, i, mix_seed(seed, i as u64, k as u64 + 1_000_000));
            let em = em_score(traj.final_answer.as_deref(), &[env.answer(i)]).unwrap_or(0);
            (em, traj.total_tokens(), traj.search_count())
        })
        .collect();
    let n = results.len().max(1) as f64;
    ToyEval {
        mean_em: results.iter().map(|r| f64::from(r.0)).sum::<f64>() / n,
        mean_context_tokens: results.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        mean_turns: results.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        rollouts: results.len(),
    }
}

/// Train the tabular policy with PPO from a uniform start.
pub fn train_toy(config: &ToyTrainConfig) -> Result<ToyTraining, RlError> {
    let ppo = config.ppo;
    ppo.validate()?;
    config.rollout.validate().map_err(|e| RlError::Config(e.to_string()))?;
    if config.batch_size == 0 || config.mini_batch_size == 0 {
        return Err(RlError::Config("batch sizes must be positive".into()));
    }
    let env = ToyEnv::new(config.n_facts)?;
    let condenser = make_condenser(config);
    let reference = ToyPolicy::default();
    let mut policy = reference.clone();
    let mut critic = vec![0.0; N_STATES];
    let mut actor_opt = Adam::new(N_PARAMS, ppo.actor_lr).with_clip(ppo.grad_clip);
    let mut critic_opt = Adam::new(N_STATES, ppo.critic_lr).with_clip(ppo.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(ppo.seed);
    let mut curve = Vec::with_capacity(config.iterations);
    let mut updates = 0;

    for iter in 0..config.iterations {
        let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..env.facts.len())).collect();
        let trajs: Vec<Trajectory> = picks
            .par_iter()
            .enumerate()
            .map(|(j, &i)| env.rollout(&policy, condenser.as_ref(), &config.rollout, i, mix_seed(ppo.seed, iter as u64, j as u64)))
            .collect();
        let mut samples = Vec::with_capacity(trajs.len());
        for (traj, &i) in trajs.iter().zip(&picks) {
            if let Some(e) = &traj.error {
                log::warn!("toy rollout failed: {e}");
                continue;
            }
            samples.push(build_sample(traj, env.answer(i), &policy, &reference, &critic, &ppo)?);
        }
        if samples.is_empty() {
            return Err(RlError::Env(format!("iteration {iter} produced no usable rollouts")));
        }

        let mut last_loss = None;
        for _ in 0..ppo.ppo_epochs {
            for chunk in samples.chunks(config.mini_batch_size) {
                let loss = evaluate_toy_loss(&policy, &critic, chunk, &ppo)?;
                if !loss.policy_loss.is_finite() || !loss.value_loss.is_finite() {
                    return Err(RlError::Diverged(iter));
                }
                actor_opt.step(&mut policy.logits, &loss.policy_grad);
                critic_opt.step(&mut critic, &loss.critic_grad);
                updates += 1;
                last_loss = Some(loss);
            }
        }
        let loss = last_loss.expect("at least one mini-batch");
        let n = samples.len() as f64;
        let (kl_sum, kl_n) = samples.iter().fold((0.0, 0usize), |(s, c), x| {
            let s2: f64 = (0..x.mask.len()).filter(|&t| x.mask[t] == 1).map(|t| x.logprob_old[t] - x.logprob_ref[t]).sum();
            (s + s2, c + x.mask.iter().filter(|&&m| m == 1).count())
        });
        let log = IterationLog {
            iter,
            mean_em: samples.iter().map(|s| f64::from(s.em)).sum::<f64>() / n,
            policy_loss: loss.policy_loss,
            value_loss: loss.value_loss,
            kl_mean: kl_sum / kl_n.max(1) as f64,
            mean_context_tokens: samples.iter().map(|s| s.context_tokens as f64).sum::<f64>() / n,
            mean_turns: trajs.iter().map(|t| t.search_count() as f64).sum::<f64>() / trajs.len() as f64,
        };
        log::debug!("toy iter {iter}: em {:.3} ctx {:.1}", log.mean_em, log.mean_context_tokens);
        curve.push(log);
    }

    let eval = evaluate_toy(&env, &policy, config, ppo.seed);
    Ok(ToyTraining {
        drift: policy.drift_from(&reference),
        curve,
        policy,
        critic,
        updates,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(condense: bool) -> ToyTrainConfig {
        let mut c = ToyTrainConfig::default();
        c.rollout.condense = condense;
        c
    }

    #[test]
    fn expert_policy_trajectory_shape() {
        let env = ToyEnv::new(4).unwrap();
        let mut p = ToyPolicy::default();
        p.logits[Choice::SearchKey.index()] = 50.0;
        p.logits[N_CHOICES + Choice::AnswerFromInfo.index()] = 50.0;
        let traj = env.rollout(&p, &ExtractiveCondenser::new(1), &RolloutConfig::default(), 2, 7);
        assert_eq!(traj.final_answer.as_deref(), Some("v02"));
        assert_eq!(traj.segments[1].text, "<information> The code of k02 is v02. </information>");
        let s = build_sample(&traj, "v02", &p, &ToyPolicy::default(), &[0.0; 3], &PpoConfig::default()).unwrap();
        assert_eq!(s.em, 1);
        assert_eq!(s.mask, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(s.tokens[0].choice, Some(0));
        assert_eq!(s.tokens[13], ToyToken { state: 1, choice: Some(2) });
    }

    #[test]
    fn vocabulary_is_small() {
        let env = ToyEnv::new(16).unwrap();
        assert!(env.policy_vocabulary().len() <= 64);
    }

    #[test]
    fn learns_and_condensed_context_is_smaller() {
        let condensed = train_toy(&quick(true)).unwrap();
        assert!(condensed.updates <= 200);
        assert!(condensed.eval.mean_em >= 0.9, "{:?}", condensed.eval);
        let raw = train_toy(&quick(false)).unwrap();
        assert!(condensed.eval.mean_context_tokens < raw.eval.mean_context_tokens);
    }

    #[test]
    fn strong_kl_penalty_limits_drift() {
        let mut weak = quick(true);
        weak.iterations = 60;
        let mut strong = weak.clone();
        strong.ppo.kl_beta = 10.0;
        let w = train_toy(&weak).unwrap();
        let s = train_toy(&strong).unwrap();
        assert!(s.drift < w.drift, "strong {} weak {}", s.drift, w.drift);
    }
}
