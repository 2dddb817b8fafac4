//! Clipped PPO objective with token-level loss masking.
//!
//! Per sequence the objective is `(1/|y|) * sum_t mask_t * min(r_t A_t,
//! clip(r_t, 1-eps, 1+eps) A_t)` with `r_t = exp(logp_new - logp_old)`; the
//! policy loss is its negation (plus the entropy bonus) averaged over
//! sequences. Gradients are analytic and returned per token, so callers can
//! chain them into whatever parameterization produced the log-probabilities.

use serde::{Deserialize, Serialize};

use super::{PpoConfig, RlError};

/// Token-aligned arrays for one trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoSequence {
    /// Current policy log-probability of each token.
    pub logprob_new: Vec<f64>,
    /// Snapshot policy that generated the rollout.
    pub logprob_old: Vec<f64>,
    pub logprob_ref: Vec<f64>,
    /// Current policy entropy at each position.
    pub entropy: Vec<f64>,
    /// Current critic estimate.
    pub value: Vec<f64>,
    /// Critic estimate at collection time.
    pub value_old: Vec<f64>,
    pub reward: Vec<f64>,
    /// 1 for policy-generated tokens, 0 for injected ones.
    pub mask: Vec<u8>,
    pub advantage: Vec<f64>,
    pub return_target: Vec<f64>,
}

impl PpoSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn check(&self) -> Result<(), RlError> {
        let n = self.mask.len();
        let lens = [
            ("logprob_new", self.logprob_new.len()),
            ("logprob_old", self.logprob_old.len()),
            ("logprob_ref", self.logprob_ref.len()),
            ("entropy", self.entropy.len()),
            ("value", self.value.len()),
            ("value_old", self.value_old.len()),
            ("reward", self.reward.len()),
            ("advantage", self.advantage.len()),
            ("return_target", self.return_target.len()),
        ];
        match lens.iter().find(|(_, l)| *l != n) {
            Some((name, l)) => Err(RlError::LengthMismatch(format!("{name} has {l} entries, mask has {n}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    /// Clipped surrogate objective (before negation).
    pub objective: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Mean `logp_old - logp_new` over masked-in tokens.
    pub approx_kl: f64,
    pub masked_tokens: usize,
}

/// Per-token derivatives of the total loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceGrad {
    pub logprob: Vec<f64>,
    pub entropy: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutput {
    /// `-(objective + entropy_coeff * entropy)`.
    pub policy_loss: f64,
    /// Clipped squared error, token mean over masked-in tokens.
    pub value_loss: f64,
    pub stats: PpoStats,
    pub grads: Vec<SequenceGrad>,
}

/// Policy and value losses for a batch of sequences, with gradients.
pub fn ppo_loss(batch: &[PpoSequence], config: &PpoConfig) -> Result<PpoOutput, RlError> {
    for s in batch {
        s.check()?;
    }
    let masked_total: usize = batch
        .iter()
        .map(|s| s.mask.iter().filter(|&&m| m != 0).count())
        .sum();
    if batch.is_empty() || masked_total == 0 {
        return Err(RlError::NoPolicyTokens);
    }
    let eps = config.clip_epsilon;
    let n_seq = batch.len() as f64;
    let vclip = config.value_cliprange;

    let mut objective = 0.0;
    let mut entropy = 0.0;
    let mut value_loss = 0.0;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    let mut grads = Vec::with_capacity(batch.len());

    for (si, s) in batch.iter().enumerate() {
        let n = s.len();
        // sum over masked tokens / |y|, then mean over sequences
        let w = 1.0 / (n as f64 * n_seq);
        let mut g = SequenceGrad {
            logprob: vec![0.0; n],
            entropy: vec![0.0; n],
            value: vec![0.0; n],
        };
        let mut seq_obj = 0.0;
        let mut seq_ent = 0.0;
        for t in (0..n).filter(|&t| s.mask[t] != 0) {
            let log_ratio = s.logprob_new[t] - s.logprob_old[t];
            let ratio = log_ratio.exp();
            if !ratio.is_finite() {
                return Err(RlError::NonFiniteRatio { sequence: si, token: t });
            }
            let adv = s.advantage[t];
            let unclipped = ratio * adv;
            let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
            let clipped_term = clipped_ratio * adv;
            let (term, d_ratio) = if unclipped <= clipped_term {
                (unclipped, adv)
            } else {
                clipped += 1;
                let inside = ratio > 1.0 - eps && ratio < 1.0 + eps;
                (clipped_term, if inside { adv } else { 0.0 })
            };
            seq_obj += term;
            seq_ent += s.entropy[t];
            kl -= log_ratio;
            g.logprob[t] = -w * d_ratio * ratio;
            g.entropy[t] = -w * config.entropy_coeff;

            let v = s.value[t];
            let ret = s.return_target[t];
            let v_clipped = s.value_old[t] + (v - s.value_old[t]).clamp(-vclip, vclip);
            let (e1, e2) = (v - ret, v_clipped - ret);
            let inv = 1.0 / masked_total as f64;
            if e1 * e1 >= e2 * e2 {
                value_loss += 0.5 * e1 * e1 * inv;
                g.value[t] = e1 * inv;
            } else {
                value_loss += 0.5 * e2 * e2 * inv;
                let inside = (v - s.value_old[t]).abs() < vclip;
                g.value[t] = if inside { e2 * inv } else { 0.0 };
            }
        }
        objective += seq_obj / n as f64 / n_seq;
        entropy += seq_ent / n as f64 / n_seq;
        grads.push(g);
    }

    Ok(PpoOutput {
        policy_loss: -(objective + config.entropy_coeff * entropy),
        value_loss,
        stats: PpoStats {
            objective,
            entropy,
            clip_fraction: clipped as f64 / masked_total as f64,
            approx_kl: kl / masked_total as f64,
            masked_tokens: masked_total,
        },
        grads,
    })
}

/// How a position's token was produced.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenDist {
    /// Sampled from `softmax(logits)`.
    Categorical { logits: Vec<f64>, chosen: usize },
    /// Deterministic given the context: log-probability 0, entropy 0, no parameters.
    Fixed,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Log-probability of the chosen token and the distribution's entropy.
pub fn token_logprob_entropy(dist: &TokenDist) -> (f64, f64) {
    match dist {
        TokenDist::Fixed => (0.0, 0.0),
        TokenDist::Categorical { logits, chosen } => {
            let p = softmax(logits);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            let entropy = -logits
                .iter()
                .zip(&p)
                .map(|(l, pi)| pi * (l - lse))
                .sum::<f64>();
            (logits[*chosen] - lse, entropy)
        }
    }
}

/// Chain per-token loss derivatives (w.r.t. log-probability and entropy)
/// into derivatives w.r.t. each position's logits. Positions whose incoming
/// derivatives are both zero get an exact zero vector.
pub fn logits_gradients(dists: &[TokenDist], grad: &SequenceGrad) -> Vec<Vec<f64>> {
    dists
        .iter()
        .enumerate()
        .map(|(t, d)| match d {
            TokenDist::Fixed => Vec::new(),
            TokenDist::Categorical { logits, chosen } => {
                let (g_lp, g_ent) = (grad.logprob[t], grad.entropy[t]);
                if g_lp == 0.0 && g_ent == 0.0 {
                    return vec![0.0; logits.len()];
                }
                let p = softmax(logits);
                let (_, h) = token_logprob_entropy(d);
                (0..logits.len())
                    .map(|j| {
                        let onehot = if j == *chosen { 1.0 } else { 0.0 };
                        let log_p = if p[j] > 0.0 { p[j].ln() } else { 0.0 };
                        g_lp * (onehot - p[j]) - g_ent * p[j] * (log_p + h)
                    })
                    .collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(adv: &[f64], lp_new: &[f64], mask: &[u8]) -> PpoSequence {
        let n = adv.len();
        PpoSequence {
            logprob_new: lp_new.to_vec(),
            logprob_old: vec![0.0; n],
            logprob_ref: vec![0.0; n],
            entropy: vec![0.0; n],
            value: vec![0.0; n],
            value_old: vec![0.0; n],
            reward: vec![0.0; n],
            mask: mask.to_vec(),
            advantage: adv.to_vec(),
            return_target: vec![0.0; n],
        }
    }

    #[test]
    fn unit_ratio_gives_masked_advantage_mean() {
        let s = seq(&[1.0, 2.0, 4.0, 8.0], &[0.0; 4], &[1, 0, 1, 1]);
        let out = ppo_loss(&[s], &PpoConfig::default()).unwrap();
        assert!((out.stats.objective - 13.0 / 4.0).abs() < 1e-12);
        assert_eq!(out.stats.clip_fraction, 0.0);
    }

    #[test]
    fn clip_caps_positive_advantage() {
        let s = seq(&[3.0], &[2f64.ln()], &[1]);
        let out = ppo_loss(&[s], &PpoConfig::default()).unwrap();
        assert!((out.stats.objective - 1.2 * 3.0).abs() < 1e-12);
        assert_eq!(out.grads[0].logprob[0], 0.0);
        assert_eq!(out.stats.clip_fraction, 1.0);
    }

    #[test]
    fn negative_advantage_keeps_unclipped_large_ratio() {
        let s = seq(&[-1.0], &[2f64.ln()], &[1]);
        let out = ppo_loss(&[s], &PpoConfig::default()).unwrap();
        assert!((out.stats.objective + 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let s = seq(&[1.0], &[0.0], &[0]);
        assert_eq!(ppo_loss(&[s], &PpoConfig::default()).unwrap_err(), RlError::NoPolicyTokens);
        let s = seq(&[1.0, 1.0], &[0.0, 1000.0], &[1, 1]);
        assert_eq!(
            ppo_loss(&[s], &PpoConfig::default()).unwrap_err(),
            RlError::NonFiniteRatio { sequence: 0, token: 1 }
        );
        let mut s = seq(&[1.0], &[0.0], &[1]);
        s.value.clear();
        assert!(matches!(ppo_loss(&[s], &PpoConfig::default()), Err(RlError::LengthMismatch(_))));
    }

    #[test]
    fn value_clipping() {
        let mut s = seq(&[0.0], &[0.0], &[1]);
        s.value = vec![2.0];
        s.value_old = vec![0.0];
        s.return_target = vec![0.0];
        let out = ppo_loss(&[s], &PpoConfig::default()).unwrap();
        // unclipped error 2 dominates clipped error 0.5
        assert!((out.value_loss - 2.0).abs() < 1e-12);
        assert_eq!(out.grads[0].value[0], 2.0);
    }

    #[test]
    fn categorical_stats() {
        let d = TokenDist::Categorical {
            logits: vec![0.0; 4],
            chosen: 2,
        };
        let (lp, h) = token_logprob_entropy(&d);
        assert!((lp + 4f64.ln()).abs() < 1e-12);
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert_eq!(token_logprob_entropy(&TokenDist::Fixed), (0.0, 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn per_token_term_within_clip_bounds(lr in -2.0f64..2.0, adv in -5.0f64..5.0) {
                let s = seq(&[adv], &[lr], &[1]);
                let out = ppo_loss(&[s], &PpoConfig::default()).unwrap();
                let r = lr.exp();
                let cands = [r * adv, 0.8 * adv, 1.2 * adv];
                let lo = cands.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.stats.objective >= lo - 1e-12 && out.stats.objective <= hi + 1e-12);
            }
        }
    }
}
