use crate::evalkit::em_score;
use crate::rollout::{SegmentKind, Trajectory};

use super::RlError;

/// One entry per response token: 1 where the policy produced the token, 0
/// for injected information blocks and rethink strings.
pub fn compute_token_mask(traj: &Trajectory) -> Result<Vec<u8>, RlError> {
    let mask: Vec<u8> = traj
        .segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(u8::from(s.kind == SegmentKind::PolicyText), s.token_count))
        .collect();
    if !mask.contains(&1) {
        return Err(RlError::NoPolicyTokens);
    }
    Ok(mask)
}

/// Per-token rewards: a KL penalty `-beta * (logp_new - logp_ref)` on every
/// policy token, plus the exact-match outcome on the final policy token.
pub fn compute_rewards<S: AsRef<str>>(
    traj: &Trajectory,
    gold: &[S],
    logprob_new: &[f64],
    logprob_ref: &[f64],
    beta: f64,
) -> Result<Vec<f64>, RlError> {
    let mask = compute_token_mask(traj)?;
    if logprob_new.len() != mask.len() || logprob_ref.len() != mask.len() {
        return Err(RlError::LengthMismatch(format!(
            "{} tokens, {} new log-probs, {} reference log-probs",
            mask.len(),
            logprob_new.len(),
            logprob_ref.len()
        )));
    }
    let mut rewards: Vec<f64> = mask
        .iter()
        .enumerate()
        .map(|(t, &m)| if m == 1 { -beta * (logprob_new[t] - logprob_ref[t]) } else { 0.0 })
        .collect();
    let em = em_score(traj.final_answer.as_deref(), gold)?;
    let last = mask.iter().rposition(|&m| m == 1).expect("mask has a policy token");
    rewards[last] += f64::from(em);
    Ok(rewards)
}
