use super::RlError;

/// Generalized advantage estimates and return targets over one token
/// sequence, bootstrapping from a terminal value of zero.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    if rewards.len() != values.len() {
        return Err(RlError::LengthMismatch(format!(
            "{} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_traced_fixture() {
        let (a, r) = gae_advantages(&[0.0, 0.0, 1.0], &[0.2, 0.5, 0.4], 1.0, 1.0).unwrap();
        for (x, y) in a.iter().zip([0.8, 0.5, 0.6]) {
            assert!((x - y).abs() < 1e-12);
        }
        for x in r {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeros_and_gamma_zero() {
        let (a, r) = gae_advantages(&[0.0; 4], &[0.0; 4], 1.0, 1.0).unwrap();
        assert!(a.iter().chain(&r).all(|&x| x == 0.0));
        let rw = [0.3, -1.0, 2.0];
        let v = [0.5, 0.25, -0.75];
        let (a, _) = gae_advantages(&rw, &v, 0.0, 0.7).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], rw[t] - v[t]);
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            gae_advantages(&[0.0], &[0.0, 1.0], 1.0, 1.0),
            Err(RlError::LengthMismatch(_))
        ));
    }
}
