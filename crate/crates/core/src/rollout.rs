//! Rollout generation, outcome scoring and group-normalised advantages.

use alloc::vec::Vec;

use crate::error::{invalid_input, Result};
use crate::math;
use crate::policy::{sample_next, token_entropy, Policy};
use crate::rng::DetRng;
use crate::tasks::{Reward, RolloutPrompt};

/// One sampled response with its sampling-time statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    /// `log π_old(y_t | y_<t)` of each response token.
    pub old_logprob: Vec<f64>,
    /// Entropy (nats) of the distribution each response token was drawn from.
    pub entropy: Vec<f64>,
    /// `None` until the group is scored.
    pub reward: Option<Reward>,
    pub advantage: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Prompt followed by response.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.response);
        s
    }

    /// Checks the per-token invariants against a vocabulary of `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let n = self.response.len();
        if self.old_logprob.len() != n || self.entropy.len() != n {
            return Err(invalid_input!(
                "response has {n} tokens but {} log-probs and {} entropies",
                self.old_logprob.len(),
                self.entropy.len()
            ));
        }
        let max_h = math::ln(vocab_size as f64) + 1e-9;
        if let Some(t) = self.entropy.iter().position(|h| !(0.0..=max_h).contains(h)) {
            return Err(invalid_input!(
                "entropy {} at token {t} outside [0, ln |V|]",
                self.entropy[t]
            ));
        }
        if let Some(t) = self.old_logprob.iter().position(|lp| !(lp.is_finite() && *lp <= 0.0)) {
            return Err(invalid_input!(
                "log-prob {} at token {t} is not a log-probability",
                self.old_logprob[t]
            ));
        }
        if !self.advantage.is_finite() {
            return Err(invalid_input!("non-finite advantage"));
        }
        Ok(())
    }
}

/// `G` trajectories sharing one prompt.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RolloutGroup {
    pub prompt_id: usize,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Option<Vec<Reward>> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    /// True when every trajectory received the same reward.
    pub fn is_uniform(&self) -> bool {
        match self.trajectories.first().and_then(|t| t.reward) {
            Some(r) => self.trajectories.iter().all(|t| t.reward == Some(r)),
            None => false,
        }
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Samples one response. Entropy and `old_logprob` come from the untempered
/// distribution; `temperature` only shapes the draw.
pub fn sample_trajectory(
    policy: &Policy,
    prompt: &[usize],
    temperature: f64,
    max_len: usize,
    rng: &mut DetRng,
) -> Result<Trajectory> {
    policy.check_context(prompt)?;
    let mut ctx = prompt.to_vec();
    let mut response = Vec::new();
    let mut old_logprob = Vec::new();
    let mut entropy = Vec::new();
    while response.len() < max_len && ctx.len() < policy.context_len() {
        let dist = policy.forward_dist(&ctx)?;
        let tok = sample_next(&dist, temperature, rng)?;
        old_logprob.push(dist.log_probs[tok]);
        entropy.push(token_entropy(&dist));
        response.push(tok);
        ctx.push(tok);
        if tok == policy.vocab.eos {
            break;
        }
    }
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        response,
        old_logprob,
        entropy,
        reward: None,
        advantage: 0.0,
    })
}

/// Draws `g` independent responses to `prompt`.
pub fn generate_group(
    policy: &Policy,
    prompt: &RolloutPrompt,
    g: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut DetRng,
) -> Result<RolloutGroup> {
    if g < 2 {
        return Err(invalid_input!("group size {g} < 2"));
    }
    if max_len == 0 {
        return Err(invalid_input!("max_len must be >= 1"));
    }
    let trajectories = (0..g)
        .map(|_| sample_trajectory(policy, &prompt.prompt, temperature, max_len, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        prompt_id: prompt.id,
        trajectories,
    })
}

/// `A_i = (r_i − μ) / (σ + eps)` with the population standard deviation.
pub fn group_advantage(rewards: &[Reward], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid_input!("group size {} < 2", rewards.len()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid_input!("eps must be positive"));
    }
    let n = rewards.len() as f64;
    let r: Vec<f64> = rewards.iter().map(|r| r.value()).collect();
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = math::sqrt(var) + eps;
    Ok(r.iter().map(|x| (x - mean) / denom).collect())
}

/// Fills rewards with `verifier` and broadcasts each trajectory's advantage.
pub fn score_group(group: &mut RolloutGroup, verifier: impl Fn(&[usize]) -> Reward, eps: f64) -> Result<()> {
    for t in &mut group.trajectories {
        t.reward = Some(verifier(&t.response));
    }
    let rewards: Vec<Reward> = group.trajectories.iter().filter_map(|t| t.reward).collect();
    let adv = group_advantage(&rewards, eps)?;
    for (t, a) in group.trajectories.iter_mut().zip(adv) {
        t.advantage = a;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ModelConfig, PolicyParams};
    use crate::tasks::{self, verify_answer, TaskInstance};
    use alloc::vec;
    use Reward::{Correct as P, Incorrect as N};

    fn policy(seed: u64) -> Policy {
        let cfg = ModelConfig {
            vocab_size: 17,
            d_model: 8,
            n_blocks: 1,
            mlp_hidden: 8,
            context_len: 24,
        };
        let params = PolicyParams::init(cfg, &mut DetRng::new(seed, 0)).unwrap();
        Policy::new(tasks::vocab(), params).unwrap()
    }

    fn prompt() -> RolloutPrompt {
        RolloutPrompt::from(&TaskInstance::new(12, 34, 2))
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[P; 8], 1e-4).unwrap(), vec![0.0; 8]);
        let pair = group_advantage(&[P, N], 1e-12).unwrap();
        assert!((pair[0] - 1.0).abs() < 1e-10 && (pair[1] + 1.0).abs() < 1e-10);
        let split = group_advantage(&[P, P, P, P, N, N, N, N], 1e-4).unwrap();
        // μ = 0, σ = 1: ±1 / 1.0001
        let expect = 1.0 / 1.0001;
        for (i, a) in split.iter().enumerate() {
            let e = if i < 4 { expect } else { -expect };
            assert!((a - e).abs() < 1e-12);
        }
        assert!(group_advantage(&[P], 1e-4).is_err());
    }

    #[test]
    fn groups_are_deterministic_and_sized() {
        let p = policy(1);
        let a = generate_group(&p, &prompt(), 8, 1.0, 12, &mut DetRng::new(5, 1)).unwrap();
        let b = generate_group(&p, &prompt(), 8, 1.0, 12, &mut DetRng::new(5, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectories.len(), 8);
        for t in &a.trajectories {
            t.validate(17).unwrap();
            assert!(t.len() <= 12 && !t.is_empty());
        }
        assert!(generate_group(&p, &prompt(), 1, 1.0, 12, &mut DetRng::new(5, 1)).is_err());
    }

    #[test]
    fn old_logprobs_match_a_fresh_evaluation() {
        let p = policy(2);
        let g = generate_group(&p, &prompt(), 4, 1.3, 15, &mut DetRng::new(9, 1)).unwrap();
        for t in &g.trajectories {
            let rows = p.log_probs(&t.full_sequence()).unwrap();
            for (i, &tok) in t.response.iter().enumerate() {
                let lp = rows[t.prompt.len() + i - 1][tok];
                assert!((lp - t.old_logprob[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn near_one_hot_policy_has_tiny_entropy() {
        let mut p = policy(3);
        let b_out = p.params.layout().b_out;
        for i in b_out.range() {
            p.params.set(i, 0.0).unwrap();
        }
        p.params.set(b_out.offset + 3, 60.0).unwrap();
        let g = generate_group(&p, &prompt(), 2, 1.0, 6, &mut DetRng::new(0, 1)).unwrap();
        for t in &g.trajectories {
            assert!(t.entropy.iter().all(|&h| h < 0.01));
        }
    }

    #[test]
    fn scoring_signs_and_sums() {
        let p = policy(4);
        let pr = prompt();
        let mut g = generate_group(&p, &pr, 8, 1.0, 12, &mut DetRng::new(1, 1)).unwrap();
        // alternate rewards by position so the group is mixed
        let responses: Vec<Vec<usize>> = g.trajectories.iter().map(|t| t.response.clone()).collect();
        score_group(
            &mut g,
            |r| {
                if responses.iter().position(|x| x == r).unwrap_or(0) % 2 == 0 {
                    P
                } else {
                    N
                }
            },
            1e-4,
        )
        .unwrap();
        let sum: f64 = g.trajectories.iter().map(|t| t.advantage).sum();
        assert!(sum.abs() < 1e-9);
        for t in &g.trajectories {
            match t.reward.unwrap() {
                P => assert!(t.advantage >= 0.0),
                N => assert!(t.advantage <= 0.0),
            }
        }
        let mut all_wrong = g.clone();
        score_group(&mut all_wrong, |r| verify_answer(u64::MAX, r), 1e-4).unwrap();
        assert!(all_wrong.is_uniform());
        assert!(all_wrong.trajectories.iter().all(|t| t.advantage == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn advantages_are_centred(bits in proptest::collection::vec(proptest::bool::ANY, 2..32)) {
            let rewards: Vec<Reward> = bits.iter().map(|&b| if b { P } else { N }).collect();
            let adv = group_advantage(&rewards, 1e-4).unwrap();
            proptest::prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
            let mixed = bits.iter().any(|&b| b) && bits.iter().any(|&b| !b);
            for (r, a) in rewards.iter().zip(&adv) {
                match (r, mixed) {
                    (P, true) => proptest::prop_assert!(*a > 0.0),
                    (N, true) => proptest::prop_assert!(*a < 0.0),
                    _ => proptest::prop_assert_eq!(*a, 0.0),
                }
            }
        }
    }
}
