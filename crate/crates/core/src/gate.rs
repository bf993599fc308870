//! Entropy-gated token loss.
//!
//! Each rollout's response tokens are routed per sequence: the
//! `k = ⌈ρ·T⌉` highest-entropy tokens go to the HIGH branch (full clipped
//! PPO), the rest to the LOW branch (`φ(p) · PPO`, `φ(p) = p(1 − p)`).
//! Ties in entropy go to the earlier position. Both branches carry the
//! advantage, so for `A < 0` no token's probability is pushed up.
//!
//! The ablation variants swap pieces of this:
//!
//! | variant              | HIGH    | LOW                     |
//! |----------------------|---------|-------------------------|
//! | `FullEgspo`          | PPO     | φ · PPO                 |
//! | `UniformPpo`         | PPO     | PPO                     |
//! | `NoAdvLowBranch`     | PPO     | φ · (−log π), no A      |
//! | `RandomSelection`    | PPO     | φ · PPO, random HIGH set |

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::math;
use crate::rng::DetRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum Variant {
    FullEgspo,
    UniformPpo,
    NoAdvLowBranch,
    RandomSelection,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FullEgspo,
        Variant::UniformPpo,
        Variant::NoAdvLowBranch,
        Variant::RandomSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullEgspo => "FULL_EGSPO",
            Variant::UniformPpo => "UNIFORM_PPO",
            Variant::NoAdvLowBranch => "NO_ADV_LOW_BRANCH",
            Variant::RandomSelection => "RANDOM_SELECTION",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid_config!("unknown variant {s:?}"))
    }
}

/// Which probability feeds the LOW-branch weight `φ(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PhiSource {
    /// Probability under the frozen snapshot; a constant weight.
    #[default]
    Snapshot,
    /// Probability under the current parameters, treated as a constant.
    LiveDetached,
    /// Probability under the current parameters, differentiated through.
    LiveDifferentiable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GateConfig {
    pub rho: f64,
    pub clip_eps: f64,
    pub variant: Variant,
    pub phi_source: PhiSource,
    /// Weight of a per-token `log π_new − log π_old` penalty; `0` disables it.
    pub kl_coef: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            rho: 0.10,
            clip_eps: 0.2,
            variant: Variant::FullEgspo,
            phi_source: PhiSource::Snapshot,
            kl_coef: 0.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(invalid_config!("rho {} must lie in (0, 1)", self.rho));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid_config!("clip_eps {} must lie in (0, 1)", self.clip_eps));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(invalid_config!("kl_coef {} must be finite and >= 0", self.kl_coef));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    High,
    Low,
}

/// Routing outcome for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub branches: Vec<Branch>,
    /// Smallest entropy in the HIGH set.
    pub threshold: f64,
    /// `φ(p_old)` on LOW tokens, `1` on HIGH tokens.
    pub phi_weight: Vec<f64>,
}

impl GateDecision {
    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn high_count(&self) -> usize {
        self.branches.iter().filter(|&&b| b == Branch::High).count()
    }

    /// Fills `phi_weight` from per-token log-probabilities.
    pub fn with_phi_from_logprobs(mut self, log_probs: &[f64]) -> Result<Self> {
        if log_probs.len() != self.branches.len() {
            return Err(invalid_input!("log-prob length does not match decision"));
        }
        self.phi_weight = self
            .branches
            .iter()
            .zip(log_probs)
            .map(|(b, &lp)| match b {
                Branch::High => 1.0,
                Branch::Low => math::p_one_minus_p(lp),
            })
            .collect();
        Ok(self)
    }
}

/// Number of HIGH tokens for a sequence of `len` tokens.
pub fn high_count(rho: f64, len: usize) -> usize {
    let k = math::ceil(rho * len as f64) as usize;
    k.clamp(1, len)
}

/// Routes one sequence's tokens by entropy. With `random` set, the HIGH set
/// is `k` positions drawn uniformly instead.
pub fn route_tokens(entropies: &[f64], rho: f64, random: Option<&mut DetRng>) -> Result<GateDecision> {
    if entropies.is_empty() {
        return Err(invalid_input!("cannot route an empty sequence"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid_input!("rho {rho} must lie in (0, 1)"));
    }
    if let Some(i) = entropies.iter().position(|h| !h.is_finite()) {
        return Err(invalid_input!("non-finite entropy at {i}"));
    }
    let n = entropies.len();
    let k = high_count(rho, n);
    let mut order: Vec<usize> = (0..n).collect();
    match random {
        Some(rng) => {
            rng.shuffle(&mut order);
        }
        None => {
            // stable sort keeps earlier positions first among equal entropies
            order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]));
        }
    }
    let mut branches = vec![Branch::Low; n];
    let mut threshold = f64::INFINITY;
    for &i in &order[..k] {
        branches[i] = Branch::High;
        threshold = threshold.min(entropies[i]);
    }
    Ok(GateDecision {
        branches,
        threshold,
        phi_weight: vec![1.0; n],
    })
}

/// `φ(p) = p(1 − p)`.
pub fn phi(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid_input!("phi needs p in [0, 1], got {p}"));
    }
    Ok(p * (1.0 - p))
}

/// `−min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn ppo_token_loss(ratio: f64, advantage: f64, clip_eps: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(invalid_input!("ratio must be finite and positive, got {ratio}"));
    }
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    Ok(-(ratio * advantage).min(clipped * advantage))
}

/// `∂ ppo_token_loss / ∂ log π_new`, matching the tape's subgradient choice
/// (ties in `min` go to the unclipped term; `clip` passes on the closed
/// interval).
pub fn ppo_dloss_dlogp(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let (lo, hi) = (1.0 - clip_eps, 1.0 + clip_eps);
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(lo, hi) * advantage;
    let d_surrogate = if unclipped <= clipped || (lo..=hi).contains(&ratio) {
        advantage * ratio
    } else {
        0.0
    };
    -d_surrogate
}

/// Per-token inputs to the gated loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenInputs {
    pub branch: Branch,
    pub new_logprob: f64,
    pub old_logprob: f64,
    pub advantage: f64,
    /// `φ` weight already evaluated for LOW tokens.
    pub phi: f64,
}

impl TokenInputs {
    pub fn ratio(&self) -> f64 {
        math::exp(self.new_logprob - self.old_logprob)
    }
}

/// Loss of one token under `config.variant`.
pub fn token_loss(t: &TokenInputs, config: &GateConfig) -> Result<f64> {
    let ppo = ppo_token_loss(t.ratio(), t.advantage, config.clip_eps)?;
    let core = match (config.variant, t.branch) {
        (_, Branch::High) | (Variant::UniformPpo, _) => ppo,
        (Variant::FullEgspo | Variant::RandomSelection, Branch::Low) => t.phi * ppo,
        (Variant::NoAdvLowBranch, Branch::Low) => -t.phi * t.new_logprob,
    };
    Ok(core + config.kl_coef * (t.new_logprob - t.old_logprob))
}

/// `∂ token_loss / ∂ log π_new` with `φ` held constant.
pub fn token_dloss_dlogp(t: &TokenInputs, config: &GateConfig) -> f64 {
    let ppo = ppo_dloss_dlogp(t.ratio(), t.advantage, config.clip_eps);
    let core = match (config.variant, t.branch) {
        (_, Branch::High) | (Variant::UniformPpo, _) => ppo,
        (Variant::FullEgspo | Variant::RandomSelection, Branch::Low) => t.phi * ppo,
        (Variant::NoAdvLowBranch, Branch::Low) => -t.phi,
    };
    core + config.kl_coef
}

/// `∂ token_loss / ∂ z_y` for the sampled token's logit `z_y`:
/// `∂L/∂ log π · (1 − π)`.
pub fn token_dloss_dlogit(t: &TokenInputs, config: &GateConfig) -> f64 {
    token_dloss_dlogp(t, config) * -math::expm1(t.new_logprob)
}

/// One rollout sequence as seen by the gated loss.
#[derive(Debug, Clone, Copy)]
pub struct GatedSequence<'a> {
    pub decision: &'a GateDecision,
    pub old_logprobs: &'a [f64],
    pub new_logprobs: &'a [f64],
    pub advantage: f64,
}

fn token_inputs<'a>(seq: &'a GatedSequence<'a>) -> Result<impl Iterator<Item = TokenInputs> + 'a> {
    let n = seq.decision.len();
    if seq.old_logprobs.len() != n || seq.new_logprobs.len() != n || seq.decision.phi_weight.len() != n {
        return Err(invalid_input!("gate decision and log-prob lengths differ"));
    }
    Ok((0..n).map(move |t| TokenInputs {
        branch: seq.decision.branches[t],
        new_logprob: seq.new_logprobs[t],
        old_logprob: seq.old_logprobs[t],
        advantage: seq.advantage,
        phi: seq.decision.phi_weight[t],
    }))
}

/// Flat mean of [`token_loss`] over every token of every sequence.
pub fn entropy_gated_loss(seqs: &[GatedSequence<'_>], config: &GateConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        for t in token_inputs(seq)? {
            total += token_loss(&t, config)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid_input!("gated loss over zero tokens"));
    }
    Ok(total / count as f64)
}

/// Records `scale · Σ_t token_loss(t)` for one sequence on the tape.
///
/// `new_logprob` is the `T × 1` node of the sampled tokens' current
/// log-probabilities. `phi_weight` in the decision is used for
/// [`PhiSource::Snapshot`] and [`PhiSource::LiveDetached`] (the caller fills
/// it from the matching probabilities); with
/// [`PhiSource::LiveDifferentiable`] the weight is rebuilt on the tape from
/// `new_logprob`.
pub fn record_gated_sum(
    tape: &mut Tape,
    new_logprob: Var,
    old_logprobs: &[f64],
    decision: &GateDecision,
    advantage: f64,
    config: &GateConfig,
    scale: f64,
) -> Result<Var> {
    let n = decision.len();
    if tape.shape(new_logprob) != (n, 1) || old_logprobs.len() != n {
        return Err(invalid_input!("gated loss length mismatch"));
    }
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);

    // weights on the PPO term and on the bare −log π term
    let mut ppo_w = vec![0.0; n];
    let mut nll_w = vec![0.0; n];
    let mut live_low = vec![0.0; n];
    for t in 0..n {
        let low = decision.branches[t] == Branch::Low;
        match (config.variant, low) {
            (_, false) | (Variant::UniformPpo, true) => ppo_w[t] = 1.0,
            (Variant::FullEgspo | Variant::RandomSelection, true) => {
                if config.phi_source == PhiSource::LiveDifferentiable {
                    live_low[t] = 1.0;
                } else {
                    ppo_w[t] = decision.phi_weight[t];
                }
            }
            (Variant::NoAdvLowBranch, true) => nll_w[t] = decision.phi_weight[t],
        }
    }

    let neg_old: Vec<f64> = old_logprobs.iter().map(|x| -x).collect();
    let log_ratio = tape.add_const(new_logprob, &neg_old);
    let ratio = tape.exp(log_ratio);
    let adv = vec![advantage; n];
    let surr = tape.mul_const(ratio, &adv);
    let clipped = tape.clamp(ratio, lo, hi);
    let surr_clipped = tape.mul_const(clipped, &adv);
    let objective = tape.min(surr, surr_clipped);

    let ppo_scale: Vec<f64> = ppo_w.iter().map(|w| -w * scale).collect();
    let mut total = {
        let weighted = tape.mul_const(objective, &ppo_scale);
        tape.sum(weighted)
    };

    if live_low.iter().any(|&x| x != 0.0) {
        // φ(p) = p − p², p = exp(log π_new), on LOW tokens only
        let p = tape.exp(new_logprob);
        let p2 = tape.mul(p, p);
        let neg_p2 = tape.scale(p2, -1.0);
        let phi_node = tape.add(p, neg_p2);
        let w = tape.mul_const(phi_node, &live_low);
        let term = tape.mul(objective, w);
        let term = tape.sum(term);
        let term = tape.scale(term, -scale);
        total = tape.add(total, term);
    }

    if config.kl_coef != 0.0 {
        let term = tape.sum(log_ratio);
        let term = tape.scale(term, config.kl_coef * scale);
        total = tape.add(total, term);
    }

    if nll_w.iter().any(|&x| x != 0.0) {
        let nll_scale: Vec<f64> = nll_w.iter().map(|w| -w * scale).collect();
        let weighted = tape.mul_const(new_logprob, &nll_scale);
        let term = tape.sum(weighted);
        total = tape.add(total, term);
    }
    Ok(total)
}
