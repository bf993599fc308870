//! Diagnostics over routed rollout batches: update-direction audit,
//! entropy statistics and the wall-clock cost of gating.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid_input, Result};
use crate::gate::{token_dloss_dlogit, Branch, GateConfig, GateDecision, GatedSequence, TokenInputs, Variant};
use crate::trainer::Clock;

/// Direction of the update on LOW tokens of negative-advantage trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DirectionAudit {
    pub n_low_tokens_neg_adv: usize,
    /// Tokens whose loss gradient on the sampled logit is `≥ 0`, so a descent
    /// step does not raise the sampled token's probability.
    pub n_correct_direction: usize,
    /// `None` when there are no qualifying tokens.
    pub fraction: Option<f64>,
}

impl DirectionAudit {
    pub fn merge(self, other: DirectionAudit) -> DirectionAudit {
        let n = self.n_low_tokens_neg_adv + other.n_low_tokens_neg_adv;
        let c = self.n_correct_direction + other.n_correct_direction;
        DirectionAudit {
            n_low_tokens_neg_adv: n,
            n_correct_direction: c,
            fraction: (n > 0).then(|| c as f64 / n as f64),
        }
    }
}

/// Counts, over LOW tokens with `A < 0`, those whose analytic loss gradient
/// with respect to the sampled-token logit is non-negative.
pub fn audit_direction(seqs: &[GatedSequence<'_>], config: &GateConfig) -> Result<DirectionAudit> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for seq in seqs {
        let len = seq.decision.len();
        if seq.old_logprobs.len() != len || seq.new_logprobs.len() != len || seq.decision.phi_weight.len() != len {
            return Err(invalid_input!("audit sequence lengths differ"));
        }
        if seq.advantage >= 0.0 {
            continue;
        }
        for t in 0..len {
            if seq.decision.branches[t] != Branch::Low {
                continue;
            }
            let inputs = TokenInputs {
                branch: Branch::Low,
                new_logprob: seq.new_logprobs[t],
                old_logprob: seq.old_logprobs[t],
                advantage: seq.advantage,
                phi: seq.decision.phi_weight[t],
            };
            n += 1;
            if token_dloss_dlogit(&inputs, config) >= 0.0 {
                correct += 1;
            }
        }
    }
    Ok(DirectionAudit {
        n_low_tokens_neg_adv: n,
        n_correct_direction: correct,
        fraction: (n > 0).then(|| correct as f64 / n as f64),
    })
}

/// Entropy distribution of a routed batch.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntropySummary {
    pub n_tokens: usize,
    /// Nearest-rank quantiles at [`QUANTILE_LEVELS`].
    pub quantiles: Vec<f64>,
    pub frac_high: f64,
    /// Tokens at or above their sequence's threshold; exceeds `frac_high`
    /// only through ties.
    pub frac_above_tau: f64,
    pub mean_entropy_high: Option<f64>,
    pub mean_entropy_low: Option<f64>,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = crate::math::ceil(q * sorted.len() as f64) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

pub fn entropy_report(entropies: &[&[f64]], decisions: &[GateDecision]) -> Result<EntropySummary> {
    if entropies.len() != decisions.len() {
        return Err(invalid_input!(
            "{} sequences but {} decisions",
            entropies.len(),
            decisions.len()
        ));
    }
    let mut all = Vec::new();
    let (mut high_sum, mut high_n, mut low_sum, mut low_n, mut above) = (0.0, 0, 0.0, 0, 0);
    for (h, d) in entropies.iter().zip(decisions) {
        if h.len() != d.len() {
            return Err(invalid_input!("entropy and decision lengths differ"));
        }
        for (&x, b) in h.iter().zip(&d.branches) {
            all.push(x);
            if x >= d.threshold {
                above += 1;
            }
            match b {
                Branch::High => {
                    high_sum += x;
                    high_n += 1;
                }
                Branch::Low => {
                    low_sum += x;
                    low_n += 1;
                }
            }
        }
    }
    if all.is_empty() {
        return Ok(EntropySummary::default());
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    Ok(EntropySummary {
        n_tokens: n,
        quantiles: QUANTILE_LEVELS.iter().map(|&q| quantile(&all, q)).collect(),
        frac_high: high_n as f64 / n as f64,
        frac_above_tau: above as f64 / n as f64,
        mean_entropy_high: mean(high_sum, high_n),
        mean_entropy_low: mean(low_sum, low_n),
    })
}

/// Per-step routing summary.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GateReport {
    pub rho: f64,
    pub variant: Variant,
    pub frac_high: f64,
    pub mean_entropy_high: Option<f64>,
    pub mean_entropy_low: Option<f64>,
    pub mean_phi_low: Option<f64>,
}

pub fn gate_report(entropies: &[&[f64]], decisions: &[GateDecision], config: &GateConfig) -> Result<GateReport> {
    let summary = entropy_report(entropies, decisions)?;
    let (mut phi_sum, mut phi_n) = (0.0, 0);
    for d in decisions {
        for (b, w) in d.branches.iter().zip(&d.phi_weight) {
            if *b == Branch::Low {
                phi_sum += w;
                phi_n += 1;
            }
        }
    }
    Ok(GateReport {
        rho: config.rho,
        variant: config.variant,
        frac_high: summary.frac_high,
        mean_entropy_high: summary.mean_entropy_high,
        mean_entropy_low: summary.mean_entropy_low,
        mean_phi_low: mean(phi_sum, phi_n),
    })
}

/// Timing of the gated loss path against plain PPO on the same batch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OverheadReport {
    pub repetitions: usize,
    pub gated_ms: f64,
    pub uniform_ms: f64,
    /// `gated / uniform − 1`, from per-path medians.
    pub overhead_fraction: f64,
    pub warnings: Vec<String>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `gated` and `uniform` alternately `repetitions` times each, after
/// one untimed warm-up call of each, and compares medians.
pub fn measure_overhead<C: Clock>(
    clock: &C,
    repetitions: usize,
    mut gated: impl FnMut() -> Result<()>,
    mut uniform: impl FnMut() -> Result<()>,
) -> Result<OverheadReport> {
    if repetitions < 5 {
        return Err(invalid_input!(
            "overhead needs at least 5 repetitions, got {repetitions}"
        ));
    }
    gated()?;
    uniform()?;
    let mut g = Vec::with_capacity(repetitions);
    let mut u = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        // alternate which path runs first so drift hits both equally
        let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
            let t0 = clock.now_ms();
            f()?;
            Ok(clock.now_ms() - t0)
        };
        if i % 2 == 0 {
            g.push(time(&mut gated)?);
            u.push(time(&mut uniform)?);
        } else {
            u.push(time(&mut uniform)?);
            g.push(time(&mut gated)?);
        }
    }
    let gated_ms = median(&mut g);
    let uniform_ms = median(&mut u);
    let mut warnings = Vec::new();
    if gated_ms < 1.0 || uniform_ms < 1.0 {
        warnings.push(alloc::format!(
            "batch time below 1 ms (gated {gated_ms:.4} ms, uniform {uniform_ms:.4} ms); timer resolution may dominate"
        ));
    }
    let overhead_fraction = if uniform_ms > 0.0 {
        gated_ms / uniform_ms - 1.0
    } else {
        0.0
    };
    Ok(OverheadReport {
        repetitions,
        gated_ms,
        uniform_ms,
        overhead_fraction,
        warnings,
    })
}
