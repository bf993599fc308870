//! Stage 1: teacher-forced cross-entropy on expert demonstrations.
//!
//! [`SftBatch`] can only be built from [`TaskInstance`]s, so the SFT loss is
//! always evaluated on expert contexts and never on rollout-generated ones.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::policy::{apply_update, OptimizerConfig, OptimizerState, ParamVars, Policy};
use crate::rng::DetRng;
use crate::tape::{Tape, Var};
use crate::tasks::{verify, Reward, TaskInstance};

/// Expert sequences with their response masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SftBatch {
    items: Vec<SftItem>,
}

#[derive(Debug, Clone, PartialEq)]
struct SftItem {
    tokens: Vec<usize>,
    prompt_len: usize,
}

impl SftBatch {
    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a TaskInstance>) -> Self {
        let items = instances
            .into_iter()
            .map(|t| SftItem {
                tokens: t.full_sequence(),
                prompt_len: t.prompt.len(),
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of supervised (response) tokens.
    pub fn token_count(&self) -> usize {
        self.items.iter().map(|i| i.tokens.len() - i.prompt_len).sum()
    }

    /// Per-position loss mask of sequence `i`: `true` on expert response
    /// tokens, `false` on the prompt.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        let it = &self.items[i];
        (0..it.tokens.len()).map(|p| p >= it.prompt_len).collect()
    }
}

/// Records `Σ −log π(y_t | context)` over the response tokens of one expert
/// sequence. Returns the `1 × 1` sum and the logits node.
pub(crate) fn record_nll(
    policy: &Policy,
    tape: &mut Tape,
    pv: &ParamVars,
    tokens: &[usize],
    prompt_len: usize,
) -> Result<(Var, Var)> {
    let n = tokens.len();
    if prompt_len == 0 || prompt_len >= n {
        return Err(Error::InvalidBatch("sequence has no response tokens".into()));
    }
    let logits = policy.forward_tape(tape, pv, &tokens[..n - 1])?;
    let lp = tape.log_softmax(logits);
    // row r predicts token r + 1
    let rows: Vec<usize> = (prompt_len - 1..n - 1).collect();
    let sel = tape.select_rows(lp, &rows);
    let picked = tape.pick(sel, &tokens[prompt_len..]);
    let total = tape.sum(picked);
    Ok((tape.scale(total, -1.0), logits))
}

/// Mean negative log-likelihood per supervised token (nats/token).
pub fn sft_loss(policy: &Policy, batch: &SftBatch) -> Result<f64> {
    Ok(sft_loss_and_grad_inner(policy, batch, false)?.0)
}

/// [`sft_loss`] and its gradient with respect to the flat parameters.
pub fn sft_loss_and_grad(policy: &Policy, batch: &SftBatch) -> Result<(f64, Vec<f64>)> {
    sft_loss_and_grad_inner(policy, batch, true)
}

fn sft_loss_and_grad_inner(policy: &Policy, batch: &SftBatch, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let n_tokens = batch.token_count();
    if n_tokens == 0 {
        return Err(Error::InvalidBatch("empty loss mask".into()));
    }
    let scale = 1.0 / n_tokens as f64;
    let n_params = policy.params.param_count();
    let mut grad = if want_grad { vec![0.0; n_params] } else { Vec::new() };
    let mut loss = 0.0;
    for item in &batch.items {
        let mut tape = Tape::new(n_params);
        let pv = ParamVars::register(&policy.params, &mut tape);
        let (nll, _) = record_nll(policy, &mut tape, &pv, &item.tokens, item.prompt_len)?;
        let scaled = tape.scale(nll, scale);
        loss += tape.scalar(scaled);
        if want_grad {
            accumulate(&mut grad, &tape.backward(scaled)?);
        }
    }
    Ok((loss, grad))
}

pub(crate) fn accumulate(into: &mut [f64], g: &[f64]) {
    for (a, b) in into.iter_mut().zip(g) {
        *a += b;
    }
}

/// Fraction of instances whose greedy decode verifies.
pub fn greedy_accuracy(policy: &Policy, instances: &[TaskInstance], max_len: usize) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for t in instances {
        let out = policy.greedy(&t.prompt, max_len)?;
        if verify(t, &out) == Reward::Correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
}

/// Learning-rate shape over the Stage 1 steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warm-up over `warmup` of the steps, then cosine decay to 0.
    WarmupCosine { warmup: f64 },
}

impl LrSchedule {
    /// Multiplier on the peak rate at `step` of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup } => {
                let total = total.max(1) as f64;
                let w = (warmup * total).max(1.0);
                let s = step as f64 + 1.0;
                if s <= w {
                    s / w
                } else {
                    let progress = ((s - w) / (total - w).max(1.0)).min(1.0);
                    0.5 * (1.0 + math::cos(core::f64::consts::PI * progress))
                }
            }
        }
    }
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Per-epoch Stage 1 summary.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch's batches.
    pub loss: f64,
    pub holdout_acc: f64,
}

/// Mutable optimisation state threaded through the stages.
pub struct OptimState<'a> {
    pub opt: &'a mut OptimizerState,
    pub config: &'a OptimizerConfig,
}

/// Supervised warm-up. On a non-finite loss the policy keeps its last
/// finite parameters and [`Error::Diverged`] is returned.
#[allow(clippy::too_many_arguments)]
pub fn run_stage1(
    policy: &mut Policy,
    optim: OptimState<'_>,
    expert: &[TaskInstance],
    holdout: &[TaskInstance],
    config: &Stage1Config,
    max_len: usize,
    rng: &mut DetRng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if expert.is_empty() {
        return Err(Error::InvalidBatch("stage 1 needs a non-empty expert set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("stage1 batch_size must be >= 1".into()));
    }
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..expert.len()).collect();
    let total_steps = config.epochs * expert.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = SftBatch::from_instances(chunk.iter().map(|&i| &expert[i]));
            let (loss, grad) = sft_loss_and_grad(policy, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(alloc::format!("stage 1 epoch {epoch}: loss {loss}")));
            }
            let lr = config.lr * config.schedule.factor(step, total_steps);
            apply_update(&mut policy.params, &grad, optim.opt, optim.config, lr)?;
            step += 1;
            loss_sum += loss * batch.token_count() as f64;
            tokens += batch.token_count();
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / tokens as f64,
            holdout_acc: greedy_accuracy(policy, holdout, max_len)?,
        };
        on_epoch(&stats);
        log.push(stats);
    }
    Ok(log)
}
