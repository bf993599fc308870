//! The three-stage pipeline: supervised warm-up, then rounds of rollout
//! generation followed by joint updates.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::audit::{audit_direction, entropy_report, gate_report, DirectionAudit, EntropySummary, GateReport};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::gate::{
    record_gated_sum, route_tokens, Branch, GateConfig, GateDecision, GatedSequence, PhiSource, Variant,
};
use crate::math;
use crate::policy::{apply_update, ModelConfig, OptimizerConfig, OptimizerState, ParamVars, Policy, PolicyParams};
use crate::rng::{DetRng, RngState};
use crate::rollout::{generate_group, score_group, RolloutGroup, Trajectory};
use crate::sft::{accumulate, run_stage1, sft_loss_and_grad, EpochStats, OptimState, SftBatch, Stage1Config};
use crate::tape::Tape;
use crate::tasks::{
    self, generate_instances, split_expert_pool, verify_answer, DigitRange, RolloutPrompt, TaskInstance,
};

/// Millisecond wall clock.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// A clock that always reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

const STREAM_INIT: u64 = 10;
const STREAM_DATA: u64 = 11;
const STREAM_SAMPLING: u64 = 12;
const STREAM_ROUTING: u64 = 13;
const HOLDOUT_SEED: u64 = 0x05ee_d0f4_01d0_u64;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskConfig {
    pub digits: DigitRange,
    /// Instances split into expert demonstrations and rollout prompts.
    pub pool_size: usize,
    /// Fixed evaluation set, disjoint from the pool.
    pub holdout_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            digits: DigitRange { min: 1, max: 2 },
            pool_size: 2000,
            holdout_size: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage2Config {
    pub group_size: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Whether a final EOS counts as a response token for routing and loss.
    pub include_eos: bool,
    /// Drop groups whose rewards are all equal before the update.
    pub filter_uniform: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            group_size: 8,
            temperature: 1.0,
            max_len: 40,
            include_eos: true,
            filter_uniform: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage3Config {
    pub rounds: usize,
    pub prompts_per_round: usize,
    /// Expert share of the sequences in each joint update.
    pub expert_fraction: f64,
    pub inner_epochs: usize,
    pub lr: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            rounds: 20,
            prompts_per_round: 16,
            expert_fraction: 0.2,
            inner_epochs: 2,
            lr: 3e-4,
        }
    }
}

impl Stage3Config {
    /// `round(f / (1 − f) · n_rollout)` expert sequences per update.
    pub fn expert_count(&self, n_rollout: usize) -> usize {
        let f = self.expert_fraction;
        math::round(f / (1.0 - f) * n_rollout as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub gate: GateConfig,
    pub adv_eps: f64,
    /// Held-out accuracy is probed after every `probe_every` rounds and after
    /// the last one.
    pub probe_every: usize,
    /// When false every `wall_ms` is 0, so logs depend only on the config.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            optimizer: OptimizerConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            gate: GateConfig::default(),
            adv_eps: 1e-4,
            probe_every: 1,
            log_wall_clock: false,
        }
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid_config!("{name} must be positive and finite, got {x}"))
    }
}

impl TrainConfig {
    /// The configuration the acceptance runs use. It differs from
    /// [`Default`] only where the defaults leave Stage 1 unreliable across
    /// seeds: a larger pool, a warm-up/cosine schedule with peak lr 2e-3,
    /// and more rounds.
    pub fn reference() -> Self {
        Self {
            task: TaskConfig {
                pool_size: 8000,
                ..TaskConfig::default()
            },
            stage1: Stage1Config {
                lr: 2e-3,
                schedule: crate::sft::LrSchedule::WarmupCosine { warmup: 0.05 },
                ..Stage1Config::default()
            },
            stage3: Stage3Config {
                rounds: 40,
                ..Stage3Config::default()
            },
            probe_every: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gate.validate()?;
        DigitRange::new(self.task.digits.min, self.task.digits.max)?;
        if self.model.vocab_size != tasks::VOCAB_SIZE {
            return Err(invalid_config!("model vocab_size must be {}", tasks::VOCAB_SIZE));
        }
        if self.model.context_len < self.task.digits.max_sequence_len() {
            return Err(invalid_config!(
                "context_len {} cannot hold a {}-token expert sequence",
                self.model.context_len,
                self.task.digits.max_sequence_len()
            ));
        }
        if self.task.pool_size < 2 || self.task.holdout_size == 0 {
            return Err(invalid_config!("pool_size must be >= 2 and holdout_size >= 1"));
        }
        if self.stage1.batch_size == 0 {
            return Err(invalid_config!("stage1.batch_size must be >= 1"));
        }
        positive("stage1.lr", self.stage1.lr)?;
        if self.stage2.group_size < 2 {
            return Err(invalid_config!("stage2.group_size must be >= 2"));
        }
        positive("stage2.temperature", self.stage2.temperature)?;
        if self.stage2.max_len == 0 {
            return Err(invalid_config!("stage2.max_len must be >= 1"));
        }
        let f = self.stage3.expert_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid_config!("stage3.expert_fraction {f} must lie in (0, 1)"));
        }
        if self.stage3.prompts_per_round == 0 || self.stage3.inner_epochs == 0 {
            return Err(invalid_config!("prompts_per_round and inner_epochs must be >= 1"));
        }
        positive("stage3.lr", self.stage3.lr)?;
        positive("adv_eps", self.adv_eps)?;
        if self.probe_every == 0 {
            return Err(invalid_config!("probe_every must be >= 1"));
        }
        if self.optimizer.beta1 < 0.0
            || self.optimizer.beta1 >= 1.0
            || self.optimizer.beta2 < 0.0
            || self.optimizer.beta2 >= 1.0
        {
            return Err(invalid_config!("optimizer betas must lie in [0, 1)"));
        }
        positive("optimizer.eps", self.optimizer.eps)?;
        if self.optimizer.max_grad_norm.is_nan() || self.optimizer.max_grad_norm < 0.0 {
            return Err(invalid_config!("optimizer.max_grad_norm must be >= 0"));
        }
        Ok(())
    }

    /// 64-bit FNV-1a of the config's debug rendering, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let text = format!("{self:?}");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Expert demonstrations, rollout prompts and the held-out probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub expert: Vec<TaskInstance>,
    pub rollout: Vec<RolloutPrompt>,
    pub holdout: Vec<TaskInstance>,
}

impl Dataset {
    /// The held-out set depends only on the digit range and size; the pool
    /// depends on the seed and never contains a held-out operand pair.
    pub fn build(config: &TrainConfig) -> Result<Self> {
        let digits = DigitRange::new(config.task.digits.min, config.task.digits.max)?;
        let pool_size = config.task.pool_size;
        let holdout_size = config.task.holdout_size;

        let mut seen = BTreeSet::new();
        let holdout: Vec<TaskInstance> = generate_instances(HOLDOUT_SEED, holdout_size * 8, digits)
            .into_iter()
            .filter(|t| seen.insert((t.a, t.b)))
            .take(holdout_size)
            .collect();
        if holdout.len() < holdout_size {
            return Err(invalid_config!(
                "digit range too small for {holdout_size} distinct held-out instances"
            ));
        }
        let pool: Vec<TaskInstance> = generate_instances(config.seed, pool_size * 4, digits)
            .into_iter()
            .filter(|t| !seen.contains(&(t.a, t.b)))
            .take(pool_size)
            .collect();
        if pool.len() < pool_size {
            return Err(invalid_config!("digit range too small for a pool of {pool_size}"));
        }
        let split = split_expert_pool(&pool, config.stage3.expert_fraction, config.seed)?;
        if split.expert.is_empty() || split.rollout.is_empty() {
            return Err(invalid_config!("expert split leaves an empty side"));
        }
        Ok(Self {
            expert: split.expert,
            rollout: split.rollout,
            holdout,
        })
    }
}

/// Which loss a group of tokens received.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    /// Teacher-forced cross-entropy.
    Sft,
    /// Clipped surrogate with weight 1.
    Ppo,
    /// Clipped surrogate scaled by `φ`.
    PhiPpo,
    /// `φ`-scaled negative log-likelihood without the advantage.
    PhiNll,
    /// Log-ratio penalty.
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TokenContext {
    /// Expert demonstration tokens under expert prefixes.
    Expert,
    /// Sampled tokens under sampled prefixes.
    Rollout,
}

/// One entry of the per-update loss taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerm {
    pub term: LossKind,
    pub context: TokenContext,
    pub tokens: usize,
    pub carries_advantage: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RolloutStats {
    pub round: usize,
    pub prompts: usize,
    pub trajectories: usize,
    pub tokens: usize,
    pub mean_reward: f64,
    pub frac_correct: f64,
    pub uniform_groups: usize,
    pub entropy: EntropySummary,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stage3Stats {
    pub round: usize,
    pub inner_epoch: usize,
    pub loss_total: f64,
    pub loss_sft: f64,
    pub loss_gated: f64,
    pub expert_samples: usize,
    pub rollout_samples: usize,
    pub rollout_tokens: usize,
    /// Share of rollout tokens whose ratio lies outside `[1 − ε, 1 + ε]`.
    pub clip_frac: f64,
    pub mean_ratio: f64,
    pub gate: GateReport,
    pub direction: DirectionAudit,
    pub loss_terms: Vec<LossTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeStats {
    pub round: usize,
    pub holdout_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Stage1(EpochStats),
    Rollout(RolloutStats),
    Stage3(Stage3Stats),
    Probe(ProbeStats),
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Stage1(_) => "stage1",
            Event::Rollout(_) => "rollout",
            Event::Stage3(_) => "stage3",
            Event::Probe(_) => "probe",
        }
    }
}

/// One RunLog entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Wall-clock time of the phase the record describes.
    pub wall_ms: f64,
    pub event: Event,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub config_hash: String,
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub rng_data: RngState,
    pub rng_sampling: RngState,
    pub rng_routing: RngState,
    pub step: u64,
    pub stage1_done: bool,
    pub rounds_done: usize,
}

/// A trajectory with its routing, restricted to the tokens that enter the
/// loss.
#[derive(Debug, Clone)]
pub struct RoutedTrajectory<'a> {
    pub trajectory: &'a Trajectory,
    pub len: usize,
    pub decision: GateDecision,
}

/// Number of response tokens of `t` that enter routing and the loss.
pub fn loss_len(t: &Trajectory, include_eos: bool) -> usize {
    match t.response.last() {
        Some(&last) if !include_eos && last == tasks::EOS => t.len() - 1,
        _ => t.len(),
    }
}

/// Routes every trajectory. Plain PPO marks every token HIGH without
/// looking at entropies.
pub fn route_batch<'a>(
    trajectories: &[&'a Trajectory],
    gate: &GateConfig,
    include_eos: bool,
    rng: &mut DetRng,
) -> Result<Vec<RoutedTrajectory<'a>>> {
    let mut out = Vec::with_capacity(trajectories.len());
    for &t in trajectories {
        let len = loss_len(t, include_eos);
        if len == 0 {
            continue;
        }
        let h = &t.entropy[..len];
        let decision = match gate.variant {
            Variant::UniformPpo => GateDecision {
                branches: vec![Branch::High; len],
                threshold: h.iter().copied().fold(f64::INFINITY, f64::min),
                phi_weight: vec![1.0; len],
            },
            Variant::RandomSelection => route_tokens(h, gate.rho, Some(rng))?,
            Variant::FullEgspo | Variant::NoAdvLowBranch => route_tokens(h, gate.rho, None)?,
        };
        let decision = decision.with_phi_from_logprobs(&t.old_logprob[..len])?;
        out.push(RoutedTrajectory {
            trajectory: t,
            len,
            decision,
        });
    }
    Ok(out)
}

/// Value, gradient and per-sequence current log-probabilities of the gated
/// loss, as a flat mean over all routed tokens.
pub struct GatedEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub new_logprobs: Vec<Vec<f64>>,
    pub tokens: usize,
}

/// Evaluates the gated loss on `batch` under `policy`. Sequences whose loss
/// is identically zero (zero advantage with an advantage-carrying loss) are
/// skipped; their new log-probabilities are reported as the old ones.
pub fn gated_loss_and_grad(policy: &Policy, batch: &[RoutedTrajectory<'_>], gate: &GateConfig) -> Result<GatedEval> {
    let n_params = policy.params.param_count();
    let tokens: usize = batch.iter().map(|r| r.len).sum();
    let mut eval = GatedEval {
        loss: 0.0,
        grad: vec![0.0; n_params],
        new_logprobs: Vec::with_capacity(batch.len()),
        tokens,
    };
    if tokens == 0 {
        return Ok(eval);
    }
    let scale = 1.0 / tokens as f64;
    let always_live = gate.variant == Variant::NoAdvLowBranch || gate.kl_coef != 0.0;
    for r in batch {
        let t = r.trajectory;
        if t.advantage == 0.0 && !always_live {
            eval.new_logprobs.push(t.old_logprob[..r.len].to_vec());
            continue;
        }
        let mut tape = Tape::new(n_params);
        let pv = ParamVars::register(&policy.params, &mut tape);
        let full = t.full_sequence();
        let p = t.prompt.len();
        let logits = policy.forward_tape(&mut tape, &pv, &full[..p + r.len - 1])?;
        let lp = tape.log_softmax(logits);
        let rows: Vec<usize> = (p - 1..p - 1 + r.len).collect();
        let sel = tape.select_rows(lp, &rows);
        let new_lp = tape.pick(sel, &t.response[..r.len]);
        let values = tape.value(new_lp).to_vec();
        let live;
        let decision = if gate.phi_source == PhiSource::LiveDetached {
            live = r.decision.clone().with_phi_from_logprobs(&values)?;
            &live
        } else {
            &r.decision
        };
        let total = record_gated_sum(
            &mut tape,
            new_lp,
            &t.old_logprob[..r.len],
            decision,
            t.advantage,
            gate,
            scale,
        )?;
        eval.loss += tape.scalar(total);
        accumulate(&mut eval.grad, &tape.backward(total)?);
        eval.new_logprobs.push(values);
    }
    Ok(eval)
}

fn loss_terms(expert_tokens: usize, batch: &[RoutedTrajectory<'_>], gate: &GateConfig) -> Vec<LossTerm> {
    let mut terms = Vec::new();
    if expert_tokens > 0 {
        terms.push(LossTerm {
            term: LossKind::Sft,
            context: TokenContext::Expert,
            tokens: expert_tokens,
            carries_advantage: false,
        });
    }
    let (mut high, mut low) = (0, 0);
    for r in batch {
        let h = r.decision.high_count();
        high += h;
        low += r.len - h;
    }
    let mut push = |term, tokens, carries_advantage| {
        if tokens > 0 {
            terms.push(LossTerm {
                term,
                context: TokenContext::Rollout,
                tokens,
                carries_advantage,
            });
        }
    };
    match gate.variant {
        Variant::UniformPpo => push(LossKind::Ppo, high + low, true),
        Variant::FullEgspo | Variant::RandomSelection => {
            push(LossKind::Ppo, high, true);
            push(LossKind::PhiPpo, low, true);
        }
        Variant::NoAdvLowBranch => {
            push(LossKind::Ppo, high, true);
            push(LossKind::PhiNll, low, false);
        }
    }
    if gate.kl_coef != 0.0 {
        push(LossKind::Kl, high + low, false);
    }
    terms
}

/// Runs the pipeline and emits [`RunRecord`]s.
pub struct Trainer<C: Clock = NullClock> {
    config: TrainConfig,
    config_hash: String,
    data: Dataset,
    policy: Policy,
    optimizer: OptimizerState,
    rng_data: DetRng,
    rng_sampling: DetRng,
    rng_routing: DetRng,
    step: u64,
    stage1_done: bool,
    rounds_done: usize,
    clock: C,
}

impl<C: Clock> Trainer<C> {
    pub fn new(config: TrainConfig, clock: C) -> Result<Self> {
        config.validate()?;
        let params = PolicyParams::init(config.model, &mut DetRng::new(config.seed, STREAM_INIT))?;
        let optimizer = OptimizerState::new(params.param_count());
        let policy = Policy::new(tasks::vocab(), params)?;
        let data = Dataset::build(&config)?;
        let seed = config.seed;
        Ok(Self {
            config_hash: config.fingerprint(),
            config,
            data,
            policy,
            optimizer,
            rng_data: DetRng::new(seed, STREAM_DATA),
            rng_sampling: DetRng::new(seed, STREAM_SAMPLING),
            rng_routing: DetRng::new(seed, STREAM_ROUTING),
            step: 0,
            stage1_done: false,
            rounds_done: 0,
            clock,
        })
    }

    /// Rebuilds a trainer from a saved state; `config` must be the one the
    /// state was produced with.
    pub fn from_state(config: TrainConfig, state: &TrainerState, clock: C) -> Result<Self> {
        let mut t = Self::new(config, clock)?;
        if state.config_hash != t.config_hash {
            return Err(Error::State(format!(
                "state was saved under config {} but this config is {}",
                state.config_hash, t.config_hash
            )));
        }
        let n = t.policy.params.param_count();
        if state.params.len() != n || state.optimizer.m.len() != n || state.optimizer.v.len() != n {
            return Err(Error::State("state does not match the model shape".into()));
        }
        t.policy.params = PolicyParams::from_flat(t.config.model, state.params.clone())?;
        t.optimizer = state.optimizer.clone();
        t.rng_data = DetRng::from_state(&state.rng_data);
        t.rng_sampling = DetRng::from_state(&state.rng_sampling);
        t.rng_routing = DetRng::from_state(&state.rng_routing);
        t.step = state.step;
        t.stage1_done = state.stage1_done;
        t.rounds_done = state.rounds_done;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config_hash: self.config_hash.clone(),
            params: self.policy.params.flat().to_vec(),
            optimizer: self.optimizer.clone(),
            rng_data: self.rng_data.state(),
            rng_sampling: self.rng_sampling.state(),
            rng_routing: self.rng_routing.state(),
            step: self.step,
            stage1_done: self.stage1_done,
            rounds_done: self.rounds_done,
        }
    }

    /// A copy of this trainer continuing under a different gate. Only valid
    /// before any round has run, since the gate shapes every later record.
    pub fn fork_with_gate(&self, gate: GateConfig, clock: C) -> Result<Self> {
        if self.rounds_done > 0 {
            return Err(Error::State(
                "cannot change the gate after rollouts have started".into(),
            ));
        }
        gate.validate()?;
        let mut config = self.config.clone();
        config.gate = gate;
        Ok(Self {
            config_hash: config.fingerprint(),
            config,
            data: self.data.clone(),
            policy: self.policy.clone(),
            optimizer: self.optimizer.clone(),
            rng_data: self.rng_data.clone(),
            rng_sampling: self.rng_sampling.clone(),
            rng_routing: self.rng_routing.clone(),
            step: self.step,
            stage1_done: self.stage1_done,
            rounds_done: self.rounds_done,
            clock,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn stage1_done(&self) -> bool {
        self.stage1_done
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    pub fn is_finished(&self) -> bool {
        self.stage1_done && self.rounds_done >= self.config.stage3.rounds
    }

    fn now(&self) -> f64 {
        if self.config.log_wall_clock {
            self.clock.now_ms()
        } else {
            0.0
        }
    }

    fn record(&mut self, wall_ms: f64, event: Event) -> RunRecord {
        let r = RunRecord {
            step: self.step,
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            wall_ms,
            event,
        };
        self.step += 1;
        r
    }

    fn max_response_len(&self) -> usize {
        self.config.stage2.max_len
    }

    pub fn holdout_accuracy(&self) -> Result<f64> {
        crate::sft::greedy_accuracy(&self.policy, &self.data.holdout, self.max_response_len())
    }

    /// Stage 1. Emits one record per epoch.
    pub fn run_stage1(&mut self, sink: &mut dyn FnMut(RunRecord)) -> Result<()> {
        if self.stage1_done {
            return Err(Error::State("stage 1 already ran".into()));
        }
        let mut stats = Vec::new();
        let mut times = Vec::new();
        let mut t0 = self.now();
        {
            let clock = &self.clock;
            let log_wall = self.config.log_wall_clock;
            run_stage1(
                &mut self.policy,
                OptimState {
                    opt: &mut self.optimizer,
                    config: &self.config.optimizer,
                },
                &self.data.expert,
                &self.data.holdout,
                &self.config.stage1,
                self.config.stage2.max_len,
                &mut self.rng_data,
                |s| {
                    let t1 = if log_wall { clock.now_ms() } else { 0.0 };
                    stats.push(*s);
                    times.push(t1 - t0);
                    t0 = t1;
                },
            )?;
        }
        for (s, wall) in stats.into_iter().zip(times) {
            let rec = self.record(wall, Event::Stage1(s));
            sink(rec);
        }
        self.stage1_done = true;
        Ok(())
    }

    fn draw_prompts(&mut self) -> Vec<RolloutPrompt> {
        let n = self.config.stage3.prompts_per_round.min(self.data.rollout.len());
        partial_shuffle(&mut self.rng_data, self.data.rollout.len(), n)
            .into_iter()
            .map(|i| self.data.rollout[i].clone())
            .collect()
    }

    fn draw_experts(&mut self, count: usize) -> Result<Vec<TaskInstance>> {
        if count > self.data.expert.len() {
            return Err(invalid_config!(
                "an update needs {count} expert samples but only {} exist",
                self.data.expert.len()
            ));
        }
        Ok(partial_shuffle(&mut self.rng_data, self.data.expert.len(), count)
            .into_iter()
            .map(|i| self.data.expert[i].clone())
            .collect())
    }

    /// Stage 2: samples and scores one group per drawn prompt.
    pub fn generate_round(&mut self) -> Result<Vec<RolloutGroup>> {
        let prompts = self.draw_prompts();
        let s2 = self.config.stage2;
        let mut groups = Vec::with_capacity(prompts.len());
        for p in &prompts {
            let mut g = generate_group(
                &self.policy,
                p,
                s2.group_size,
                s2.temperature,
                s2.max_len,
                &mut self.rng_sampling,
            )?;
            let truth = p.truth;
            score_group(&mut g, |r| verify_answer(truth, r), self.config.adv_eps)?;
            groups.push(g);
        }
        Ok(groups)
    }

    /// One round: Stage 2 then Stage 3, then a probe when due.
    pub fn run_round(&mut self, sink: &mut dyn FnMut(RunRecord)) -> Result<Vec<RolloutGroup>> {
        if !self.stage1_done {
            return Err(Error::State("stage 1 has not run".into()));
        }
        let round = self.rounds_done;
        let t0 = self.now();
        let groups = self.generate_round()?;
        let rollout_stats = self.rollout_stats(round, &groups)?;
        let t1 = self.now();
        let rec = self.record(t1 - t0, Event::Rollout(rollout_stats));
        sink(rec);

        self.step_stage3(round, &groups, sink)?;
        self.rounds_done += 1;

        let last = self.rounds_done == self.config.stage3.rounds;
        if last || self.rounds_done.is_multiple_of(self.config.probe_every) {
            let t0 = self.now();
            let acc = self.holdout_accuracy()?;
            let t1 = self.now();
            let rec = self.record(
                t1 - t0,
                Event::Probe(ProbeStats {
                    round,
                    holdout_acc: acc,
                }),
            );
            sink(rec);
        }
        Ok(groups)
    }

    fn rollout_stats(&self, round: usize, groups: &[RolloutGroup]) -> Result<RolloutStats> {
        let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
        let n = trajs.len();
        let correct = trajs
            .iter()
            .filter(|t| t.reward == Some(tasks::Reward::Correct))
            .count();
        let reward_sum: f64 = trajs.iter().filter_map(|t| t.reward).map(|r| r.value()).sum();
        // entropy routing view of the batch regardless of the variant in use
        let entropy_gate = GateConfig {
            variant: Variant::FullEgspo,
            ..self.config.gate
        };
        let routed = route_batch(
            &trajs,
            &entropy_gate,
            self.config.stage2.include_eos,
            &mut DetRng::new(0, 0),
        )?;
        let ents: Vec<&[f64]> = routed.iter().map(|r| &r.trajectory.entropy[..r.len]).collect();
        let decisions: Vec<GateDecision> = routed.into_iter().map(|r| r.decision).collect();
        Ok(RolloutStats {
            round,
            prompts: groups.len(),
            trajectories: n,
            tokens: trajs.iter().map(|t| t.len()).sum(),
            mean_reward: if n > 0 { reward_sum / n as f64 } else { 0.0 },
            frac_correct: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
            uniform_groups: groups.iter().filter(|g| g.is_uniform()).count(),
            entropy: entropy_report(&ents, &decisions)?,
        })
    }

    /// Stage 3 on scored `groups`: `inner_epochs` updates against the policy
    /// that generated them.
    pub fn step_stage3(
        &mut self,
        round: usize,
        groups: &[RolloutGroup],
        sink: &mut dyn FnMut(RunRecord),
    ) -> Result<()> {
        let s3 = self.config.stage3;
        let gate = self.config.gate;
        let n_rollout: usize = groups.iter().map(|g| g.trajectories.len()).sum();
        let experts = self.draw_experts(s3.expert_count(n_rollout))?;
        let expert_batch = SftBatch::from_instances(&experts);

        let kept: Vec<&Trajectory> = groups
            .iter()
            .filter(|g| !(self.config.stage2.filter_uniform && g.is_uniform()))
            .flat_map(|g| &g.trajectories)
            .collect();
        if let Some(t) = kept.iter().find(|t| t.reward.is_none()) {
            return Err(invalid_input!("unscored trajectory for prompt {:?}", t.prompt));
        }
        let routed = route_batch(&kept, &gate, self.config.stage2.include_eos, &mut self.rng_routing)?;
        let ents: Vec<&[f64]> = routed.iter().map(|r| &r.trajectory.entropy[..r.len]).collect();
        let decisions: Vec<GateDecision> = routed.iter().map(|r| r.decision.clone()).collect();
        let report = gate_report(&ents, &decisions, &gate)?;
        let terms = loss_terms(expert_batch.token_count(), &routed, &gate);

        for epoch in 0..s3.inner_epochs {
            let t0 = self.now();
            let (loss_sft, mut grad) = if expert_batch.is_empty() {
                (0.0, vec![0.0; self.policy.params.param_count()])
            } else {
                sft_loss_and_grad(&self.policy, &expert_batch)?
            };
            let gated = gated_loss_and_grad(&self.policy, &routed, &gate)?;
            let total = loss_sft + gated.loss;
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "round {round} inner epoch {epoch}: loss {total} (sft {loss_sft}, gated {})",
                    gated.loss
                )));
            }
            accumulate(&mut grad, &gated.grad);

            let seqs: Vec<GatedSequence<'_>> = routed
                .iter()
                .zip(&gated.new_logprobs)
                .map(|(r, new)| GatedSequence {
                    decision: &r.decision,
                    old_logprobs: &r.trajectory.old_logprob[..r.len],
                    new_logprobs: new,
                    advantage: r.trajectory.advantage,
                })
                .collect();
            let direction = audit_direction(&seqs, &gate)?;
            let (clipped, ratio_sum) = ratio_stats(&seqs, gate.clip_eps);

            apply_update(
                &mut self.policy.params,
                &grad,
                &mut self.optimizer,
                &self.config.optimizer,
                s3.lr,
            )?;
            let t1 = self.now();
            let tokens = gated.tokens;
            let stats = Stage3Stats {
                round,
                inner_epoch: epoch,
                loss_total: total,
                loss_sft,
                loss_gated: gated.loss,
                expert_samples: expert_batch.len(),
                rollout_samples: routed.len(),
                rollout_tokens: tokens,
                clip_frac: if tokens > 0 {
                    clipped as f64 / tokens as f64
                } else {
                    0.0
                },
                mean_ratio: if tokens > 0 { ratio_sum / tokens as f64 } else { 1.0 },
                gate: report.clone(),
                direction,
                loss_terms: terms.clone(),
            };
            let rec = self.record(t1 - t0, Event::Stage3(stats));
            sink(rec);
        }
        Ok(())
    }

    /// Stage 1 if pending, then the remaining rounds.
    pub fn train(&mut self, sink: &mut dyn FnMut(RunRecord)) -> Result<()> {
        if !self.stage1_done {
            self.run_stage1(sink)?;
        }
        while self.rounds_done < self.config.stage3.rounds {
            self.run_round(sink)?;
        }
        Ok(())
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }
}

fn ratio_stats(seqs: &[GatedSequence<'_>], eps: f64) -> (usize, f64) {
    let mut clipped = 0;
    let mut sum = 0.0;
    for s in seqs {
        for (new, old) in s.new_logprobs.iter().zip(s.old_logprobs) {
            let r = math::exp(new - old);
            sum += r;
            if !(1.0 - eps..=1.0 + eps).contains(&r) {
                clipped += 1;
            }
        }
    }
    (clipped, sum)
}

/// First `k` entries of a seeded Fisher-Yates pass over `0..n`.
fn partial_shuffle(rng: &mut DetRng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Runs `config` from scratch; returns the final policy and its log.
pub fn train(config: TrainConfig) -> Result<(Policy, Vec<RunRecord>)> {
    let mut trainer = Trainer::new(config, NullClock)?;
    let mut log = Vec::new();
    trainer.train(&mut |r| log.push(r))?;
    Ok((trainer.into_policy(), log))
}
