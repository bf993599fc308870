//! Experiment helpers shared by the command line and the acceptance runs.

use egspo_core::audit::{measure_overhead, DirectionAudit, OverheadReport};
use egspo_core::gate::GatedSequence;
use egspo_core::trainer::{gated_loss_and_grad, route_batch, Event, RoutedTrajectory};
use egspo_core::{Clock, DetRng, GateConfig, Policy, Result, RunRecord, Trainer, Trajectory, Variant};

/// Routing stream used by overhead measurements, so both paths see the
/// same random draws.
const OVERHEAD_STREAM: u64 = 13;

/// Times routing plus loss-and-gradient under `gate` against the same work
/// under plain PPO on identical trajectories.
pub fn gate_overhead<C: Clock>(
    clock: &C,
    policy: &Policy,
    trajectories: &[&Trajectory],
    gate: &GateConfig,
    include_eos: bool,
    repetitions: usize,
) -> Result<OverheadReport> {
    let uniform = GateConfig {
        variant: Variant::UniformPpo,
        ..*gate
    };
    let run = |g: &GateConfig| -> Result<()> {
        let mut rng = DetRng::new(0, OVERHEAD_STREAM);
        let routed = route_batch(trajectories, g, include_eos, &mut rng)?;
        gated_loss_and_grad(policy, &routed, g)?;
        Ok(())
    };
    measure_overhead(clock, repetitions, || run(gate), || run(&uniform))
}

/// Sequences of a routed batch evaluated at the snapshot, where every ratio is 1.
pub fn snapshot_sequences<'a>(routed: &'a [RoutedTrajectory<'a>]) -> Vec<GatedSequence<'a>> {
    routed
        .iter()
        .map(|r| GatedSequence {
            decision: &r.decision,
            old_logprobs: &r.trajectory.old_logprob[..r.len],
            new_logprobs: &r.trajectory.old_logprob[..r.len],
            advantage: r.trajectory.advantage,
        })
        .collect()
}

/// Outcome of one ablation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: Variant,
    pub rho: f64,
    pub seed: u64,
    pub final_acc: f64,
    /// Merged over every Stage-3 update of the run.
    pub direction: DirectionAudit,
    pub overhead: Option<OverheadReport>,
}

/// Continues a Stage-1 trainer under `gate` to the end of its rounds.
///
/// `overhead_clock` is used only when `overhead_reps > 0`, on the last
/// round's trajectories.
pub fn run_cell<C: Clock, K: Clock>(
    base: &Trainer<C>,
    gate: GateConfig,
    clock: C,
    overhead_clock: &K,
    overhead_reps: usize,
    sink: &mut dyn FnMut(RunRecord),
) -> Result<CellResult> {
    let mut t = base.fork_with_gate(gate, clock)?;
    let mut direction = DirectionAudit::default();
    let mut final_acc = None;
    let mut last = Vec::new();
    while !t.is_finished() {
        last = t.run_round(&mut |r| {
            match &r.event {
                Event::Stage3(s) => direction = direction.merge(s.direction),
                Event::Probe(p) => final_acc = Some(p.holdout_acc),
                _ => {}
            }
            sink(r)
        })?;
    }
    let final_acc = match final_acc {
        Some(a) => a,
        None => t.holdout_accuracy()?,
    };
    let overhead = if overhead_reps > 0 && !last.is_empty() {
        let trajs: Vec<&Trajectory> = last.iter().flat_map(|g| &g.trajectories).collect();
        let include_eos = t.config().stage2.include_eos;
        Some(gate_overhead(
            overhead_clock,
            t.policy(),
            &trajs,
            &gate,
            include_eos,
            overhead_reps,
        )?)
    } else {
        None
    };
    Ok(CellResult {
        variant: gate.variant,
        rho: gate.rho,
        seed: t.config().seed,
        final_acc,
        direction,
        overhead,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One line of the ablation summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub rho: f64,
    pub runs: usize,
    pub failed: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_direction_fraction: Option<f64>,
    pub mean_overhead: Option<f64>,
}

/// Groups cells by (variant, ρ) in first-seen order. `failed` lists the
/// (variant, ρ) of every cell that did not finish.
pub fn summarize(cells: &[CellResult], failed: &[(Variant, f64)]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Variant, f64)> = Vec::new();
    for k in cells.iter().map(|c| (c.variant, c.rho)).chain(failed.iter().copied()) {
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(variant, rho)| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.variant == variant && c.rho == rho).collect();
            let accs: Vec<f64> = mine.iter().map(|c| c.final_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| mean_std(&xs).0);
            SummaryRow {
                variant,
                rho,
                runs: mine.len(),
                failed: failed.iter().filter(|&&k| k == (variant, rho)).count(),
                mean_acc,
                std_acc,
                mean_direction_fraction: mean_of(mine.iter().filter_map(|c| c.direction.fraction).collect()),
                mean_overhead: mean_of(
                    mine.iter()
                        .filter_map(|c| c.overhead.as_ref().map(|o| o.overhead_fraction))
                        .collect(),
                ),
            }
        })
        .collect()
}

/// Largest relative error between `grad` and central differences of `f`
/// over `indices`, with step `h`. Relative error is taken against
/// `max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_error(
    policy: &Policy,
    grad: &[f64],
    indices: impl IntoIterator<Item = usize>,
    h: f64,
    floor: f64,
    mut f: impl FnMut(&Policy) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut p = policy.clone();
    for i in indices {
        let x = policy.params.flat()[i];
        p.params.set(i, x + h)?;
        let up = f(&p)?;
        p.params.set(i, x - h)?;
        let down = f(&p)?;
        p.params.set(i, x)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// `log π(y_t | ·)` of the first `len` response tokens, from a plain forward pass.
pub fn response_logprobs(policy: &Policy, t: &Trajectory, len: usize) -> Result<Vec<f64>> {
    let rows = policy.log_probs(&t.full_sequence())?;
    let p = t.prompt.len();
    Ok((0..len).map(|i| rows[p + i - 1][t.response[i]]).collect())
}

/// The gated loss of a routed batch under `policy`, composed from the
/// per-token scalar loss with no tape involved.
pub fn gated_loss_value(policy: &Policy, routed: &[RoutedTrajectory<'_>], gate: &GateConfig) -> Result<f64> {
    let new: Vec<Vec<f64>> = routed
        .iter()
        .map(|r| response_logprobs(policy, r.trajectory, r.len))
        .collect::<Result<_>>()?;
    let seqs: Vec<GatedSequence<'_>> = routed
        .iter()
        .zip(&new)
        .map(|(r, lp)| GatedSequence {
            decision: &r.decision,
            old_logprobs: &r.trajectory.old_logprob[..r.len],
            new_logprobs: lp,
            advantage: r.trajectory.advantage,
        })
        .collect();
    egspo_core::gate::entropy_gated_loss(&seqs, gate)
}

/// A seconds-scale configuration for smoke tests: one small block, a few
/// dozen instances, two short rounds.
pub fn smoke_config(seed: u64) -> egspo_core::TrainConfig {
    use egspo_core::sft::Stage1Config;
    use egspo_core::trainer::{Stage2Config, Stage3Config, TaskConfig};
    use egspo_core::ModelConfig;
    egspo_core::TrainConfig {
        seed,
        model: ModelConfig {
            d_model: 8,
            mlp_hidden: 8,
            n_blocks: 1,
            context_len: 24,
            ..ModelConfig::default()
        },
        task: TaskConfig {
            pool_size: 60,
            holdout_size: 6,
            ..TaskConfig::default()
        },
        stage1: Stage1Config {
            epochs: 1,
            batch_size: 8,
            lr: 1e-2,
            ..Stage1Config::default()
        },
        stage2: Stage2Config {
            group_size: 3,
            max_len: 14,
            ..Stage2Config::default()
        },
        stage3: Stage3Config {
            rounds: 2,
            prompts_per_round: 3,
            expert_fraction: 0.25,
            ..Stage3Config::default()
        },
        ..egspo_core::TrainConfig::default()
    }
}
