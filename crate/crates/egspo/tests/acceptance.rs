//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the lines come out in
//! order with their measurements. A failing criterion prints FAIL and the
//! run still exits 0 so the rest of the workspace suite reports normally;
//! set `EGSPO_ACCEPTANCE_STRICT=1` to turn any failure into exit status 1.

use std::collections::BTreeSet;
use std::time::Instant;

use egspo::clock::StdClock;
use egspo::harness::{finite_difference_error, gate_overhead, gated_loss_value, mean_std, response_logprobs, run_cell};
use egspo::persistence::checkpoint::{self, Checkpoint};
use egspo::persistence::runlog;
use egspo_core::audit::audit_direction;
use egspo_core::gate::{phi, route_tokens, token_loss, Branch, GatedSequence, TokenInputs};
use egspo_core::rollout::{generate_group, group_advantage};
use egspo_core::sft::{sft_loss, sft_loss_and_grad, SftBatch};
use egspo_core::tasks::{self, generate_instances, DigitRange, Reward, RolloutPrompt};
use egspo_core::trainer::{
    gated_loss_and_grad, route_batch, Event, LossKind, NullClock, RoutedTrajectory, TokenContext,
};
use egspo_core::{
    DetRng, GateConfig, ModelConfig, Policy, PolicyParams, RolloutGroup, RunRecord, TrainConfig, Trainer, Trajectory,
    Variant,
};

type Outcome = Result<(bool, String), String>;

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const TWO_DIGITS: DigitRange = DigitRange { min: 1, max: 2 };

// ---------------------------------------------------------------- helpers

fn random_policy(seed: u64, n_blocks: usize, scale: f64) -> Result<Policy, String> {
    let cfg = ModelConfig {
        d_model: 8,
        mlp_hidden: 12,
        n_blocks,
        context_len: 24,
        ..ModelConfig::default()
    };
    let base = PolicyParams::init(cfg, &mut DetRng::new(seed, 0)).map_err(e2s)?;
    let values: Vec<f64> = base.flat().iter().map(|x| x * scale).collect();
    let params = PolicyParams::from_flat(cfg, values).map_err(e2s)?;
    Policy::new(tasks::vocab(), params).map_err(e2s)
}

fn perturbed(p: &Policy, rng: &mut DetRng, size: f64) -> Result<Policy, String> {
    let mut q = p.clone();
    for i in 0..q.params.param_count() {
        let x = q.params.flat()[i] + rng.uniform_range(-size, size);
        q.params.set(i, x).map_err(e2s)?;
    }
    Ok(q)
}

/// Groups sampled from `policy`, scored with alternating rewards so every
/// group is mixed, advantages from the group statistics.
fn mixed_groups(
    policy: &Policy,
    seed: u64,
    prompts: usize,
    g: usize,
    temperature: f64,
) -> Result<Vec<RolloutGroup>, String> {
    let instances = generate_instances(seed, prompts, TWO_DIGITS);
    let mut rng = DetRng::new(seed, 1);
    let mut groups = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let mut group =
            generate_group(policy, &RolloutPrompt::from(inst), g, temperature, 12, &mut rng).map_err(e2s)?;
        let rewards: Vec<Reward> = (0..g)
            .map(|j| {
                if (i + j) % 2 == 0 {
                    Reward::Correct
                } else {
                    Reward::Incorrect
                }
            })
            .collect();
        let adv = group_advantage(&rewards, 1e-4).map_err(e2s)?;
        for ((t, r), a) in group.trajectories.iter_mut().zip(rewards).zip(adv) {
            t.reward = Some(r);
            t.advantage = a;
        }
        groups.push(group);
    }
    Ok(groups)
}

fn all_trajectories(groups: &[RolloutGroup]) -> Vec<&Trajectory> {
    groups.iter().flat_map(|g| &g.trajectories).collect()
}

// ---------------------------------------------------------------- 1

/// Which side of the clip band each routed token's ratio lies on.
fn clip_regions(policy: &Policy, routed: &[RoutedTrajectory<'_>], eps: f64) -> Result<Vec<i8>, String> {
    let mut out = Vec::new();
    for r in routed {
        let lp = response_logprobs(policy, r.trajectory, r.len).map_err(e2s)?;
        for (n, o) in lp.iter().zip(&r.trajectory.old_logprob) {
            let ratio = (n - o).exp();
            out.push(if ratio < 1.0 - eps {
                -1
            } else if ratio > 1.0 + eps {
                1
            } else {
                0
            });
        }
    }
    Ok(out)
}

/// Central differences over every parameter. The clipped surrogate has
/// kinks at the band edges; a stencil whose two ends sit in different clip
/// regions measures a secant across the kink, so those are re-taken with a
/// step ten times smaller until both ends agree. Returns the worst relative
/// error and the number of re-taken stencils.
fn kink_aware_fd_error(
    policy: &Policy,
    grad: &[f64],
    routed: &[RoutedTrajectory<'_>],
    gate: &GateConfig,
    h: f64,
    floor: f64,
) -> Result<(f64, usize), String> {
    let mut worst: f64 = 0.0;
    let mut retaken = 0;
    let mut p = policy.clone();
    for (i, &g) in grad.iter().enumerate() {
        let x = policy.params.flat()[i];
        let mut step = h;
        loop {
            p.params.set(i, x + step).map_err(e2s)?;
            let up = gated_loss_value(&p, routed, gate).map_err(e2s)?;
            p.params.set(i, x - step).map_err(e2s)?;
            let down = gated_loss_value(&p, routed, gate).map_err(e2s)?;
            let fd = (up - down) / (2.0 * step);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            let mut straddles = false;
            if rel >= 1e-4 {
                let down_regions = clip_regions(&p, routed, gate.clip_eps)?;
                p.params.set(i, x + step).map_err(e2s)?;
                straddles = down_regions != clip_regions(&p, routed, gate.clip_eps)?;
            }
            p.params.set(i, x).map_err(e2s)?;
            if straddles && step > 1e-9 {
                step /= 10.0;
                retaken += 1;
                continue;
            }
            worst = worst.max(rel);
            break;
        }
    }
    Ok((worst, retaken))
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let (h, floor) = (1e-5, 1e-6);
    let mut worst = [0.0f64; 3];
    let mut clipped = 0usize;
    let mut retaken = 0usize;
    for pair in 0..20u64 {
        let old = random_policy(100 + pair, 1 + (pair % 2) as usize, 20.0)?;
        let mut rng = DetRng::new(pair, 2);
        let new = perturbed(&old, &mut rng, 0.15)?;
        let n = new.params.param_count();

        let data = generate_instances(pair, 3, TWO_DIGITS);
        let batch = SftBatch::from_instances(&data);
        let (_, g) = sft_loss_and_grad(&new, &batch).map_err(e2s)?;
        let e = finite_difference_error(&new, &g, 0..n, h, floor, |q| sft_loss(q, &batch)).map_err(e2s)?;
        worst[0] = worst[0].max(e);

        let groups = mixed_groups(&old, 500 + pair, 2, 4, 1.0)?;
        let trajs = all_trajectories(&groups);
        for (slot, variant) in [(1, Variant::UniformPpo), (2, Variant::FullEgspo)] {
            let gate = GateConfig {
                variant,
                rho: 0.2,
                ..GateConfig::default()
            };
            let routed = route_batch(&trajs, &gate, true, &mut rng).map_err(e2s)?;
            let eval = gated_loss_and_grad(&new, &routed, &gate).map_err(e2s)?;
            if slot == 1 {
                for (r, lp) in routed.iter().zip(&eval.new_logprobs) {
                    clipped += r.trajectory.old_logprob[..r.len]
                        .iter()
                        .zip(lp)
                        .filter(|(o, n)| ((*n - *o).exp() - 1.0).abs() > gate.clip_eps)
                        .count();
                }
            }
            let (e, r) = kink_aware_fd_error(&new, &eval.grad, &routed, &gate, h, floor)?;
            worst[slot] = worst[slot].max(e);
            retaken += r;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    Ok((
        max < 1e-4 && secs < 60.0,
        format!(
            "20 pairs, all parameters; max rel err sft {:.2e}, ppo batch {:.2e}, gated {:.2e} (limit 1e-4); {clipped} tokens outside the clip band, {retaken} stencils re-taken with a smaller step because they straddled a clip boundary; {secs:.1}s (limit 60s)",
            worst[0], worst[1], worst[2]
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn phi_checks() -> Outcome {
    let at = |p: f64| phi(p).map_err(e2s);
    let p09 = at(0.9)?;
    let mut argmax = 0;
    let mut best = f64::NEG_INFINITY;
    let mut unique = true;
    for i in 0..=1000 {
        let v = at(i as f64 / 1000.0)?;
        if v > best {
            best = v;
            argmax = i;
            unique = true;
        } else if v == best {
            unique = false;
        }
    }
    let ends = (at(0.0)?, at(1.0)?);
    let ok = (p09 - 0.09).abs() < 1e-12 && argmax == 500 && unique && best == 0.25 && ends == (0.0, 0.0);
    Ok((
        ok,
        format!(
            "phi(0.9) = {p09:.17}; grid max {best} at p = {:.3}; phi(0) = {}, phi(1) = {}",
            argmax as f64 / 1000.0,
            ends.0,
            ends.1
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn grpo_properties() -> Outcome {
    let mut rng = DetRng::new(3, 3);
    let mut worst_sum: f64 = 0.0;
    let mut worst_formula: f64 = 0.0;
    let mut uniform_ok = true;
    for _ in 0..1000 {
        let g = 2 + rng.below(31);
        let p_correct = rng.uniform();
        let rewards: Vec<Reward> = (0..g)
            .map(|_| {
                if rng.uniform() < p_correct {
                    Reward::Correct
                } else {
                    Reward::Incorrect
                }
            })
            .collect();
        let adv = group_advantage(&rewards, 1e-4).map_err(e2s)?;
        worst_sum = worst_sum.max(adv.iter().sum::<f64>().abs());
        // oracle: population statistics written out directly
        let r: Vec<f64> = rewards
            .iter()
            .map(|x| if *x == Reward::Correct { 1.0 } else { -1.0 })
            .collect();
        let mu = r.iter().sum::<f64>() / g as f64;
        let sd = (r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / g as f64).sqrt();
        for (a, x) in adv.iter().zip(&r) {
            worst_formula = worst_formula.max((a - (x - mu) / (sd + 1e-4)).abs());
        }
        if rewards.iter().all(|x| *x == rewards[0]) && adv.iter().any(|&a| a != 0.0) {
            uniform_ok = false;
        }
    }
    for r in [Reward::Correct, Reward::Incorrect] {
        uniform_ok &= group_advantage(&[r; 8], 1e-4).map_err(e2s)?.iter().all(|&a| a == 0.0);
    }
    use Reward::{Correct as P, Incorrect as N};
    let split = group_advantage(&[P, P, P, P, N, N, N, N], 1e-4).map_err(e2s)?;
    let split_err = split
        .iter()
        .enumerate()
        .map(|(i, a)| (a - if i < 4 { 1.0 / 1.0001 } else { -1.0 / 1.0001 }).abs())
        .fold(0.0, f64::max);
    Ok((
        worst_sum < 1e-9 && uniform_ok && split_err < 1e-12 && worst_formula < 1e-12,
        format!(
            "1000 random groups: max |sum A| {worst_sum:.1e}, max deviation from oracle {worst_formula:.1e}; uniform groups all zero: {uniform_ok}; 4/4 split error {split_err:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn high_set(entropies: &[f64], rho: f64) -> Result<BTreeSet<usize>, String> {
    let d = route_tokens(entropies, rho, None).map_err(e2s)?;
    Ok(d.branches
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == Branch::High)
        .map(|(i, _)| i)
        .collect())
}

fn routing_exactness() -> Outcome {
    let mut rng = DetRng::new(4, 4);
    let mut failures = Vec::new();
    let mut ties = 0usize;
    for case in 0..1000 {
        let t = 1 + rng.below(64);
        // half the cases draw from a coarse grid so ties are common
        let coarse = case % 2 == 0;
        let h: Vec<f64> = (0..t)
            .map(|_| {
                if coarse {
                    rng.below(5) as f64 * 0.5
                } else {
                    rng.uniform_range(0.0, 17f64.ln())
                }
            })
            .collect();
        let rho = rng.uniform_range(0.001, 1.0);
        let high = high_set(&h, rho)?;
        // oracle: the smallest k with k >= rho * T
        let k = (0..=t).find(|&k| k as f64 >= rho * t as f64).unwrap();
        if high.len() != k {
            failures.push(format!("case {case}: |HIGH| {} != {k}", high.len()));
            continue;
        }
        let min_high = high.iter().map(|&i| h[i]).fold(f64::INFINITY, f64::min);
        let max_low = (0..t)
            .filter(|i| !high.contains(i))
            .map(|i| h[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if min_high < max_low {
            failures.push(format!("case {case}: min HIGH {min_high} < max LOW {max_low}"));
        }
        if min_high == max_low {
            ties += 1;
        }
        let rho2 = rng.uniform_range(rho, 1.0);
        if !high.is_subset(&high_set(&h, rho2)?) {
            failures.push(format!(
                "case {case}: HIGH set at rho {rho} not inside the set at {rho2}"
            ));
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("1000 sequences: exact counts, HIGH >= LOW everywhere ({ties} boundaries fall in tie groups), rho-monotone")
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    ))
}

// ---------------------------------------------------------------- 5

/// Sign of d loss / d logit of the sampled token by central differences
/// through a softmax over the row of log-probabilities.
fn logit_fd(row: &[f64], tok: usize, t: &TokenInputs, gate: &GateConfig) -> Result<f64, String> {
    let h = 1e-6;
    let logp_at = |shift: f64| {
        let z: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, &x)| if i == tok { x + shift } else { x })
            .collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z[tok] - lse
    };
    let loss = |shift: f64| {
        token_loss(
            &TokenInputs {
                new_logprob: logp_at(shift),
                ..*t
            },
            gate,
        )
        .map_err(e2s)
    };
    Ok((loss(h)? - loss(-h)?) / (2.0 * h))
}

fn direction_invariant() -> Outcome {
    let target = 5000;
    let full = GateConfig::default();
    let no_adv = GateConfig {
        variant: Variant::NoAdvLowBranch,
        ..full
    };
    let (mut n, mut full_ok, mut noadv_ok, mut fd_full_ok, mut fd_noadv_ok) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut audit_full = egspo_core::audit::DirectionAudit::default();
    let mut audit_noadv = egspo_core::audit::DirectionAudit::default();
    let mut batch = 0u64;
    while n < target {
        let old = random_policy(900 + batch, 1, 30.0)?;
        let mut rng = DetRng::new(batch, 5);
        let new = perturbed(&old, &mut rng, 0.2)?;
        let groups = mixed_groups(&old, 700 + batch, 8, 8, 1.0)?;
        let trajs = all_trajectories(&groups);
        let routed = route_batch(&trajs, &full, true, &mut rng).map_err(e2s)?;
        for r in &routed {
            let t = r.trajectory;
            if t.advantage >= 0.0 {
                continue;
            }
            let rows = new.log_probs(&t.full_sequence()).map_err(e2s)?;
            let p = t.prompt.len();
            let new_lp: Vec<f64> = (0..r.len).map(|i| rows[p + i - 1][t.response[i]]).collect();
            let seq = GatedSequence {
                decision: &r.decision,
                old_logprobs: &t.old_logprob[..r.len],
                new_logprobs: &new_lp,
                advantage: t.advantage,
            };
            audit_full = audit_full.merge(audit_direction(&[seq], &full).map_err(e2s)?);
            audit_noadv = audit_noadv.merge(audit_direction(&[seq], &no_adv).map_err(e2s)?);
            for i in 0..r.len {
                if r.decision.branches[i] != Branch::Low || n >= target {
                    continue;
                }
                let inputs = TokenInputs {
                    branch: Branch::Low,
                    new_logprob: new_lp[i],
                    old_logprob: t.old_logprob[i],
                    advantage: t.advantage,
                    phi: r.decision.phi_weight[i],
                };
                n += 1;
                let row = &rows[p + i - 1];
                let tok = t.response[i];
                let g_full = egspo_core::gate::token_dloss_dlogit(&inputs, &full);
                let g_noadv = egspo_core::gate::token_dloss_dlogit(&inputs, &no_adv);
                full_ok += (g_full >= 0.0) as usize;
                noadv_ok += (g_noadv >= 0.0) as usize;
                // a descent step moves the logit by -gradient; "correct" means it does not rise
                fd_full_ok += (logit_fd(row, tok, &inputs, &full)? >= -1e-9) as usize;
                fd_noadv_ok += (logit_fd(row, tok, &inputs, &no_adv)? >= -1e-9) as usize;
            }
        }
        batch += 1;
    }
    let frac = |k: usize| k as f64 / n as f64;
    let ok = full_ok == n
        && noadv_ok == 0
        && fd_full_ok == n
        && fd_noadv_ok == 0
        && audit_full.fraction == Some(1.0)
        && audit_noadv.fraction == Some(0.0);
    Ok((
        ok,
        format!(
            "{n} LOW tokens with A < 0: FULL_EGSPO fraction {} (finite-difference oracle {}), NO_ADV_LOW_BRANCH {} (oracle {}); audit over {} tokens gives {:?} / {:?}; at-scale reference 0.978",
            frac(full_ok),
            frac(fd_full_ok),
            frac(noadv_ok),
            frac(fd_noadv_ok),
            audit_full.n_low_tokens_neg_adv,
            audit_full.fraction,
            audit_noadv.fraction,
        ),
    ))
}

// ---------------------------------------------------------------- 6, 7, 8

struct SeedRun {
    stage1_acc: f64,
    stage1_secs: f64,
    finals: Vec<(Variant, f64)>,
}

struct Study {
    runs: Vec<SeedRun>,
    overhead: Option<egspo_core::audit::OverheadReport>,
    secs: f64,
}

fn reference_study() -> Result<Study, String> {
    let start = Instant::now();
    let config = TrainConfig::reference();
    let mut runs = Vec::new();
    let mut overhead = None;
    for seed in 0..5u64 {
        let mut base = Trainer::new(TrainConfig { seed, ..config.clone() }, NullClock).map_err(e2s)?;
        let t0 = Instant::now();
        let mut stage1_acc = f64::NAN;
        base.run_stage1(&mut |r| {
            if let Event::Stage1(s) = r.event {
                stage1_acc = s.holdout_acc;
            }
        })
        .map_err(e2s)?;
        let stage1_secs = t0.elapsed().as_secs_f64();
        if seed == 0 {
            // identical batches for both paths: one round sampled from the Stage-1 policy
            let mut probe = base.fork_with_gate(config.gate, NullClock).map_err(e2s)?;
            let groups = probe.generate_round().map_err(e2s)?;
            let trajs = all_trajectories(&groups);
            overhead = Some(
                gate_overhead(
                    &StdClock::new(),
                    base.policy(),
                    &trajs,
                    &config.gate,
                    config.stage2.include_eos,
                    15,
                )
                .map_err(e2s)?,
            );
        }
        let mut finals = Vec::new();
        for v in Variant::ALL {
            let gate = GateConfig {
                variant: v,
                ..config.gate
            };
            let cell = run_cell(&base, gate, NullClock, &StdClock::new(), 0, &mut |_| {}).map_err(e2s)?;
            finals.push((v, cell.final_acc));
        }
        println!(
            "      seed {seed}: stage 1 {stage1_acc:.3} in {stage1_secs:.1}s; {}",
            finals
                .iter()
                .map(|(v, a)| format!("{}={a:.3}", v.name()))
                .collect::<Vec<_>>()
                .join(" ")
        );
        runs.push(SeedRun {
            stage1_acc,
            stage1_secs,
            finals,
        });
    }
    Ok(Study {
        runs,
        overhead,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn ablation_ordering(study: &Study) -> Outcome {
    let accs = |v: Variant| -> Vec<f64> {
        study
            .runs
            .iter()
            .map(|r| r.finals.iter().find(|(x, _)| *x == v).unwrap().1)
            .collect()
    };
    let (full, sd_full) = mean_std(&accs(Variant::FullEgspo));
    let (unif, sd_unif) = mean_std(&accs(Variant::UniformPpo));
    let (noadv, sd_noadv) = mean_std(&accs(Variant::NoAdvLowBranch));
    let (rand, sd_rand) = mean_std(&accs(Variant::RandomSelection));
    let pooled = ((sd_full * sd_full + sd_noadv * sd_noadv) / 2.0).sqrt();
    let ok = full >= unif && full - noadv > 0.0 && full - noadv >= pooled && full >= rand && study.secs < 3600.0;
    Ok((
        ok,
        format!(
            "5 seeds, rho 0.1: FULL {full:.4}±{sd_full:.4}, UNIFORM {unif:.4}±{sd_unif:.4}, NO_ADV {noadv:.4}±{sd_noadv:.4}, RANDOM {rand:.4}±{sd_rand:.4}; FULL-NO_ADV {:.4} vs pooled sd {pooled:.4}; {:.0}s",
            full - noadv,
            study.secs
        ),
    ))
}

fn overhead(study: &Study) -> Outcome {
    let o = study.overhead.as_ref().ok_or("no overhead measurement")?;
    Ok((
        o.overhead_fraction < 0.10,
        format!(
            "gated {:.2} ms vs plain PPO {:.2} ms per batch (median of {}): overhead {:.2}% (limit 10%, at-scale reference 3.4%){}",
            o.gated_ms,
            o.uniform_ms,
            o.repetitions,
            100.0 * o.overhead_fraction,
            if o.warnings.is_empty() { String::new() } else { format!("; warnings: {}", o.warnings.join("; ")) }
        ),
    ))
}

fn stage1_sanity(study: &Study) -> Outcome {
    let accs: Vec<f64> = study.runs.iter().map(|r| r.stage1_acc).collect();
    let worst_secs = study.runs.iter().map(|r| r.stage1_secs).fold(0.0, f64::max);
    let worst_acc = accs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        worst_acc >= 0.9 && worst_secs < 300.0,
        format!(
            "held-out greedy exact match after Stage 1 on seeds 0-4: {} (limit >= 0.90 on every seed); slowest {worst_secs:.1}s (limit 300s)",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn short_reference(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::reference();
    c.seed = seed;
    c.task.pool_size = 400;
    c.stage1.epochs = 2;
    c.stage3.rounds = 4;
    c.stage3.prompts_per_round = 6;
    c.probe_every = 2;
    c
}

fn run_log(config: &TrainConfig) -> Result<Vec<u8>, String> {
    let mut t = Trainer::new(config.clone(), NullClock).map_err(e2s)?;
    let mut out = Vec::new();
    t.train(&mut |r| {
        out.extend_from_slice(runlog::format_record(&r).as_bytes());
        out.push(b'\n');
    })
    .map_err(e2s)?;
    Ok(out)
}

fn determinism_and_persistence() -> Outcome {
    let config = short_reference(9);
    let a = run_log(&config)?;
    let b = run_log(&config)?;
    let identical = a == b;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(config.clone(), NullClock).map_err(e2s)?;
    let mut head: Vec<RunRecord> = Vec::new();
    first.run_stage1(&mut |r| head.push(r)).map_err(e2s)?;
    first.run_round(&mut |r| head.push(r)).map_err(e2s)?;
    first.run_round(&mut |r| head.push(r)).map_err(e2s)?;
    checkpoint::save(
        &path,
        &Checkpoint {
            vocab: first.policy().vocab,
            model: first.config().model,
            state: first.state(),
        },
    )
    .map_err(e2s)?;
    drop(first);
    let loaded = checkpoint::load(&path).map_err(e2s)?;
    let mut resumed = Trainer::from_state(config, &loaded.state, NullClock).map_err(e2s)?;
    let mut tail = Vec::new();
    resumed.train(&mut |r| tail.push(r)).map_err(e2s)?;
    let mut joined = Vec::new();
    for r in head.iter().chain(&tail) {
        joined.extend_from_slice(runlog::format_record(r).as_bytes());
        joined.push(b'\n');
    }
    let resumed_ok = joined == a;
    Ok((
        identical && resumed_ok,
        format!(
            "two runs: {} bytes of RunLog, identical: {identical}; resume after 2 of 4 rounds from a saved checkpoint reproduces the remaining {} records: {resumed_ok}",
            a.len(),
            tail.len()
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn trajectory_consistency() -> Outcome {
    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    for v in Variant::ALL {
        let mut config = short_reference(10);
        config.stage3.rounds = 2;
        config.gate.variant = v;
        let text = run_log(&config)?;
        let lines = runlog::parse_str(std::str::from_utf8(&text).map_err(e2s)?).map_err(e2s)?;
        for l in lines {
            let Event::Stage3(s) = &l.record.event else { continue };
            for term in &s.loss_terms {
                seen.insert(format!("{}:{:?}/{:?}", v.name(), term.term, term.context));
                match (term.context, term.term) {
                    (TokenContext::Rollout, LossKind::Sft) => problems.push(format!("{v}: SFT on rollout tokens")),
                    (TokenContext::Expert, k) if k != LossKind::Sft => {
                        problems.push(format!("{v}: {k:?} on expert tokens"))
                    }
                    (TokenContext::Rollout, LossKind::Kl) => {}
                    (TokenContext::Rollout, LossKind::PhiNll) if v == Variant::NoAdvLowBranch => {
                        // this ablation's LOW branch drops the advantage by design
                        if term.carries_advantage {
                            problems.push(format!("{v}: PhiNll marked as carrying A"));
                        }
                    }
                    (TokenContext::Rollout, k) => {
                        if !matches!(k, LossKind::Ppo | LossKind::PhiPpo) || !term.carries_advantage {
                            problems.push(format!("{v}: rollout term {k:?} without A"));
                        }
                    }
                    (TokenContext::Expert, _) => {}
                }
            }
        }
    }
    Ok((
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "all variants: expert tokens only see SFT; rollout tokens only see A-weighted PPO terms (NO_ADV_LOW_BRANCH's advantage-free LOW term is the ablation itself); terms seen: {}",
                seen.into_iter().collect::<Vec<_>>().join(", ")
            )
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- main

fn report(n: usize, name: &str, outcome: Outcome, failed: &mut Vec<usize>) {
    let (ok, detail) = match outcome {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    if !ok {
        failed.push(n);
    }
    println!("{} [{n:>2}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn main() {
    // honour `cargo test -- --list` and filters without running anything
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = Vec::new();
    report(1, "gradient exactness", gradient_exactness(), &mut failed);
    report(2, "phi checks", phi_checks(), &mut failed);
    report(3, "group advantage properties", grpo_properties(), &mut failed);
    report(4, "routing exactness", routing_exactness(), &mut failed);
    report(5, "direction invariant", direction_invariant(), &mut failed);
    println!("      reference study (5 seeds x 4 variants):");
    match reference_study() {
        Ok(study) => {
            report(6, "ablation ordering", ablation_ordering(&study), &mut failed);
            report(7, "gating overhead", overhead(&study), &mut failed);
            report(8, "stage-1 sanity", stage1_sanity(&study), &mut failed);
        }
        Err(e) => {
            for (n, name) in [(6, "ablation ordering"), (7, "gating overhead"), (8, "stage-1 sanity")] {
                report(n, name, Err(e.clone()), &mut failed);
            }
        }
    }
    report(
        9,
        "determinism and persistence",
        determinism_and_persistence(),
        &mut failed,
    );
    report(
        10,
        "trajectory-consistency guard",
        trajectory_consistency(),
        &mut failed,
    );
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var_os("EGSPO_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
