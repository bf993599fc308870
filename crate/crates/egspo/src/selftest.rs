//! Checks `egspo selftest` runs: small enough to finish in seconds.

use std::path::{Path, PathBuf};

use egspo_core::gate::phi;
use egspo_core::rollout::{generate_group, group_advantage};
use egspo_core::sft::{sft_loss, sft_loss_and_grad, SftBatch};
use egspo_core::tasks::{self, generate_instances, verify_answer, DigitRange, Reward};
use egspo_core::trainer::{gated_loss_and_grad, route_batch, NullClock};
use egspo_core::{DetRng, GateConfig, Policy, PolicyParams, Trainer, Trajectory, Variant};

use crate::harness::{finite_difference_error, gated_loss_value, smoke_config};
use crate::persistence::checkpoint::{self, Checkpoint};
use crate::persistence::runlog;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<String, String>;

fn check(name: &'static str, f: impl FnOnce() -> Outcome) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiny_policy(seed: u64) -> Result<Policy, String> {
    let config = smoke_config(seed).model;
    let params = PolicyParams::init(config, &mut DetRng::new(seed, 0)).map_err(e2s)?;
    Policy::new(tasks::vocab(), params).map_err(e2s)
}

fn sft_gradient() -> Outcome {
    let p = tiny_policy(1)?;
    let data = generate_instances(3, 3, DigitRange { min: 1, max: 2 });
    let batch = SftBatch::from_instances(&data);
    let (_, grad) = sft_loss_and_grad(&p, &batch).map_err(e2s)?;
    let n = grad.len();
    let worst =
        finite_difference_error(&p, &grad, (0..n).step_by(11), 1e-5, 1e-6, |q| sft_loss(q, &batch)).map_err(e2s)?;
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn gated_gradient() -> Outcome {
    let sampler = tiny_policy(2)?;
    let mut rng = DetRng::new(2, 1);
    let prompt = tasks::RolloutPrompt::from(&tasks::TaskInstance::new(47, 38, 2));
    let mut group = generate_group(&sampler, &prompt, 6, 1.5, 10, &mut rng).map_err(e2s)?;
    // alternate rewards so the group is mixed whatever was sampled
    let rewards: Vec<Reward> = (0..group.trajectories.len())
        .map(|i| if i % 2 == 0 { Reward::Correct } else { Reward::Incorrect })
        .collect();
    let adv = group_advantage(&rewards, 1e-4).map_err(e2s)?;
    for ((t, r), a) in group.trajectories.iter_mut().zip(rewards).zip(adv) {
        t.reward = Some(r);
        t.advantage = a;
    }
    let current = tiny_policy(3)?;
    let trajs: Vec<&Trajectory> = group.trajectories.iter().collect();
    let gate = GateConfig {
        rho: 0.3,
        ..GateConfig::default()
    };
    let routed = route_batch(&trajs, &gate, true, &mut rng).map_err(e2s)?;
    let eval = gated_loss_and_grad(&current, &routed, &gate).map_err(e2s)?;
    let scalar = gated_loss_value(&current, &routed, &gate).map_err(e2s)?;
    if (eval.loss - scalar).abs() > 1e-12 * scalar.abs().max(1.0) {
        return Err(format!("tape loss {} != scalar loss {scalar}", eval.loss));
    }
    let n = eval.grad.len();
    let worst = finite_difference_error(&current, &eval.grad, (0..n).step_by(13), 1e-5, 1e-6, |q| {
        gated_loss_value(q, &routed, &gate)
    })
    .map_err(e2s)?;
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn phi_and_advantages() -> Outcome {
    let p09 = phi(0.9).map_err(e2s)?;
    if (p09 - 0.09).abs() > 1e-12 {
        return Err(format!("phi(0.9) = {p09}"));
    }
    use Reward::{Correct as P, Incorrect as N};
    let adv = group_advantage(&[P, P, P, P, N, N, N, N], 1e-4).map_err(e2s)?;
    let expect = 1.0 / 1.0001;
    if adv
        .iter()
        .enumerate()
        .any(|(i, a)| (a - if i < 4 { expect } else { -expect }).abs() > 1e-12)
    {
        return Err(format!("4/4 advantages {adv:?}"));
    }
    Ok("phi(0.9) = 0.09, 4/4 split gives ±1/1.0001".into())
}

fn verifier() -> Outcome {
    let data = generate_instances(5, 200, DigitRange { min: 1, max: 2 });
    let bad = data
        .iter()
        .filter(|t| verify_answer(t.truth, &t.expert_response) != Reward::Correct)
        .count();
    if bad == 0 {
        Ok("200 expert responses verify".into())
    } else {
        Err(format!("{bad} expert responses rejected"))
    }
}

fn determinism_and_checkpoint(scratch: &Path) -> Outcome {
    let run = || -> Result<Vec<String>, String> {
        let mut t = Trainer::new(smoke_config(4), NullClock).map_err(e2s)?;
        let mut lines = Vec::new();
        t.train(&mut |r| lines.push(runlog::format_record(&r))).map_err(e2s)?;
        Ok(lines)
    };
    let a = run()?;
    if a != run()? {
        return Err("two identical runs produced different RunLogs".into());
    }
    let mut t = Trainer::new(smoke_config(4), NullClock).map_err(e2s)?;
    t.run_stage1(&mut |_| {}).map_err(e2s)?;
    let ckpt = Checkpoint {
        vocab: t.policy().vocab,
        model: t.config().model,
        state: t.state(),
    };
    let path = scratch.join("selftest.ckpt");
    checkpoint::save(&path, &ckpt).map_err(e2s)?;
    let back = checkpoint::load(&path).map_err(e2s)?;
    let _ = std::fs::remove_file(&path);
    let same_bits = back
        .state
        .params
        .iter()
        .zip(&ckpt.state.params)
        .all(|(x, y)| x.to_bits() == y.to_bits());
    if back != ckpt || !same_bits {
        return Err("checkpoint round trip changed the state".into());
    }
    Ok(format!("{} identical records; checkpoint round trip exact", a.len()))
}

fn variants_validate() -> Outcome {
    for v in Variant::ALL {
        GateConfig {
            variant: v,
            ..GateConfig::default()
        }
        .validate()
        .map_err(e2s)?;
    }
    Ok("all four variants validate".into())
}

/// Runs every check; `scratch` receives temporary files.
pub fn run_all(scratch: Option<&Path>) -> Vec<Check> {
    let dir: PathBuf = match scratch {
        Some(d) => d.to_path_buf(),
        None => std::env::temp_dir(),
    };
    let _ = std::fs::create_dir_all(&dir);
    vec![
        check("sft_gradient", sft_gradient),
        check("gated_gradient", gated_gradient),
        check("phi_and_advantages", phi_and_advantages),
        check("verifier", verifier),
        check("variants", variants_validate),
        check("determinism_and_checkpoint", || determinism_and_checkpoint(&dir)),
    ]
}
