//! Dataset JSONL: the task instances of a run, one per line.

use std::path::Path;

use egspo_core::tasks::{render, TaskInstance};
use egspo_core::trainer::Dataset;
use serde::Serialize;

use super::{write_atomic, Result};

pub const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub v: u64,
    /// `expert`, `rollout` or `holdout`.
    pub split: &'static str,
    pub index: usize,
    pub prompt: Vec<usize>,
    pub prompt_text: String,
    /// Empty for rollout prompts, which are seen without a demonstration.
    pub expert_text: String,
    pub truth: u64,
}

fn instance(split: &'static str, index: usize, t: &TaskInstance) -> InstanceRecord {
    InstanceRecord {
        v: VERSION,
        split,
        index,
        prompt: t.prompt.clone(),
        prompt_text: render(&t.prompt),
        expert_text: render(&t.expert_response),
        truth: t.truth,
    }
}

pub fn records(data: &Dataset) -> Vec<InstanceRecord> {
    let mut out: Vec<InstanceRecord> = data
        .expert
        .iter()
        .enumerate()
        .map(|(i, t)| instance("expert", i, t))
        .collect();
    out.extend(data.rollout.iter().map(|p| InstanceRecord {
        v: VERSION,
        split: "rollout",
        index: p.id,
        prompt: p.prompt.clone(),
        prompt_text: render(&p.prompt),
        expert_text: String::new(),
        truth: p.truth,
    }));
    out.extend(data.holdout.iter().enumerate().map(|(i, t)| instance("holdout", i, t)));
    out
}

pub fn write(path: &Path, data: &Dataset) -> Result<()> {
    let text: String = records(data)
        .iter()
        .map(|r| serde_json::to_string(r).expect("instance records always serialize") + "\n")
        .collect();
    write_atomic(path, text.as_bytes())
}
