//! Rollout dump JSONL: one scored trajectory per line, for offline audits.

use std::path::Path;

use egspo_core::tasks::Reward;
use egspo_core::{RolloutGroup, Trajectory};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{check_line_version, read_text, write_atomic, FormatError, Result};

pub const VERSION: u64 = 1;
const FORMAT: &str = "rollout dump";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub v: u64,
    pub round: usize,
    pub prompt_id: usize,
    pub prompt: Vec<usize>,
    /// Response tokens.
    pub tokens: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
    /// +1 or −1.
    pub reward: i64,
    pub advantage: f64,
}

impl DumpRecord {
    /// Fails if the trajectory has not been scored.
    pub fn from_trajectory(round: usize, prompt_id: usize, t: &Trajectory) -> Option<Self> {
        Some(Self {
            v: VERSION,
            round,
            prompt_id,
            prompt: t.prompt.clone(),
            tokens: t.response.clone(),
            old_logprobs: t.old_logprob.clone(),
            entropies: t.entropy.clone(),
            reward: t.reward?.value() as i64,
            advantage: t.advantage,
        })
    }

    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            prompt: self.prompt.clone(),
            response: self.tokens.clone(),
            old_logprob: self.old_logprobs.clone(),
            entropy: self.entropies.clone(),
            reward: Reward::from_value(self.reward),
            advantage: self.advantage,
        }
    }

    fn check(&self, vocab_size: usize, line: usize) -> Result<()> {
        let bad = |d: String| FormatError::schema(FORMAT, Some(line), d);
        if Reward::from_value(self.reward).is_none() {
            return Err(bad(format!("reward {} is not +1 or -1", self.reward)));
        }
        if let Some(t) = self.prompt.iter().chain(&self.tokens).find(|&&t| t >= vocab_size) {
            return Err(bad(format!("token id {t} outside a vocabulary of {vocab_size}")));
        }
        self.to_trajectory()
            .validate(vocab_size)
            .map_err(|e| bad(e.to_string()))
    }
}

/// One record per trajectory, in group order. Unscored trajectories are skipped.
pub fn records(round: usize, groups: &[RolloutGroup]) -> Vec<DumpRecord> {
    groups
        .iter()
        .flat_map(|g| {
            g.trajectories
                .iter()
                .filter_map(move |t| DumpRecord::from_trajectory(round, g.prompt_id, t))
        })
        .collect()
}

pub fn format_record(r: &DumpRecord) -> String {
    let value = serde_json::to_value(r).expect("dump records always serialize");
    value.to_string()
}

pub fn to_string(records: &[DumpRecord]) -> String {
    records.iter().map(|r| format_record(r) + "\n").collect()
}

pub fn write(path: &Path, records: &[DumpRecord]) -> Result<()> {
    write_atomic(path, to_string(records).as_bytes())
}

pub fn parse_line(text: &str, line: usize, vocab_size: usize) -> Result<DumpRecord> {
    let obj: Map<String, Value> =
        serde_json::from_str(text).map_err(|e| FormatError::schema(FORMAT, Some(line), e.to_string()))?;
    check_line_version(FORMAT, line, &obj, VERSION)?;
    let rec: DumpRecord = serde_json::from_value(Value::Object(obj))
        .map_err(|e| FormatError::schema(FORMAT, Some(line), e.to_string()))?;
    rec.check(vocab_size, line)?;
    Ok(rec)
}

/// Parses a dump. Blank lines are skipped; a dump with no records is an error.
pub fn parse_str(text: &str, vocab_size: usize) -> Result<Vec<DumpRecord>> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1, vocab_size))
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(FormatError::schema(FORMAT, None, "dump contains no records"));
    }
    Ok(records)
}

pub fn read(path: &Path, vocab_size: usize) -> Result<Vec<DumpRecord>> {
    parse_str(&read_text(path)?, vocab_size)
}
