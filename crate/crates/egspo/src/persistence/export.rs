//! CSV tables derived from a RunLog.
//!
//! * `loss.csv`: every record, in log order.
//! * `accuracy.csv`: Stage-1 epochs and held-out probes.
//! * `gate.csv`: Stage-3 updates with routing and direction statistics.
//!
//! Missing values are empty cells. Column order is part of the format.

use std::path::Path;

use egspo_core::trainer::Event;

use super::runlog::LogLine;
use super::{write_atomic, FormatError, Result};

pub const LOSS_COLUMNS: [&str; 9] = [
    "step",
    "kind",
    "round",
    "epoch",
    "inner_epoch",
    "loss",
    "loss_sft",
    "loss_gated",
    "wall_ms",
];

pub const ACCURACY_COLUMNS: [&str; 5] = ["step", "kind", "epoch", "round", "holdout_acc"];

pub const GATE_COLUMNS: [&str; 15] = [
    "step",
    "round",
    "inner_epoch",
    "variant",
    "rho",
    "rollout_tokens",
    "frac_high",
    "mean_entropy_high",
    "mean_entropy_low",
    "mean_phi_low",
    "clip_frac",
    "mean_ratio",
    "n_low_tokens_neg_adv",
    "n_correct_direction",
    "direction_fraction",
];

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn table<const N: usize>(header: [&str; N], rows: Vec<[String; N]>) -> Result<Vec<u8>> {
    let err = |e: csv::Error| FormatError::schema("csv", None, e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| FormatError::schema("csv", None, e.to_string()))
}

pub fn loss_csv(lines: &[LogLine]) -> Result<Vec<u8>> {
    let rows = lines
        .iter()
        .map(|l| {
            let r = &l.record;
            let (round, epoch, inner, loss, sft, gated) = match &r.event {
                Event::Stage1(s) => (None, Some(s.epoch), None, Some(s.loss), None, None),
                Event::Rollout(s) => (Some(s.round), None, None, None, None, None),
                Event::Stage3(s) => (
                    Some(s.round),
                    None,
                    Some(s.inner_epoch),
                    Some(s.loss_total),
                    Some(s.loss_sft),
                    Some(s.loss_gated),
                ),
                Event::Probe(s) => (Some(s.round), None, None, None, None, None),
            };
            [
                r.step.to_string(),
                r.event.kind().to_string(),
                cell(round),
                cell(epoch),
                cell(inner),
                cell(loss),
                cell(sft),
                cell(gated),
                r.wall_ms.to_string(),
            ]
        })
        .collect();
    table(LOSS_COLUMNS, rows)
}

pub fn accuracy_csv(lines: &[LogLine]) -> Result<Vec<u8>> {
    let rows = lines
        .iter()
        .filter_map(|l| {
            let r = &l.record;
            let (epoch, round, acc) = match &r.event {
                Event::Stage1(s) => (Some(s.epoch), None, s.holdout_acc),
                Event::Probe(s) => (None, Some(s.round), s.holdout_acc),
                _ => return None,
            };
            Some([
                r.step.to_string(),
                r.event.kind().to_string(),
                cell(epoch),
                cell(round),
                acc.to_string(),
            ])
        })
        .collect();
    table(ACCURACY_COLUMNS, rows)
}

pub fn gate_csv(lines: &[LogLine]) -> Result<Vec<u8>> {
    let rows = lines
        .iter()
        .filter_map(|l| match &l.record.event {
            Event::Stage3(s) => Some([
                l.record.step.to_string(),
                s.round.to_string(),
                s.inner_epoch.to_string(),
                s.gate.variant.name().to_string(),
                s.gate.rho.to_string(),
                s.rollout_tokens.to_string(),
                s.gate.frac_high.to_string(),
                cell(s.gate.mean_entropy_high),
                cell(s.gate.mean_entropy_low),
                cell(s.gate.mean_phi_low),
                s.clip_frac.to_string(),
                s.mean_ratio.to_string(),
                s.direction.n_low_tokens_neg_adv.to_string(),
                s.direction.n_correct_direction.to_string(),
                cell(s.direction.fraction),
            ]),
            _ => None,
        })
        .collect();
    table(GATE_COLUMNS, rows)
}

/// Writes the three tables into `dir`; returns the file names written.
pub fn write_all(dir: &Path, lines: &[LogLine]) -> Result<[&'static str; 3]> {
    let names = ["loss.csv", "accuracy.csv", "gate.csv"];
    write_atomic(&dir.join(names[0]), &loss_csv(lines)?)?;
    write_atomic(&dir.join(names[1]), &accuracy_csv(lines)?)?;
    write_atomic(&dir.join(names[2]), &gate_csv(lines)?)?;
    Ok(names)
}
