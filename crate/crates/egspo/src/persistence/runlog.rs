//! RunLog JSONL: one object per record, keys in lexicographic order.
//!
//! Every line carries `v`, `kind`, `step`, `seed`, `config_hash` and
//! `wall_ms`; the remaining keys are the fields of the event. Stage-1,
//! rollout and Stage-3 lines also carry `stage` (1, 2, 3). Keys a reader
//! does not know are kept in [`LogLine::extra`] and written back unchanged.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use egspo_core::sft::EpochStats;
use egspo_core::trainer::{Event, ProbeStats, RolloutStats, Stage3Stats};
use egspo_core::RunRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::{check_line_version, io_err, read_text, FormatError, Result};

pub const VERSION: u64 = 1;
const FORMAT: &str = "runlog";
const HEADER_KEYS: [&str; 7] = ["v", "kind", "stage", "step", "seed", "config_hash", "wall_ms"];

/// A parsed RunLog line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub record: RunRecord,
    /// Keys this version does not interpret.
    pub extra: Map<String, Value>,
}

impl From<RunRecord> for LogLine {
    fn from(record: RunRecord) -> Self {
        Self {
            record,
            extra: Map::new(),
        }
    }
}

fn stage_of(event: &Event) -> Option<u64> {
    match event {
        Event::Stage1(_) => Some(1),
        Event::Rollout(_) => Some(2),
        Event::Stage3(_) => Some(3),
        Event::Probe(_) => None,
    }
}

fn fields<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        // every event payload is a struct
        other => unreachable!("event did not serialize to an object: {other:?}"),
    }
}

fn event_fields(event: &Event) -> Map<String, Value> {
    match event {
        Event::Stage1(s) => fields(s),
        Event::Rollout(s) => fields(s),
        Event::Stage3(s) => fields(s),
        Event::Probe(s) => fields(s),
    }
}

/// Renders one line without the trailing newline.
pub fn format_line(line: &LogLine) -> String {
    let r = &line.record;
    let mut obj = line.extra.clone();
    obj.extend(event_fields(&r.event));
    obj.insert("v".into(), VERSION.into());
    obj.insert("kind".into(), r.event.kind().into());
    if let Some(stage) = stage_of(&r.event) {
        obj.insert("stage".into(), stage.into());
    }
    obj.insert("step".into(), r.step.into());
    obj.insert("seed".into(), r.seed.into());
    obj.insert("config_hash".into(), r.config_hash.clone().into());
    obj.insert("wall_ms".into(), r.wall_ms.into());
    // serde_json's default map is ordered by key, so the output is canonical
    Value::Object(obj).to_string()
}

pub fn format_record(record: &RunRecord) -> String {
    format_line(&LogLine::from(record.clone()))
}

fn get<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, line: usize) -> Result<T> {
    let v = obj
        .get(key)
        .ok_or_else(|| FormatError::schema(FORMAT, Some(line), format!("missing key {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| FormatError::schema(FORMAT, Some(line), format!("{key}: {e}")))
}

fn payload<T: DeserializeOwned>(obj: &Map<String, Value>, line: usize) -> Result<T> {
    serde_json::from_value(Value::Object(obj.clone()))
        .map_err(|e| FormatError::schema(FORMAT, Some(line), e.to_string()))
}

/// Parses one line; `line` is 1-based and only used in errors.
pub fn parse_line(text: &str, line: usize) -> Result<LogLine> {
    let obj: Map<String, Value> =
        serde_json::from_str(text).map_err(|e| FormatError::schema(FORMAT, Some(line), e.to_string()))?;
    check_line_version(FORMAT, line, &obj, VERSION)?;
    let kind: String = get(&obj, "kind", line)?;
    let event = match kind.as_str() {
        "stage1" => Event::Stage1(payload::<EpochStats>(&obj, line)?),
        "rollout" => Event::Rollout(payload::<RolloutStats>(&obj, line)?),
        "stage3" => Event::Stage3(payload::<Stage3Stats>(&obj, line)?),
        "probe" => Event::Probe(payload::<ProbeStats>(&obj, line)?),
        other => {
            return Err(FormatError::schema(
                FORMAT,
                Some(line),
                format!("unknown kind {other:?}"),
            ))
        }
    };
    let record = RunRecord {
        step: get(&obj, "step", line)?,
        seed: get(&obj, "seed", line)?,
        config_hash: get(&obj, "config_hash", line)?,
        wall_ms: get(&obj, "wall_ms", line)?,
        event,
    };
    let known = event_fields(&record.event);
    let extra = obj
        .into_iter()
        .filter(|(k, _)| !known.contains_key(k) && !HEADER_KEYS.contains(&k.as_str()))
        .collect();
    Ok(LogLine { record, extra })
}

/// Reads a whole RunLog. Blank lines are skipped.
pub fn read(path: &Path) -> Result<Vec<LogLine>> {
    parse_str(&read_text(path)?)
}

pub fn parse_str(text: &str) -> Result<Vec<LogLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

/// Append-only line writer.
pub struct RunLogWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl RunLogWriter {
    /// Creates (or truncates) the file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, line: &LogLine) -> Result<()> {
        writeln!(self.out, "{}", format_line(line)).map_err(io_err(&self.path))
    }

    pub fn write_record(&mut self, record: &RunRecord) -> Result<()> {
        writeln!(self.out, "{}", format_record(record)).map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}
