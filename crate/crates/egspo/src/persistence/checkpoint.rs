//! Binary checkpoints: bit-exact parameters, optimizer moments, RNG
//! positions and progress counters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "EGSPOCKP"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! params       param_count × f64
//! adam_m       param_count × f64
//! adam_v       param_count × f64
//! sha256       32 bytes over everything above
//! ```

use std::path::Path;

use egspo_core::policy::OptimizerState;
use egspo_core::trainer::TrainerState;
use egspo_core::{ModelConfig, RngState, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, write_atomic, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"EGSPOCKP";
pub const VERSION: u32 = 1;
const FORMAT: &str = "checkpoint";
const DIGEST_LEN: usize = 32;

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub state: TrainerState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabHeader {
    size: usize,
    bos: usize,
    eos: usize,
    pad: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngHeader {
    seed: String,
    stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits reliably.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocab: VocabHeader,
    model: ModelConfig,
    param_count: usize,
    config_hash: String,
    step: u64,
    stage1_done: bool,
    rounds_done: usize,
    optimizer_step: u64,
    rng_data: RngHeader,
    rng_sampling: RngHeader,
    rng_routing: RngHeader,
}

fn rng_header(s: &RngState) -> RngHeader {
    RngHeader {
        seed: hex::encode(s.seed),
        stream: s.stream,
        word_pos: s.word_pos.to_string(),
    }
}

fn rng_state(h: &RngHeader) -> Result<RngState> {
    let bad = |d: &str| FormatError::schema(FORMAT, None, format!("rng state: {d}"));
    let bytes = hex::decode(&h.seed).map_err(|e| bad(&e.to_string()))?;
    let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
    let word_pos = h.word_pos.parse::<u128>().map_err(|e| bad(&e.to_string()))?;
    Ok(RngState {
        seed,
        stream: h.stream,
        word_pos,
    })
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ckpt.state;
    let n = s.params.len();
    if s.optimizer.m.len() != n || s.optimizer.v.len() != n {
        return Err(FormatError::schema(
            FORMAT,
            None,
            "optimizer moments do not match the parameter count",
        ));
    }
    let header = Header {
        vocab: VocabHeader {
            size: ckpt.vocab.size,
            bos: ckpt.vocab.bos,
            eos: ckpt.vocab.eos,
            pad: ckpt.vocab.pad,
        },
        model: ckpt.model,
        param_count: n,
        config_hash: s.config_hash.clone(),
        step: s.step,
        stage1_done: s.stage1_done,
        rounds_done: s.rounds_done,
        optimizer_step: s.optimizer.step,
        rng_data: rng_header(&s.rng_data),
        rng_sampling: rng_header(&s.rng_sampling),
        rng_routing: rng_header(&s.rng_routing),
    };
    let header = serde_json::to_vec(&header).map_err(|e| FormatError::schema(FORMAT, None, e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + 24 * n + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for block in [&s.params, &s.optimizer.m, &s.optimizer.v] {
        for x in block.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                format: FORMAT,
                detail: format!(
                    "{what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| FormatError::schema(FORMAT, None, "parameter count overflows"))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        return Err(FormatError::Truncated {
            format: FORMAT,
            detail: format!("{} bytes is shorter than the magic", bytes.len()),
        });
    }
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(FormatError::Magic { format: FORMAT });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version > VERSION {
        return Err(FormatError::Version {
            format: FORMAT,
            found: version.into(),
            supported: VERSION.into(),
        });
    }
    let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len =
        usize::try_from(header_len).map_err(|_| FormatError::schema(FORMAT, None, "header length overflows"))?;
    let header_bytes = r.take(header_len, "header")?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| FormatError::schema(FORMAT, None, format!("header: {e}")))?;
    let n = header.param_count;
    let params = r.f64s(n, "parameters")?;
    let m = r.f64s(n, "first moments")?;
    let v = r.f64s(n, "second moments")?;
    let body_end = r.pos;
    let digest = r.take(DIGEST_LEN, "checksum")?;
    if r.pos != bytes.len() {
        return Err(FormatError::schema(
            FORMAT,
            None,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(FormatError::Checksum { format: FORMAT });
    }

    let h = &header.vocab;
    let vocab =
        Vocab::new(h.size, h.bos, h.eos, h.pad).map_err(|e| FormatError::schema(FORMAT, None, e.to_string()))?;
    if let Some(i) = params.iter().chain(&m).chain(&v).position(|x| !x.is_finite()) {
        return Err(FormatError::schema(
            FORMAT,
            None,
            format!("non-finite value at index {i}"),
        ));
    }
    Ok(Checkpoint {
        vocab,
        model: header.model,
        state: TrainerState {
            config_hash: header.config_hash,
            params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                m,
                v,
            },
            rng_data: rng_state(&header.rng_data)?,
            rng_sampling: rng_state(&header.rng_sampling)?,
            rng_routing: rng_state(&header.rng_routing)?,
            step: header.step,
            stage1_done: header.stage1_done,
            rounds_done: header.rounds_done,
        },
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?)
}
