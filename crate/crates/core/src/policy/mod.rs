//! A small causal-attention policy over a finite vocabulary.
//!
//! Each block is pre-norm single-head causal self-attention followed by a
//! GELU MLP, both residual. Logits come from an RMS-normalized final state.
//! Every forward pass runs on a [`Tape`], so inference and training share
//! the same arithmetic and rollout log-probs are reproduced bit for bit
//! when the same parameters re-score the same context.

mod optim;
mod params;

use alloc::vec::Vec;

pub use optim::{apply_update, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{BlockLayout, Layout, ModelConfig, PolicyParams, Span};

use crate::error::{invalid_input, Result};
use crate::math;
use crate::rng::DetRng;
use crate::tape::{Tape, Var};

/// Token vocabulary with its reserved ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    pub size: usize,
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
}

impl Vocab {
    pub fn new(size: usize, bos: usize, eos: usize, pad: usize) -> Result<Self> {
        if size < 4 {
            return Err(invalid_input!("vocabulary size {size} < 4"));
        }
        if bos == eos || bos == pad || eos == pad {
            return Err(invalid_input!("BOS, EOS and PAD must be distinct"));
        }
        if bos >= size || eos >= size || pad >= size {
            return Err(invalid_input!("special ids must be < {size}"));
        }
        Ok(Self { size, bos, eos, pad })
    }
}

/// Next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TokenDist {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid_input!("empty logits"));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(invalid_input!("non-finite logit at {i}"));
        }
        let mut log_probs = alloc::vec![0.0; logits.len()];
        math::log_softmax_into(&logits, &mut log_probs);
        let probs = log_probs.iter().map(|&lp| math::exp(lp)).collect();
        Ok(Self {
            logits,
            log_probs,
            probs,
        })
    }

    /// Builds a distribution from explicit probabilities (zeros allowed).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(invalid_input!("probabilities must lie in [0, 1]"));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid_input!("probabilities sum to {total}, not 1"));
        }
        let log_probs: Vec<f64> = probs
            .iter()
            .map(|&p| if p > 0.0 { math::ln(p) } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self {
            logits: log_probs.clone(),
            log_probs,
            probs: probs.to_vec(),
        })
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.log_probs.iter().enumerate() {
            if p > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Shannon entropy in nats, `0·ln 0 = 0`.
pub fn token_entropy(dist: &TokenDist) -> f64 {
    math::entropy_from_log_probs(&dist.log_probs)
}

/// Draws a token from `softmax(logits / temperature)`.
pub fn sample_next(dist: &TokenDist, temperature: f64, rng: &mut DetRng) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid_input!("temperature must be positive, got {temperature}"));
    }
    let u = rng.uniform();
    let tempered;
    let probs: &[f64] = if temperature == 1.0 {
        &dist.probs
    } else {
        let scaled: Vec<f64> = dist.log_probs.iter().map(|lp| lp / temperature).collect();
        let mut lp = alloc::vec![0.0; scaled.len()];
        math::log_softmax_into(&scaled, &mut lp);
        tempered = lp.into_iter().map(math::exp).collect::<Vec<_>>();
        &tempered
    };
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last_nonzero)
}

/// Parameter leaves registered once per tape.
pub struct ParamVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<[Var; 8]>,
    w_out: Var,
    b_out: Var,
}

impl ParamVars {
    pub fn register(params: &PolicyParams, tape: &mut Tape) -> Self {
        let flat = params.flat();
        let layout = params.layout();
        let mut leaf = |s: Span| tape.param(flat, s.offset, s.rows, s.cols);
        let tok_emb = leaf(layout.tok_emb);
        let pos_emb = leaf(layout.pos_emb);
        let blocks = layout
            .blocks
            .iter()
            .map(|b| {
                [
                    leaf(b.wq),
                    leaf(b.wk),
                    leaf(b.wv),
                    leaf(b.wo),
                    leaf(b.w1),
                    leaf(b.b1),
                    leaf(b.w2),
                    leaf(b.b2),
                ]
            })
            .collect();
        let w_out = leaf(layout.w_out);
        let b_out = leaf(layout.b_out);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            w_out,
            b_out,
        }
    }
}

/// Vocabulary plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub vocab: Vocab,
    pub params: PolicyParams,
}

impl Policy {
    pub fn new(vocab: Vocab, params: PolicyParams) -> Result<Self> {
        if params.config().vocab_size != vocab.size {
            return Err(invalid_input!(
                "model vocab {} != vocabulary {}",
                params.config().vocab_size,
                vocab.size
            ));
        }
        Ok(Self { vocab, params })
    }

    pub fn context_len(&self) -> usize {
        self.params.config().context_len
    }

    pub fn check_context(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid_input!("empty context"));
        }
        if tokens[0] != self.vocab.bos {
            return Err(invalid_input!("context must start with BOS"));
        }
        if tokens.len() > self.context_len() {
            return Err(invalid_input!(
                "context length {} exceeds {}",
                tokens.len(),
                self.context_len()
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.size) {
            return Err(invalid_input!("token id {bad} >= vocabulary size {}", self.vocab.size));
        }
        Ok(())
    }

    /// Records the forward pass over `tokens`; returns the `T × |V|` logits.
    pub fn forward_tape(&self, tape: &mut Tape, pv: &ParamVars, tokens: &[usize]) -> Result<Var> {
        self.check_context(tokens)?;
        let d = self.params.config().d_model;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather(pv.tok_emb, tokens);
        let pos = tape.gather(pv.pos_emb, &positions);
        let mut x = tape.add(tok, pos);
        let inv_sqrt_d = 1.0 / math::sqrt(d as f64);
        for &[wq, wk, wv, wo, w1, b1, w2, b2] in &pv.blocks {
            let h = tape.rms_norm(x);
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, inv_sqrt_d);
            let att = tape.causal_softmax(scores);
            let mixed = tape.matmul(att, v);
            let attn_out = tape.matmul(mixed, wo);
            x = tape.add(x, attn_out);

            let h = tape.rms_norm(x);
            let up = tape.matmul(h, w1);
            let up = tape.add_row(up, b1);
            let act = tape.gelu(up);
            let down = tape.matmul(act, w2);
            let down = tape.add_row(down, b2);
            x = tape.add(x, down);
        }
        let h = tape.rms_norm(x);
        let logits = tape.matmul(h, pv.w_out);
        Ok(tape.add_row(logits, pv.b_out))
    }

    /// Row-wise log-probabilities for every position of `tokens`.
    pub fn log_probs(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(self.params.param_count());
        let pv = ParamVars::register(&self.params, &mut tape);
        let logits = self.forward_tape(&mut tape, &pv, tokens)?;
        let lp = tape.log_softmax(logits);
        let v = self.vocab.size;
        Ok(tape.value(lp).chunks_exact(v).map(|r| r.to_vec()).collect())
    }

    /// Next-token distribution after `context`.
    pub fn forward_dist(&self, context: &[usize]) -> Result<TokenDist> {
        let mut tape = Tape::new(self.params.param_count());
        let pv = ParamVars::register(&self.params, &mut tape);
        let logits = self.forward_tape(&mut tape, &pv, context)?;
        let v = self.vocab.size;
        let all = tape.value(logits);
        TokenDist::from_logits(all[all.len() - v..].to_vec())
    }

    /// Greedy decoding until EOS or `max_len` new tokens.
    pub fn greedy(&self, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut ctx = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len && ctx.len() < self.context_len() {
            let tok = self.forward_dist(&ctx)?.argmax();
            out.push(tok);
            ctx.push(tok);
            if tok == self.vocab.eos {
                break;
            }
        }
        Ok(out)
    }
}
