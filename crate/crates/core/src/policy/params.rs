use alloc::vec::Vec;

use crate::error::{invalid_config, Error, Result};
use crate::rng::DetRng;

/// Shape of the policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            d_model: 32,
            n_blocks: 2,
            mlp_hidden: 64,
            context_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(invalid_config!("vocab_size must be >= 4"));
        }
        if self.d_model == 0 || self.mlp_hidden == 0 || self.context_len == 0 {
            return Err(invalid_config!("model dimensions must be positive"));
        }
        if !(1..=2).contains(&self.n_blocks) {
            return Err(invalid_config!("n_blocks must be 1 or 2"));
        }
        Ok(())
    }
}

/// A contiguous `rows × cols` slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub wq: Span,
    pub wk: Span,
    pub wv: Span,
    pub wo: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

/// Where each parameter block lives in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Span,
    pub pos_emb: Span,
    pub blocks: Vec<BlockLayout>,
    pub w_out: Span,
    pub b_out: Span,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut span = |rows: usize, cols: usize| {
            let s = Span { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let d = cfg.d_model;
        let tok_emb = span(cfg.vocab_size, d);
        let pos_emb = span(cfg.context_len, d);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockLayout {
                wq: span(d, d),
                wk: span(d, d),
                wv: span(d, d),
                wo: span(d, d),
                w1: span(d, cfg.mlp_hidden),
                b1: span(1, cfg.mlp_hidden),
                w2: span(cfg.mlp_hidden, d),
                b2: span(1, d),
            })
            .collect();
        let w_out = span(d, cfg.vocab_size);
        let b_out = span(1, cfg.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            w_out,
            b_out,
            len: offset,
        }
    }

    /// Every span with a stable name, in flat order.
    pub fn named_spans(&self) -> Vec<(alloc::string::String, Span)> {
        use alloc::format;
        let mut out = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb));
        out.push(("pos_emb".into(), self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, s) in [
                ("wq", b.wq),
                ("wk", b.wk),
                ("wv", b.wv),
                ("wo", b.wo),
                ("w1", b.w1),
                ("b1", b.b1),
                ("w2", b.w2),
                ("b2", b.b2),
            ] {
                out.push((format!("block{i}.{name}"), s));
            }
        }
        out.push(("w_out".into(), self.w_out));
        out.push(("b_out".into(), self.b_out));
        out
    }
}

/// All trainable parameters as one flat vector, with a block view through
/// [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: ModelConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl PolicyParams {
    /// Weights uniform in `(-0.05, 0.05)`; biases zero.
    pub fn init(config: ModelConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut values = Vec::with_capacity(layout.len);
        for (name, span) in layout.named_spans() {
            let is_bias = name.ends_with("b1") || name.ends_with("b2") || name == "b_out";
            for _ in 0..span.len() {
                values.push(if is_bias { 0.0 } else { rng.uniform_range(-0.05, 0.05) });
            }
        }
        Ok(Self { config, layout, values })
    }

    /// Rebuilds parameters from a flat vector (e.g. a checkpoint).
    pub fn from_flat(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.len {
            return Err(Error::InvalidInput(alloc::format!(
                "expected {} parameters, got {}",
                layout.len,
                values.len()
            )));
        }
        check_finite("parameters", &values)?;
        Ok(Self { config, layout, values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn block(&self, span: Span) -> &[f64] {
        &self.values[span.range()]
    }

    /// Writes one flat entry, rejecting non-finite values.
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "parameter",
                index,
            });
        }
        self.values[index] = value;
        Ok(())
    }

    /// Sets every entry of `span` to zero.
    pub fn zero_block(&mut self, span: Span) {
        self.values[span.range()].fill(0.0);
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

pub(crate) fn check_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_block_views_alias() {
        let cfg = ModelConfig::default();
        let mut p = PolicyParams::init(cfg, &mut DetRng::new(0, 0)).unwrap();
        let span = p.layout().blocks[1].w1;
        let before: Vec<f64> = p.block(span).to_vec();
        p.set(span.offset + 5, 1.25).unwrap();
        let after = p.block(span);
        for (i, (a, b)) in before.iter().zip(after).enumerate() {
            if i == 5 {
                assert_eq!(*b, 1.25);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn spans_tile_the_flat_vector() {
        let layout = Layout::new(&ModelConfig::default());
        let mut next = 0;
        for (_, s) in layout.named_spans() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, layout.len);
    }

    #[test]
    fn init_ranges() {
        let p = PolicyParams::init(ModelConfig::default(), &mut DetRng::new(3, 0)).unwrap();
        assert!(p.flat().iter().all(|x| x.abs() < 0.05));
        assert!(p.block(p.layout().b_out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = PolicyParams::init(ModelConfig::default(), &mut DetRng::new(3, 0)).unwrap();
        assert_eq!(
            p.set(4, f64::NAN),
            Err(Error::NonFinite {
                what: "parameter",
                index: 4
            })
        );
        let mut flat = p.flat().to_vec();
        flat[9] = f64::INFINITY;
        assert!(PolicyParams::from_flat(*p.config(), flat).is_err());
    }
}
