//! Post-layer-norm transformer encoder with additive per-token attention bias,
//! the BERT-family size presets, and parameter accounting.

pub mod checkpoint;
mod forward;
mod weights;

pub use forward::{biased_attention, forward, EncoderOutput, ForwardMode};
pub use weights::{AccountingRow, EncoderWeights, LayerWeights, TOKEN_TYPE_SIZES};
pub(crate) use weights::truncated_normal;

use serde::{Deserialize, Serialize};

use crate::error::{DotError, Result};

/// Vocabulary size used for parameter-count parity with the BERT presets.
pub const BERT_VOCAB: usize = 30522;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_input: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(num_layers: usize, hidden: usize, num_heads: usize, intermediate: usize) -> Self {
        EncoderConfig {
            num_layers,
            hidden,
            num_heads,
            intermediate,
            vocab_size: BERT_VOCAB,
            max_input: 1024,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            seed: 0,
        }
    }

    /// One of `mini`, `small` (`s`), `medium` (`m`), `large` (`l`).
    pub fn preset(name: &str) -> Result<Self> {
        let (l, h, heads, hi) = match name {
            "mini" => (4, 256, 4, 1024),
            "small" | "s" => (4, 512, 8, 2048),
            "medium" | "m" => (8, 512, 8, 2048),
            "large" | "l" => (24, 1024, 16, 4096),
            other => return Err(DotError::UnknownPreset(other.to_string())),
        };
        Ok(Self::new(l, h, heads, hi))
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_max_input(mut self, max_input: usize) -> Self {
        self.max_input = max_input;
        self
    }

    pub fn with_dropout(mut self, hidden: f64, attention: f64) -> Self {
        self.hidden_dropout = hidden;
        self.attention_dropout = attention;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DotError::Config(m));
        if self.num_layers < 1 {
            return fail("an encoder needs at least one layer".into());
        }
        if self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return fail(format!("hidden {} not divisible by {} heads", self.hidden, self.num_heads));
        }
        if self.max_input < 4 {
            return fail(format!("max_input {} is below 4", self.max_input));
        }
        if self.vocab_size < 4 || self.intermediate == 0 {
            return fail("vocab_size and intermediate must be positive".into());
        }
        for p in [self.hidden_dropout, self.attention_dropout] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("dropout rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Used-parameter count for an input length `input_len`:
/// `V·H + (2+3L)·I·H + I + (256·4 + 17 + 9L)·H + (1 + 2L·H)·Hi`.
pub fn count_parameters(config: &EncoderConfig, input_len: usize) -> Result<u64> {
    if input_len > config.max_input {
        return Err(DotError::Contract(format!(
            "input length {input_len} exceeds max_input {}",
            config.max_input
        )));
    }
    let v = config.vocab_size as u64;
    let h = config.hidden as u64;
    let l = config.num_layers as u64;
    let hi = config.intermediate as u64;
    let i = input_len as u64;
    Ok(v * h + (2 + 3 * l) * i * h + i + (256 * 4 + 17 + 9 * l) * h + (1 + 2 * l * h) * hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_size_table() {
        let dims = |c: EncoderConfig| (c.num_layers, c.hidden, c.num_heads, c.intermediate);
        assert_eq!(dims(EncoderConfig::preset("mini").unwrap()), (4, 256, 4, 1024));
        assert_eq!(dims(EncoderConfig::preset("small").unwrap()), (4, 512, 8, 2048));
        assert_eq!(dims(EncoderConfig::preset("medium").unwrap()), (8, 512, 8, 2048));
        assert_eq!(dims(EncoderConfig::preset("large").unwrap()), (24, 1024, 16, 4096));
        assert_eq!(EncoderConfig::preset("mini").unwrap().vocab_size, 30522);
        assert!(matches!(EncoderConfig::preset("huge"), Err(DotError::UnknownPreset(_))));
    }

    #[test]
    fn parameter_formula_values() {
        let count = |name: &str, i: usize| count_parameters(&EncoderConfig::preset(name).unwrap(), i).unwrap();
        assert_eq!(count("mini", 256), 11_105_280);
        assert_eq!(count("small", 512), 28_239_872);
        assert_eq!(count("medium", 1024), 46_608_896);
        assert_eq!(count("large", 512), 272_670_208);
        assert_eq!(count("medium", 1024) + count("large", 256), 299_880_192);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::new(0, 8, 2, 16).validate().is_err());
        assert!(EncoderConfig::new(1, 10, 3, 16).validate().is_err());
        assert!(EncoderConfig::new(1, 8, 2, 16).with_max_input(3).validate().is_err());
        assert!(EncoderConfig::new(1, 8, 2, 16).validate().is_ok());
        let c = EncoderConfig::preset("mini").unwrap().with_max_input(128);
        assert!(count_parameters(&c, 256).is_err());
    }
}
