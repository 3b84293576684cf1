use serde::{Deserialize, Serialize};

use crate::codebook::BankLayout;
use crate::error::{Error, Result};
use crate::tables::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Codes per codebook (K).
    pub codebook_size: usize,
    pub strategy: Strategy,
    /// 6 (one per category) or 2 (descriptive + shared analytical).
    pub codebook_count: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            hidden: 128,
            ffn: 256,
            vocab_size: 0,
            max_len: 256,
            codebook_size: 64,
            strategy: Strategy::ReTag,
            codebook_count: 6,
            dropout: 0.0,
            ln_eps: default_ln_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 {
            return bad(format!("layers/heads/hidden/ffn must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size <= 6 {
            return bad(format!("vocab_size {} leaves no room past the specials", self.vocab_size));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size {} < 2", self.codebook_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        BankLayout::from_count(self.codebook_count)?;
        Ok(())
    }

    pub fn layout(&self) -> BankLayout {
        BankLayout::from_count(self.codebook_count).expect("validated codebook_count")
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}
