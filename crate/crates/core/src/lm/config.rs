use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and special tokens of a [`TinyLm`](super::TinyLm).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    /// Hidden width, which is also the SAE activation size.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub bos_token_id: Option<u32>,
    #[serde(default)]
    pub eos_token_id: Option<u32>,
    /// MLP hidden width as a multiple of `d_model`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            bos_token_id: Some(0),
            eos_token_id: Some(1),
            mlp_ratio: 4,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        for (name, id) in [("bos", self.bos_token_id), ("eos", self.eos_token_id)] {
            if let Some(id) = id {
                if id as usize >= self.vocab_size {
                    return bad(format!("{name} token {id} outside vocab {}", self.vocab_size));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn bos(&self) -> Result<u32> {
        self.bos_token_id
            .ok_or_else(|| Error::Config("model has no BOS token configured".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        LmConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_bos() {
        let cfg = LmConfig {
            n_heads: 3,
            ..LmConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = LmConfig {
            bos_token_id: Some(64),
            ..LmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
