//! Model hyperparameters and their `key=value` text form.

use alloc::format;
use alloc::string::{String, ToString};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Architecture hyperparameters of a Llama-style decoder plus the memory
/// scheduler's window size and scaling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Transformer layers `L`.
    pub layers: usize,
    /// Hidden size `h`.
    pub hidden: usize,
    /// Vocabulary size `v`.
    pub vocab: usize,
    /// Query heads `a`.
    pub heads: usize,
    /// Key/value heads `b`.
    pub kv_heads: usize,
    /// FFN intermediate size `s`.
    pub ffn: usize,
    /// Memory window `w`, in blocks.
    pub window: usize,
    /// Memory scaling factor `γ`.
    pub gamma: f64,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub eos: Option<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            vocab: 256,
            heads: 4,
            kv_heads: 2,
            ffn: 40,
            window: 2,
            gamma: 1.0,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            eos: None,
        }
    }
}

impl ModelConfig {
    pub fn toy(layers: usize, hidden: usize, kv_heads: usize) -> Self {
        Self {
            layers,
            hidden,
            kv_heads,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.hidden == 0 || self.vocab == 0 || self.ffn == 0 {
            return bad("hidden, vocab and ffn must be positive");
        }
        if self.heads == 0 || self.kv_heads == 0 {
            return bad("heads and kv_heads must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be divisible by heads");
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return bad("heads must be divisible by kv_heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head dimension must be even for rotary embeddings");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.gamma.is_nan() || self.gamma < 1.0 {
            return bad("gamma must be >= 1");
        }
        if self.norm_eps.is_nan()
            || self.norm_eps < 0.0
            || self.rope_theta.is_nan()
            || self.rope_theta <= 0.0
        {
            return bad("norm_eps must be >= 0 and rope_theta > 0");
        }
        if let Some(eos) = self.eos {
            if eos as usize >= self.vocab {
                return bad("eos id must be below vocab");
            }
        }
        Ok(())
    }

    /// Canonical text form; also the input to the config digest exchanged
    /// at handshake.
    pub fn to_kv_string(&self) -> String {
        let mut s = format!(
            "layers={}\nhidden={}\nvocab={}\nheads={}\nkv_heads={}\nffn={}\nwindow={}\ngamma={}\nrope_theta={}\nnorm_eps={}\n",
            self.layers,
            self.hidden,
            self.vocab,
            self.heads,
            self.kv_heads,
            self.ffn,
            self.window,
            self.gamma,
            self.rope_theta,
            self.norm_eps
        );
        if let Some(eos) = self.eos {
            s.push_str(&format!("eos={eos}\n"));
        }
        s
    }

    /// Parses `key=value` lines; `#` starts a comment. Unknown keys are
    /// rejected, missing keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    msg: format!("expected key=value, got `{line}`"),
                });
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| ConfigError::Parse { line: idx + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for {key}"))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "kv_heads" => self.kv_heads = num(key, value)?,
            "ffn" => self.ffn = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "rope_theta" => self.rope_theta = num(key, value)?,
            "norm_eps" => self.norm_eps = num(key, value)?,
            "eos" => {
                self.eos = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::toy(4, 32, 4);
        cfg.eos = Some(7);
        let back = ModelConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            hidden: 18,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            kv_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = ModelConfig::from_kv_str("layers=2\nbogus=1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
    }
}
