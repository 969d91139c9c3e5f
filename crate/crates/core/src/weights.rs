//! Full (unsharded) model weights and a seeded generator for desk-scale runs.
//!
//! Layout convention: activations are row vectors and every projection is
//! `x · W`, so `W_Q` is `h × (a·d)` and splitting it by head is a column
//! slice, while `W_O` is `(a·d) × h` and splits by rows.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ModelWeights {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        core::iter::once(&self.embedding)
            .chain(self.layers.iter().flat_map(|l| {
                [
                    &l.attn_norm,
                    &l.wq,
                    &l.wk,
                    &l.wv,
                    &l.wo,
                    &l.ffn_norm,
                    &l.gate,
                    &l.up,
                    &l.down,
                ]
            }))
            .chain([&self.final_norm, &self.head])
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// FNV-1a over shapes and raw fp32 bits.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for t in self.tensors() {
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), TensorError> {
        let (h, v, s) = (cfg.hidden, cfg.vocab, cfg.ffn);
        let qd = cfg.heads * cfg.head_dim();
        let kvd = cfg.kv_heads * cfg.head_dim();
        let expect = |t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(TensorError::ShapeMismatch {
                    op: "check_shapes",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                })
            }
        };
        expect(&self.embedding, &[v, h])?;
        if self.layers.len() != cfg.layers {
            return Err(TensorError::ShapeMismatch {
                op: "check_shapes",
                left: vec![self.layers.len()],
                right: vec![cfg.layers],
            });
        }
        for l in &self.layers {
            expect(&l.attn_norm, &[h])?;
            expect(&l.wq, &[h, qd])?;
            expect(&l.wk, &[h, kvd])?;
            expect(&l.wv, &[h, kvd])?;
            expect(&l.wo, &[qd, h])?;
            expect(&l.ffn_norm, &[h])?;
            expect(&l.gate, &[h, s])?;
            expect(&l.up, &[h, s])?;
            expect(&l.down, &[s, h])?;
        }
        expect(&self.final_norm, &[h])?;
        expect(&self.head, &[h, v])
    }
}

/// Deterministic weights: projections uniform in `±0.02/√h`, norm gains one.
pub fn generate_toy_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.02 / libm::sqrtf(cfg.hidden as f32);
    let mut dense = |shape: [usize; 2]| {
        Tensor::from_fn(shape.to_vec(), |_| {
            let unit = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
            (unit * 2.0 - 1.0) * scale
        })
    };
    let ones = |n: usize| Tensor::from_fn(vec![n], |_| 1.0);
    let (h, v, s) = (cfg.hidden, cfg.vocab, cfg.ffn);
    let qd = cfg.heads * cfg.head_dim();
    let kvd = cfg.kv_heads * cfg.head_dim();

    let embedding = dense([v, h]);
    let layers = (0..cfg.layers)
        .map(|_| LayerWeights {
            attn_norm: ones(h),
            wq: dense([h, qd]),
            wk: dense([h, kvd]),
            wv: dense([h, kvd]),
            wo: dense([qd, h]),
            ffn_norm: ones(h),
            gate: dense([h, s]),
            up: dense([h, s]),
            down: dense([s, h]),
        })
        .collect();
    let final_norm = ones(h);
    let head = dense([h, v]);
    ModelWeights {
        embedding,
        layers,
        final_norm,
        head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_digest() {
        let cfg = ModelConfig::toy(2, 16, 2);
        assert_eq!(
            generate_toy_weights(&cfg, 9).digest(),
            generate_toy_weights(&cfg, 9).digest()
        );
        assert_ne!(
            generate_toy_weights(&cfg, 9).digest(),
            generate_toy_weights(&cfg, 10).digest()
        );
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::toy(2, 16, 2);
        let w = generate_toy_weights(&cfg, 1);
        assert_eq!(w.embedding.shape(), &[256, 16]);
        w.check_shapes(&cfg).unwrap();
        let bound = 0.02 / 4.0;
        assert!(w.layers[0].wq.data().iter().all(|v| v.abs() <= bound));
    }
}
