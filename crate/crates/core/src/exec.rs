//! The per-device forward step: embedding lookup, sharded attention with a
//! local KV cache, sharded SwiGLU FFN and greedy next-token selection.
//!
//! Block functions return this device's additive contribution. The caller
//! sums contributions across devices and then adds the residual, once, on
//! every device.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::comm::{Collective, CommError, Phase, SoloCollective};
use crate::config::ModelConfig;
use crate::partition::{
    plan_shards, shard_blocks, BlockId, BlockTensors, BlockWeights, PartitionError,
};
use crate::tensor::{matmul, rms_norm, rope_apply_heads, silu, Tensor, TensorError};
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("block {0} is not loaded")]
    NotLoaded(BlockId),
    #[error("loading block {block} failed: {msg}")]
    Load {
        block: BlockId,
        msg: alloc::string::String,
    },
    #[error("expected block {expected}, got {got}")]
    WrongBlock { expected: BlockId, got: BlockId },
    #[error("kv cache for layer {layer} holds {have} positions, step expects {want}")]
    CacheMismatch {
        layer: usize,
        have: usize,
        want: usize,
    },
    #[error("invalid step inputs: {0}")]
    Inputs(alloc::string::String),
    #[error("empty prompt")]
    EmptyPrompt,
}

/// What the master broadcasts before each step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// `[seq × h]` embeddings of the new tokens.
    pub hidden: Tensor,
    /// `[seq × (cache_pos + seq)]`, 1.0 where attention is allowed.
    pub mask: Tensor,
    /// Tokens already in the cache.
    pub cache_pos: usize,
}

impl StepInputs {
    pub fn seq_len(&self) -> usize {
        self.hidden.shape().first().copied().unwrap_or(0)
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.cache_pos..self.cache_pos + self.seq_len()).collect()
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        let (seq, _) = self.hidden.dims2("step inputs")?;
        if seq == 0 {
            return Err(ExecError::Inputs("no new positions".into()));
        }
        if self.mask != causal_mask(seq, self.cache_pos) {
            return Err(ExecError::Inputs(format!(
                "mask {:?} is not causal for {seq} new tokens at position {}",
                self.mask.shape(),
                self.cache_pos
            )));
        }
        Ok(())
    }
}

/// Lower-triangular mask over cached plus new positions.
pub fn causal_mask(seq: usize, cache_pos: usize) -> Tensor {
    let total = cache_pos + seq;
    Tensor::from_fn(vec![seq, total], |idx| {
        let (i, j) = (idx / total, idx % total);
        if j <= cache_pos + i {
            1.0
        } else {
            0.0
        }
    })
}

/// Embedding lookup plus mask for the next step.
pub fn preprocess(
    ids: &[u32],
    embedding: &Tensor,
    cache_pos: usize,
) -> Result<StepInputs, ExecError> {
    let (v, h) = embedding.dims2("preprocess")?;
    if ids.is_empty() {
        return Err(ExecError::EmptyPrompt);
    }
    let mut data = Vec::with_capacity(ids.len() * h);
    for &id in ids {
        if id as usize >= v {
            return Err(ExecError::TokenOutOfRange { id, vocab: v });
        }
        data.extend_from_slice(embedding.row(id as usize));
    }
    Ok(StepInputs {
        hidden: Tensor::new(vec![ids.len(), h], data)?,
        mask: causal_mask(ids.len(), cache_pos),
        cache_pos,
    })
}

/// Keys (after RoPE) and values for this device's kv heads, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheShard {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

impl KvCacheShard {
    pub fn new(layers: usize, kv_width: usize) -> Self {
        Self {
            keys: (0..layers)
                .map(|_| Tensor::zeros(vec![0, kv_width]))
                .collect(),
            values: (0..layers)
                .map(|_| Tensor::zeros(vec![0, kv_width]))
                .collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].shape()[0]
    }

    /// Cached positions, read from layer 0.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        (0..self.layers()).all(|l| self.layer_len(l) == n && self.values[l].shape()[0] == n)
    }

    pub fn keys(&self, layer: usize) -> &Tensor {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Tensor {
        &self.values[layer]
    }

    pub fn byte_size(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(Tensor::byte_len)
            .sum()
    }
}

fn attn_parts(
    block: &BlockWeights,
) -> Result<(&Tensor, &Tensor, &Tensor, &Tensor, &Tensor), ExecError> {
    match &block.tensors {
        BlockTensors::Attention {
            norm,
            wq,
            wk,
            wv,
            wo,
        } => Ok((norm, wq, wk, wv, wo)),
        _ => Err(ExecError::WrongBlock {
            expected: BlockId::attn(block.id.layer as usize),
            got: block.id,
        }),
    }
}

/// This device's attention contribution `softmax(QKᵀ/√d)V · W_O` over its
/// local heads. Appends the new keys and values to `cache`.
pub fn attention_block(
    h_in: &Tensor,
    block: &BlockWeights,
    cache: &mut KvCacheShard,
    layer: usize,
    inputs: &StepInputs,
    cfg: &ModelConfig,
) -> Result<Tensor, ExecError> {
    let (norm, wq, wk, wv, wo) = attn_parts(block)?;
    if block.id != BlockId::attn(layer) {
        return Err(ExecError::WrongBlock {
            expected: BlockId::attn(layer),
            got: block.id,
        });
    }
    let have = cache.layer_len(layer);
    if have != inputs.cache_pos {
        return Err(ExecError::CacheMismatch {
            layer,
            have,
            want: inputs.cache_pos,
        });
    }
    let d = cfg.head_dim();
    let positions = inputs.positions();
    let x = rms_norm(h_in, norm, cfg.norm_eps)?;
    let q = rope_apply_heads(&matmul(&x, wq)?, d, &positions, cfg.rope_theta)?;
    let k = rope_apply_heads(&matmul(&x, wk)?, d, &positions, cfg.rope_theta)?;
    let v = matmul(&x, wv)?;
    cache.keys[layer].append_rows(&k)?;
    cache.values[layer].append_rows(&v)?;
    let (keys, values) = (&cache.keys[layer], &cache.values[layer]);

    let (seq, qw) = q.dims2("attention")?;
    let (total, kvw) = keys.dims2("attention")?;
    let group = cfg.group_size();
    let scale = 1.0 / libm::sqrtf(d as f32);
    let mut out = vec![0.0f32; seq * qw];
    let mut scores = vec![0.0f32; total];
    for head in 0..qw / d {
        let kvh = head / group;
        let (qo, ko) = (head * d, kvh * d);
        debug_assert!(ko + d <= kvw);
        for i in 0..seq {
            let qrow = &q.row(i)[qo..qo + d];
            let allowed = inputs.cache_pos + i + 1;
            let row = &mut scores[..allowed];
            for (j, s) in row.iter_mut().enumerate() {
                let krow = &keys.row(j)[ko..ko + d];
                let mut dot = 0.0f32;
                for (&a, &b) in qrow.iter().zip(krow) {
                    dot += a * b;
                }
                *s = dot * scale;
            }
            crate::tensor::softmax_in_place(row);
            let orow = &mut out[i * qw + qo..i * qw + qo + d];
            for (j, &p) in row.iter().enumerate() {
                let vrow = &values.row(j)[ko..ko + d];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    let heads_out = Tensor::new(vec![seq, qw], out)?;
    heads_out.ensure_finite("attention")?;
    Ok(matmul(&heads_out, wo)?)
}

/// This device's SwiGLU contribution `(silu(x·W_gate) ⊙ x·W_up) · W_down`
/// over its FFN columns.
pub fn ffn_block(
    h_in: &Tensor,
    block: &BlockWeights,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<Tensor, ExecError> {
    let BlockTensors::Ffn {
        norm,
        gate,
        up,
        down,
    } = &block.tensors
    else {
        return Err(ExecError::WrongBlock {
            expected: BlockId::ffn(layer),
            got: block.id,
        });
    };
    if block.id != BlockId::ffn(layer) {
        return Err(ExecError::WrongBlock {
            expected: BlockId::ffn(layer),
            got: block.id,
        });
    }
    let x = rms_norm(h_in, norm, cfg.norm_eps)?;
    let act = silu(&matmul(&x, gate)?)?.mul(&matmul(&x, up)?)?;
    Ok(matmul(&act, down)?)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy next token from the last row of `h_last`.
pub fn postprocess(
    h_last: &Tensor,
    block: &BlockWeights,
    cfg: &ModelConfig,
) -> Result<u32, ExecError> {
    let BlockTensors::Postprocess { norm, head } = &block.tensors else {
        return Err(ExecError::WrongBlock {
            expected: BlockId::POST,
            got: block.id,
        });
    };
    let (rows, _) = h_last.dims2("postprocess")?;
    let last = h_last.slice_rows(rows - 1, rows)?;
    let logits = matmul(&rms_norm(&last, norm, cfg.norm_eps)?, head)?;
    Ok(argmax(logits.data()).expect("vocab is non-empty") as u32)
}

/// Source of resident blocks. `acquire` may block until the block is loaded.
pub trait BlockProvider {
    fn acquire(&mut self, id: BlockId) -> Result<Arc<BlockWeights>, ExecError>;
    /// Called once the block's compute is done.
    fn release(&mut self, id: BlockId) -> Result<(), ExecError>;
}

/// Every block held in memory for the whole run.
#[derive(Debug, Clone)]
pub struct ResidentBlocks {
    blocks: Vec<Arc<BlockWeights>>,
}

impl ResidentBlocks {
    pub fn new(blocks: Vec<BlockWeights>) -> Self {
        Self {
            blocks: blocks.into_iter().map(Arc::new).collect(),
        }
    }
}

impl BlockProvider for ResidentBlocks {
    fn acquire(&mut self, id: BlockId) -> Result<Arc<BlockWeights>, ExecError> {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .cloned()
            .ok_or(ExecError::NotLoaded(id))
    }

    fn release(&mut self, _: BlockId) -> Result<(), ExecError> {
        Ok(())
    }
}

/// Timing hooks around compute and communication.
pub trait Probe {
    fn compute_begin(&mut self, _id: BlockId) {}
    fn compute_end(&mut self, _id: BlockId) {}
    fn comm_begin(&mut self, _phase: Phase) {}
    fn comm_end(&mut self, _phase: Phase) {}
}

#[derive(Debug, Default)]
pub struct NoProbe;

impl Probe for NoProbe {}

/// One device's decode state.
#[derive(Debug, Clone)]
pub struct ShardEngine {
    cfg: ModelConfig,
    cache: KvCacheShard,
}

impl ShardEngine {
    /// `kv_width` is this device's kv heads times the head dimension.
    pub fn new(cfg: ModelConfig, kv_width: usize) -> Self {
        let cache = KvCacheShard::new(cfg.layers, kv_width);
        Self { cfg, cache }
    }

    pub fn cache(&self) -> &KvCacheShard {
        &self.cache
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn backbone<C: Collective, P: BlockProvider, R: Probe>(
        &mut self,
        inputs: &StepInputs,
        comm: &mut C,
        blocks: &mut P,
        probe: &mut R,
    ) -> Result<Tensor, ExecError> {
        let mut h = inputs.hidden.clone();
        for l in 0..self.cfg.layers {
            let id = BlockId::attn(l);
            let block = blocks.acquire(id)?;
            probe.compute_begin(id);
            let part = attention_block(&h, &block, &mut self.cache, l, inputs, &self.cfg)?;
            probe.compute_end(id);
            drop(block);
            blocks.release(id)?;
            probe.comm_begin(Phase::Attn);
            let sum = comm.all_reduce(part, l as u32, Phase::Attn)?;
            probe.comm_end(Phase::Attn);
            h = h.add(&sum)?;

            let id = BlockId::ffn(l);
            let block = blocks.acquire(id)?;
            probe.compute_begin(id);
            let part = ffn_block(&h, &block, l, &self.cfg)?;
            probe.compute_end(id);
            drop(block);
            blocks.release(id)?;
            probe.comm_begin(Phase::Ffn);
            let sum = comm.all_reduce(part, l as u32, Phase::Ffn)?;
            probe.comm_end(Phase::Ffn);
            h = h.add(&sum)?;
        }
        Ok(h)
    }

    /// Master side of one step over `ids` (the prompt, then one token at a
    /// time). Returns the next token.
    pub fn master_step<C: Collective, P: BlockProvider, R: Probe>(
        &mut self,
        ids: &[u32],
        comm: &mut C,
        blocks: &mut P,
        probe: &mut R,
    ) -> Result<u32, ExecError> {
        let pre = blocks.acquire(BlockId::PRE)?;
        probe.compute_begin(BlockId::PRE);
        let BlockTensors::Preprocess { embedding } = &pre.tensors else {
            return Err(ExecError::WrongBlock {
                expected: BlockId::PRE,
                got: pre.id,
            });
        };
        let inputs = preprocess(ids, embedding, self.cache.len())?;
        probe.compute_end(BlockId::PRE);
        drop(pre);
        blocks.release(BlockId::PRE)?;

        comm.broadcast(&inputs)?;
        let h = self.backbone(&inputs, comm, blocks, probe)?;
        let (rows, _) = h.dims2("final")?;
        let last = h.slice_rows(rows - 1, rows)?;
        probe.comm_begin(Phase::Final);
        let total = comm
            .reduce(last, self.cfg.layers as u32, Phase::Final)?
            .ok_or_else(|| CommError::protocol(0, "reduce returned nothing on master"))?;
        probe.comm_end(Phase::Final);

        let post = blocks.acquire(BlockId::POST)?;
        probe.compute_begin(BlockId::POST);
        let id = postprocess(&total, &post, &self.cfg)?;
        probe.compute_end(BlockId::POST);
        drop(post);
        blocks.release(BlockId::POST)?;
        Ok(id)
    }

    /// Worker side of one step. Returns `false` once the master shuts down.
    pub fn worker_step<C: Collective, P: BlockProvider, R: Probe>(
        &mut self,
        comm: &mut C,
        blocks: &mut P,
        probe: &mut R,
    ) -> Result<bool, ExecError> {
        let Some(inputs) = comm.receive_broadcast()? else {
            return Ok(false);
        };
        inputs.validate()?;
        let h = self.backbone(&inputs, comm, blocks, probe)?;
        // The master already holds the full final hidden state; workers add zero.
        let zeros = Tensor::zeros(vec![1, h.shape()[1]]);
        comm.reduce(zeros, self.cfg.layers as u32, Phase::Final)?;
        Ok(true)
    }

    /// Greedy decode of up to `max_new` tokens, stopping after EOS.
    pub fn generate<C: Collective, P: BlockProvider, R: Probe>(
        &mut self,
        prompt: &[u32],
        max_new: usize,
        comm: &mut C,
        blocks: &mut P,
        probe: &mut R,
    ) -> Result<Vec<u32>, ExecError> {
        let mut out = Vec::with_capacity(max_new);
        let mut feed: Vec<u32> = prompt.to_vec();
        while out.len() < max_new {
            let next = self.master_step(&feed, comm, blocks, probe)?;
            out.push(next);
            if Some(next) == self.cfg.eos {
                break;
            }
            feed = vec![next];
        }
        Ok(out)
    }
}

/// The whole model on one device with no communication.
pub fn full_blocks(
    cfg: &ModelConfig,
    weights: &ModelWeights,
) -> Result<Vec<BlockWeights>, ExecError> {
    let plan = plan_shards(cfg, &[1.0])?;
    Ok(shard_blocks(weights, cfg, &plan, 0)?)
}

/// Single-process, unsharded greedy decode.
pub fn reference_forward(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    prompt: &[u32],
    steps: usize,
) -> Result<Vec<u32>, ExecError> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let mut blocks = ResidentBlocks::new(full_blocks(cfg, weights)?);
    let mut engine = ShardEngine::new(cfg.clone(), cfg.kv_heads * cfg.head_dim());
    engine.generate(
        prompt,
        steps,
        &mut SoloCollective,
        &mut blocks,
        &mut NoProbe,
    )
}
