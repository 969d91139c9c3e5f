//! Head and FFN-column sharding across devices, and the per-block weight
//! slices that the memory scheduler loads and unloads.
//!
//! Query heads travel with their key/value head, so a device's attention
//! never needs another device's cache. Norm gains are replicated on every
//! device. The embedding and task head live only on rank 0.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::tensor::{Tensor, TensorError};
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("proportions must be non-negative and sum to 1, got sum {0}")]
    Proportions(f64),
    #[error("need at least one device")]
    NoDevices,
    #[error("device {device} would receive no {what}")]
    Infeasible { device: usize, what: &'static str },
    #[error("device {device} is outside the plan of {n} devices")]
    UnknownDevice { device: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What a block holds. The discriminant is the on-disk kind byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    Preprocess = 0,
    Attention = 1,
    Ffn = 2,
    Postprocess = 3,
}

impl BlockKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Preprocess),
            1 => Some(Self::Attention),
            2 => Some(Self::Ffn),
            3 => Some(Self::Postprocess),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Preprocess => "pre",
            Self::Attention => "attn",
            Self::Ffn => "ffn",
            Self::Postprocess => "post",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "pre" => Some(Self::Preprocess),
            "attn" => Some(Self::Attention),
            "ffn" => Some(Self::Ffn),
            "post" => Some(Self::Postprocess),
            _ => None,
        }
    }
}

/// One unit of load/unload. Layers are 0-based; pre/post use layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId {
    pub kind: BlockKind,
    pub layer: u32,
}

impl BlockId {
    pub const PRE: BlockId = BlockId {
        kind: BlockKind::Preprocess,
        layer: 0,
    };
    pub const POST: BlockId = BlockId {
        kind: BlockKind::Postprocess,
        layer: 0,
    };

    pub fn attn(layer: usize) -> Self {
        Self {
            kind: BlockKind::Attention,
            layer: layer as u32,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            kind: BlockKind::Ffn,
            layer: layer as u32,
        }
    }

    pub fn is_backbone(&self) -> bool {
        matches!(self.kind, BlockKind::Attention | BlockKind::Ffn)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            BlockKind::Preprocess | BlockKind::Postprocess => f.write_str(self.kind.name()),
            _ => write!(f, "{}.{}", self.kind.name(), self.layer),
        }
    }
}

/// Execution order of one forward step on a device: `pre` (master only),
/// then attention and FFN per layer, then `post` (master only).
pub fn block_sequence(cfg: &ModelConfig, is_master: bool) -> Vec<BlockId> {
    let mut seq = Vec::with_capacity(2 * cfg.layers + 2);
    if is_master {
        seq.push(BlockId::PRE);
    }
    for l in 0..cfg.layers {
        seq.push(BlockId::attn(l));
        seq.push(BlockId::ffn(l));
    }
    if is_master {
        seq.push(BlockId::POST);
    }
    seq
}

/// One device's slice of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceShard {
    pub rank: usize,
    pub heads: Range<usize>,
    pub kv_heads: Range<usize>,
    pub ffn_cols: Range<usize>,
}

impl DeviceShard {
    pub fn is_master(&self) -> bool {
        self.rank == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardPlan {
    pub proportions: Vec<f64>,
    pub devices: Vec<DeviceShard>,
}

impl ShardPlan {
    pub fn n(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, rank: usize) -> Result<&DeviceShard, PartitionError> {
        self.devices.get(rank).ok_or(PartitionError::UnknownDevice {
            device: rank,
            n: self.devices.len(),
        })
    }

    pub fn head_counts(&self) -> Vec<usize> {
        self.devices.iter().map(|d| d.heads.len()).collect()
    }
}

/// Integral split of `total` units proportional to `p`: floors first, then
/// the leftover units go to the largest fractional remainders (lower index
/// wins a tie).
pub fn largest_remainder(total: usize, p: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|&x| x * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - libm::floor(quotas[i]);
        let rj = quotas[j] - libm::floor(quotas[j]);
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn contiguous(counts: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect()
}

/// Assigns heads and FFN columns to devices in proportion to `p`.
///
/// Key/value heads are apportioned first and each brings its whole group of
/// query heads; FFN columns form one contiguous range per device.
pub fn plan_shards(cfg: &ModelConfig, p: &[f64]) -> Result<ShardPlan, PartitionError> {
    if p.is_empty() {
        return Err(PartitionError::NoDevices);
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| x.is_nan() || *x < 0.0) || libm::fabs(sum - 1.0) > 1e-9 {
        return Err(PartitionError::Proportions(sum));
    }
    let kv = largest_remainder(cfg.kv_heads, p);
    if let Some(device) = kv.iter().position(|&c| c == 0) {
        return Err(PartitionError::Infeasible {
            device,
            what: "attention heads",
        });
    }
    let cols = largest_remainder(cfg.ffn, p);
    if let Some(device) = cols.iter().position(|&c| c == 0) {
        return Err(PartitionError::Infeasible {
            device,
            what: "FFN columns",
        });
    }
    let q: Vec<usize> = kv.iter().map(|k| k * cfg.group_size()).collect();
    let devices = contiguous(&q)
        .into_iter()
        .zip(contiguous(&kv))
        .zip(contiguous(&cols))
        .enumerate()
        .map(|(rank, ((heads, kv_heads), ffn_cols))| DeviceShard {
            rank,
            heads,
            kv_heads,
            ffn_cols,
        })
        .collect();
    Ok(ShardPlan {
        proportions: p.to_vec(),
        devices,
    })
}

/// Tensors of one block, in on-disk order.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockTensors {
    Preprocess {
        embedding: Tensor,
    },
    Attention {
        norm: Tensor,
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
    },
    Ffn {
        norm: Tensor,
        gate: Tensor,
        up: Tensor,
        down: Tensor,
    },
    Postprocess {
        norm: Tensor,
        head: Tensor,
    },
}

impl BlockTensors {
    pub fn kind(&self) -> BlockKind {
        match self {
            Self::Preprocess { .. } => BlockKind::Preprocess,
            Self::Attention { .. } => BlockKind::Attention,
            Self::Ffn { .. } => BlockKind::Ffn,
            Self::Postprocess { .. } => BlockKind::Postprocess,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Preprocess { embedding } => vec![("embedding", embedding)],
            Self::Attention {
                norm,
                wq,
                wk,
                wv,
                wo,
            } => vec![
                ("attn_norm", norm),
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
            ],
            Self::Ffn {
                norm,
                gate,
                up,
                down,
            } => vec![
                ("ffn_norm", norm),
                ("gate", gate),
                ("up", up),
                ("down", down),
            ],
            Self::Postprocess { norm, head } => vec![("final_norm", norm), ("head", head)],
        }
    }

    /// Rebuilds a block from tensors in on-disk order.
    pub fn from_ordered(kind: BlockKind, tensors: Vec<Tensor>) -> Result<Self, String> {
        let expected = match kind {
            BlockKind::Preprocess => 1,
            BlockKind::Attention => 5,
            BlockKind::Ffn => 4,
            BlockKind::Postprocess => 2,
        };
        if tensors.len() != expected {
            return Err(format!(
                "{} block needs {expected} tensors, found {}",
                kind.name(),
                tensors.len()
            ));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(match kind {
            BlockKind::Preprocess => Self::Preprocess { embedding: next() },
            BlockKind::Attention => Self::Attention {
                norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            },
            BlockKind::Ffn => Self::Ffn {
                norm: next(),
                gate: next(),
                up: next(),
                down: next(),
            },
            BlockKind::Postprocess => Self::Postprocess {
                norm: next(),
                head: next(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub id: BlockId,
    pub tensors: BlockTensors,
}

impl BlockWeights {
    pub fn param_count(&self) -> usize {
        self.tensors.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn byte_size(&self) -> u64 {
        4 * self.param_count() as u64
    }
}

/// Cuts device `rank`'s blocks out of the full weights, in execution order.
pub fn shard_blocks(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    plan: &ShardPlan,
    rank: usize,
) -> Result<Vec<BlockWeights>, PartitionError> {
    weights.check_shapes(cfg)?;
    let dev = plan.device(rank)?;
    let d = cfg.head_dim();
    let (q0, q1) = (dev.heads.start * d, dev.heads.end * d);
    let (k0, k1) = (dev.kv_heads.start * d, dev.kv_heads.end * d);
    let (c0, c1) = (dev.ffn_cols.start, dev.ffn_cols.end);

    let mut blocks = Vec::with_capacity(2 * cfg.layers + 2);
    if dev.is_master() {
        blocks.push(BlockWeights {
            id: BlockId::PRE,
            tensors: BlockTensors::Preprocess {
                embedding: weights.embedding.clone(),
            },
        });
    }
    for (l, lw) in weights.layers.iter().enumerate() {
        blocks.push(BlockWeights {
            id: BlockId::attn(l),
            tensors: BlockTensors::Attention {
                norm: lw.attn_norm.clone(),
                wq: lw.wq.slice_cols(q0, q1)?,
                wk: lw.wk.slice_cols(k0, k1)?,
                wv: lw.wv.slice_cols(k0, k1)?,
                wo: lw.wo.slice_rows(q0, q1)?,
            },
        });
        blocks.push(BlockWeights {
            id: BlockId::ffn(l),
            tensors: BlockTensors::Ffn {
                norm: lw.ffn_norm.clone(),
                gate: lw.gate.slice_cols(c0, c1)?,
                up: lw.up.slice_cols(c0, c1)?,
                down: lw.down.slice_rows(c0, c1)?,
            },
        });
    }
    if dev.is_master() {
        blocks.push(BlockWeights {
            id: BlockId::POST,
            tensors: BlockTensors::Postprocess {
                norm: weights.final_norm.clone(),
                head: weights.head.clone(),
            },
        });
    }
    Ok(blocks)
}

/// Parameter count of one block on `dev`, from its integral allocation.
pub fn block_params(cfg: &ModelConfig, dev: &DeviceShard, kind: BlockKind) -> u64 {
    let (h, v, d) = (cfg.hidden as u64, cfg.vocab as u64, cfg.head_dim() as u64);
    match kind {
        BlockKind::Preprocess => h * v,
        BlockKind::Attention => {
            let q = dev.heads.len() as u64 * d;
            let kv = dev.kv_heads.len() as u64 * d;
            h * q + 2 * h * kv + q * h + h
        }
        BlockKind::Ffn => 3 * h * dev.ffn_cols.len() as u64 + h,
        BlockKind::Postprocess => h * v + h,
    }
}

/// Byte size of every block device `rank` holds, in execution order.
pub fn shard_byte_sizes(
    cfg: &ModelConfig,
    plan: &ShardPlan,
    rank: usize,
) -> Result<Vec<(BlockId, u64)>, PartitionError> {
    let dev = plan.device(rank)?;
    Ok(block_sequence(cfg, dev.is_master())
        .into_iter()
        .map(|id| (id, 4 * block_params(cfg, dev, id.kind)))
        .collect())
}

/// Closed-form block parameter counts for a real-valued proportion `p`
/// (the table form: `hv`, `2(a+b)h²p/a + h`, `3hsp + h`, `hv + h`).
pub fn formula_block_params(cfg: &ModelConfig, kind: BlockKind, p: f64) -> f64 {
    let (h, v, a, b, s) = (
        cfg.hidden as f64,
        cfg.vocab as f64,
        cfg.heads as f64,
        cfg.kv_heads as f64,
        cfg.ffn as f64,
    );
    match kind {
        BlockKind::Preprocess => h * v,
        BlockKind::Attention => 2.0 * (a + b) * h * h * p / a + h,
        BlockKind::Ffn => 3.0 * h * s * p + h,
        BlockKind::Postprocess => h * v + h,
    }
}
