//! Shard files and per-device manifests.
//!
//! Layout of a shard directory:
//!
//! ```text
//! model.cfg              model config, key=value
//! rank{r}/manifest.txt   one line per block: kind layer path bytes crc32
//! rank{r}/{block}.tpiw   one record per tensor of that block
//! ```
//!
//! A tensor record is `"TPIW"`, u16 version, u8 block kind, u32 layer, u8
//! ndim, u32 dims, fp32 LE payload and a CRC32 of the payload. All integers
//! are little-endian. The manifest header carries the proportions, the rank
//! and a digest of the full model so peers can check they were sharded
//! together.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tpinfer_core::partition::{
    plan_shards, shard_blocks, BlockId, BlockKind, BlockTensors, BlockWeights, ShardPlan,
};
use tpinfer_core::weights::ModelWeights;
use tpinfer_core::{ModelConfig, Tensor};

use crate::error::{Result, RuntimeError};

pub const RECORD_MAGIC: [u8; 4] = *b"TPIW";
pub const RECORD_VERSION: u16 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";
pub const MODEL_CONFIG_NAME: &str = "model.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: BlockId,
    /// File name relative to the rank directory.
    pub path: String,
    /// Parameter bytes of the block (4 per fp32 value).
    pub bytes: u64,
    /// CRC32 of the whole file.
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rank: usize,
    pub proportions: Vec<f64>,
    pub digest: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn n(&self) -> usize {
        self.proportions.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn sizes(&self) -> Vec<(BlockId, u64)> {
        self.entries.iter().map(|e| (e.id, e.bytes)).collect()
    }

    pub fn entry(&self, id: BlockId) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p: Vec<String> = self.proportions.iter().map(|x| format!("{x}")).collect();
        let _ = writeln!(s, "# rank {}", self.rank);
        let _ = writeln!(s, "# proportions {}", p.join(","));
        let _ = writeln!(s, "# digest {:08x}", self.digest);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {} {:08x}",
                e.id.kind.name(),
                e.id.layer,
                e.path,
                e.bytes,
                e.crc32
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad =
            |line: usize, msg: &str| RuntimeError::config(format!("manifest line {line}: {msg}"));
        let mut rank = None;
        let mut proportions = None;
        let mut digest = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let no = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("rank"), Some(v)) => {
                        rank = Some(v.parse().map_err(|_| bad(no, "bad rank"))?)
                    }
                    (Some("proportions"), Some(v)) => {
                        let p: std::result::Result<Vec<f64>, _> =
                            v.split(',').map(str::parse).collect();
                        proportions = Some(p.map_err(|_| bad(no, "bad proportions"))?);
                    }
                    (Some("digest"), Some(v)) => {
                        digest =
                            Some(u32::from_str_radix(v, 16).map_err(|_| bad(no, "bad digest"))?)
                    }
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(no, "expected: kind layer path bytes crc32"));
            }
            let kind = BlockKind::from_name(f[0]).ok_or_else(|| bad(no, "unknown block kind"))?;
            let layer: u32 = f[1].parse().map_err(|_| bad(no, "bad layer"))?;
            let bytes: u64 = f[3].parse().map_err(|_| bad(no, "bad byte count"))?;
            let crc32 = u32::from_str_radix(f[4], 16).map_err(|_| bad(no, "bad crc32"))?;
            entries.push(ManifestEntry {
                id: BlockId { kind, layer },
                path: f[2].to_string(),
                bytes,
                crc32,
            });
        }
        Ok(Self {
            rank: rank.ok_or_else(|| bad(0, "missing rank header"))?,
            proportions: proportions.ok_or_else(|| bad(0, "missing proportions header"))?,
            digest: digest.ok_or_else(|| bad(0, "missing digest header"))?,
            entries,
        })
    }
}

/// Folds the 64-bit weight digest into the 32-bit handshake word.
pub fn handshake_digest(weights: &ModelWeights) -> u32 {
    let d = weights.digest();
    (d ^ (d >> 32)) as u32
}

pub fn rank_dir(root: &Path, rank: usize) -> PathBuf {
    root.join(format!("rank{rank}"))
}

pub fn block_file_name(id: BlockId) -> String {
    match id.kind {
        BlockKind::Preprocess | BlockKind::Postprocess => format!("{}.tpiw", id.kind.name()),
        _ => format!("{}_{:04}.tpiw", id.kind.name(), id.layer),
    }
}

pub fn encode_block(block: &BlockWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(block.byte_size() as usize + 64);
    for (_, t) in block.tensors.named() {
        out.extend_from_slice(&RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.push(block.id.kind as u8);
        out.extend_from_slice(&block.id.layer.to_le_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("truncated record")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_block(bytes: &[u8], expected: BlockId) -> std::result::Result<BlockWeights, String> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let mut tensors = Vec::new();
    while !cur.done() {
        if cur.take(4)? != RECORD_MAGIC {
            return Err("bad record magic".into());
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        if version != RECORD_VERSION {
            return Err(format!("unsupported record version {version}"));
        }
        let kind = cur.take(1)?[0];
        let layer = cur.u32()?;
        if kind != expected.kind as u8 || layer != expected.layer {
            return Err(format!("record belongs to kind {kind} layer {layer}"));
        }
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or("shape overflow")?;
        let payload = cur.take(count)?;
        let crc = cur.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err("payload checksum mismatch".into());
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    let tensors = BlockTensors::from_ordered(expected.kind, tensors)?;
    Ok(BlockWeights {
        id: expected,
        tensors,
    })
}

/// Writes every device's shard and manifest under `out`, plus `model.cfg`.
pub fn write_shards(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    proportions: &[f64],
    out: &Path,
) -> Result<Vec<Manifest>> {
    let plan = plan_shards(cfg, proportions)?;
    let digest = handshake_digest(weights);
    fs::create_dir_all(out).map_err(|e| RuntimeError::io_at(out, e))?;
    let cfg_path = out.join(MODEL_CONFIG_NAME);
    fs::write(&cfg_path, cfg.to_kv_string()).map_err(|e| RuntimeError::io_at(&cfg_path, e))?;
    let mut manifests = Vec::with_capacity(plan.n());
    for rank in 0..plan.n() {
        manifests.push(write_device(cfg, weights, &plan, rank, digest, out)?);
    }
    Ok(manifests)
}

fn write_device(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    plan: &ShardPlan,
    rank: usize,
    digest: u32,
    out: &Path,
) -> Result<Manifest> {
    let dir = rank_dir(out, rank);
    fs::create_dir_all(&dir).map_err(|e| RuntimeError::io_at(&dir, e))?;
    let mut entries = Vec::new();
    for block in shard_blocks(weights, cfg, plan, rank)? {
        let name = block_file_name(block.id);
        let bytes = encode_block(&block);
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| RuntimeError::io_at(&path, e))?;
        entries.push(ManifestEntry {
            id: block.id,
            path: name,
            bytes: block.byte_size(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        rank,
        proportions: plan.proportions.clone(),
        digest,
        entries,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| RuntimeError::io_at(&path, e))?;
    Ok(manifest)
}

pub fn read_model_config(root: &Path) -> Result<ModelConfig> {
    let path = root.join(MODEL_CONFIG_NAME);
    let text = fs::read_to_string(&path).map_err(|e| RuntimeError::io_at(&path, e))?;
    Ok(ModelConfig::from_kv_str(&text)?)
}

pub fn read_manifest(root: &Path, rank: usize) -> Result<Manifest> {
    let path = rank_dir(root, rank).join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| RuntimeError::io_at(&path, e))?;
    let m = Manifest::parse(&text)?;
    if m.rank != rank {
        return Err(RuntimeError::config(format!(
            "{} describes rank {}, expected {rank}",
            path.display(),
            m.rank
        )));
    }
    Ok(m)
}

/// Reads and verifies one block of device `manifest.rank` under `root`.
pub fn load_block(
    root: &Path,
    manifest: &Manifest,
    id: BlockId,
) -> std::result::Result<BlockWeights, String> {
    let entry = manifest
        .entry(id)
        .ok_or_else(|| format!("block {id} is not in the manifest"))?;
    let path = rank_dir(root, manifest.rank).join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if crc32fast::hash(&bytes) != entry.crc32 {
        return Err(format!("{}: file checksum mismatch", path.display()));
    }
    let block = decode_block(&bytes, id).map_err(|e| format!("{}: {e}", path.display()))?;
    if block.byte_size() != entry.bytes {
        return Err(format!("{}: size differs from manifest", path.display()));
    }
    Ok(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tpinfer_core::weights::generate_toy_weights;

    #[test]
    fn block_record_round_trip() {
        let cfg = ModelConfig::default();
        let w = generate_toy_weights(&cfg, 3);
        let plan = plan_shards(&cfg, &[0.5, 0.5]).unwrap();
        for block in shard_blocks(&w, &cfg, &plan, 0).unwrap() {
            let bytes = encode_block(&block);
            assert_eq!(decode_block(&bytes, block.id).unwrap(), block);
        }
    }

    #[test]
    fn corrupt_payload_is_caught() {
        let cfg = ModelConfig::default();
        let w = generate_toy_weights(&cfg, 3);
        let plan = plan_shards(&cfg, &[1.0]).unwrap();
        let block = shard_blocks(&w, &cfg, &plan, 0).unwrap().remove(1);
        let mut bytes = encode_block(&block);
        bytes[40] ^= 0x01;
        assert!(decode_block(&bytes, block.id)
            .unwrap_err()
            .contains("checksum"));
        assert!(decode_block(&bytes[..bytes.len() - 1], block.id).is_err());
        assert!(decode_block(&encode_block(&block), BlockId::ffn(0)).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            rank: 1,
            proportions: vec![0.75, 0.25],
            digest: 0xdead_beef,
            entries: vec![ManifestEntry {
                id: BlockId::ffn(3),
                path: "ffn_0003.tpiw".into(),
                bytes: 1234,
                crc32: 7,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("attn 0 x 1\n").is_err());
    }
}
