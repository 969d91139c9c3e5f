//! Wire frames and the collective interface the decode loop talks to.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! u32 length            bytes that follow this field
//! "TPI1"                magic
//! u8  msg_type          Hello=0 Broadcast=1 AllreducePush=2 AllreducePull=3 Reduce=4 Shutdown=5
//! u32 layer
//! u8  phase             Attn=0 Ffn=1 Final=2
//! u8  ndim
//! u32 dims[ndim]
//! f32 payload[Π dims]   empty when ndim = 0
//! ```
//!
//! No message type carries token ids; only hidden states, masks and the
//! handshake words cross the wire.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::exec::StepInputs;
use crate::tensor::{sum_in_order, Tensor};

pub const MAGIC: [u8; 4] = *b"TPI1";
pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on one frame, to reject garbage length prefixes early.
pub const MAX_FRAME_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Hello = 0,
    Broadcast = 1,
    AllreducePush = 2,
    AllreducePull = 3,
    Reduce = 4,
    Shutdown = 5,
}

impl MsgType {
    pub const ALL: [MsgType; 6] = [
        MsgType::Hello,
        MsgType::Broadcast,
        MsgType::AllreducePush,
        MsgType::AllreducePull,
        MsgType::Reduce,
        MsgType::Shutdown,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Attn = 0,
    Ffn = 1,
    Final = 2,
}

impl Phase {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Attn),
            1 => Some(Self::Ffn),
            2 => Some(Self::Final),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unknown message type {0}")]
    MsgType(u8),
    #[error("unknown phase {0}")]
    Phase(u8),
    #[error("frame length {0} exceeds limit")]
    TooLarge(usize),
    #[error("declared length {declared} but body is {actual} bytes")]
    Length { declared: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub msg_type: MsgType,
    pub layer: u32,
    pub phase: Phase,
    pub tensor: Option<Tensor>,
}

impl WireFrame {
    pub fn new(msg_type: MsgType, layer: u32, phase: Phase, tensor: Tensor) -> Self {
        Self {
            msg_type,
            layer,
            phase,
            tensor: Some(tensor),
        }
    }

    pub fn shutdown() -> Self {
        Self {
            msg_type: MsgType::Shutdown,
            layer: 0,
            phase: Phase::Final,
            tensor: None,
        }
    }

    /// Handshake carrying rank, protocol version and config digest. The two
    /// words ride in the payload as raw bit patterns.
    pub fn hello(rank: u32, digest: u32) -> Self {
        let payload = Tensor::new(
            vec![1, 2],
            vec![f32::from_bits(PROTOCOL_VERSION), f32::from_bits(digest)],
        )
        .expect("1x2 payload");
        Self::new(MsgType::Hello, rank, Phase::Final, payload)
    }

    /// `(rank, version, digest)` of a Hello frame.
    pub fn hello_fields(&self) -> Option<(u32, u32, u32)> {
        if self.msg_type != MsgType::Hello {
            return None;
        }
        let t = self.tensor.as_ref()?;
        if t.shape() != [1, 2] {
            return None;
        }
        Some((self.layer, t.data()[0].to_bits(), t.data()[1].to_bits()))
    }

    pub fn body_len(&self) -> usize {
        let (ndim, payload) = match &self.tensor {
            Some(t) => (t.ndim(), t.byte_len()),
            None => (0, 0),
        };
        4 + 1 + 4 + 1 + 1 + 4 * ndim + payload
    }

    /// Serialized size including the length prefix.
    pub fn encoded_len(&self) -> usize {
        4 + self.body_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.body_len() as u32).to_le_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.push(self.phase as u8);
        match &self.tensor {
            Some(t) => {
                out.push(t.ndim() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    /// Decodes the bytes that follow a length prefix.
    pub fn decode_body(body: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader { buf: body, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FrameError::Magic(magic));
        }
        let t = r.u8()?;
        let msg_type = MsgType::from_u8(t).ok_or(FrameError::MsgType(t))?;
        let layer = r.u32()?;
        let p = r.u8()?;
        let phase = Phase::from_u8(p).ok_or(FrameError::Phase(p))?;
        let ndim = r.u8()? as usize;
        let tensor = if ndim == 0 {
            None
        } else {
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|c| c.checked_mul(4).is_some_and(|b| b <= MAX_FRAME_BYTES))
                .ok_or(FrameError::TooLarge(usize::MAX))?;
            let raw = r.take(4 * count)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Some(Tensor::new(dims, data).expect("length matches dims"))
        };
        if r.pos != body.len() {
            return Err(FrameError::Length {
                declared: body.len(),
                actual: r.pos,
            });
        }
        Ok(Self {
            msg_type,
            layer,
            phase,
            tensor,
        })
    }

    /// Decodes one length-prefixed frame; returns it with the bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), FrameError> {
        let len = read_len_prefix(buf)?;
        let end = 4 + len;
        if buf.len() < end {
            return Err(FrameError::Truncated {
                need: end,
                have: buf.len(),
            });
        }
        Ok((Self::decode_body(&buf[4..end])?, end))
    }
}

/// Reads and bounds-checks a length prefix.
pub fn read_len_prefix(buf: &[u8]) -> Result<usize, FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::Truncated {
            need: 4,
            have: buf.len(),
        });
    }
    let len = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(len));
    }
    Ok(len)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(FrameError::Truncated {
                need: end,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommError {
    #[error("peer {rank} disconnected")]
    Disconnected { rank: usize },
    #[error("timed out waiting for peer {rank}")]
    Timeout { rank: usize },
    #[error("protocol error from peer {rank}: {msg}")]
    Protocol { rank: usize, msg: String },
    #[error("peer {rank} sent shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        rank: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("io: {0}")]
    Io(String),
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
}

impl CommError {
    pub fn protocol(rank: usize, msg: impl Into<String>) -> Self {
        Self::Protocol {
            rank,
            msg: msg.into(),
        }
    }
}

/// Master-side aggregation: `parts[r]` is rank `r`'s contribution, summed
/// in rank order starting from the master's own partial.
pub fn star_sum(parts: &[Tensor]) -> Result<Tensor, CommError> {
    let first = parts
        .first()
        .ok_or_else(|| CommError::protocol(0, "no contributions"))?;
    for (rank, p) in parts.iter().enumerate().skip(1) {
        if p.shape() != first.shape() {
            return Err(CommError::ShapeMismatch {
                rank,
                expected: first.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
    }
    sum_in_order(parts).map_err(|e| CommError::protocol(0, alloc::format!("{e}")))
}

/// The two Broadcast frames for one step: hidden states, then the mask.
/// The cache position travels in the `layer` field of both.
pub fn step_frames(inputs: &StepInputs) -> [WireFrame; 2] {
    let pos = inputs.cache_pos as u32;
    [
        WireFrame::new(MsgType::Broadcast, pos, Phase::Attn, inputs.hidden.clone()),
        WireFrame::new(MsgType::Broadcast, pos, Phase::Final, inputs.mask.clone()),
    ]
}

/// Inverse of [`step_frames`], validating shapes and the mask pattern.
pub fn step_from_frames(hidden: WireFrame, mask: WireFrame) -> Result<StepInputs, CommError> {
    let bad = |m: &str| CommError::protocol(0, m);
    if hidden.msg_type != MsgType::Broadcast
        || mask.msg_type != MsgType::Broadcast
        || hidden.phase != Phase::Attn
        || mask.phase != Phase::Final
        || hidden.layer != mask.layer
    {
        return Err(bad("malformed broadcast pair"));
    }
    let h = hidden
        .tensor
        .ok_or_else(|| bad("broadcast without hidden states"))?;
    let m = mask.tensor.ok_or_else(|| bad("broadcast without mask"))?;
    let inputs = StepInputs {
        hidden: h,
        mask: m,
        cache_pos: hidden.layer as usize,
    };
    inputs.validate().map_err(|e| bad(&alloc::format!("{e}")))?;
    Ok(inputs)
}

/// Broadcast / allreduce / reduce as seen by one rank. Rank 0 is the master.
pub trait Collective {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    /// Master: send the step inputs to every worker.
    fn broadcast(&mut self, inputs: &StepInputs) -> Result<(), CommError>;
    /// Worker: the next step's inputs, or `None` once the master shuts down.
    fn receive_broadcast(&mut self) -> Result<Option<StepInputs>, CommError>;
    /// Sum of `local` over all ranks, returned on every rank.
    fn all_reduce(&mut self, local: Tensor, layer: u32, phase: Phase) -> Result<Tensor, CommError>;
    /// Sum over all ranks, returned on the master only.
    fn reduce(
        &mut self,
        local: Tensor,
        layer: u32,
        phase: Phase,
    ) -> Result<Option<Tensor>, CommError>;
    fn shutdown(&mut self) -> Result<(), CommError>;
}

/// A world of one: every collective is the identity.
#[derive(Debug, Default)]
pub struct SoloCollective;

impl Collective for SoloCollective {
    fn rank(&self) -> usize {
        0
    }
    fn world_size(&self) -> usize {
        1
    }
    fn broadcast(&mut self, _: &StepInputs) -> Result<(), CommError> {
        Ok(())
    }
    fn receive_broadcast(&mut self) -> Result<Option<StepInputs>, CommError> {
        Ok(None)
    }
    fn all_reduce(&mut self, local: Tensor, _: u32, _: Phase) -> Result<Tensor, CommError> {
        Ok(local)
    }
    fn reduce(&mut self, local: Tensor, _: u32, _: Phase) -> Result<Option<Tensor>, CommError> {
        Ok(Some(local))
    }
    fn shutdown(&mut self) -> Result<(), CommError> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::causal_mask;
    use proptest::prelude::*;

    #[test]
    fn three_by_h_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(vec![3, 8], |i| (i as f32 * 0.37).sin() * 1e-3);
        let f = WireFrame::new(MsgType::AllreducePush, 7, Phase::Ffn, t.clone());
        let bytes = f.encode();
        assert_eq!(bytes.len(), f.encoded_len());
        let (back, used) = WireFrame::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, f);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.tensor.as_ref().unwrap()), bits(&t));
    }

    #[test]
    fn layout_is_fixed() {
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let bytes = WireFrame::new(MsgType::Reduce, 2, Phase::Final, t).encode();
        let expect: Vec<u8> = [
            &23u32.to_le_bytes()[..],
            b"TPI1",
            &[4],
            &2u32.to_le_bytes(),
            &[2, 2],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corrupt_frames() {
        let mut bytes = WireFrame::shutdown().encode();
        assert_eq!(WireFrame::decode(&bytes).unwrap().0, WireFrame::shutdown());
        bytes[4] = b'X';
        assert!(matches!(
            WireFrame::decode(&bytes),
            Err(FrameError::Magic(_))
        ));
        let mut bytes = WireFrame::shutdown().encode();
        bytes[8] = 9;
        assert_eq!(WireFrame::decode(&bytes), Err(FrameError::MsgType(9)));
        let bytes = WireFrame::hello(1, 5).encode();
        assert!(matches!(
            WireFrame::decode(&bytes[..bytes.len() - 1]),
            Err(FrameError::Truncated { .. })
        ));
    }

    #[test]
    fn hello_carries_exact_words() {
        let f = WireFrame::hello(3, 0xdead_beef);
        let (back, _) = WireFrame::decode(&f.encode()).unwrap();
        assert_eq!(
            back.hello_fields(),
            Some((3, PROTOCOL_VERSION, 0xdead_beef))
        );
    }

    #[test]
    fn star_sum_in_rank_order() {
        let ones = Tensor::from_fn(vec![2, 2], |_| 1.0);
        let s = star_sum(&[ones.clone(), ones.clone(), ones]).unwrap();
        assert_eq!(s.data(), &[3.0; 4]);
        let odd = Tensor::zeros(vec![2, 3]);
        let err = star_sum(&[Tensor::zeros(vec![2, 2]), odd]).unwrap_err();
        assert!(matches!(err, CommError::ShapeMismatch { rank: 1, .. }));
        // 1 + 2 + 3 by hand
        let c = |v: f32| Tensor::from_fn(vec![1, 2], move |_| v);
        assert_eq!(
            star_sum(&[c(1.0), c(2.0), c(3.0)]).unwrap().data(),
            &[6.0, 6.0]
        );
    }

    #[test]
    fn step_frames_round_trip() {
        let inputs = StepInputs {
            hidden: Tensor::from_fn(vec![3, 4], |i| i as f32),
            mask: causal_mask(3, 2),
            cache_pos: 2,
        };
        let [a, b] = step_frames(&inputs);
        let a = WireFrame::decode(&a.encode()).unwrap().0;
        let b = WireFrame::decode(&b.encode()).unwrap().0;
        assert_eq!(step_from_frames(a, b).unwrap(), inputs);
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = WireFrame::decode(&bytes);
        }

        #[test]
        fn payload_length_matches_dims(rows in 1usize..4, cols in 1usize..6, layer in any::<u32>()) {
            let t = Tensor::from_fn(vec![rows, cols], |i| i as f32);
            let f = WireFrame::new(MsgType::AllreducePull, layer, Phase::Attn, t);
            let bytes = f.encode();
            prop_assert_eq!(bytes.len(), 4 + 11 + 8 + 4 * rows * cols);
        }
    }
}
