//! Point-to-point links and the star collective built on them.
//!
//! Two link kinds exist: an in-process loopback over channels, which can
//! inject a synthetic per-frame delay of `τ + bytes·8/B`, and TCP. Every
//! frame travels encoded, so both exercise the same wire format.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tpinfer_core::comm::{
    read_len_prefix, star_sum, step_frames, step_from_frames, Collective, CommError, MsgType,
    Phase, WireFrame, MAX_FRAME_BYTES, PROTOCOL_VERSION,
};
use tpinfer_core::exec::StepInputs;
use tpinfer_core::Tensor;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A bidirectional, ordered frame channel to one peer.
pub trait Link: Send {
    fn peer(&self) -> usize;
    fn set_peer(&mut self, rank: usize);
    fn send(&mut self, frame: &WireFrame) -> Result<(), CommError>;
    fn recv(&mut self) -> Result<WireFrame, CommError>;
}

/// Synthetic link cost: fixed latency plus serialization at a bandwidth.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkModel {
    pub tau: Duration,
    /// Bits per second; `None` means infinite.
    pub bandwidth_bps: Option<f64>,
}

impl LinkModel {
    pub fn new(tau_ms: f64, bandwidth_bps: Option<f64>) -> Self {
        Self {
            tau: Duration::from_secs_f64(tau_ms.max(0.0) / 1e3),
            bandwidth_bps,
        }
    }

    pub fn serialization(&self, bytes: usize) -> Duration {
        match self.bandwidth_bps {
            Some(b) if b > 0.0 => Duration::from_secs_f64(bytes as f64 * 8.0 / b),
            _ => Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    pub from: usize,
    pub to: usize,
    pub bytes: Vec<u8>,
}

/// Shared record of every encoded frame sent on a set of loopback links.
pub type Capture = Arc<Mutex<Vec<CapturedFrame>>>;

struct Packet {
    deliver_at: Instant,
    bytes: Vec<u8>,
}

pub struct LoopbackLink {
    me: usize,
    peer: usize,
    tx: Sender<Packet>,
    rx: Receiver<Packet>,
    model: LinkModel,
    link_free: Instant,
    timeout: Duration,
    capture: Option<Capture>,
}

impl LoopbackLink {
    /// Both ends of a link between ranks `a` and `b`.
    pub fn pair(
        a: usize,
        b: usize,
        model: LinkModel,
        timeout: Duration,
        capture: Option<Capture>,
    ) -> (Self, Self) {
        let (tx_ab, rx_ab) = channel();
        let (tx_ba, rx_ba) = channel();
        let now = Instant::now();
        let end = |me, peer, tx, rx| LoopbackLink {
            me,
            peer,
            tx,
            rx,
            model,
            link_free: now,
            timeout,
            capture: capture.clone(),
        };
        (end(a, b, tx_ab, rx_ba), end(b, a, tx_ba, rx_ab))
    }
}

impl Link for LoopbackLink {
    fn peer(&self) -> usize {
        self.peer
    }

    fn set_peer(&mut self, rank: usize) {
        self.peer = rank;
    }

    fn send(&mut self, frame: &WireFrame) -> Result<(), CommError> {
        let bytes = frame.encode();
        let start = self.link_free.max(Instant::now());
        self.link_free = start + self.model.serialization(bytes.len());
        let deliver_at = self.link_free + self.model.tau;
        if let Some(cap) = &self.capture {
            cap.lock().expect("capture lock").push(CapturedFrame {
                from: self.me,
                to: self.peer,
                bytes: bytes.clone(),
            });
        }
        self.tx
            .send(Packet { deliver_at, bytes })
            .map_err(|_| CommError::Disconnected { rank: self.peer })
    }

    fn recv(&mut self) -> Result<WireFrame, CommError> {
        let packet = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => CommError::Timeout { rank: self.peer },
            RecvTimeoutError::Disconnected => CommError::Disconnected { rank: self.peer },
        })?;
        let now = Instant::now();
        if packet.deliver_at > now {
            std::thread::sleep(packet.deliver_at - now);
        }
        let (frame, used) = WireFrame::decode(&packet.bytes)?;
        if used != packet.bytes.len() {
            return Err(CommError::protocol(self.peer, "trailing bytes after frame"));
        }
        Ok(frame)
    }
}

pub struct TcpLink {
    peer: usize,
    stream: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream, peer: usize, timeout: Duration) -> Result<Self, CommError> {
        let io = |e: std::io::Error| CommError::Io(e.to_string());
        stream.set_nodelay(true).map_err(io)?;
        stream.set_nonblocking(false).map_err(io)?;
        stream.set_read_timeout(Some(timeout)).map_err(io)?;
        stream.set_write_timeout(Some(timeout)).map_err(io)?;
        Ok(Self { peer, stream })
    }

    fn map_io(&self, e: std::io::Error) -> CommError {
        match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => CommError::Timeout { rank: self.peer },
            ErrorKind::UnexpectedEof
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::BrokenPipe => CommError::Disconnected { rank: self.peer },
            _ => CommError::Io(format!("peer {}: {e}", self.peer)),
        }
    }
}

impl Link for TcpLink {
    fn peer(&self) -> usize {
        self.peer
    }

    fn set_peer(&mut self, rank: usize) {
        self.peer = rank;
    }

    fn send(&mut self, frame: &WireFrame) -> Result<(), CommError> {
        let bytes = frame.encode();
        self.stream.write_all(&bytes).map_err(|e| self.map_io(e))
    }

    fn recv(&mut self) -> Result<WireFrame, CommError> {
        let mut prefix = [0u8; 4];
        self.stream
            .read_exact(&mut prefix)
            .map_err(|e| self.map_io(e))?;
        let len = read_len_prefix(&prefix)?;
        if len > MAX_FRAME_BYTES {
            return Err(CommError::protocol(
                self.peer,
                format!("frame of {len} bytes"),
            ));
        }
        let mut body = vec![0u8; len];
        self.stream
            .read_exact(&mut body)
            .map_err(|e| self.map_io(e))?;
        Ok(WireFrame::decode_body(&body)?)
    }
}

/// Per-node traffic counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    /// Allreduce and final-reduce rounds this node took part in.
    pub allreduce_rounds: u64,
    /// This node's contributed payload bytes over those rounds.
    pub allreduce_bytes: u64,
    /// Frames sent, indexed by message type.
    pub frames_sent: [u64; 6],
    pub bytes_sent: u64,
}

/// Star topology collective: workers talk only to the master, which sums
/// contributions in rank order.
pub struct StarCollective {
    rank: usize,
    n: usize,
    /// Master: link to rank `r` at `r - 1`. Worker: the master link.
    links: Vec<Box<dyn Link>>,
    stats: CommStats,
}

impl StarCollective {
    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    fn send(&mut self, idx: usize, frame: &WireFrame) -> Result<(), CommError> {
        self.links[idx].send(frame)?;
        self.stats.frames_sent[frame.msg_type as usize] += 1;
        self.stats.bytes_sent += frame.encoded_len() as u64;
        Ok(())
    }

    /// Master side of the handshake over links in any order. Returns the
    /// collective with links sorted by the ranks the workers announced.
    pub fn master_handshake(
        n: usize,
        mut links: Vec<Box<dyn Link>>,
        digest: u32,
    ) -> Result<Self, CommError> {
        if links.len() + 1 != n {
            return Err(CommError::Handshake(format!(
                "{} worker links for a world of {n}",
                links.len()
            )));
        }
        let mut slots: Vec<Option<Box<dyn Link>>> = (1..n).map(|_| None).collect();
        for mut link in links.drain(..) {
            let hello = link.recv()?;
            let (rank, version, theirs) = hello.hello_fields().ok_or_else(|| {
                CommError::Handshake(format!("expected Hello, got {:?}", hello.msg_type))
            })?;
            let rank = rank as usize;
            check_hello(version, theirs, digest, rank)?;
            if rank == 0 || rank >= n || slots[rank - 1].is_some() {
                return Err(CommError::Handshake(format!(
                    "unexpected worker rank {rank}"
                )));
            }
            link.set_peer(rank);
            link.send(&WireFrame::hello(0, digest))?;
            slots[rank - 1] = Some(link);
        }
        let mut s = Self {
            rank: 0,
            n,
            links: slots
                .into_iter()
                .map(|l| l.expect("all ranks present"))
                .collect(),
            stats: CommStats::default(),
        };
        s.stats.frames_sent[MsgType::Hello as usize] += (n - 1) as u64;
        Ok(s)
    }

    fn worker_send_hello(link: &mut dyn Link, rank: usize, digest: u32) -> Result<(), CommError> {
        link.send(&WireFrame::hello(rank as u32, digest))
    }

    fn worker_await_hello(
        rank: usize,
        n: usize,
        link: Box<dyn Link>,
        digest: u32,
    ) -> Result<Self, CommError> {
        let mut link = link;
        let reply = link.recv()?;
        let (master, version, theirs) = reply.hello_fields().ok_or_else(|| {
            CommError::Handshake(format!("expected Hello, got {:?}", reply.msg_type))
        })?;
        check_hello(version, theirs, digest, 0)?;
        if master != 0 {
            return Err(CommError::Handshake(format!(
                "peer claims rank {master}, not the master"
            )));
        }
        let mut stats = CommStats::default();
        stats.frames_sent[MsgType::Hello as usize] = 1;
        Ok(Self {
            rank,
            n,
            links: vec![link],
            stats,
        })
    }

    /// Worker side of the handshake.
    pub fn worker_handshake(
        rank: usize,
        n: usize,
        mut link: Box<dyn Link>,
        digest: u32,
    ) -> Result<Self, CommError> {
        if rank == 0 || rank >= n {
            return Err(CommError::Handshake(format!(
                "worker rank {rank} outside 1..{n}"
            )));
        }
        Self::worker_send_hello(link.as_mut(), rank, digest)?;
        Self::worker_await_hello(rank, n, link, digest)
    }

    fn expect(
        &self,
        frame: &WireFrame,
        from: usize,
        ty: MsgType,
        layer: u32,
        phase: Phase,
        shape: &[usize],
    ) -> Result<(), CommError> {
        if frame.msg_type != ty || frame.layer != layer || frame.phase != phase {
            return Err(CommError::protocol(
                from,
                format!(
                    "expected {ty:?} layer {layer} {phase:?}, got {:?} layer {} {:?}",
                    frame.msg_type, frame.layer, frame.phase
                ),
            ));
        }
        let got = frame
            .tensor
            .as_ref()
            .map(|t| t.shape().to_vec())
            .unwrap_or_default();
        if got != shape {
            return Err(CommError::ShapeMismatch {
                rank: from,
                expected: shape.to_vec(),
                got,
            });
        }
        Ok(())
    }

    fn gather(
        &mut self,
        local: Tensor,
        ty: MsgType,
        layer: u32,
        phase: Phase,
    ) -> Result<Tensor, CommError> {
        let shape = local.shape().to_vec();
        let mut parts = Vec::with_capacity(self.n);
        parts.push(local);
        for r in 1..self.n {
            let frame = self.links[r - 1].recv()?;
            self.expect(&frame, r, ty, layer, phase, &shape)?;
            parts.push(frame.tensor.expect("checked shape"));
        }
        star_sum(&parts)
    }

    fn count_round(&mut self, local: &Tensor) {
        self.stats.allreduce_rounds += 1;
        self.stats.allreduce_bytes += local.byte_len() as u64;
    }
}

fn check_hello(version: u32, theirs: u32, ours: u32, rank: usize) -> Result<(), CommError> {
    if version != PROTOCOL_VERSION {
        return Err(CommError::Handshake(format!(
            "rank {rank} speaks protocol {version}, expected {PROTOCOL_VERSION}"
        )));
    }
    if theirs != ours {
        return Err(CommError::Handshake(format!(
            "rank {rank} has model digest {theirs:08x}, expected {ours:08x}"
        )));
    }
    Ok(())
}

impl Collective for StarCollective {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.n
    }

    fn broadcast(&mut self, inputs: &StepInputs) -> Result<(), CommError> {
        let frames = step_frames(inputs);
        for i in 0..self.links.len() {
            for f in &frames {
                self.send(i, f)?;
            }
        }
        Ok(())
    }

    fn receive_broadcast(&mut self) -> Result<Option<StepInputs>, CommError> {
        let first = self.links[0].recv()?;
        match first.msg_type {
            MsgType::Shutdown => Ok(None),
            MsgType::Broadcast => {
                let second = self.links[0].recv()?;
                Ok(Some(step_from_frames(first, second)?))
            }
            other => Err(CommError::protocol(
                0,
                format!("expected Broadcast, got {other:?}"),
            )),
        }
    }

    fn all_reduce(&mut self, local: Tensor, layer: u32, phase: Phase) -> Result<Tensor, CommError> {
        self.count_round(&local);
        if self.rank == 0 {
            let sum = self.gather(local, MsgType::AllreducePush, layer, phase)?;
            let pull = WireFrame::new(MsgType::AllreducePull, layer, phase, sum);
            for i in 0..self.links.len() {
                self.send(i, &pull)?;
            }
            Ok(pull.tensor.expect("pull carries the sum"))
        } else {
            let shape = local.shape().to_vec();
            self.send(
                0,
                &WireFrame::new(MsgType::AllreducePush, layer, phase, local),
            )?;
            let frame = self.links[0].recv()?;
            self.expect(&frame, 0, MsgType::AllreducePull, layer, phase, &shape)?;
            Ok(frame.tensor.expect("checked shape"))
        }
    }

    fn reduce(
        &mut self,
        local: Tensor,
        layer: u32,
        phase: Phase,
    ) -> Result<Option<Tensor>, CommError> {
        self.count_round(&local);
        if self.rank == 0 {
            Ok(Some(self.gather(local, MsgType::Reduce, layer, phase)?))
        } else {
            self.send(0, &WireFrame::new(MsgType::Reduce, layer, phase, local))?;
            Ok(None)
        }
    }

    fn shutdown(&mut self) -> Result<(), CommError> {
        if self.rank == 0 {
            for i in 0..self.links.len() {
                self.send(i, &WireFrame::shutdown())?;
            }
        }
        Ok(())
    }
}

/// A connected, handshaken in-process cluster; element `r` is rank `r`.
pub fn loopback_cluster(
    n: usize,
    model: LinkModel,
    digest: u32,
    timeout: Duration,
    capture: Option<Capture>,
) -> Result<Vec<StarCollective>, CommError> {
    if n == 0 {
        return Err(CommError::Handshake("empty cluster".into()));
    }
    let mut master_ends: Vec<Box<dyn Link>> = Vec::with_capacity(n - 1);
    let mut worker_ends: Vec<Box<dyn Link>> = Vec::with_capacity(n - 1);
    for r in 1..n {
        let (m, mut w) = LoopbackLink::pair(0, r, model, timeout, capture.clone());
        StarCollective::worker_send_hello(&mut w, r, digest)?;
        master_ends.push(Box::new(m));
        worker_ends.push(Box::new(w));
    }
    let mut out = vec![StarCollective::master_handshake(n, master_ends, digest)?];
    for (i, link) in worker_ends.into_iter().enumerate() {
        out.push(StarCollective::worker_await_hello(i + 1, n, link, digest)?);
    }
    Ok(out)
}

/// Master: accept `n - 1` workers on `listener` and handshake.
pub fn accept_workers(
    listener: &TcpListener,
    n: usize,
    digest: u32,
    timeout: Duration,
) -> Result<StarCollective, CommError> {
    let io = |e: std::io::Error| CommError::Io(e.to_string());
    listener.set_nonblocking(true).map_err(io)?;
    let deadline = Instant::now() + timeout;
    let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(n.saturating_sub(1));
    while links.len() + 1 < n {
        match listener.accept() {
            Ok((stream, addr)) => {
                log::info!("worker connected from {addr}");
                links.push(Box::new(TcpLink::new(stream, 0, timeout)?));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(CommError::Timeout {
                        rank: links.len() + 1,
                    });
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(io(e)),
        }
    }
    StarCollective::master_handshake(n, links, digest)
}

/// Worker: connect to the master, retrying until `timeout`, and handshake.
pub fn connect_master(
    addr: SocketAddr,
    rank: usize,
    n: usize,
    digest: u32,
    timeout: Duration,
) -> Result<StarCollective, CommError> {
    let deadline = Instant::now() + timeout;
    let stream = loop {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect to {addr} failed: {e}; retrying");
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => return Err(CommError::Timeout { rank: 0 }),
        }
    };
    let link = TcpLink::new(stream, 0, timeout)?;
    StarCollective::worker_handshake(rank, n, Box::new(link), digest)
}
