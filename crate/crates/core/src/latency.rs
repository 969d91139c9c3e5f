//! Allreduce latency models: closed forms for one master and two workers,
//! and a discrete-event engine for general device counts and topologies.
//!
//! Units: times in milliseconds, sizes in bits, bandwidths in bits/s.
//! A hidden state of `|H|` fp32 values is `32·|H|` bits.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatencyError {
    #[error("closed forms cover one master and two workers; use the event engine for n = {0}")]
    UseEventEngine(usize),
    #[error("need at least {min} devices for {what}, got {n}")]
    TooFewDevices {
        what: &'static str,
        min: usize,
        n: usize,
    },
    #[error("invalid network parameters: {0}")]
    Invalid(&'static str),
    #[error("no route from node {from} to node {to}")]
    NoRoute { from: usize, to: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Star,
    Tree,
    Ring,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Star, Algo::Tree, Algo::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Star => "star",
            Algo::Tree => "tree",
            Algo::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Physical layouts the event engine can route over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Every device pair shares a dedicated link.
    Direct,
    /// All devices hang off one router.
    FlatRouter,
    /// A core router over `⌈√n⌉` edge switches, devices spread round-robin.
    TwoLevelTree,
    /// Devices on a bidirectional ring, shortest-arc routing.
    Ring,
    /// Each device behind its own home gateway, gateways on one core router.
    HomeGateway,
}

impl Topology {
    pub const ALL: [Topology; 5] = [
        Topology::Direct,
        Topology::FlatRouter,
        Topology::TwoLevelTree,
        Topology::Ring,
        Topology::HomeGateway,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Direct => "direct",
            Topology::FlatRouter => "flat-router",
            Topology::TwoLevelTree => "two-level-tree",
            Topology::Ring => "ring",
            Topology::HomeGateway => "home-gateway",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub n: usize,
    /// Per-link latency.
    pub tau_ms: f64,
    /// Uniform link bandwidth.
    pub bandwidth_bps: f64,
    /// Hidden size `|H|`.
    pub hidden: usize,
    pub topology: Topology,
    /// Time to aggregate one full payload.
    pub t_aggr_ms: f64,
}

impl NetParams {
    pub fn new(
        n: usize,
        tau_ms: f64,
        bandwidth_bps: f64,
        hidden: usize,
        topology: Topology,
    ) -> Self {
        Self {
            n,
            tau_ms,
            bandwidth_bps,
            hidden,
            topology,
            t_aggr_ms: 0.0,
        }
    }

    pub fn payload_bits(&self) -> f64 {
        32.0 * self.hidden as f64
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        if !self.tau_ms.is_finite() || self.tau_ms < 0.0 {
            return Err(LatencyError::Invalid("tau must be >= 0"));
        }
        if self.bandwidth_bps.is_nan() || self.bandwidth_bps <= 0.0 {
            return Err(LatencyError::Invalid("bandwidth must be > 0"));
        }
        if self.t_aggr_ms.is_nan() || self.t_aggr_ms < 0.0 {
            return Err(LatencyError::Invalid("aggregation time must be >= 0"));
        }
        if self.n == 0 {
            return Err(LatencyError::Invalid("need at least one device"));
        }
        Ok(())
    }
}

pub fn bits_to_ms(bits: f64, bandwidth_bps: f64) -> f64 {
    bits / bandwidth_bps * 1e3
}

/// Push-and-pull transfer time over a path: `2 Σ bits / B_ij`.
pub fn t_data(bits: f64, path_bandwidths: &[f64]) -> f64 {
    2.0 * path_bandwidths
        .iter()
        .map(|&b| bits_to_ms(bits, b))
        .sum::<f64>()
}

/// Spread between the slowest and fastest path's one-way transfer time.
pub fn barrier_latency(bits: f64, paths: &[Vec<f64>]) -> f64 {
    let times = paths
        .iter()
        .map(|p| p.iter().map(|&b| bits_to_ms(bits, b)).sum::<f64>());
    let (lo, hi) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t), hi.max(t))
    });
    if paths.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Components of one allreduce.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AllreduceTerms {
    pub t_data: f64,
    pub t_link: f64,
    pub t_barrier: f64,
    pub t_aggr: f64,
}

/// Closed-form latency for one master and two workers.
pub fn closed_form(algo: Algo, c: &AllreduceTerms) -> f64 {
    match algo {
        Algo::Star => 2.0 * (c.t_data + c.t_link) + c.t_barrier + c.t_aggr,
        Algo::Tree => 3.0 * c.t_data + 4.0 * c.t_link + 2.0 * c.t_barrier + 2.0 * c.t_aggr,
        Algo::Ring => {
            4.0 / 3.0 * c.t_data + 4.0 * c.t_link + 3.0 * c.t_barrier + 2.0 / 3.0 * c.t_aggr
        }
    }
}

/// Closed-form latency from network parameters. The router between the
/// three devices only forwards, so one worker-master traversal costs one
/// `τ` and one `32|H|/B`; homogeneous devices give no barrier.
pub fn allreduce_latency(p: &NetParams, algo: Algo) -> Result<f64, LatencyError> {
    p.validate()?;
    if p.n != 3 {
        return Err(LatencyError::UseEventEngine(p.n));
    }
    let terms = AllreduceTerms {
        t_data: bits_to_ms(p.payload_bits(), p.bandwidth_bps),
        t_link: p.tau_ms,
        t_barrier: 0.0,
        t_aggr: p.t_aggr_ms,
    };
    Ok(closed_form(algo, &terms))
}

/// Link latency of a ring allreduce: `2(n−1)` steps of `hops` links each.
pub fn ring_hop_latency(n: usize, hops_per_step: usize, tau_ms: f64) -> Result<f64, LatencyError> {
    if n < 2 {
        return Err(LatencyError::TooFewDevices {
            what: "a ring",
            min: 2,
            n,
        });
    }
    Ok((2 * (n - 1) * hops_per_step) as f64 * tau_ms)
}

/// Undirected network; nodes `0..devices` are devices, the rest routers.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub devices: usize,
    pub nodes: usize,
    /// `(a, b, bandwidth)`, usable in both directions.
    pub links: Vec<(usize, usize, f64)>,
}

impl Graph {
    pub fn build(topology: Topology, n: usize, bandwidth: f64) -> Self {
        let mut g = Graph {
            devices: n,
            nodes: n,
            links: Vec::new(),
        };
        match topology {
            Topology::Direct => {
                for a in 0..n {
                    for b in a + 1..n {
                        g.links.push((a, b, bandwidth));
                    }
                }
            }
            Topology::FlatRouter => {
                let r = g.add_node();
                for d in 0..n {
                    g.links.push((d, r, bandwidth));
                }
            }
            Topology::TwoLevelTree => {
                let core = g.add_node();
                let k = (1..=n).find(|k| k * k >= n).unwrap_or(1);
                let edges: Vec<usize> = (0..k).map(|_| g.add_node()).collect();
                for &e in &edges {
                    g.links.push((e, core, bandwidth));
                }
                for d in 0..n {
                    g.links.push((d, edges[d % k], bandwidth));
                }
            }
            Topology::Ring => {
                if n == 2 {
                    g.links.push((0, 1, bandwidth));
                } else if n > 2 {
                    for d in 0..n {
                        g.links.push((d, (d + 1) % n, bandwidth));
                    }
                }
            }
            Topology::HomeGateway => {
                let core = g.add_node();
                for d in 0..n {
                    let gw = g.add_node();
                    g.links.push((d, gw, bandwidth));
                    g.links.push((gw, core, bandwidth));
                }
            }
        }
        g
    }

    fn add_node(&mut self) -> usize {
        self.nodes += 1;
        self.nodes - 1
    }

    fn neighbors(&self, node: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .links
            .iter()
            .enumerate()
            .filter_map(|(i, &(a, b, _))| {
                if a == node {
                    Some((b, i))
                } else if b == node {
                    Some((a, i))
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Fewest-hop route as link indices, lowest node ids first on ties.
    pub fn route(&self, from: usize, to: usize) -> Result<Vec<usize>, LatencyError> {
        if from == to {
            return Ok(Vec::new());
        }
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.nodes];
        let mut seen = vec![false; self.nodes];
        let mut queue = alloc::collections::VecDeque::from([from]);
        seen[from] = true;
        while let Some(u) = queue.pop_front() {
            if u == to {
                break;
            }
            for (v, link) in self.neighbors(u) {
                // devices other than the endpoints do not forward
                if !seen[v] && (v >= self.devices || v == to) {
                    seen[v] = true;
                    prev[v] = Some((u, link));
                    queue.push_back(v);
                }
            }
        }
        if !seen[to] {
            // the ring topology forwards through devices
            return self.route_through_devices(from, to);
        }
        let mut path = Vec::new();
        let mut at = to;
        while let Some((p, link)) = prev[at] {
            path.push(link);
            at = p;
        }
        path.reverse();
        Ok(path)
    }

    fn route_through_devices(&self, from: usize, to: usize) -> Result<Vec<usize>, LatencyError> {
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.nodes];
        let mut seen = vec![false; self.nodes];
        let mut queue = alloc::collections::VecDeque::from([from]);
        seen[from] = true;
        while let Some(u) = queue.pop_front() {
            for (v, link) in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    prev[v] = Some((u, link));
                    queue.push_back(v);
                }
            }
        }
        if !seen[to] {
            return Err(LatencyError::NoRoute { from, to });
        }
        let mut path = Vec::new();
        let mut at = to;
        while let Some((p, link)) = prev[at] {
            path.push(link);
            at = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Bandwidths along the route, for [`t_data`] and [`barrier_latency`].
    pub fn path_bandwidths(&self, from: usize, to: usize) -> Result<Vec<f64>, LatencyError> {
        Ok(self
            .route(from, to)?
            .iter()
            .map(|&l| self.links[l].2)
            .collect())
    }

    fn other_end(&self, link: usize, node: usize) -> usize {
        let (a, b, _) = self.links[link];
        if a == node {
            b
        } else {
            a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Send,
    Receive,
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineEvent {
    pub time_ms: f64,
    pub kind: EventKind,
    pub node: usize,
    pub peer: usize,
    pub tag: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveRun {
    pub completion_ms: f64,
    pub timeline: Vec<TimelineEvent>,
}

#[derive(Debug, Clone)]
struct Message {
    src: usize,
    dst: usize,
    bits: f64,
    route: Vec<usize>,
    hop: usize,
    at: usize,
    tag: u32,
    /// Head start on the first hop for cut-through forwarding.
    early_ms: f64,
}

#[derive(Debug)]
struct Pending {
    time: f64,
    seq: u64,
    msg: usize,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    // min-heap on (time, seq)
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then(o.seq.cmp(&self.seq))
    }
}

/// Store-and-forward network with one FIFO per directed link.
struct Engine<'g> {
    g: &'g Graph,
    tau: f64,
    free_at: Vec<[f64; 2]>,
    msgs: Vec<Message>,
    heap: BinaryHeap<Pending>,
    seq: u64,
    timeline: Vec<TimelineEvent>,
}

impl<'g> Engine<'g> {
    fn new(g: &'g Graph, tau: f64) -> Self {
        Self {
            g,
            tau,
            free_at: vec![[0.0; 2]; g.links.len()],
            msgs: Vec::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            timeline: Vec::new(),
        }
    }

    fn push(&mut self, time: f64, msg: usize) {
        self.seq += 1;
        self.heap.push(Pending {
            time,
            seq: self.seq,
            msg,
        });
    }

    fn send(
        &mut self,
        time: f64,
        src: usize,
        dst: usize,
        bits: f64,
        tag: u32,
        early_ms: f64,
    ) -> Result<(), LatencyError> {
        let route = self.g.route(src, dst)?;
        self.timeline.push(TimelineEvent {
            time_ms: time,
            kind: EventKind::Send,
            node: src,
            peer: dst,
            tag,
        });
        self.msgs.push(Message {
            src,
            dst,
            bits,
            route,
            hop: 0,
            at: src,
            tag,
            early_ms,
        });
        let id = self.msgs.len() - 1;
        self.push(time, id);
        Ok(())
    }

    /// Advances to the next delivery; returns `(time, message)`.
    fn next_delivery(&mut self) -> Option<(f64, Message)> {
        while let Some(Pending { time, msg, .. }) = self.heap.pop() {
            let m = &mut self.msgs[msg];
            if m.hop == m.route.len() {
                let m = m.clone();
                self.timeline.push(TimelineEvent {
                    time_ms: time,
                    kind: EventKind::Receive,
                    node: m.dst,
                    peer: m.src,
                    tag: m.tag,
                });
                return Some((time, m));
            }
            let link = m.route[m.hop];
            let next = self.g.other_end(link, m.at);
            let dir = usize::from(m.at > next);
            let ser = bits_to_ms(m.bits, self.g.links[link].2);
            let start = (time - m.early_ms).max(self.free_at[link][dir]);
            let finish = (start + ser).max(time);
            m.early_ms = 0.0;
            self.free_at[link][dir] = finish;
            m.at = next;
            m.hop += 1;
            let arrive = finish + self.tau;
            self.push(arrive, msg);
        }
        None
    }

    fn aggregate(&mut self, time: f64, node: usize, tag: u32) {
        self.timeline.push(TimelineEvent {
            time_ms: time,
            kind: EventKind::Aggregate,
            node,
            peer: node,
            tag,
        });
    }
}

const UP: u32 = 0;
const DOWN: u32 = 1;

/// Replays one allreduce of `32·|H|` bits per device.
///
/// Star: workers push to the master, which aggregates and pushes the sum
/// back. Tree: device `n−1` relays for devices `1..n−1`, aggregating before
/// forwarding to the master, and streams the result back to its leaves as
/// it arrives. Ring: reduce-scatter then allgather over `n` chunks.
pub fn simulate_collective(p: &NetParams, algo: Algo) -> Result<CollectiveRun, LatencyError> {
    p.validate()?;
    let g = Graph::build(p.topology, p.n, p.bandwidth_bps);
    let mut e = Engine::new(&g, p.tau_ms);
    let bits = p.payload_bits();
    let n = p.n;
    let mut done = 0.0f64;
    if n == 1 {
        return Ok(CollectiveRun {
            completion_ms: 0.0,
            timeline: Vec::new(),
        });
    }
    match algo {
        Algo::Star => {
            for w in 1..n {
                e.send(0.0, w, 0, bits, UP, 0.0)?;
            }
            let mut got = 0;
            while let Some((t, m)) = e.next_delivery() {
                if m.tag == UP {
                    got += 1;
                    if got == n - 1 {
                        let ready = t + p.t_aggr_ms;
                        e.aggregate(ready, 0, UP);
                        for w in 1..n {
                            e.send(ready, 0, w, bits, DOWN, 0.0)?;
                        }
                    }
                } else {
                    done = done.max(t);
                }
            }
        }
        Algo::Tree => {
            if n == 2 {
                return simulate_collective(p, Algo::Star);
            }
            let relay = n - 1;
            let leaves = 1..relay;
            for leaf in leaves.clone() {
                e.send(0.0, leaf, relay, bits, UP, 0.0)?;
            }
            let mut got = 0;
            while let Some((t, m)) = e.next_delivery() {
                match (m.tag, m.dst) {
                    (UP, d) if d == relay => {
                        got += 1;
                        if got == leaves.len() {
                            let ready = t + p.t_aggr_ms;
                            e.aggregate(ready, relay, UP);
                            e.send(ready, relay, 0, bits, UP, 0.0)?;
                        }
                    }
                    (UP, _) => {
                        let ready = t + p.t_aggr_ms;
                        e.aggregate(ready, 0, UP);
                        e.send(ready, 0, relay, bits, DOWN, 0.0)?;
                    }
                    (_, d) if d == relay => {
                        done = done.max(t);
                        let last_link = *m.route.last().expect("relay is remote");
                        let head = bits_to_ms(bits, g.links[last_link].2);
                        for leaf in leaves.clone() {
                            e.send(t, relay, leaf, bits, DOWN, head)?;
                        }
                    }
                    _ => done = done.max(t),
                }
            }
        }
        Algo::Ring => {
            let chunk = bits / n as f64;
            let steps = 2 * (n - 1);
            let aggr = p.t_aggr_ms / n as f64;
            for d in 0..n {
                e.send(0.0, d, (d + 1) % n, chunk, 0, 0.0)?;
            }
            while let Some((t, m)) = e.next_delivery() {
                let step = m.tag as usize;
                let node = m.dst;
                if step + 1 == steps {
                    done = done.max(t);
                    continue;
                }
                let ready = if step < n - 1 {
                    e.aggregate(t + aggr, node, m.tag);
                    t + aggr
                } else {
                    t
                };
                e.send(ready, node, (node + 1) % n, chunk, m.tag + 1, 0.0)?;
            }
        }
    }
    Ok(CollectiveRun {
        completion_ms: done,
        timeline: e.timeline,
    })
}
