//! Per-node timers and the metrics record written after a run.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;
use tpinfer_core::comm::{MsgType, Phase};
use tpinfer_core::exec::Probe;
use tpinfer_core::partition::BlockId;

/// CPU time consumed by the calling thread.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Peak resident set size of this process, where the OS reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Compute time as thread CPU time, communication time as wall time.
#[derive(Debug, Default, Clone)]
pub struct TimingProbe {
    pub compute: Duration,
    pub comm: Duration,
    cpu_start: Option<Duration>,
    wall_start: Option<Instant>,
}

impl Probe for TimingProbe {
    fn compute_begin(&mut self, _: BlockId) {
        self.cpu_start = Some(thread_cpu_time());
    }

    fn compute_end(&mut self, _: BlockId) {
        if let Some(t0) = self.cpu_start.take() {
            self.compute += thread_cpu_time().saturating_sub(t0);
        }
    }

    fn comm_begin(&mut self, _: Phase) {
        self.wall_start = Some(Instant::now());
    }

    fn comm_end(&mut self, _: Phase) {
        if let Some(t0) = self.wall_start.take() {
            self.comm += t0.elapsed();
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Metrics {
    pub role: String,
    pub rank: usize,
    pub n: usize,
    /// Forward steps taken.
    pub tokens: usize,
    /// Generated ids; master only.
    pub ids: Vec<u32>,
    /// First step: prompt receipt to first token.
    pub ttft_ms: f64,
    /// Wall time of every later step.
    pub token_ms: Vec<f64>,
    pub mean_token_ms: f64,
    pub peak_param_bytes: u64,
    /// Weight bytes this device would hold with every block resident.
    pub full_param_bytes: u64,
    /// Attention and FFN share of `full_param_bytes`.
    pub backbone_param_bytes: u64,
    pub peak_rss_bytes: Option<u64>,
    pub allreduce_rounds: u64,
    pub allreduce_bytes: u64,
    pub stall_ms: f64,
    pub warmup_stall_ms: f64,
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub frames_sent: BTreeMap<String, u64>,
}

impl Metrics {
    pub fn compute_ms_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.compute_ms / self.tokens as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

pub fn frame_counts(sent: &[u64; 6]) -> BTreeMap<String, u64> {
    MsgType::ALL
        .iter()
        .map(|t| (format!("{t:?}"), sent[*t as usize]))
        .collect()
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
