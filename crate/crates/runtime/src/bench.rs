//! Benchmark sweeps over the in-process cluster with injected delays.

use std::fmt::Write as _;
use std::sync::Arc;

use tpinfer_core::weights::generate_toy_weights;
use tpinfer_core::ModelConfig;

use crate::error::{Result, RuntimeError};
use crate::node::{run_local, LocalRun, Request};
use crate::scheduler::DiskDelay;
use crate::transport::LinkModel;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub devices: Vec<usize>,
    /// Zero means full residency.
    pub windows: Vec<usize>,
    pub retentions: Vec<Option<usize>>,
    pub tau_ms: Vec<f64>,
    /// `None` is unlimited bandwidth.
    pub bandwidth_mbps: Vec<Option<f64>>,
    pub disk_delay: DiskDelay,
    pub prompt: Vec<u32>,
    pub tokens: usize,
}

impl BenchSpec {
    pub fn toy(cfg: ModelConfig) -> Self {
        Self {
            cfg,
            seed: 1,
            devices: vec![1, 2, 4],
            windows: vec![1, 2, 4],
            retentions: vec![None],
            tau_ms: vec![0.0],
            bandwidth_mbps: vec![None],
            disk_delay: DiskDelay::default(),
            prompt: vec![1, 2, 3, 4],
            tokens: 8,
        }
    }
}

/// One configuration's master-side measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub w: usize,
    pub t: Option<usize>,
    pub ttft_ms: f64,
    pub tok_ms: f64,
    pub peak_bytes: u64,
    pub stall_ms: f64,
    pub tau_ms: f64,
    pub bw_mbps: Option<f64>,
    /// Master compute CPU time per forward step.
    pub compute_ms: f64,
    /// Master backbone bytes under full residency.
    pub full_bytes: u64,
    /// `peak_bytes / full_bytes`.
    pub mem_ratio: f64,
}

pub const CSV_HEADER: &str =
    "n,w,T,ttft_ms,tok_ms,peak_bytes,stall_ms,tau_ms,bw_mbps,compute_ms,full_bytes,mem_ratio";

pub fn even_split(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.tokens == 0 || spec.prompt.is_empty() {
        return Err(RuntimeError::config(
            "bench needs a prompt and at least one token",
        ));
    }
    let weights = Arc::new(generate_toy_weights(&spec.cfg, spec.seed));
    let mut rows = Vec::new();
    for &n in &spec.devices {
        for &w in &spec.windows {
            for &t in &spec.retentions {
                for &tau in &spec.tau_ms {
                    for &bw in &spec.bandwidth_mbps {
                        let mut run = LocalRun::new(
                            spec.cfg.clone(),
                            Arc::clone(&weights),
                            even_split(n),
                            Request {
                                prompt: spec.prompt.clone(),
                                max_new: spec.tokens,
                            },
                        );
                        if w > 0 {
                            run = run.window(w, t, spec.disk_delay);
                        }
                        run.link = LinkModel::new(tau, bw.map(|m| m * 1e6));
                        rows.push(measure(&run, n, w, t, tau, bw)?);
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn measure(
    run: &LocalRun,
    n: usize,
    w: usize,
    t: Option<usize>,
    tau: f64,
    bw: Option<f64>,
) -> Result<BenchRow> {
    let out = run_local(run)?;
    let m = &out.metrics[0];
    log::info!(
        "bench n={n} w={w} T={t:?} tau={tau} bw={bw:?}: {:.3} ms/token",
        m.mean_token_ms
    );
    let full = m.backbone_param_bytes;
    Ok(BenchRow {
        n,
        w,
        t,
        ttft_ms: m.ttft_ms,
        tok_ms: m.mean_token_ms,
        peak_bytes: m.peak_param_bytes,
        stall_ms: m.stall_ms,
        tau_ms: tau,
        bw_mbps: bw,
        compute_ms: m.compute_ms_per_token(),
        full_bytes: full,
        mem_ratio: if full == 0 {
            0.0
        } else {
            m.peak_param_bytes as f64 / full as f64
        },
    })
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let t = r.t.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
        let bw = r
            .bw_mbps
            .map(|b| b.to_string())
            .unwrap_or_else(|| "inf".into());
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{},{:.4},{},{},{:.4},{},{:.4}",
            r.n,
            r.w,
            t,
            r.ttft_ms,
            r.tok_ms,
            r.peak_bytes,
            r.stall_ms,
            r.tau_ms,
            bw,
            r.compute_ms,
            r.full_bytes,
            r.mem_ratio
        );
    }
    s
}
