//! Master and worker decode loops, an in-process cluster runner and the
//! TCP entry point used by `serve`.

use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tpinfer_core::comm::Collective;
use tpinfer_core::exec::{BlockProvider, ExecError, ResidentBlocks, ShardEngine};
use tpinfer_core::partition::{plan_shards, shard_blocks, BlockId, BlockWeights};
use tpinfer_core::weights::ModelWeights;
use tpinfer_core::ModelConfig;

use crate::error::{Result, RuntimeError};
use crate::metrics::{frame_counts, mean, ms, peak_rss_bytes, Metrics, TimingProbe};
use crate::scheduler::{
    BlockSource, DiskDelay, DiskSource, MemoryScheduler, MemorySource, SchedulerConfig,
    SchedulerStats,
};
use crate::shard_io::{handshake_digest, read_manifest, read_model_config, Manifest};
use crate::transport::{
    accept_workers, connect_master, loopback_cluster, Capture, CapturedFrame, LinkModel,
    StarCollective, DEFAULT_TIMEOUT,
};

/// How a device holds its weights during a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Residency {
    /// Every block loaded up front.
    Full,
    /// Sliding window.
    Window(SchedulerConfig),
}

/// Either fully resident blocks or the sliding-window scheduler.
pub enum Provider {
    Resident { blocks: ResidentBlocks, bytes: u64 },
    Scheduled(MemoryScheduler),
}

impl Provider {
    pub fn build(
        residency: Residency,
        sizes: Vec<(BlockId, u64)>,
        source: Arc<dyn BlockSource>,
    ) -> Result<Self> {
        match residency {
            Residency::Full => {
                let mut blocks = Vec::with_capacity(sizes.len());
                for (id, _) in &sizes {
                    let b = source
                        .load(*id)
                        .map_err(|msg| ExecError::Load { block: *id, msg })?;
                    blocks.push(b);
                }
                let bytes = blocks.iter().map(BlockWeights::byte_size).sum();
                Ok(Provider::Resident {
                    blocks: ResidentBlocks::new(blocks),
                    bytes,
                })
            }
            Residency::Window(cfg) => Ok(Provider::Scheduled(MemoryScheduler::start(
                sizes, cfg, source,
            )?)),
        }
    }

    pub fn scheduler_stats(&self) -> SchedulerStats {
        match self {
            Provider::Resident { bytes, .. } => SchedulerStats {
                peak_bytes: *bytes,
                resident_bytes: *bytes,
                ..SchedulerStats::default()
            },
            Provider::Scheduled(s) => s.stats(),
        }
    }

    pub fn timeline_csv(&self) -> Option<String> {
        match self {
            Provider::Scheduled(s) => Some(s.timeline_csv()),
            Provider::Resident { .. } => None,
        }
    }
}

impl BlockProvider for Provider {
    fn acquire(&mut self, id: BlockId) -> Result<Arc<BlockWeights>, ExecError> {
        match self {
            Provider::Resident { blocks, .. } => blocks.acquire(id),
            Provider::Scheduled(s) => s.acquire(id),
        }
    }

    fn release(&mut self, id: BlockId) -> Result<(), ExecError> {
        match self {
            Provider::Resident { blocks, .. } => blocks.release(id),
            Provider::Scheduled(s) => s.release(id),
        }
    }
}

/// What the master generates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub prompt: Vec<u32>,
    pub max_new: usize,
}

/// One node's static description.
pub struct NodeSpec {
    pub cfg: ModelConfig,
    pub proportions: Vec<f64>,
    pub rank: usize,
    pub sizes: Vec<(BlockId, u64)>,
    pub source: Arc<dyn BlockSource>,
    pub residency: Residency,
}

/// Runs one node to completion over an established collective.
pub fn run_node(
    spec: NodeSpec,
    mut comm: StarCollective,
    request: Option<&Request>,
    timeline_out: Option<&PathBuf>,
) -> Result<Metrics> {
    let plan = plan_shards(&spec.cfg, &spec.proportions)?;
    let dev = plan.device(spec.rank)?;
    let kv_width = dev.kv_heads.len() * spec.cfg.head_dim();
    let full_param_bytes: u64 = spec.sizes.iter().map(|(_, b)| b).sum();
    let backbone_param_bytes: u64 = spec
        .sizes
        .iter()
        .filter(|(id, _)| id.is_backbone())
        .map(|(_, b)| b)
        .sum();
    let mut provider = Provider::build(spec.residency, spec.sizes, spec.source)?;
    let mut engine = ShardEngine::new(spec.cfg.clone(), kv_width);
    let mut probe = TimingProbe::default();
    let mut step_ms = Vec::new();
    let mut ids = Vec::new();

    let outcome: Result<()> = (|| {
        if spec.rank == 0 {
            let req = request.ok_or_else(|| RuntimeError::config("master needs a prompt"))?;
            if req.prompt.is_empty() {
                return Err(ExecError::EmptyPrompt.into());
            }
            let mut feed = req.prompt.clone();
            while ids.len() < req.max_new {
                let t0 = Instant::now();
                let next = engine.master_step(&feed, &mut comm, &mut provider, &mut probe)?;
                step_ms.push(ms(t0.elapsed()));
                ids.push(next);
                if Some(next) == spec.cfg.eos {
                    break;
                }
                feed = vec![next];
            }
            comm.shutdown()?;
        } else {
            loop {
                let t0 = Instant::now();
                if !engine.worker_step(&mut comm, &mut provider, &mut probe)? {
                    break;
                }
                step_ms.push(ms(t0.elapsed()));
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::error!("rank {} failed: {e}", spec.rank);
        return Err(e);
    }

    if let (Some(path), Some(csv)) = (timeline_out, provider.timeline_csv()) {
        std::fs::write(path, csv).map_err(|e| RuntimeError::io_at(path, e))?;
    }
    let sched = provider.scheduler_stats();
    let stats = comm.stats().clone();
    let ttft_ms = step_ms.first().copied().unwrap_or(0.0);
    let token_ms: Vec<f64> = step_ms.iter().skip(1).copied().collect();
    Ok(Metrics {
        role: if spec.rank == 0 { "master" } else { "worker" }.into(),
        rank: spec.rank,
        n: comm.world_size(),
        tokens: step_ms.len(),
        ids,
        ttft_ms,
        mean_token_ms: mean(&token_ms),
        token_ms,
        peak_param_bytes: sched.peak_bytes,
        full_param_bytes,
        backbone_param_bytes,
        peak_rss_bytes: peak_rss_bytes(),
        allreduce_rounds: stats.allreduce_rounds,
        allreduce_bytes: stats.allreduce_bytes,
        stall_ms: ms(sched.stall),
        warmup_stall_ms: ms(sched.warmup_stall),
        compute_ms: ms(probe.compute),
        comm_ms: ms(probe.comm),
        frames_sent: frame_counts(&stats.frames_sent),
    })
}

/// Where a local cluster's shards come from.
#[derive(Clone)]
pub enum ShardOrigin {
    /// Cut from in-memory weights; loads copy from memory.
    Weights(Arc<ModelWeights>),
    /// A directory written by `write_shards`; loads read and verify files.
    Dir(PathBuf),
}

/// An in-process cluster run over loopback links.
#[derive(Clone)]
pub struct LocalRun {
    pub cfg: ModelConfig,
    pub origin: ShardOrigin,
    pub proportions: Vec<f64>,
    pub residency: Residency,
    pub link: LinkModel,
    pub request: Request,
    pub capture: bool,
    pub timeout: Duration,
}

impl LocalRun {
    pub fn new(
        cfg: ModelConfig,
        weights: Arc<ModelWeights>,
        proportions: Vec<f64>,
        request: Request,
    ) -> Self {
        Self {
            cfg,
            origin: ShardOrigin::Weights(weights),
            proportions,
            residency: Residency::Full,
            link: LinkModel::default(),
            request,
            capture: false,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn window(
        mut self,
        window: usize,
        retention: Option<usize>,
        disk_delay: DiskDelay,
    ) -> Self {
        self.residency = Residency::Window(SchedulerConfig {
            window,
            retention,
            disk_delay,
        });
        self
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub ids: Vec<u32>,
    /// Indexed by rank.
    pub metrics: Vec<Metrics>,
    pub capture: Vec<CapturedFrame>,
}

fn node_spec(run: &LocalRun, rank: usize) -> Result<(NodeSpec, u32)> {
    let (sizes, source, digest): (Vec<(BlockId, u64)>, Arc<dyn BlockSource>, u32) =
        match &run.origin {
            ShardOrigin::Weights(w) => {
                let plan = plan_shards(&run.cfg, &run.proportions)?;
                let blocks = shard_blocks(w, &run.cfg, &plan, rank)?;
                let sizes = blocks.iter().map(|b| (b.id, b.byte_size())).collect();
                (
                    sizes,
                    Arc::new(MemorySource::new(blocks)),
                    handshake_digest(w),
                )
            }
            ShardOrigin::Dir(dir) => {
                let m = read_manifest(dir, rank)?;
                let (sizes, digest) = (m.sizes(), m.digest);
                (sizes, Arc::new(DiskSource::new(dir, m)), digest)
            }
        };
    Ok((
        NodeSpec {
            cfg: run.cfg.clone(),
            proportions: run.proportions.clone(),
            rank,
            sizes,
            source,
            residency: run.residency,
        },
        digest,
    ))
}

/// Runs master and workers on threads of this process.
pub fn run_local(run: &LocalRun) -> Result<LocalOutcome> {
    let n = run.proportions.len();
    run.cfg.validate()?;
    plan_shards(&run.cfg, &run.proportions)?;
    let mut specs = Vec::with_capacity(n);
    let mut digest = None;
    for rank in 0..n {
        let (spec, d) = node_spec(run, rank)?;
        if *digest.get_or_insert(d) != d {
            return Err(RuntimeError::Protocol(format!(
                "rank {rank} shards come from a different model"
            )));
        }
        specs.push(spec);
    }
    let capture: Option<Capture> = run.capture.then(Capture::default);
    let comms = loopback_cluster(
        n,
        run.link,
        digest.unwrap_or(0),
        run.timeout,
        capture.clone(),
    )?;

    let results: Vec<Result<Metrics>> = std::thread::scope(|scope| {
        let mut comms = comms.into_iter();
        let mut specs = specs.into_iter();
        let master_comm = comms.next().expect("rank 0");
        let master_spec = specs.next().expect("rank 0");
        let handles: Vec<_> = specs
            .zip(comms)
            .map(|(spec, comm)| {
                std::thread::Builder::new()
                    .name(format!("rank{}", spec.rank))
                    .spawn_scoped(scope, move || run_node(spec, comm, None, None))
                    .expect("spawn worker")
            })
            .collect();
        let mut out = vec![run_node(master_spec, master_comm, Some(&run.request), None)];
        for h in handles {
            out.push(
                h.join()
                    .unwrap_or_else(|_| Err(RuntimeError::Protocol("worker panicked".into()))),
            );
        }
        out
    });

    let mut metrics = Vec::with_capacity(n);
    for r in results {
        metrics.push(r?);
    }
    let capture = capture
        .map(|c| std::mem::take(&mut *c.lock().expect("capture lock")))
        .unwrap_or_default();
    Ok(LocalOutcome {
        ids: metrics[0].ids.clone(),
        metrics,
        capture,
    })
}

/// Settings for one `serve` process.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub rank: usize,
    pub n: usize,
    pub master: String,
    pub shard_dir: PathBuf,
    pub cfg: ModelConfig,
    pub residency: Residency,
    pub request: Option<Request>,
    pub timeout: Duration,
    pub timeline: Option<PathBuf>,
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| RuntimeError::config(format!("address {addr}: {e}")))?
        .next()
        .ok_or_else(|| RuntimeError::config(format!("address {addr} resolves to nothing")))
}

/// Loads this rank's manifest, checks it against the options, and builds its node.
pub fn prepare_node(opts: &ServeOptions) -> Result<(NodeSpec, Manifest)> {
    let manifest = read_manifest(&opts.shard_dir, opts.rank)?;
    if manifest.n() != opts.n {
        return Err(RuntimeError::config(format!(
            "shards were cut for {} devices, run asks for {}",
            manifest.n(),
            opts.n
        )));
    }
    let on_disk = read_model_config(&opts.shard_dir)?;
    if on_disk != opts.cfg {
        return Err(RuntimeError::config(
            "model config differs from the one the shards were cut with",
        ));
    }
    let spec = NodeSpec {
        cfg: opts.cfg.clone(),
        proportions: manifest.proportions.clone(),
        rank: opts.rank,
        sizes: manifest.sizes(),
        source: Arc::new(DiskSource::new(&opts.shard_dir, manifest.clone())),
        residency: opts.residency,
    };
    Ok((spec, manifest))
}

/// One rank of a TCP cluster.
pub fn serve(opts: &ServeOptions) -> Result<Metrics> {
    let (spec, manifest) = prepare_node(opts)?;
    let comm = if opts.rank == 0 {
        let listener = TcpListener::bind(resolve(&opts.master)?)?;
        log::info!("master listening on {}", listener.local_addr()?);
        serve_listener(&listener, opts.n, manifest.digest, opts.timeout)?
    } else {
        connect_master(
            resolve(&opts.master)?,
            opts.rank,
            opts.n,
            manifest.digest,
            opts.timeout,
        )?
    };
    run_node(spec, comm, opts.request.as_ref(), opts.timeline.as_ref())
}

/// Master with a pre-bound listener, for callers that pick the port.
pub fn serve_listener(
    listener: &TcpListener,
    n: usize,
    digest: u32,
    timeout: Duration,
) -> Result<StarCollective> {
    Ok(accept_workers(listener, n, digest, timeout)?)
}

/// Runs the master of a TCP cluster on an already bound listener.
pub fn serve_master_on(listener: &TcpListener, opts: &ServeOptions) -> Result<Metrics> {
    let (spec, manifest) = prepare_node(opts)?;
    let comm = serve_listener(listener, opts.n, manifest.digest, opts.timeout)?;
    run_node(spec, comm, opts.request.as_ref(), opts.timeline.as_ref())
}
