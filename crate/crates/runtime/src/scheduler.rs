//! Threaded sliding-window scheduler: a loading agent prefetches blocks
//! into the window while the decode loop waits on and releases them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tpinfer_core::exec::{BlockProvider, ExecError};
use tpinfer_core::partition::{BlockId, BlockKind, BlockWeights};
use tpinfer_core::schedule::is_retained;
use tpinfer_core::window::WindowState;

use crate::shard_io::{load_block, Manifest};

/// Where the loading agent gets block weights from.
pub trait BlockSource: Send + Sync + 'static {
    fn load(&self, id: BlockId) -> Result<BlockWeights, String>;
}

/// Blocks read from a shard directory, checksummed on every load.
pub struct DiskSource {
    root: PathBuf,
    manifest: Manifest,
}

impl DiskSource {
    pub fn new(root: &Path, manifest: Manifest) -> Self {
        Self {
            root: root.to_path_buf(),
            manifest,
        }
    }
}

impl BlockSource for DiskSource {
    fn load(&self, id: BlockId) -> Result<BlockWeights, String> {
        load_block(&self.root, &self.manifest, id)
    }
}

/// Blocks held in memory and copied out on each load, standing in for a disk.
pub struct MemorySource {
    blocks: HashMap<BlockId, BlockWeights>,
}

impl MemorySource {
    pub fn new(blocks: Vec<BlockWeights>) -> Self {
        Self {
            blocks: blocks.into_iter().map(|b| (b.id, b)).collect(),
        }
    }
}

impl BlockSource for MemorySource {
    fn load(&self, id: BlockId) -> Result<BlockWeights, String> {
        self.blocks
            .get(&id)
            .cloned()
            .ok_or_else(|| format!("block {id} is not held by this device"))
    }
}

/// Synthetic load time: `fixed + bytes / bytes_per_sec`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiskDelay {
    pub fixed: Duration,
    pub bytes_per_sec: Option<f64>,
}

impl DiskDelay {
    pub fn fixed_ms(ms: f64) -> Self {
        Self {
            fixed: Duration::from_secs_f64(ms.max(0.0) / 1e3),
            bytes_per_sec: None,
        }
    }

    pub fn for_bytes(&self, bytes: u64) -> Duration {
        let per = match self.bytes_per_sec {
            Some(r) if r > 0.0 => Duration::from_secs_f64(bytes as f64 / r),
            _ => Duration::ZERO,
        };
        self.fixed + per
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub window: usize,
    /// Keep every FFN block whose 0-based layer is a multiple of this.
    pub retention: Option<usize>,
    pub disk_delay: DiskDelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    LoadStart,
    LoadDone,
    WaitStart,
    WaitDone,
    Release,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::LoadStart => "load_start",
            EventKind::LoadDone => "load_done",
            EventKind::WaitStart => "wait_start",
            EventKind::WaitDone => "wait_done",
            EventKind::Release => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEvent {
    pub at_ms: f64,
    pub kind: EventKind,
    pub block: BlockId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulerStats {
    pub peak_bytes: u64,
    pub resident_bytes: u64,
    pub loads: u64,
    /// Decode-loop waiting time once the window first filled.
    pub stall: Duration,
    /// Waiting time before that, on the cold start.
    pub warmup_stall: Duration,
    /// Most non-retained blocks ever held in memory at once.
    pub max_resident_blocks: usize,
}

struct Inner {
    state: WindowState,
    sizes: HashMap<BlockId, u64>,
    loaded: HashMap<u64, Arc<BlockWeights>>,
    retained: HashMap<BlockId, Arc<BlockWeights>>,
    timeline: Vec<TimelineEvent>,
    stats: SchedulerStats,
    /// Loads to finish before the window counts as filled.
    fill_target: u64,
    failure: Option<(BlockId, String)>,
    shutdown: bool,
}

struct Shared {
    inner: Mutex<Inner>,
    cv: Condvar,
    epoch: Instant,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn now_ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3
    }
}

/// Decode-loop handle to the window; implements [`BlockProvider`].
pub struct MemoryScheduler {
    shared: Arc<Shared>,
    loader: Option<JoinHandle<()>>,
    acquired: Option<(BlockId, u64)>,
}

impl MemoryScheduler {
    /// `sizes` is the device's block order with byte sizes.
    pub fn start(
        sizes: Vec<(BlockId, u64)>,
        cfg: SchedulerConfig,
        source: Arc<dyn BlockSource>,
    ) -> Result<Self, ExecError> {
        let retain = move |id: BlockId| {
            id.kind == BlockKind::Ffn && is_retained(id.layer as usize, cfg.retention)
        };
        let size_map = sizes.iter().copied().collect();
        let non_retained = sizes.iter().filter(|(id, _)| !retain(*id)).count();
        let retained = sizes.len() - non_retained;
        let state = WindowState::new(sizes, cfg.window, retain)
            .map_err(|e| ExecError::Inputs(e.to_string()))?;
        let fill_target = (cfg.window.min(non_retained) + retained) as u64;
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner {
                state,
                sizes: size_map,
                loaded: HashMap::new(),
                retained: HashMap::new(),
                timeline: Vec::new(),
                stats: SchedulerStats::default(),
                fill_target,
                failure: None,
                shutdown: false,
            }),
            cv: Condvar::new(),
            epoch: Instant::now(),
        });
        let agent = Arc::clone(&shared);
        let loader = std::thread::Builder::new()
            .name("block-loader".into())
            .spawn(move || loading_agent(agent, source, cfg.disk_delay))
            .map_err(|e| ExecError::Inputs(e.to_string()))?;
        Ok(Self {
            shared,
            loader: Some(loader),
            acquired: None,
        })
    }

    /// Blocks until `id`, the next block in sequence, is resident.
    pub fn wait_for_block(&mut self, id: BlockId) -> Result<Arc<BlockWeights>, ExecError> {
        let mut g = self.shared.lock();
        let global = g
            .state
            .acquire(id)
            .map_err(|e| ExecError::Inputs(e.to_string()))?;
        self.acquired = Some((id, global));
        if !g.state.is_loaded(global) {
            let t0 = Instant::now();
            let at = self.shared.now_ms();
            g.timeline.push(TimelineEvent {
                at_ms: at,
                kind: EventKind::WaitStart,
                block: id,
            });
            while !g.state.is_loaded(global) {
                if let Some((block, msg)) = &g.failure {
                    return Err(ExecError::Load {
                        block: *block,
                        msg: msg.clone(),
                    });
                }
                g = self.shared.cv.wait(g).unwrap_or_else(|p| p.into_inner());
            }
            let waited = t0.elapsed();
            let filled = g.state.loads_completed() > g.fill_target;
            if filled {
                g.stats.stall += waited;
            } else {
                g.stats.warmup_stall += waited;
            }
            let at = self.shared.now_ms();
            g.timeline.push(TimelineEvent {
                at_ms: at,
                kind: EventKind::WaitDone,
                block: id,
            });
        }
        let block = if g.state.is_retained(id) {
            g.retained.get(&id).cloned()
        } else {
            g.loaded.get(&global).cloned()
        };
        block.ok_or(ExecError::NotLoaded(id))
    }

    /// Hands `id` back; non-retained blocks leave memory.
    pub fn release_block(&mut self, id: BlockId) -> Result<(), ExecError> {
        let mut g = self.shared.lock();
        match self.acquired.take() {
            Some((held, global)) if held == id => {
                if !g.state.is_retained(id) {
                    g.loaded.remove(&global);
                }
            }
            other => {
                self.acquired = other;
                return Err(ExecError::Inputs(format!(
                    "release of {id} without acquire"
                )));
            }
        }
        g.state
            .release(id)
            .map_err(|e| ExecError::Inputs(e.to_string()))?;
        let at = self.shared.now_ms();
        g.timeline.push(TimelineEvent {
            at_ms: at,
            kind: EventKind::Release,
            block: id,
        });
        self.shared.cv.notify_all();
        Ok(())
    }

    pub fn stats(&self) -> SchedulerStats {
        let g = self.shared.lock();
        let mut s = g.stats.clone();
        s.peak_bytes = g.state.peak_bytes();
        s.resident_bytes = g.state.resident_bytes();
        s.loads = g.state.loads_completed();
        s
    }

    pub fn timeline(&self) -> Vec<TimelineEvent> {
        self.shared.lock().timeline.clone()
    }

    /// `timestamp_ms,event,block_id` lines.
    pub fn timeline_csv(&self) -> String {
        let mut s = String::from("timestamp_ms,event,block_id\n");
        for e in self.timeline() {
            let _ = writeln!(s, "{:.3},{},{}", e.at_ms, e.kind.name(), e.block);
        }
        s
    }
}

impl Drop for MemoryScheduler {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.cv.notify_all();
        if let Some(h) = self.loader.take() {
            let _ = h.join();
        }
    }
}

impl BlockProvider for MemoryScheduler {
    fn acquire(&mut self, id: BlockId) -> Result<Arc<BlockWeights>, ExecError> {
        self.wait_for_block(id)
    }

    fn release(&mut self, id: BlockId) -> Result<(), ExecError> {
        self.release_block(id)
    }
}

fn loading_agent(shared: Arc<Shared>, source: Arc<dyn BlockSource>, delay: DiskDelay) {
    loop {
        let (global, id, bytes) = {
            let mut g = shared.lock();
            loop {
                if g.shutdown {
                    return;
                }
                match g.state.start_next_load() {
                    Ok(Some((global, id))) => {
                        let bytes = g.sizes.get(&id).copied().unwrap_or(0);
                        break (global, id, bytes);
                    }
                    Ok(None) => g = shared.cv.wait(g).unwrap_or_else(|p| p.into_inner()),
                    Err(e) => {
                        g.failure = Some((g.state.expected_next(), e.to_string()));
                        shared.cv.notify_all();
                        return;
                    }
                }
            }
        };
        let at = shared.now_ms();
        shared.lock().timeline.push(TimelineEvent {
            at_ms: at,
            kind: EventKind::LoadStart,
            block: id,
        });
        let pause = delay.for_bytes(bytes);
        if !pause.is_zero() {
            std::thread::sleep(pause);
        }
        let result = source.load(id);
        let mut g = shared.lock();
        match result {
            Ok(block) if block.id == id => {
                let block = Arc::new(block);
                if g.state.is_retained(id) {
                    g.retained.insert(id, block);
                } else {
                    g.loaded.insert(global, block);
                    let held = g.loaded.len();
                    g.stats.max_resident_blocks = g.stats.max_resident_blocks.max(held);
                }
                if let Err(e) = g.state.finish_load(global) {
                    g.failure = Some((id, e.to_string()));
                }
                let at = shared.now_ms();
                g.timeline.push(TimelineEvent {
                    at_ms: at,
                    kind: EventKind::LoadDone,
                    block: id,
                });
            }
            Ok(other) => g.failure = Some((id, format!("source returned {}", other.id))),
            Err(msg) => {
                log::error!("loading {id} failed: {msg}");
                g.failure = Some((id, msg));
            }
        }
        shared.cv.notify_all();
        if g.failure.is_some() {
            return;
        }
    }
}
