use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpinfer::bench::{rows_to_csv, run_bench, BenchSpec};
use tpinfer::node::{serve, Request, Residency, ServeOptions};
use tpinfer::run_config::{detokenize, Role, RunConfig};
use tpinfer::scheduler::{DiskDelay, SchedulerConfig};
use tpinfer::shard_io::write_shards;
use tpinfer::{Result, RuntimeError};
use tpinfer_core::latency::{allreduce_latency, simulate_collective, Algo, NetParams, Topology};
use tpinfer_core::schedule::{
    check_loose_steady, check_retention_steady, check_tight_steady, min_retention_period,
    simulate_schedule, TimingProfile,
};
use tpinfer_core::weights::generate_toy_weights;
use tpinfer_core::ModelConfig;

#[derive(Parser)]
#[command(
    name = "tpinfer",
    version,
    about = "Tensor-parallel LLM decoding on small devices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate toy weights and cut them into per-device shards.
    Shard(ShardArgs),
    /// Run one rank of a TCP cluster.
    Serve(ServeArgs),
    /// Sweep an in-process cluster with injected link and disk delays.
    Bench(BenchArgs),
    /// Allreduce latency sweeps over link latency, bandwidth and size.
    LatencyLab(LatencyArgs),
    /// Steady-state predicates and a simulated schedule for a timing profile.
    AnalyzeSchedule(AnalyzeArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model config file (key=value); defaults to the built-in toy model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one model key, e.g. `--set layers=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_kv_str(&read_text(p)?)?,
            None => ModelConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                RuntimeError::config(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            cfg.set(k.trim(), v.trim()).map_err(RuntimeError::Config)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ShardArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Split evenly over this many devices.
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// Explicit proportions, e.g. `0.75,0.25`; wins over `--devices`.
    #[arg(long, value_delimiter = ',')]
    proportions: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Run config file (key=value).
    #[arg(long)]
    run_config: Option<PathBuf>,
    #[arg(long)]
    role: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    master: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    shards: Option<String>,
    /// Window size in blocks; 0 keeps every block resident.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    retention: Option<String>,
    #[arg(long)]
    max_new: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    /// Comma-separated ids; wins over `--prompt`.
    #[arg(long)]
    prompt_ids: Option<String>,
    #[arg(long)]
    metrics: Option<String>,
    /// Scheduler timeline output (`timestamp_ms,event,block_id`).
    #[arg(long)]
    timeline: Option<String>,
    #[arg(long)]
    timeout_s: Option<String>,
    #[arg(long)]
    disk_delay_ms: Option<String>,
}

impl ServeArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.run_config {
            Some(p) => RunConfig::from_kv_str(&read_text(p)?)?,
            None => RunConfig::default(),
        };
        let pairs = [
            ("role", &self.role),
            ("rank", &self.rank),
            ("n", &self.n),
            ("master", &self.master),
            ("model", &self.model),
            ("shards", &self.shards),
            ("window", &self.window),
            ("retention", &self.retention),
            ("max_new", &self.max_new),
            ("prompt", &self.prompt),
            ("prompt_ids", &self.prompt_ids),
            ("metrics", &self.metrics),
            ("timeline", &self.timeline),
            ("timeout_s", &self.timeout_s),
            ("disk_delay_ms", &self.disk_delay_ms),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                rc.set(k, v)
                    .map_err(|e| RuntimeError::config(format!("--{}: {e}", k.replace('_', "-"))))?;
            }
        }
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    n: Vec<usize>,
    /// Window sizes; 0 keeps every block resident.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    w: Vec<usize>,
    /// Retention periods, `none` for no retention.
    #[arg(long, value_delimiter = ',', default_value = "none")]
    t: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    tau_ms: Vec<f64>,
    /// Link bandwidths in Mbit/s, `inf` for unlimited.
    #[arg(long, value_delimiter = ',', default_value = "inf")]
    bw_mbps: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    disk_delay_ms: f64,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    prompt_ids: Vec<u32>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long, value_delimiter = ',', default_value = "star,tree,ring")]
    algo: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10")]
    tau_ms: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "300")]
    bw_mbps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "8192")]
    hidden: Vec<usize>,
    /// direct, flat-router, two-level-tree, ring or home-gateway.
    #[arg(long, default_value = "direct")]
    topology: String,
    /// `closed` (three devices only) or `sim`.
    #[arg(long, default_value = "sim")]
    engine: String,
    #[arg(long, default_value_t = 0.0)]
    t_aggr_ms: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    t_attn: f64,
    #[arg(long)]
    t_ffn: f64,
    #[arg(long)]
    t_ar: f64,
    #[arg(long)]
    tau_attn: f64,
    #[arg(long)]
    tau_ffn: f64,
    #[arg(long)]
    layers: usize,
    /// Window for the simulation; unbounded lookahead when absent.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    retention: Option<usize>,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| RuntimeError::io_at(path, e))
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| RuntimeError::io_at(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_shard(a: &ShardArgs) -> Result<()> {
    let cfg = a.model.load()?;
    let proportions = if a.proportions.is_empty() {
        if a.devices == 0 {
            return Err(RuntimeError::config("--devices must be positive"));
        }
        vec![1.0 / a.devices as f64; a.devices]
    } else {
        a.proportions.clone()
    };
    let weights = generate_toy_weights(&cfg, a.seed);
    let manifests = write_shards(&cfg, &weights, &proportions, &a.out)?;
    for m in &manifests {
        println!(
            "rank {}: {} blocks, {} bytes",
            m.rank,
            m.entries.len(),
            m.total_bytes()
        );
    }
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let rc = a.run_config()?;
    let cfg = ModelConfig::from_kv_str(&read_text(&rc.model_path())?)?;
    cfg.validate()?;
    let window = rc.window.unwrap_or(cfg.window);
    let residency = if window == 0 {
        Residency::Full
    } else {
        Residency::Window(SchedulerConfig {
            window,
            retention: rc.retention,
            disk_delay: DiskDelay::fixed_ms(rc.disk_delay_ms),
        })
    };
    let request = (rc.role == Role::Master).then(|| Request {
        prompt: rc.prompt_tokens(),
        max_new: rc.max_new,
    });
    let opts = ServeOptions {
        rank: rc.rank,
        n: rc.n,
        master: rc.master.clone(),
        shard_dir: rc.shards.clone(),
        cfg,
        residency,
        request,
        timeout: rc.timeout,
        timeline: rc.timeline.clone(),
    };
    let metrics = serve(&opts)?;
    if rc.role == Role::Master {
        let ids: Vec<String> = metrics.ids.iter().map(u32::to_string).collect();
        println!("ids: {}", ids.join(","));
        println!("text: {}", detokenize(&metrics.ids));
        println!(
            "ttft_ms: {:.3}  mean_token_ms: {:.3}",
            metrics.ttft_ms, metrics.mean_token_ms
        );
    }
    if let Some(p) = &rc.metrics {
        std::fs::write(p, metrics.to_json()).map_err(|e| RuntimeError::io_at(p, e))?;
    }
    Ok(())
}

fn parse_list<T>(items: &[String], f: impl Fn(&str) -> Option<T>, what: &str) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| f(s.trim()).ok_or_else(|| RuntimeError::config(format!("invalid {what} {s:?}"))))
        .collect()
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.model.load()?;
    let retentions = parse_list(
        &a.t,
        |s| match s {
            "none" => Some(None),
            v => v.parse().ok().filter(|&t: &usize| t > 0).map(Some),
        },
        "retention period",
    )?;
    let bandwidths = parse_list(
        &a.bw_mbps,
        |s| match s {
            "inf" => Some(None),
            v => v.parse().ok().filter(|&b: &f64| b > 0.0).map(Some),
        },
        "bandwidth",
    )?;
    let spec = BenchSpec {
        cfg,
        seed: a.seed,
        devices: a.n.clone(),
        windows: a.w.clone(),
        retentions,
        tau_ms: a.tau_ms.clone(),
        bandwidth_mbps: bandwidths,
        disk_delay: DiskDelay::fixed_ms(a.disk_delay_ms),
        prompt: a.prompt_ids.clone(),
        tokens: a.tokens,
    };
    let rows = run_bench(&spec)?;
    emit(a.out.as_ref(), &rows_to_csv(&rows))
}

fn cmd_latency_lab(a: &LatencyArgs) -> Result<()> {
    let topology = Topology::parse(&a.topology)
        .ok_or_else(|| RuntimeError::config(format!("unknown topology {:?}", a.topology)))?;
    let algos = parse_list(&a.algo, Algo::parse, "algorithm")?;
    let closed = match a.engine.as_str() {
        "closed" => true,
        "sim" => false,
        other => return Err(RuntimeError::config(format!("unknown engine {other:?}"))),
    };
    let mut csv = String::from("algo,n,tau_ms,bandwidth_mbps,hidden,latency_ms\n");
    for &algo in &algos {
        for &n in &a.n {
            for &tau in &a.tau_ms {
                for &bw in &a.bw_mbps {
                    for &hidden in &a.hidden {
                        let mut p = NetParams::new(n, tau, bw * 1e6, hidden, topology);
                        p.t_aggr_ms = a.t_aggr_ms;
                        let ms = if closed {
                            allreduce_latency(&p, algo)
                        } else {
                            simulate_collective(&p, algo).map(|r| r.completion_ms)
                        }
                        .map_err(|e| RuntimeError::config(e.to_string()))?;
                        csv.push_str(&format!(
                            "{},{n},{tau},{bw},{hidden},{ms:.6}\n",
                            algo.name()
                        ));
                    }
                }
            }
        }
    }
    emit(a.out.as_ref(), &csv)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let tp = TimingProfile::new(a.t_attn, a.t_ffn, a.t_ar, a.tau_attn, a.tau_ffn);
    if !tp.is_valid() || a.layers == 0 {
        return Err(RuntimeError::config(
            "timings must be finite and non-negative, layers positive",
        ));
    }
    let tight = check_tight_steady(&tp);
    let loose = check_loose_steady(&tp, a.layers);
    println!("tight: {}, loose: {}", yes_no(tight), yes_no(loose));
    let min_t = min_retention_period(&tp, a.layers);
    match min_t {
        Some(t) => println!("retention period: {t}"),
        None => println!("retention period: none (even retaining every FFN block stalls)"),
    }
    let period = a.retention.or(if loose { None } else { min_t });
    if let Some(t) = a.retention {
        println!(
            "retention {t} steady: {}",
            yes_no(check_retention_steady(&tp, a.layers, Some(t)))
        );
    }
    let window = a.window.unwrap_or(usize::MAX);
    let report = simulate_schedule(&tp, a.layers, window, period, a.tokens.max(1));
    let label = period.map_or_else(|| "none".to_string(), |t| t.to_string());
    println!(
        "simulated stall: {:.3} ms (retention {label}, warm-up {:.3} ms, makespan {:.3} ms)",
        report.total_stall_ms, report.warmup_stall_ms, report.makespan_ms
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Shard(a) => cmd_shard(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::LatencyLab(a) => cmd_latency_lab(a),
        Command::AnalyzeSchedule(a) => cmd_analyze(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TPI_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
