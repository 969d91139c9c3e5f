//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::sync::Arc;
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpinfer::bench::{rows_to_csv, run_bench, BenchSpec, CSV_HEADER};
use tpinfer::node::{run_local, LocalRun, Request, Residency, ShardOrigin};
use tpinfer::scheduler::{DiskDelay, SchedulerConfig};
use tpinfer::shard_io::{read_manifest, write_shards};
use tpinfer_core::comm::{MsgType, Phase, WireFrame};
use tpinfer_core::exec::reference_forward;
use tpinfer_core::latency::{allreduce_latency, t_data, Algo, Graph, NetParams, Topology};
use tpinfer_core::partition::{plan_shards, BlockKind};
use tpinfer_core::schedule::{
    check_loose_steady, check_tight_steady, min_retention_period, peak_memory_estimate,
    simulate_schedule, Role, TimingProfile, STALL_EPS_MS,
};
use tpinfer_core::weights::generate_toy_weights;
use tpinfer_core::ModelConfig;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit_s: f64, what: &str) -> Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    ensure(s < limit_s, || {
        format!("{what} took {s:.1} s, limit {limit_s} s")
    })?;
    Ok(s)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let prompts: [&[u32]; 3] = [&[1], &[10, 20, 30, 40, 50], &[255, 0, 7, 7, 128, 3, 99, 42]];
    let mut runs = 0usize;
    for layers in [2, 4] {
        for hidden in [16, 32] {
            for kv in [2, 4] {
                let cfg = ModelConfig::toy(layers, hidden, kv);
                let splits: Vec<Vec<f64>> =
                    [vec![1.0], vec![0.5, 0.5], vec![0.75, 0.25], vec![0.25; 4]]
                        .into_iter()
                        .filter(|p| plan_shards(&cfg, p).is_ok())
                        .collect();
                for seed in [11u64, 22, 33] {
                    let weights = Arc::new(generate_toy_weights(&cfg, seed));
                    for prompt in prompts {
                        let want = reference_forward(&cfg, &weights, prompt, 32)
                            .map_err(|e| e.to_string())?;
                        for p in &splits {
                            // Residency is a performance knob; cycle it to show it never changes ids.
                            let residency = match runs % 4 {
                                0 => Residency::Full,
                                1 => window(1, None),
                                2 => window(2, Some(2)),
                                _ => window(4, None),
                            };
                            let mut run = LocalRun::new(
                                cfg.clone(),
                                Arc::clone(&weights),
                                p.clone(),
                                Request {
                                    prompt: prompt.to_vec(),
                                    max_new: 32,
                                },
                            );
                            run.residency = residency;
                            let got = run_local(&run).map_err(|e| e.to_string())?.ids;
                            ensure(got == want, || {
                                format!("L={layers} h={hidden} b={kv} seed={seed} p={p:?}: {got:?} != {want:?}")
                            })?;
                            runs += 1;
                        }
                    }
                }
            }
        }
    }
    let s = within(start, 60.0, "oracle sweep")?;
    Ok(format!(
        "{runs} distributed runs emit the reference token ids ({s:.1} s)"
    ))
}

fn window(w: usize, retention: Option<usize>) -> Residency {
    Residency::Window(SchedulerConfig {
        window: w,
        retention,
        disk_delay: DiskDelay::default(),
    })
}

fn closed_forms() -> Outcome {
    let p = NetParams::new(3, 1.0, f64::INFINITY, 8192, Topology::Direct);
    let mut got = Vec::new();
    for (algo, want) in [(Algo::Star, 2.0), (Algo::Tree, 4.0), (Algo::Ring, 4.0)] {
        let ms = allreduce_latency(&p, algo).map_err(|e| e.to_string())?;
        ensure(ms == want, || {
            format!("{} = {ms} ms, expected {want} ms", algo.name())
        })?;
        got.push(format!("{}={ms}", algo.name()));
    }
    Ok(got.join(" "))
}

fn transfer_time() -> Outcome {
    let p = NetParams::new(3, 0.0, 300e6, 8192, Topology::FlatRouter);
    let g = Graph::build(p.topology, p.n, p.bandwidth_bps);
    let path = g.path_bandwidths(1, 0).map_err(|e| e.to_string())?;
    let ms = t_data(p.payload_bits(), &path);
    // Push and pull, each over worker→router→master: 2·2·32·8192 bits at 300 Mbit/s.
    let oracle = 2.0 * 2.0 * 32.0 * 8192.0 / 300e6 * 1e3;
    ensure((ms - oracle).abs() < 1e-9, || {
        format!("t_data {ms} != oracle {oracle}")
    })?;
    ensure((ms - 3.4).abs() <= 0.2, || {
        format!("t_data {ms:.3} ms outside 3.4 ± 0.2")
    })?;
    Ok(format!(
        "t_data = {ms:.3} ms over a {}-link path",
        path.len()
    ))
}

fn worked_example() -> Outcome {
    let tp = TimingProfile::new(11.0, 17.0, 14.0, 18.0, 30.0);
    let tight = check_tight_steady(&tp);
    let loose = check_loose_steady(&tp, 8);
    ensure(!tight && loose, || format!("tight={tight} loose={loose}"))?;
    Ok("tight: no, loose: yes".into())
}

fn estimator_exactness() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases: [(usize, usize, &[f64]); 5] = [
        (16, 2, &[1.0]),
        (16, 2, &[0.5, 0.5]),
        (32, 2, &[0.5, 0.5]),
        (16, 4, &[0.75, 0.25]),
        (16, 4, &[0.25, 0.25, 0.25, 0.25]),
    ];
    let mut checked = 0;
    for (ci, (hidden, kv, p)) in cases.iter().enumerate() {
        let cfg = ModelConfig::toy(4, *hidden, *kv);
        let weights = generate_toy_weights(&cfg, 5);
        let root = dir.path().join(format!("case{ci}"));
        write_shards(&cfg, &weights, p, &root).map_err(|e| e.to_string())?;
        for w in 1..=5 {
            let mut run = LocalRun::new(
                cfg.clone(),
                Arc::new(weights.clone()),
                p.to_vec(),
                Request {
                    prompt: vec![3, 1, 4],
                    max_new: 3,
                },
            )
            .window(w, None, DiskDelay::default());
            run.origin = ShardOrigin::Dir(root.clone());
            let out = run_local(&run).map_err(|e| e.to_string())?;
            let sized = ModelConfig {
                window: w,
                gamma: 1.0,
                ..cfg.clone()
            };
            for (rank, m) in out.metrics.iter().enumerate() {
                let role = if rank == 0 {
                    Role::Master
                } else {
                    Role::Worker
                };
                let want = peak_memory_estimate(&sized, p[rank], role);
                ensure(m.peak_param_bytes == want, || {
                    format!("h={hidden} b={kv} p={p:?} w={w} rank {rank}: measured {} != estimate {want}", m.peak_param_bytes)
                })?;
                checked += 1;
            }
        }
    }
    let s = within(start, 60.0, "estimator runs")?;
    Ok(format!(
        "{checked} (config, w, rank) peaks equal the estimate ({s:.1} s)"
    ))
}

fn uniform(rng: &mut ChaCha8Rng, hi: f64) -> f64 {
    (rng.next_u32() >> 8) as f64 / (1u32 << 24) as f64 * hi
}

fn random_profile(rng: &mut ChaCha8Rng) -> TimingProfile {
    TimingProfile::new(
        uniform(rng, 40.0),
        uniform(rng, 40.0),
        uniform(rng, 20.0),
        uniform(rng, 60.0),
        uniform(rng, 60.0),
    )
}

fn stall_freedom() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut loose_n, mut tight_n) = (0, 0);
    for i in 0..1000 {
        let tp = random_profile(&mut rng);
        let layers = 1 + (rng.next_u32() % 12) as usize;
        let tight = check_tight_steady(&tp);
        let loose = check_loose_steady(&tp, layers);
        ensure(!tight || loose, || {
            format!("profile {i} {tp:?}: tight but not loose")
        })?;
        if loose {
            let r = simulate_schedule(&tp, layers, usize::MAX, None, 3);
            ensure(r.total_stall_ms <= STALL_EPS_MS, || {
                format!(
                    "profile {i} {tp:?} L={layers}: loose yet {} ms stall",
                    r.total_stall_ms
                )
            })?;
            loose_n += 1;
        }
        tight_n += tight as usize;
    }
    ensure(loose_n > 50 && tight_n > 10, || {
        format!("too few steady samples: {loose_n} loose, {tight_n} tight")
    })?;
    let s = within(start, 30.0, "stall sweep")?;
    Ok(format!(
        "1000 profiles, {loose_n} loose ({tight_n} tight) all stall-free ({s:.2} s)"
    ))
}

fn retention() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e7a);
    let mut found = 0;
    let mut tries = 0;
    while found < 100 {
        tries += 1;
        ensure(tries < 100_000, || {
            format!("only {found} qualifying profiles")
        })?;
        let tp = random_profile(&mut rng);
        let layers = 2 + (rng.next_u32() % 11) as usize;
        if check_loose_steady(&tp, layers) {
            continue;
        }
        let Some(t) = min_retention_period(&tp, layers) else {
            continue;
        };
        let with = simulate_schedule(&tp, layers, usize::MAX, Some(t), 3);
        let without = simulate_schedule(&tp, layers, usize::MAX, None, 3);
        ensure(with.total_stall_ms <= STALL_EPS_MS, || {
            format!(
                "{tp:?} L={layers} T={t}: {} ms stall with retention",
                with.total_stall_ms
            )
        })?;
        ensure(without.total_stall_ms > STALL_EPS_MS, || {
            format!("{tp:?} L={layers}: no stall without retention")
        })?;
        found += 1;
    }
    let s = within(start, 30.0, "retention sweep")?;
    Ok(format!(
        "100 non-steady profiles fixed by their retention period ({tries} drawn, {s:.2} s)"
    ))
}

fn memory_reduction() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        layers: 8,
        hidden: 32,
        kv_heads: 4,
        ..ModelConfig::default()
    };
    let weights = Arc::new(generate_toy_weights(&cfg, 8));
    let request = Request {
        prompt: vec![5, 6, 7],
        max_new: 4,
    };
    let full = run_local(&LocalRun::new(
        cfg.clone(),
        Arc::clone(&weights),
        vec![1.0],
        request.clone(),
    ))
    .map_err(|e| e.to_string())?;
    let backbone = full.metrics[0].backbone_param_bytes;
    let mut spec = BenchSpec::toy(cfg);
    spec.seed = 8;
    spec.devices = vec![1];
    spec.windows = vec![2];
    spec.prompt = request.prompt.clone();
    spec.tokens = request.max_new;
    let rows = run_bench(&spec).map_err(|e| e.to_string())?;
    let row = &rows[0];
    let csv = rows_to_csv(&rows);
    ensure(
        csv.starts_with(CSV_HEADER) && CSV_HEADER.contains("mem_ratio"),
        || "CSV lacks the ratio column".into(),
    )?;
    ensure(row.full_bytes == backbone, || {
        format!("bench full bytes {} != full run {backbone}", row.full_bytes)
    })?;
    let ratio = row.peak_bytes as f64 / backbone as f64;
    ensure(ratio <= 0.30, || {
        format!(
            "peak {} is {:.1}% of {backbone}",
            row.peak_bytes,
            ratio * 100.0
        )
    })?;
    let s = within(start, 60.0, "memory runs")?;
    Ok(format!(
        "w=2 peak {} B = {:.1}% of {backbone} B backbone ({s:.1} s)",
        row.peak_bytes,
        ratio * 100.0
    ))
}

fn median_tok_ms(spec: &BenchSpec, reps: usize) -> Result<f64, String> {
    let mut xs = Vec::with_capacity(reps);
    for _ in 0..reps {
        xs.push(run_bench(spec).map_err(|e| e.to_string())?[0].tok_ms);
    }
    xs.sort_by(f64::total_cmp);
    Ok(xs[reps / 2])
}

fn bandwidth_insensitivity() -> Outcome {
    let start = Instant::now();
    let mut spec = BenchSpec::toy(ModelConfig::default());
    spec.devices = vec![2];
    spec.windows = vec![0];
    spec.tokens = 32;
    spec.tau_ms = vec![1.0];
    spec.bandwidth_mbps = vec![Some(300.0)];
    let base = median_tok_ms(&spec, 5)?;
    spec.bandwidth_mbps = vec![Some(3000.0)];
    let fast = median_tok_ms(&spec, 5)?;
    spec.bandwidth_mbps = vec![Some(300.0)];
    spec.tau_ms = vec![10.0];
    let slow = median_tok_ms(&spec, 5)?;
    let bw_change = (fast - base).abs() / base;
    let tau_change = (slow - base) / base;
    ensure(bw_change < 0.05, || {
        format!(
            "payload delay ÷10 moved tok_ms {base:.3} → {fast:.3} ({:.1}%)",
            bw_change * 100.0
        )
    })?;
    ensure(tau_change > 0.50, || {
        format!(
            "τ ×10 moved tok_ms {base:.3} → {slow:.3} only {:.1}%",
            tau_change * 100.0
        )
    })?;
    let s = within(start, 120.0, "bench sweep")?;
    Ok(format!(
        "tok_ms {base:.2} (300 Mbit/s), {fast:.2} (3 Gbit/s, {:+.1}%), {slow:.2} (τ=10 ms, {:+.0}%) in {s:.1} s",
        (fast - base) / base * 100.0,
        tau_change * 100.0
    ))
}

fn privacy() -> Outcome {
    let cfg = ModelConfig::toy(2, 16, 4);
    let weights = Arc::new(generate_toy_weights(&cfg, 9));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = vec![0.25; 4];
    write_shards(&cfg, &weights, &p, dir.path()).map_err(|e| e.to_string())?;
    for rank in 1..4 {
        let m = read_manifest(dir.path(), rank).map_err(|e| e.to_string())?;
        ensure(
            m.entries
                .iter()
                .all(|e| matches!(e.id.kind, BlockKind::Attention | BlockKind::Ffn)),
            || format!("rank {rank} manifest holds an embedding or head block"),
        )?;
    }

    let prompt = vec![72u32, 101, 108, 108, 111];
    let mut run = LocalRun::new(
        cfg.clone(),
        weights,
        p,
        Request {
            prompt,
            max_new: 12,
        },
    );
    run.capture = true;
    let out = run_local(&run).map_err(|e| e.to_string())?;
    let mut by_type = [0usize; 6];
    for (i, c) in out.capture.iter().enumerate() {
        let (f, used) = WireFrame::decode(&c.bytes).map_err(|e| format!("frame {i}: {e}"))?;
        ensure(used == c.bytes.len(), || {
            format!("frame {i}: trailing bytes")
        })?;
        ensure(MsgType::ALL.contains(&f.msg_type), || {
            format!("frame {i}: unknown type")
        })?;
        by_type[f.msg_type as usize] += 1;
        let shape = f
            .tensor
            .as_ref()
            .map(|t| t.shape().to_vec())
            .unwrap_or_default();
        let ok = match (f.msg_type, f.phase) {
            (MsgType::Shutdown, _) => shape.is_empty(),
            (MsgType::Hello, _) => shape == [1, 2],
            // The causal mask: rows are new positions, columns every position so far.
            (MsgType::Broadcast, Phase::Final) => {
                shape.len() == 2 && shape[1] == f.layer as usize + shape[0]
            }
            _ => shape.len() == 2 && shape[1] == cfg.hidden,
        };
        ensure(ok, || {
            format!("frame {i} ({:?}) has payload shape {shape:?}", f.msg_type)
        })?;
    }
    ensure(by_type.iter().all(|&c| c > 0), || {
        format!("frame counts {by_type:?}")
    })?;
    Ok(format!(
        "worker manifests clean; {} captured frames, all hidden-state shaped, counts {by_type:?}",
        out.capture.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("allreduce closed forms", closed_forms),
        ("data transfer time", transfer_time),
        ("steady-state worked example", worked_example),
        ("peak memory estimator", estimator_exactness),
        ("scheduler stall freedom", stall_freedom),
        ("block retention", retention),
        ("memory reduction", memory_reduction),
        ("bandwidth insensitivity", bandwidth_insensitivity),
        ("privacy invariants", privacy),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
