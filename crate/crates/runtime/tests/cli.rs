use std::net::TcpListener;
use std::process::{Command, Output, Stdio};

use tpinfer_core::exec::reference_forward;
use tpinfer_core::weights::generate_toy_weights;
use tpinfer_core::ModelConfig;

fn tpinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpinfer"))
        .args(args)
        .output()
        .expect("run tpinfer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_schedule_reports() {
    let o = tpinfer(&[
        "analyze-schedule",
        "--t-attn",
        "11",
        "--t-ffn",
        "17",
        "--t-ar",
        "14",
        "--tau-attn",
        "18",
        "--tau-ffn",
        "30",
        "--layers",
        "8",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("tight: no, loose: yes"));

    let o = tpinfer(&[
        "analyze-schedule",
        "--t-attn",
        "5",
        "--t-ffn",
        "5",
        "--t-ar",
        "1",
        "--tau-attn",
        "0",
        "--tau-ffn",
        "0",
        "--layers",
        "4",
    ]);
    assert!(stdout(&o).contains("tight: yes, loose: yes"));

    // Loads outrun compute until half the FFN blocks stay resident.
    let o = tpinfer(&[
        "analyze-schedule",
        "--t-attn",
        "10",
        "--t-ffn",
        "10",
        "--t-ar",
        "0",
        "--tau-attn",
        "10",
        "--tau-ffn",
        "20",
        "--layers",
        "4",
    ]);
    let out = stdout(&o);
    assert!(out.contains("tight: no, loose: no"), "{out}");
    assert!(out.contains("retention period: 2"), "{out}");
    assert!(
        out.contains("simulated stall: 0.000 ms (retention 2"),
        "{out}"
    );
}

#[test]
fn latency_lab_emits_closed_form_rows() {
    let o = tpinfer(&[
        "latency-lab",
        "--engine",
        "closed",
        "--n",
        "3",
        "--tau-ms",
        "1",
        "--bw-mbps",
        "inf",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(
        lines.next(),
        Some("algo,n,tau_ms,bandwidth_mbps,hidden,latency_ms")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(
        rows,
        [
            "star,3,1,inf,8192,2.000000",
            "tree,3,1,inf,8192,4.000000",
            "ring,3,1,inf,8192,4.000000"
        ]
    );
    let bad = tpinfer(&["latency-lab", "--engine", "closed", "--n", "4"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = tpinfer(&[
        "serve",
        "--shards",
        missing.to_str().unwrap(),
        "--prompt",
        "hi",
    ]);
    assert_eq!(o.status.code(), Some(4));
    let o = tpinfer(&["serve", "--shards", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = tpinfer(&[
        "shard",
        "--devices",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = tpinfer(&["bench", "--t", "zero"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn two_processes_generate_the_reference_ids() {
    let dir = tempfile::tempdir().unwrap();
    let shards = dir.path().join("shards");
    let o = tpinfer(&[
        "shard",
        "--seed",
        "7",
        "--devices",
        "2",
        "--set",
        "layers=3",
        "--out",
        shards.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("rank 0:") && out.contains("rank 1:"));

    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let run_cfg = dir.path().join("worker.cfg");
    std::fs::write(
        &run_cfg,
        format!(
            "role=worker\nrank=1\nn=2\nmaster={addr}\nshards={}\nwindow=2\n",
            shards.display()
        ),
    )
    .unwrap();
    let worker = Command::new(env!("CARGO_BIN_EXE_tpinfer"))
        .args(["serve", "--run-config", run_cfg.to_str().unwrap()])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let metrics = dir.path().join("master.json");
    let o = tpinfer(&[
        "serve",
        "--n",
        "2",
        "--master",
        &addr,
        "--shards",
        shards.to_str().unwrap(),
        "--prompt",
        "Hi",
        "--max-new",
        "10",
        "--window",
        "3",
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    let worker = worker.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(worker.status.success());

    let cfg = ModelConfig {
        layers: 3,
        ..ModelConfig::default()
    };
    let want = reference_forward(&cfg, &generate_toy_weights(&cfg, 7), &[72, 105], 10).unwrap();
    let want: Vec<String> = want.iter().map(u32::to_string).collect();
    assert!(
        stdout(&o).contains(&format!("ids: {}", want.join(","))),
        "{}",
        stdout(&o)
    );

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(metrics).unwrap()).unwrap();
    assert_eq!(json["allreduce_rounds"], 10 * (2 * 3 + 1));
    assert_eq!(json["tokens"], 10);
}
