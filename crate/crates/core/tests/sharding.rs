use tpinfer_core::comm::star_sum;
use tpinfer_core::exec::{ffn_block, full_blocks};
use tpinfer_core::partition::{plan_shards, shard_blocks, BlockId, BlockWeights};
use tpinfer_core::schedule::{check_loose_steady, simulate_schedule, TimingProfile};
use tpinfer_core::weights::generate_toy_weights;
use tpinfer_core::{ModelConfig, Tensor};

fn block(blocks: &[BlockWeights], id: BlockId) -> &BlockWeights {
    blocks.iter().find(|b| b.id == id).expect("block present")
}

#[test]
fn uneven_ffn_shards_sum_to_the_full_block() {
    let cfg = ModelConfig {
        hidden: 32,
        heads: 8,
        kv_heads: 4,
        ffn: 96,
        ..ModelConfig::default()
    };
    let weights = generate_toy_weights(&cfg, 3);
    let full = full_blocks(&cfg, &weights).unwrap();
    let p = [0.5, 0.25, 0.25];
    let plan = plan_shards(&cfg, &p).unwrap();
    let x = Tensor::from_fn(vec![3, cfg.hidden], |i| ((i * 37 % 11) as f32 - 5.0) * 0.1);

    for layer in 0..cfg.layers {
        let want = ffn_block(&x, block(&full, BlockId::ffn(layer)), layer, &cfg).unwrap();
        let parts: Vec<Tensor> = (0..p.len())
            .map(|r| {
                let shard = shard_blocks(&weights, &cfg, &plan, r).unwrap();
                ffn_block(&x, block(&shard, BlockId::ffn(layer)), layer, &cfg).unwrap()
            })
            .collect();
        let got = star_sum(&parts).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!(
                (a - b).abs() <= 1e-5 * (1.0 + b.abs()),
                "layer {layer}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn loose_steady_profile_never_stalls() {
    let tp = TimingProfile::new(11.0, 17.0, 14.0, 18.0, 30.0);
    assert!(check_loose_steady(&tp, 8));
    let report = simulate_schedule(&tp, 8, usize::MAX, None, 4);
    assert_eq!(report.slots.len(), 2 * 8 * 4);
    assert!(
        report.total_stall_ms.abs() < 1e-9,
        "{}",
        report.total_stall_ms
    );
}
