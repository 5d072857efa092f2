//! The demonstration bank: cache fused tokens, observe hit/miss counters
//! and the zero-forward-pass hit contract, and round-trip the bank through
//! its persistence file.
//!
//! Run: `cargo run --example demo_bank`

use icl_fusion::aggregator::{AggregationConfig, ProjectionLayer};
use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::bank::DemonstrationBank;
use icl_fusion::counters;
use icl_fusion::synth::synth_eval_set;

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        visual_tokens_per_image: 8,
        patch_size: 4,
        max_seq: 256,
        seed: 2,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let proj = ProjectionLayer::init(model.d_model, 0);
    let agg = AggregationConfig::full(&model);
    let (demos, _) = synth_eval_set(6, 0, 3, &model, "caption: ")?;

    let bank = DemonstrationBank::new();
    // first sweep: all misses
    let before = counters::snapshot();
    for d in &demos {
        bank.get_or_aggregate(d, &agg, &w, &proj)?;
    }
    let cold = counters::since(before);
    println!(
        "cold sweep: {} misses, {} forward passes",
        bank.misses(),
        cold.forward_passes
    );

    // second sweep: all hits, zero forward passes
    let before = counters::snapshot();
    for d in &demos {
        bank.get_or_aggregate(d, &agg, &w, &proj)?;
    }
    let warm = counters::since(before);
    println!(
        "warm sweep: {} hits, {} forward passes",
        bank.hits(),
        warm.forward_passes
    );
    assert_eq!(warm.forward_passes, 0);

    // persistence: save, reload, and hit against the stored entries
    let dir = std::env::temp_dir().join("icl-fusion-demo-bank");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("bank.fdb");
    bank.save(&path)?;
    let loaded = DemonstrationBank::load(&path)?;
    let before = counters::snapshot();
    for d in &demos {
        let hit = loaded.get_or_aggregate(d, &agg, &w, &proj)?;
        let fresh = icl_fusion::aggregator::aggregate(d, &agg, &w, &proj)?;
        assert_eq!(hit.tokens, fresh.tokens);
    }
    println!(
        "reloaded bank of {} entries served {} hits ({} aggregation passes during the hit sweep)",
        loaded.len(),
        loaded.hits(),
        counters::since(before).forward_passes - demos.len() as u64 // fresh recomputations only
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
