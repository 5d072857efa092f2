//! Throughput of fused vs full-token prompts as shots grow: median
//! tokens/s and queries/s per cell, with warmup discarded and the fused
//! cells running bank-warm.
//!
//! Run: `cargo run --release --example throughput`

use icl_fusion::aggregator::ProjectionLayer;
use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::bench::{bench_throughput, Mode, RunSpec, Selection};
use icl_fusion::config::InstructionTemplates;

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
        visual_tokens_per_image: 16,
        patch_size: 4,
        max_seq: 1024,
        seed: 19,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let proj = ProjectionLayer::init(model.d_model, 0);
    let templates = InstructionTemplates {
        caption: "cap:".into(),
        ..InstructionTemplates::default()
    };
    let spec = RunSpec {
        shots: vec![0, 1, 2, 4, 8, 16],
        modes: vec![Mode::Fused, Mode::Baseline],
        selection: Selection::Random,
        n_queries: 2,
        pool_size: 20,
        seed: 19,
        max_new_tokens: 4,
        repetitions: 5,
        warmup: 2,
        ..RunSpec::default()
    };

    let reports = bench_throughput(&spec, &w, &proj, &templates)?;
    println!(
        "{:>9} {:>6} {:>10} {:>12} {:>12} {:>14}",
        "mode", "shots", "prompt", "tokens/s", "queries/s", "s per query"
    );
    for r in &reports {
        println!(
            "{:>9} {:>6} {:>10} {:>12.1} {:>12.2} {:>14.4}",
            r.mode,
            r.n_shots,
            r.prompt_len,
            r.tokens_per_second,
            r.queries_per_second,
            1.0 / r.queries_per_second
        );
    }

    let time = |mode: &str, shots: usize| {
        reports
            .iter()
            .find(|r| r.mode == mode && r.n_shots == shots)
            .map(|r| 1.0 / r.queries_per_second)
            .unwrap()
    };
    let crossover = spec
        .shots
        .iter()
        .skip(1)
        .find(|&&s| time("fused", s) <= time("baseline", s));
    match crossover {
        Some(s) => println!("fused wall time per query overtakes baseline from {s} shots"),
        None => println!("no crossover within the measured shot range"),
    }
    Ok(())
}
