//! Aggregate image-text demonstrations into fused tokens and check the two
//! core laws on live data: the row count of every fused block equals its
//! demonstration's text token count, and batch aggregation is bit-identical
//! to aggregating each demonstration alone.
//!
//! Run: `cargo run --example aggregate_demos`

use icl_fusion::aggregator::{aggregate, aggregate_batch, AggregationConfig, ProjectionLayer};
use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::synth::synth_eval_set;
use icl_fusion::tokenizer;

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
        visual_tokens_per_image: 8,
        patch_size: 4,
        max_seq: 256,
        seed: 7,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let proj = ProjectionLayer::init(model.d_model, 0);
    let agg = AggregationConfig::half(&model);
    println!(
        "backbone {} ({} layers, aggregating with the first {})",
        w.digest().short(),
        model.n_layers,
        agg.n_layers
    );

    let (demos, _) = synth_eval_set(4, 0, 11, &model, "caption: ")?;
    let batch = aggregate_batch(&demos, &agg, &w, &proj)?;
    for (demo, fused) in demos.iter().zip(batch.iter()) {
        let text_tokens = tokenizer::tokenize(&demo.text()).len();
        println!(
            "  {:28} -> {:2} fused rows ({} visual tokens dropped, text tokens {})",
            format!("{:?}", demo.label),
            fused.tokens.rows,
            model.visual_tokens_per_image,
            text_tokens,
        );
        assert_eq!(fused.tokens.rows, text_tokens);
    }

    // independence: each batched result equals its solo counterpart bitwise
    for (i, demo) in demos.iter().enumerate() {
        let solo = aggregate(demo, &agg, &w, &proj)?;
        assert_eq!(solo.tokens, batch[i].tokens);
    }
    println!("batch outputs are bit-identical to solo aggregation");
    Ok(())
}
