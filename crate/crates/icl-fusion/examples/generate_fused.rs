//! Build fused and full-token prompts for the same query, compare their
//! lengths, and generate greedily from both. Also checks the incremental
//! decoder against the naive full-recompute reference.
//!
//! Run: `cargo run --example generate_fused`

use icl_fusion::aggregator::{aggregate, AggregationConfig, ProjectionLayer};
use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::engine::{generate, generate_naive};
use icl_fusion::prompt::{build_prompt_baseline, build_prompt_fused};
use icl_fusion::synth::synth_eval_set;

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
        visual_tokens_per_image: 8,
        patch_size: 4,
        max_seq: 512,
        seed: 5,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let proj = ProjectionLayer::init(model.d_model, 1);
    let agg = AggregationConfig::full(&model);
    let (pool, queries) = synth_eval_set(8, 1, 21, &model, "caption: ")?;
    let query = &queries[0];

    for shots in [0usize, 2, 4] {
        let demos: Vec<_> = pool.iter().take(shots).cloned().collect();
        let fused: Vec<_> = demos
            .iter()
            .map(|d| aggregate(d, &agg, &w, &proj))
            .collect::<icl_fusion::Result<_>>()?;

        let fp = build_prompt_fused(&fused, &query.query, &w)?;
        let bp = build_prompt_baseline(&demos, &query.query, &w)?;
        println!(
            "{shots}-shot: fused prompt {:3} rows vs baseline {:3} rows ({} visual tokens dropped)",
            fp.len(),
            bp.len(),
            shots * model.visual_tokens_per_image
        );

        let out = generate(&fp, 12, &w)?;
        let reference = generate_naive(&fp, 12, &w)?;
        assert_eq!(out.token_ids, reference.token_ids);
        println!(
            "  fused generation   : {:?} ({} tokens, KV-cached == naive)",
            out.text,
            out.token_ids.len()
        );
        let out_b = generate(&bp, 12, &w)?;
        println!(
            "  baseline generation: {:?} ({} tokens)",
            out_b.text,
            out_b.token_ids.len()
        );
    }
    Ok(())
}
