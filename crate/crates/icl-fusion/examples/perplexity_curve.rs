//! Perplexity of gold captions as the number of demonstrations grows, for
//! fused, full-token, and text-only prompts.
//!
//! Run: `cargo run --example perplexity_curve`

use icl_fusion::aggregator::ProjectionLayer;
use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::bench::{run_grid, Mode, RunSpec, Selection};
use icl_fusion::config::InstructionTemplates;

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        visual_tokens_per_image: 8,
        patch_size: 4,
        max_seq: 512,
        seed: 3,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let proj = ProjectionLayer::init(model.d_model, 0);
    let templates = InstructionTemplates {
        caption: "caption:".into(),
        ..InstructionTemplates::default()
    };
    let spec = RunSpec {
        shots: vec![0, 1, 2, 4, 8],
        modes: vec![Mode::Fused, Mode::Baseline, Mode::TextOnly],
        selection: Selection::Random,
        n_queries: 6,
        pool_size: 16,
        seed: 17,
        max_new_tokens: 0, // perplexity only
        ..RunSpec::default()
    };

    let out = run_grid(&spec, &w, &proj, &templates)?;
    println!("mean PPL of gold captions (sentinel count in parentheses):");
    println!("{:>6} {:>12} {:>12} {:>12}", "shots", "fused", "baseline", "text_only");
    for &shots in &spec.shots {
        let cell = |mode: &str| {
            out.cells
                .iter()
                .find(|c| c.n_shots == shots && c.mode == mode)
                .map(|c| match c.ppl_mean {
                    Some(p) => format!("{p:.1} ({})", c.ppl_inf_count),
                    None => format!("inf ({})", c.ppl_inf_count),
                })
                .unwrap_or_default()
        };
        println!(
            "{shots:>6} {:>12} {:>12} {:>12}",
            cell("fused"),
            cell("baseline"),
            cell("text_only")
        );
    }
    Ok(())
}
