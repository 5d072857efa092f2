//! Where does the last prompt position attend? Per-segment attention
//! fractions of a full-token prompt, per layer, with the demo-visual vs
//! demo-text contrast summarized at the end.
//!
//! Run: `cargo run --example attention_map`

use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::engine::attention_mass;
use icl_fusion::prompt::{build_prompt_baseline, SegmentKind};
use icl_fusion::synth::synth_eval_set;

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
        visual_tokens_per_image: 8,
        patch_size: 4,
        max_seq: 512,
        seed: 13,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let (pool, queries) = synth_eval_set(4, 1, 29, &model, "caption: ")?;
    let demos: Vec<_> = pool.into_iter().take(3).collect();
    let prompt = build_prompt_baseline(&demos, &queries[0].query, &w)?;

    println!("prompt: {} rows over {} segments", prompt.len(), prompt.segments.len());
    for layer in 0..model.n_layers {
        let mass = attention_mass(&prompt, &w, layer)?;
        print!("layer {layer}:");
        for (seg, f) in prompt.segments.iter().zip(mass.fractions.iter()) {
            print!(" {}={:.3}", seg.kind, f);
        }
        println!();
    }

    let last = model.n_layers - 1;
    let mass = attention_mass(&prompt, &w, last)?;
    let mut visual = 0.0;
    let mut text = 0.0;
    for (seg, &f) in prompt.segments.iter().zip(mass.fractions.iter()) {
        match seg.kind {
            SegmentKind::VisualDemo(_) => visual += f,
            SegmentKind::TextDemo(_) => text += f,
            _ => {}
        }
    }
    println!(
        "layer {last}: total demo-visual mass {visual:.3} vs demo-text mass {text:.3}"
    );
    Ok(())
}
