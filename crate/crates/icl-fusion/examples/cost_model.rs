//! The closed-form cost model: remaining ratios for published
//! visual/textual token counts, and the independent-vs-joint attention
//! element accounting validated against live counters.
//!
//! Run: `cargo run --example cost_model`

use icl_fusion::aggregator::{aggregate, AggregationConfig, Demonstration, ProjectionLayer};
use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::cost::{
    attention_cost, average_remaining_ratio_percent, remaining_ratio, AttentionMode,
};
use icl_fusion::counters;
use icl_fusion::image::Image;

fn main() -> icl_fusion::Result<()> {
    // Remaining ratio |T| / (|V| + |T|) for two published regimes: 256
    // visual tokens with mean text lengths 30.1/16.0/15.7/29.3 and 576
    // visual tokens with 34.4/18.3/17.9/33.6 (lengths carried in tenths).
    let few = average_remaining_ratio_percent(256, &[301, 160, 157, 293])?;
    let many = average_remaining_ratio_percent(576, &[344, 183, 179, 336])?;
    println!("average remaining ratio: |V|=256 -> {few}%, |V|=576 -> {many}%");
    println!(
        "single demo with 16 visual + 12 text tokens keeps {:.1}% of its tokens",
        remaining_ratio(16, 12)? * 100.0
    );

    // Independent vs joint attention cost, plus a live check: aggregate k
    // equal-length demos and compare the instrumented element counter.
    let model = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        visual_tokens_per_image: 4,
        patch_size: 4,
        max_seq: 512,
        seed: 0,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let proj = ProjectionLayer::init(model.d_model, 0);
    let agg = AggregationConfig::full(&model);

    println!("\nattention elements for k demos of padded length l (heads 2, layers 2):");
    println!("{:>4} {:>4} {:>12} {:>12} {:>8} {:>10}", "k", "l", "independent", "joint", "ratio", "measured");
    for (k, l) in [(2usize, 16usize), (4, 16), (8, 32)] {
        let ind = attention_cost(k, l, model.n_heads, agg.n_layers, AttentionMode::Independent);
        let joint = attention_cost(k, l, model.n_heads, agg.n_layers, AttentionMode::Joint);

        let text_len = l - model.visual_tokens_per_image;
        let demos: Vec<Demonstration> = (0..k)
            .map(|i| {
                Demonstration::new(
                    Image::new(8, 8, vec![i as f64 / k as f64; 64]).unwrap(),
                    "",
                    "x".repeat(text_len),
                )
                .unwrap()
            })
            .collect();
        let before = counters::snapshot();
        for d in &demos {
            aggregate(d, &agg, &w, &proj)?;
        }
        let measured = counters::since(before).lm_attn_elements;
        assert_eq!(measured as u128, ind);
        println!("{k:>4} {l:>4} {ind:>12} {joint:>12} {:>8} {measured:>10}", joint / ind);
    }
    Ok(())
}
