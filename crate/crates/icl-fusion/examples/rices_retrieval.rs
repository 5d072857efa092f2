//! Retrieval-based demonstration selection: rank a pool by image cosine
//! similarity to each query and compare against random selection.
//!
//! Run: `cargo run --example rices_retrieval`

use icl_fusion::backbone::{BackboneWeights, ModelConfig};
use icl_fusion::rices::{image_embedding, rices_rank};
use icl_fusion::synth::{decode_motif, synth_eval_set};

fn main() -> icl_fusion::Result<()> {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        visual_tokens_per_image: 8,
        patch_size: 4,
        max_seq: 256,
        seed: 23,
        ..ModelConfig::default()
    };
    let w = BackboneWeights::init(model.clone())?;
    let (pool, queries) = synth_eval_set(12, 4, 31, &model, "caption: ")?;

    for (qi, q) in queries.iter().enumerate() {
        let ranked = rices_rank(&q.query.image, &pool, &w)?;
        let query_motif = decode_motif(&q.query.image, model.patch_size).unwrap();
        let labels: Vec<String> = ranked
            .iter()
            .take(3)
            .map(|&i| {
                let motif = decode_motif(&pool[i].image, model.patch_size).unwrap();
                format!("#{i} ({})", if motif == query_motif { "same motif" } else { "other" })
            })
            .collect();
        println!(
            "query {qi} [{}]: top-3 by cosine = {}",
            q.gold.trim(),
            labels.join(", ")
        );
    }

    // embeddings behind the ranking are just mean visual-token rows
    let e = image_embedding(&queries[0].query.image, &w)?;
    println!(
        "query-0 embedding: {} dims, norm {:.4}",
        e.len(),
        e.iter().map(|v| v * v).sum::<f64>().sqrt()
    );
    Ok(())
}
