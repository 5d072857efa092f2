//! Image-information aggregation: one demonstration in, fused tokens out.
//!
//! A demonstration `<image, instruction, label>` is forwarded through the
//! first `N` decoder layers as `[visual tokens | text embeddings]` (image
//! first, positions from 0). The hidden states above the text positions are
//! kept, the image positions dropped, and a single trainable linear map
//! turns them into fused tokens -- a drop-in replacement for the whole
//! demonstration whose row count equals the demonstration's text token
//! count. Aggregation of each demonstration is independent of every other
//! demonstration in a batch, which is what makes the results cacheable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{BackboneWeights, ModelConfig};
use crate::digest::{digest_parts, f64_bytes, Digest32};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Mat, Tape, TensorRef};
use crate::tokenizer;

// ── Types ────────────────────────────────────────────────────────────

/// One `<image, instruction text, reference text>` pair.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub image: Image,
    pub instruction: String,
    pub label: String,
}

impl Demonstration {
    pub fn new(image: Image, instruction: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let demo = Demonstration {
            image,
            instruction: instruction.into(),
            label: label.into(),
        };
        if demo.text_ids().is_empty() {
            return Err(Error::Usage(
                "demonstration text (instruction + label) must tokenize to at least one token"
                    .into(),
            ));
        }
        Ok(demo)
    }

    /// The demonstrated text: instruction followed by the label.
    pub fn text(&self) -> String {
        format!("{}{}", self.instruction, self.label)
    }

    pub fn text_ids(&self) -> Vec<usize> {
        tokenizer::tokenize(&self.text())
    }

    /// Content digest over image bytes, instruction, and label.
    pub fn digest(&self) -> Digest32 {
        digest_parts(&[
            self.image.digest().as_bytes(),
            self.instruction.as_bytes(),
            self.label.as_bytes(),
        ])
    }
}

/// How many decoder layers act as the aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregationConfig {
    pub n_layers: usize,
}

impl AggregationConfig {
    pub fn new(n_layers: usize) -> Self {
        AggregationConfig { n_layers }
    }

    /// All layers (the default).
    pub fn full(model: &ModelConfig) -> Self {
        AggregationConfig {
            n_layers: model.n_layers,
        }
    }

    /// First half of the stack, rounded up.
    pub fn half(model: &ModelConfig) -> Self {
        AggregationConfig {
            n_layers: model.n_layers.div_ceil(2),
        }
    }

    /// First three quarters of the stack, rounded up.
    pub fn three_quarters(model: &ModelConfig) -> Self {
        AggregationConfig {
            n_layers: (3 * model.n_layers).div_ceil(4),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_layers == 0 || self.n_layers > model.n_layers {
            return Err(Error::Config(format!(
                "aggregation layer count {} outside 1..={}",
                self.n_layers, model.n_layers
            )));
        }
        Ok(())
    }
}

/// The single trainable parameter group in the whole system: a square map
/// from layer-N hidden space to LM input space, applied as `h · weight +
/// bias` per row. Initialized near the identity so untrained fused tokens
/// stay roughly in-distribution for the frozen LM.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl ProjectionLayer {
    /// Identity plus Gaussian noise (sigma 0.02), zero bias, seeded.
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut data = vec![0.0; d_model * d_model];
        for (i, v) in data.iter_mut().enumerate() {
            let on_diagonal = i % (d_model + 1) == 0;
            *v = if on_diagonal { 1.0 } else { 0.0 } + normal.sample(&mut rng);
        }
        ProjectionLayer {
            weight: Mat::new(d_model, d_model, data).expect("square"),
            bias: vec![0.0; d_model],
        }
    }

    /// All-zero projection (annihilates every input); test rig.
    pub fn zeros(d_model: usize) -> Self {
        ProjectionLayer {
            weight: Mat::zeros(d_model, d_model),
            bias: vec![0.0; d_model],
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.rows
    }

    pub fn digest(&self) -> Digest32 {
        digest_parts(&[&f64_bytes(&self.weight.data), &f64_bytes(&self.bias)])
    }
}

/// The projected text-position hidden states standing in for a whole
/// demonstration. Row count always equals the demonstration's text token
/// count, never the visual token count.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTokens {
    pub tokens: Mat,
    pub text_len: usize,
    pub demo_digest: Digest32,
    pub n_layers_used: usize,
    pub weights_version: Digest32,
    pub projection_version: Digest32,
}

/// Several fused-token blocks concatenated in order.
#[derive(Debug, Clone)]
pub struct DemonstrationSequence {
    pub tokens: Mat,
    pub lens: Vec<usize>,
    pub n_layers_used: usize,
    pub weights_version: Digest32,
    pub projection_version: Digest32,
}

// ── Operations ───────────────────────────────────────────────────────

/// The projection applied on a tape; trainer and inference share this exact
/// op sequence so their outputs agree bitwise.
pub fn project_on_tape(
    tape: &mut Tape,
    hidden: TensorRef,
    weight: TensorRef,
    bias: TensorRef,
) -> Result<TensorRef> {
    let prod = tape.matmul(hidden, weight)?;
    tape.add_row(prod, bias)
}

/// Forward `[visual | text]` through the first `N` layers and return the
/// hidden rows above the text positions (the image rows are dropped).
pub fn aggregate_hidden(
    demo: &Demonstration,
    cfg: &AggregationConfig,
    w: &BackboneWeights,
) -> Result<Mat> {
    cfg.validate(&w.config)?;
    let m = w.config.visual_tokens_per_image;
    let ids = demo.text_ids();
    if m + ids.len() > w.config.max_seq {
        return Err(Error::Capacity(format!(
            "demonstration needs {} slots ({} visual + {} text), max_seq {}",
            m + ids.len(),
            m,
            ids.len(),
            w.config.max_seq
        )));
    }
    let visual = w.encode_image(&demo.image)?;
    let vis_rows = w.add_positions(&visual.tokens, 0)?;
    let text_rows = w.embed_tokens(&ids, m)?;
    let seq = Mat::vstack(&[&vis_rows, &text_rows])?;
    let hidden = w.forward_layers(&seq, 0, cfg.n_layers)?;
    Mat::new(
        ids.len(),
        w.config.d_model,
        hidden.data[m * w.config.d_model..].to_vec(),
    )
}

/// Aggregate one demonstration into fused tokens.
pub fn aggregate(
    demo: &Demonstration,
    cfg: &AggregationConfig,
    w: &BackboneWeights,
    p: &ProjectionLayer,
) -> Result<FusedTokens> {
    if p.d_model() != w.config.d_model {
        return Err(Error::Config(format!(
            "projection is {}-dim, model is {}-dim",
            p.d_model(),
            w.config.d_model
        )));
    }
    let hidden = aggregate_hidden(demo, cfg, w)?;
    let mut tape = Tape::new();
    let h = tape.constant(hidden.data.clone(), &[hidden.rows, hidden.cols])?;
    let wp = tape.constant(p.weight.data.clone(), &[p.weight.rows, p.weight.cols])?;
    let b = tape.constant(p.bias.clone(), &[p.bias.len()])?;
    let fused = project_on_tape(&mut tape, h, wp, b)?;
    Ok(FusedTokens {
        tokens: Mat::new(hidden.rows, hidden.cols, tape.data(fused).to_vec())?,
        text_len: hidden.rows,
        demo_digest: demo.digest(),
        n_layers_used: cfg.n_layers,
        weights_version: w.digest(),
        projection_version: p.digest(),
    })
}

/// Aggregate a batch. Each result is bit-identical to aggregating that
/// demonstration alone; item errors carry the offending index.
pub fn aggregate_batch(
    demos: &[Demonstration],
    cfg: &AggregationConfig,
    w: &BackboneWeights,
    p: &ProjectionLayer,
) -> Result<Vec<FusedTokens>> {
    if demos.is_empty() {
        return Err(Error::Usage("aggregate_batch: empty batch".into()));
    }
    demos
        .iter()
        .enumerate()
        .map(|(index, demo)| {
            aggregate(demo, cfg, w, p).map_err(|e| Error::BatchItem {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Row-wise concatenation of fused-token blocks, preserving order. All parts
/// must come from the same weights, projection, and layer count.
pub fn concat_fused(parts: &[FusedTokens]) -> Result<DemonstrationSequence> {
    let first = parts.first().ok_or(Error::Usage(
        "concat_fused: need at least one part".into(),
    ))?;
    for (i, p) in parts.iter().enumerate() {
        if p.weights_version != first.weights_version
            || p.projection_version != first.projection_version
            || p.n_layers_used != first.n_layers_used
        {
            return Err(Error::Consistency(format!(
                "part {i} was aggregated under different weights/projection/layer-count"
            )));
        }
    }
    let mats: Vec<&Mat> = parts.iter().map(|p| &p.tokens).collect();
    Ok(DemonstrationSequence {
        tokens: Mat::vstack(&mats)?,
        lens: parts.iter().map(|p| p.text_len).collect(),
        n_layers_used: first.n_layers_used,
        weights_version: first.weights_version,
        projection_version: first.projection_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LN_EPS;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            visual_tokens_per_image: 4,
            patch_size: 4,
            max_seq: 128,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    fn demo(seed: u64, text: &str) -> Demonstration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        Demonstration::new(
            Image::new(8, 8, pixels).unwrap(),
            "describe: ",
            text,
        )
        .unwrap()
    }

    #[test]
    fn zero_projection_annihilates() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::zeros(16);
        let agg = AggregationConfig::full(&w.config);
        let f1 = aggregate(&demo(1, "a cat"), &agg, &w, &p).unwrap();
        let f2 = aggregate(&demo(2, "a dog"), &agg, &w, &p).unwrap();
        assert!(f1.tokens.data.iter().all(|&v| v == 0.0));
        assert!(f2.tokens.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_count_equals_text_token_count() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 0);
        let agg = AggregationConfig::half(&w.config);
        let d = demo(3, "quite a long label here");
        let fused = aggregate(&d, &agg, &w, &p).unwrap();
        assert_eq!(fused.tokens.rows, d.text_ids().len());
        assert_eq!(fused.text_len, d.text_ids().len());
    }

    #[test]
    fn batch_matches_solo_bitwise() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 0);
        let agg = AggregationConfig::full(&w.config);
        let demos: Vec<Demonstration> =
            (0..4).map(|i| demo(i, &format!("item {i}"))).collect();
        let batch = aggregate_batch(&demos, &agg, &w, &p).unwrap();
        for (i, d) in demos.iter().enumerate() {
            let solo = aggregate(d, &agg, &w, &p).unwrap();
            assert_eq!(batch[i].tokens, solo.tokens, "item {i}");
        }
        // shuffling the batch does not change per-demo outputs
        let shuffled: Vec<Demonstration> = demos.iter().rev().cloned().collect();
        let rev = aggregate_batch(&shuffled, &agg, &w, &p).unwrap();
        for i in 0..4 {
            assert_eq!(rev[3 - i].tokens, batch[i].tokens);
        }
    }

    #[test]
    fn batch_error_carries_index() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 0);
        let agg = AggregationConfig::full(&w.config);
        let long_label = "x".repeat(300); // 4 + 300 + instruction > max_seq 128
        let demos = vec![demo(0, "fine"), demo(1, &long_label)];
        match aggregate_batch(&demos, &agg, &w, &p) {
            Err(Error::BatchItem { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected BatchItem error, got {other:?}"),
        }
    }

    #[test]
    fn concat_preserves_order_and_lengths() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 0);
        let agg = AggregationConfig::full(&w.config);
        let demos = [demo(1, "abcde"), demo(2, "abcdefg"), demo(3, "abc")];
        let fused: Vec<FusedTokens> = demos
            .iter()
            .map(|d| aggregate(d, &agg, &w, &p).unwrap())
            .collect();
        let single = concat_fused(&fused[..1]).unwrap();
        assert_eq!(single.tokens, fused[0].tokens);

        let seq = concat_fused(&fused).unwrap();
        let expect_total: usize = fused.iter().map(|f| f.text_len).sum();
        assert_eq!(seq.tokens.rows, expect_total);

        // permuting parts permutes row blocks exactly
        let perm = [2usize, 0, 1];
        let permuted: Vec<FusedTokens> = perm.iter().map(|&i| fused[i].clone()).collect();
        let seq2 = concat_fused(&permuted).unwrap();
        let mut offset = 0;
        for &i in &perm {
            let rows = fused[i].text_len;
            let block = &seq2.tokens.data[offset * 16..(offset + rows) * 16];
            assert_eq!(block, &fused[i].tokens.data[..]);
            offset += rows;
        }
    }

    #[test]
    fn concat_rejects_mixed_versions() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p1 = ProjectionLayer::init(16, 0);
        let p2 = ProjectionLayer::init(16, 1);
        let agg = AggregationConfig::full(&w.config);
        let a = aggregate(&demo(1, "a"), &agg, &w, &p1).unwrap();
        let b = aggregate(&demo(2, "b"), &agg, &w, &p2).unwrap();
        assert!(matches!(
            concat_fused(&[a, b]),
            Err(Error::Consistency(_))
        ));
    }

    /// Independent re-implementation of the aggregation forward with naive
    /// loop attention (explicit per-query prefix masking, no tape).
    fn naive_aggregate(
        d: &Demonstration,
        n_layers: usize,
        w: &BackboneWeights,
        p: &ProjectionLayer,
    ) -> Mat {
        let cfgm = &w.config;
        let dm = cfgm.d_model;
        let m = cfgm.visual_tokens_per_image;
        let visual = w.encode_image(&d.image).unwrap();
        let ids = d.text_ids();

        // sequence assembly: visual rows + positions, then text + positions
        let t = m + ids.len();
        let mut x = vec![0.0; t * dm];
        for r in 0..m {
            for c in 0..dm {
                x[r * dm + c] = visual.tokens.data[r * dm + c] + w.pos_embed[r * dm + c];
            }
        }
        for (i, &id) in ids.iter().enumerate() {
            let r = m + i;
            for c in 0..dm {
                x[r * dm + c] = w.tok_embed[id * dm + c] + w.pos_embed[r * dm + c];
            }
        }

        let ln = |input: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
            let rows = input.len() / dm;
            let mut out = vec![0.0; input.len()];
            for r in 0..rows {
                let row = &input[r * dm..(r + 1) * dm];
                let mean = row.iter().sum::<f64>() / dm as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dm as f64;
                let istd = 1.0 / (var + LN_EPS).sqrt();
                for c in 0..dm {
                    out[r * dm + c] = (row[c] - mean) * istd * gain[c] + bias[c];
                }
            }
            out
        };
        let linear = |input: &[f64], wmat: &[f64], bias: &[f64], din: usize, dout: usize| {
            let rows = input.len() / din;
            let mut out = vec![0.0; rows * dout];
            for r in 0..rows {
                for j in 0..dout {
                    let mut acc = bias[j];
                    for i in 0..din {
                        acc += input[r * din + i] * wmat[i * dout + j];
                    }
                    out[r * dout + j] = acc;
                }
            }
            out
        };

        let dh = cfgm.head_dim();
        for lw in w.layers.iter().take(n_layers) {
            let h = ln(&x, &lw.ln1_gain, &lw.ln1_bias);
            let q = linear(&h, &lw.wq, &lw.bq, dm, dm);
            let k = linear(&h, &lw.wk, &lw.bk, dm, dm);
            let v = linear(&h, &lw.wv, &lw.bv, dm, dm);
            let mut ctx = vec![0.0; t * dm];
            for head in 0..cfgm.n_heads {
                let off = head * dh;
                for qi in 0..t {
                    // scores over the causal prefix only
                    let mut scores = Vec::with_capacity(qi + 1);
                    for kj in 0..=qi {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[qi * dm + off + c] * k[kj * dm + off + c];
                        }
                        scores.push(dot / (dh as f64).sqrt());
                    }
                    let maxs = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - maxs).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for (kj, e) in exps.iter().enumerate() {
                        let pr = e / denom;
                        for c in 0..dh {
                            ctx[qi * dm + off + c] += pr * v[kj * dm + off + c];
                        }
                    }
                }
            }
            let attn_out = linear(&ctx, &lw.wo, &lw.bo, dm, dm);
            for (xi, a) in x.iter_mut().zip(attn_out.iter()) {
                *xi += a;
            }
            let h2 = ln(&x, &lw.ln2_gain, &lw.ln2_bias);
            let up = linear(&h2, &lw.w_up, &lw.b_up, dm, cfgm.mlp_dim());
            let act: Vec<f64> = up
                .iter()
                .map(|&u| 0.5 * u * (1.0 + (0.7978845608028654 * (u + 0.044715 * u * u * u)).tanh()))
                .collect();
            let down = linear(&act, &lw.w_down, &lw.b_down, cfgm.mlp_dim(), dm);
            for (xi, mlp) in x.iter_mut().zip(down.iter()) {
                *xi += mlp;
            }
        }

        // keep text rows, project
        let text = &x[m * dm..];
        let fused = linear(text, &p.weight.data, &p.bias, dm, dm);
        Mat::new(ids.len(), dm, fused).unwrap()
    }

    #[test]
    fn aggregation_matches_naive_attention_oracle() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 7);
        for n in [2usize, 4] {
            let agg = AggregationConfig::new(n);
            let d = demo(11, "oracle check");
            let fused = aggregate(&d, &agg, &w, &p).unwrap();
            let oracle = naive_aggregate(&d, n, &w, &p);
            for (a, b) in fused.tokens.data.iter().zip(oracle.data.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b} (N={n})");
            }
        }
    }

    #[test]
    fn capacity_overflow_is_reported() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 0);
        let agg = AggregationConfig::full(&w.config);
        let d = demo(0, &"y".repeat(200));
        assert!(matches!(
            aggregate(&d, &agg, &w, &p),
            Err(Error::Capacity(_))
        ));
    }
}
