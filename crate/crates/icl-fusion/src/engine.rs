//! Greedy generation, teacher-forced perplexity, and attention-mass
//! analysis over assembled prompts.
//!
//! Generation is greedy argmax (ties resolve to the lowest token id) and
//! stops at EOS or the token budget. [`generate`] reuses per-layer K/V
//! across steps; [`generate_naive`] recomputes the full forward from scratch
//! at every step. The two are equivalent token for token -- the naive path
//! is the semantic reference, the cached path the one you actually run.
//!
//! An overflowing perplexity surfaces as an explicit +inf sentinel with a
//! flag, never as a silent NaN, so "perplexity blast" conditions remain
//! visible in aggregates.

use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::prompt::PromptSequence;
use crate::tensor::Mat;
use crate::tokenizer::{self, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Log-probability of each chosen token at its step.
    pub chosen_logprobs: Vec<f64>,
}

/// Greedy argmax with ties resolving to the lowest token id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

fn check_generation_budget(
    prompt: &PromptSequence,
    max_new_tokens: usize,
    w: &BackboneWeights,
) -> Result<usize> {
    if max_new_tokens == 0 {
        return Err(Error::Usage("max_new_tokens must be at least 1".into()));
    }
    if prompt.len() + 1 > w.config.max_seq {
        return Err(Error::Capacity(format!(
            "prompt of {} rows leaves no room to generate (max_seq {})",
            prompt.len(),
            w.config.max_seq
        )));
    }
    Ok(max_new_tokens.min(w.config.max_seq - prompt.len()))
}

fn finish(ids: Vec<usize>, logprobs: Vec<f64>) -> Result<GenerationResult> {
    // Freely generated bytes need not form UTF-8; decode lossily.
    let text = tokenizer::detokenize_lossy(&ids);
    Ok(GenerationResult {
        token_ids: ids,
        text,
        chosen_logprobs: logprobs,
    })
}

/// Greedy decoding with per-layer K/V reuse across steps.
pub fn generate(
    prompt: &PromptSequence,
    max_new_tokens: usize,
    w: &BackboneWeights,
) -> Result<GenerationResult> {
    let budget = check_generation_budget(prompt, max_new_tokens, w)?;
    let (hidden, mut cache) = w.forward_prefill(&prompt.embeddings)?;
    let last = Mat::new(1, hidden.cols, hidden.row(hidden.rows - 1).to_vec())?;
    let mut logits = w.lm_logits(&last)?;

    let mut ids = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let chosen = argmax(logits.row(0));
        ids.push(chosen);
        logprobs.push(log_softmax_at(logits.row(0), chosen));
        if chosen == EOS || ids.len() >= budget {
            break;
        }
        let row = w.embed_tokens(&[chosen], cache.len())?;
        let out = w.forward_step(&mut cache, &row)?;
        logits = w.lm_logits(&out)?;
    }
    finish(ids, logprobs)
}

/// Reference decoder: a full forward over prompt plus everything generated
/// so far, at every step.
pub fn generate_naive(
    prompt: &PromptSequence,
    max_new_tokens: usize,
    w: &BackboneWeights,
) -> Result<GenerationResult> {
    let budget = check_generation_budget(prompt, max_new_tokens, w)?;
    let mut seq = prompt.embeddings.clone();
    let mut ids = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let hidden = w.forward_layers(&seq, 0, w.config.n_layers)?;
        let last = Mat::new(1, hidden.cols, hidden.row(hidden.rows - 1).to_vec())?;
        let logits = w.lm_logits(&last)?;
        let chosen = argmax(logits.row(0));
        ids.push(chosen);
        logprobs.push(log_softmax_at(logits.row(0), chosen));
        if chosen == EOS || ids.len() >= budget {
            break;
        }
        let row = w.embed_tokens(&[chosen], seq.rows)?;
        seq.append_rows(&row)?;
    }
    finish(ids, logprobs)
}

/// Teacher-forced perplexity of a gold continuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    /// exp(mean NLL); +inf when overflowed.
    pub value: f64,
    pub mean_nll: f64,
    /// True when exp overflowed; `value` is the +inf sentinel then.
    pub overflowed: bool,
}

pub fn perplexity(
    prompt: &PromptSequence,
    gold: &str,
    w: &BackboneWeights,
) -> Result<Perplexity> {
    let gold_ids = tokenizer::tokenize(gold);
    if gold_ids.is_empty() {
        return Err(Error::Usage("gold continuation must be non-empty".into()));
    }
    let p_len = prompt.len();
    if p_len == 0 {
        return Err(Error::Usage("prompt must be non-empty".into()));
    }
    if p_len + gold_ids.len() > w.config.max_seq {
        return Err(Error::Capacity(format!(
            "prompt {} + gold {} rows exceed max_seq {}",
            p_len,
            gold_ids.len(),
            w.config.max_seq
        )));
    }
    let gold_rows = w.embed_tokens(&gold_ids, p_len)?;
    let seq = Mat::vstack(&[&prompt.embeddings, &gold_rows])?;
    let hidden = w.forward_layers(&seq, 0, w.config.n_layers)?;

    // Row p_len - 1 + t predicts gold token t.
    let pred = Mat::new(
        gold_ids.len(),
        hidden.cols,
        hidden.data[(p_len - 1) * hidden.cols..(p_len - 1 + gold_ids.len()) * hidden.cols]
            .to_vec(),
    )?;
    let logits = w.lm_logits(&pred)?;
    let mut total_nll = 0.0;
    for (t, &id) in gold_ids.iter().enumerate() {
        total_nll -= log_softmax_at(logits.row(t), id);
    }
    let mean_nll = total_nll / gold_ids.len() as f64;
    if mean_nll.is_nan() {
        return Err(Error::NonFinite { op: "perplexity" });
    }
    let value = mean_nll.exp();
    Ok(Perplexity {
        value,
        mean_nll,
        overflowed: !value.is_finite(),
    })
}

/// Per-segment share of the last prompt position's attention at one layer.
#[derive(Debug, Clone)]
pub struct AttentionMass {
    pub layer: usize,
    /// One fraction per prompt segment, in segment order; sums to 1.
    pub fractions: Vec<f64>,
}

fn mass_from_row(prompt: &PromptSequence, row: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    prompt
        .segments
        .iter()
        .map(|seg| row[seg.start..seg.start + seg.len].iter().sum::<f64>() / total)
        .collect()
}

/// Head-averaged attention fractions of the last position over the prompt's
/// segments, at `layer`.
pub fn attention_mass(
    prompt: &PromptSequence,
    w: &BackboneWeights,
    layer: usize,
) -> Result<AttentionMass> {
    let per_head = attention_mass_by_head(prompt, w, layer)?;
    let heads = per_head.len() as f64;
    let n_seg = prompt.segments.len();
    let fractions: Vec<f64> = (0..n_seg)
        .map(|s| per_head.iter().map(|h| h[s]).sum::<f64>() / heads)
        .collect();
    Ok(AttentionMass { layer, fractions })
}

/// Per-head variant of [`attention_mass`].
pub fn attention_mass_by_head(
    prompt: &PromptSequence,
    w: &BackboneWeights,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer >= w.config.n_layers {
        return Err(Error::Usage(format!(
            "layer {layer} out of range (model has {})",
            w.config.n_layers
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Usage("prompt must be non-empty".into()));
    }
    if !prompt.spans_tile_exactly() {
        return Err(Error::Usage("prompt span table does not tile".into()));
    }
    let (_, traces) = w.forward_layers_traced(&prompt.embeddings, 0, layer + 1)?;
    let trace = traces.last().expect("at least one layer");
    Ok(trace
        .heads
        .iter()
        .map(|h| mass_from_row(prompt, &h.probs_last_row))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{aggregate, AggregationConfig, Demonstration, ProjectionLayer};
    use crate::backbone::ModelConfig;
    use crate::image::Image;
    use crate::prompt::{build_prompt_baseline, build_prompt_fused, Query};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            visual_tokens_per_image: 4,
            patch_size: 4,
            max_seq: 96,
            seed: 23,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap()
    }

    fn q(seed: u64) -> Query {
        Query::new(image(seed), "describe: ").unwrap()
    }

    /// Rig: zero final-norm gain and a one-hot norm bias make the logits a
    /// constant row of the LM head, independent of the prompt.
    fn rig_constant_logits(w: &mut BackboneWeights, favored: &[(usize, f64)]) {
        let d = w.config.d_model;
        let v = w.config.vocab_size;
        w.final_ln_gain = vec![0.0; d];
        let mut bias = vec![0.0; d];
        bias[0] = 1.0;
        w.final_ln_bias = bias;
        w.lm_head = vec![0.0; d * v];
        for &(tok, logit) in favored {
            w.lm_head[tok] = logit; // row 0 of the head
        }
    }

    #[test]
    fn eos_rig_generates_empty_text() {
        let mut w = BackboneWeights::init(cfg()).unwrap();
        rig_constant_logits(&mut w, &[(crate::tokenizer::EOS, 10.0)]);
        let prompt = build_prompt_fused(&[], &q(1), &w).unwrap();
        let out = generate(&prompt, 8, &w).unwrap();
        assert_eq!(out.token_ids, vec![crate::tokenizer::EOS]);
        assert_eq!(out.text, "");
        assert_eq!(out.chosen_logprobs.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let prompt = build_prompt_fused(&[], &q(2), &w).unwrap();
        let a = generate(&prompt, 6, &w).unwrap();
        let b = generate(&prompt, 6, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_equals_naive() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let p = ProjectionLayer::init(16, 3);
        let agg = AggregationConfig::full(&w.config);
        let demos: Vec<Demonstration> = (0..2)
            .map(|i| Demonstration::new(image(i), "cap: ", format!("thing {i}")).unwrap())
            .collect();
        let fused: Vec<_> = demos
            .iter()
            .map(|d| aggregate(d, &agg, &w, &p).unwrap())
            .collect();
        for prompt in [
            build_prompt_fused(&fused, &q(3), &w).unwrap(),
            build_prompt_baseline(&demos, &q(4), &w).unwrap(),
        ] {
            let fast = generate(&prompt, 10, &w).unwrap();
            let slow = generate_naive(&prompt, 10, &w).unwrap();
            assert_eq!(fast.token_ids, slow.token_ids);
            assert_eq!(fast.text, slow.text);
        }
    }

    #[test]
    fn certain_rig_gives_ppl_one() {
        let mut w = BackboneWeights::init(cfg()).unwrap();
        let gold = "aaaa";
        let tok = crate::tokenizer::tokenize("a")[0];
        rig_constant_logits(&mut w, &[(tok, 1e9)]);
        let prompt = build_prompt_fused(&[], &q(5), &w).unwrap();
        let ppl = perplexity(&prompt, gold, &w).unwrap();
        assert!((ppl.value - 1.0).abs() < 1e-9);
        assert!(!ppl.overflowed);
    }

    #[test]
    fn uniform_rig_gives_ppl_vocab() {
        let mut w = BackboneWeights::init(cfg()).unwrap();
        rig_constant_logits(&mut w, &[]);
        let prompt = build_prompt_fused(&[], &q(6), &w).unwrap();
        let ppl = perplexity(&prompt, "anything", &w).unwrap();
        assert!((ppl.value - w.config.vocab_size as f64).abs() < 1e-6);
    }

    #[test]
    fn overflow_is_sentinel_not_nan() {
        let mut w = BackboneWeights::init(cfg()).unwrap();
        let tok = crate::tokenizer::tokenize("z")[0];
        rig_constant_logits(&mut w, &[(tok, -1e9)]);
        let prompt = build_prompt_fused(&[], &q(7), &w).unwrap();
        let ppl = perplexity(&prompt, "zzz", &w).unwrap();
        assert!(ppl.overflowed);
        assert!(ppl.value.is_infinite() && ppl.value > 0.0);
        assert!(!ppl.value.is_nan());
        assert!(!ppl.mean_nll.is_nan());
    }

    #[test]
    fn ppl_invariant_to_ignored_prompt_under_rig() {
        // a rigged-certain head ignores the prompt entirely
        let mut w = BackboneWeights::init(cfg()).unwrap();
        let tok = crate::tokenizer::tokenize("a")[0];
        rig_constant_logits(&mut w, &[(tok, 1e9)]);
        let p1 = build_prompt_fused(&[], &q(8), &w).unwrap();
        let p2 = build_prompt_fused(&[], &q(9), &w).unwrap();
        let a = perplexity(&p1, "aa", &w).unwrap();
        let b = perplexity(&p2, "aa", &w).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn attention_mass_sums_to_one_and_single_segment_is_total() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let demos: Vec<Demonstration> = (0..2)
            .map(|i| Demonstration::new(image(20 + i), "cap: ", "label").unwrap())
            .collect();
        let prompt = build_prompt_baseline(&demos, &q(10), &w).unwrap();
        for layer in 0..w.config.n_layers {
            let mass = attention_mass(&prompt, &w, layer).unwrap();
            let sum: f64 = mass.fractions.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "layer {layer}: {sum}");
            assert!(mass.fractions.iter().all(|&f| f >= 0.0));
        }

        // a prompt with one segment gets all the mass
        let mut single = build_prompt_fused(&[], &q(11), &w).unwrap();
        single.segments = vec![crate::prompt::Segment {
            kind: crate::prompt::SegmentKind::TextQuery,
            start: 0,
            len: single.len(),
        }];
        let mass = attention_mass(&single, &w, 0).unwrap();
        assert_eq!(mass.fractions.len(), 1);
        assert!((mass.fractions[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_mass_matches_saved_qk_recompute() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let demos: Vec<Demonstration> = (0..2)
            .map(|i| Demonstration::new(image(30 + i), "cap: ", "label").unwrap())
            .collect();
        let prompt = build_prompt_baseline(&demos, &q(12), &w).unwrap();
        let layer = 1;
        let (_, traces) = w
            .forward_layers_traced(&prompt.embeddings, 0, layer + 1)
            .unwrap();
        let trace = &traces[layer];
        let mass = attention_mass(&prompt, &w, layer).unwrap();

        // brute-force: recompute softmax(q_last . K^T / sqrt(dh)) per head
        let dh = w.config.head_dim();
        let t = prompt.len();
        let mut acc = vec![0.0; prompt.segments.len()];
        for head in &trace.heads {
            let q_last = head.q.row(t - 1);
            let mut scores = Vec::with_capacity(t);
            for r in 0..t {
                let dot: f64 = q_last.iter().zip(head.k.row(r)).map(|(a, b)| a * b).sum();
                scores.push(dot / (dh as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (si, seg) in prompt.segments.iter().enumerate() {
                let seg_sum: f64 =
                    exps[seg.start..seg.start + seg.len].iter().sum::<f64>() / denom;
                acc[si] += seg_sum;
            }
        }
        for v in acc.iter_mut() {
            *v /= trace.heads.len() as f64;
        }
        for (a, b) in mass.fractions.iter().zip(acc.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
