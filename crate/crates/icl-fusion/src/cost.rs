//! Closed-form cost accounting: remaining ratio, attention-element counts,
//! and the analytical peak-memory estimate.
//!
//! The remaining ratio is `|T| / (|V| + |T|)`: the fraction of a
//! demonstration's tokens that survive compression when its visual tokens
//! are dropped. Averages over benchmark text lengths are computed with
//! exact integer arithmetic (lengths carried in tenths) and rounded only
//! for display.

use serde::Serialize;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};

/// `t / (v + t)` with `t >= 1`.
pub fn remaining_ratio(visual_tokens: usize, text_tokens: usize) -> Result<f64> {
    if text_tokens == 0 {
        return Err(Error::Usage(
            "remaining ratio undefined for zero text tokens".into(),
        ));
    }
    Ok(text_tokens as f64 / (visual_tokens + text_tokens) as f64)
}

/// Average remaining ratio over several datasets, as a whole percent.
///
/// Text lengths are given in tenths of a token so fractional benchmark
/// averages stay exact: with mean text length `S/(10 n)` the ratio is
/// `S / (10 n v + S)`, and the percent is rounded half-up from the exact
/// rational `100 S / (10 n v + S)`.
pub fn average_remaining_ratio_percent(
    visual_tokens: u64,
    text_len_tenths: &[u64],
) -> Result<u32> {
    if text_len_tenths.is_empty() || text_len_tenths.contains(&0) {
        return Err(Error::Usage(
            "need at least one dataset with a positive text length".into(),
        ));
    }
    let s: u128 = text_len_tenths.iter().map(|&t| t as u128).sum();
    let n = text_len_tenths.len() as u128;
    let den = 10 * n * visual_tokens as u128 + s;
    let num = 100 * s;
    // round half up
    Ok(((2 * num + den) / (2 * den)) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Each of the `k` sequences forwarded alone: `k * layers * heads * l^2`.
    Independent,
    /// One concatenated sequence: `layers * heads * (k l)^2`.
    Joint,
}

/// Attention score elements for `k` sequences of padded length `l`.
/// Joint over independent is exactly `k` for all inputs.
pub fn attention_cost(
    k: usize,
    l: usize,
    heads: usize,
    layers: usize,
    mode: AttentionMode,
) -> u128 {
    let (k, l, heads, layers) = (k as u128, l as u128, heads as u128, layers as u128);
    match mode {
        AttentionMode::Independent => k * layers * heads * l * l,
        AttentionMode::Joint => layers * heads * (k * l) * (k * l),
    }
}

/// Analytical estimate of the bytes resident during one forward of length
/// `t` through `layers` decoder layers: every tape intermediate (activation
/// rows, per-head projections, score/probability matrices) plus the logits
/// row, at 8 bytes per scalar. Deterministic and portable by construction;
/// it is an accounting model, not a process measurement.
pub fn peak_forward_bytes(t: usize, cfg: &ModelConfig, layers: usize) -> u64 {
    let d = cfg.d_model;
    let per_layer_rows = 16 * t * d + 3 * t * cfg.mlp_dim();
    let per_layer_heads = cfg.n_heads * (3 * t * t + 4 * t * cfg.head_dim());
    (8 * (layers * (per_layer_rows + per_layer_heads) + t * d + cfg.vocab_size)) as u64
}

/// One experimental condition's quantitative summary.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub mode: String,
    pub n_shots: usize,
    pub visual_tokens_per_demo: usize,
    pub mean_text_tokens: f64,
    /// 1.0 at zero shots (nothing is compressed).
    pub remaining_ratio: f64,
    pub prompt_len: usize,
    pub attn_elements_aggregation: u64,
    pub attn_elements_generation: u64,
    pub peak_bytes_estimate: u64,
    pub tokens_per_second: f64,
    pub queries_per_second: f64,
    /// Mean perplexity over queries whose PPL stayed finite.
    pub ppl_mean: Option<f64>,
    /// Queries whose PPL hit the +inf sentinel.
    pub ppl_inf_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_without_visual_tokens_is_one() {
        assert_eq!(remaining_ratio(0, 10).unwrap(), 1.0);
    }

    #[test]
    fn zero_text_is_domain_error() {
        assert!(remaining_ratio(256, 0).is_err());
    }

    #[test]
    fn benchmark_average_ratios_round_to_published_percents() {
        // 256 visual tokens; mean text lengths 30.1, 16.0, 15.7, 29.3
        let r = average_remaining_ratio_percent(256, &[301, 160, 157, 293]).unwrap();
        assert_eq!(r, 8);
        // 576 visual tokens; 34.4, 18.3, 17.9, 33.6
        let r = average_remaining_ratio_percent(576, &[344, 183, 179, 336]).unwrap();
        assert_eq!(r, 4);
    }

    #[test]
    fn average_matches_float_reference() {
        // mean t = 22.775, v = 256 -> R = 22.775 / 278.775
        let percent = average_remaining_ratio_percent(256, &[301, 160, 157, 293]).unwrap();
        let float_r: f64 = 22.775 / 278.775;
        assert_eq!(percent, (float_r * 100.0).round() as u32);
    }

    #[test]
    fn attention_cost_modes_agree_at_k1() {
        for l in [3, 10, 31] {
            assert_eq!(
                attention_cost(1, l, 4, 8, AttentionMode::Independent),
                attention_cost(1, l, 4, 8, AttentionMode::Joint)
            );
        }
    }

    #[test]
    fn joint_over_independent_is_exactly_k() {
        for k in [1usize, 2, 4, 8, 17] {
            for l in [8usize, 16, 32, 100] {
                let ind = attention_cost(k, l, 3, 5, AttentionMode::Independent);
                let joint = attention_cost(k, l, 3, 5, AttentionMode::Joint);
                assert_eq!(joint, ind * k as u128);
            }
        }
    }

    #[test]
    fn direct_substitution_example() {
        assert_eq!(attention_cost(4, 10, 1, 1, AttentionMode::Independent), 400);
        assert_eq!(attention_cost(4, 10, 1, 1, AttentionMode::Joint), 1600);
    }
}
