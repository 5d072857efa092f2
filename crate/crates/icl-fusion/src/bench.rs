//! Experiment grid and throughput benchmark.
//!
//! A grid runs {shot counts} x {modes} over a synthetic evaluation set:
//! each cell selects demonstrations per query (random or retrieval), builds
//! the prompt for its mode, generates, and measures perplexity against the
//! gold caption, emitting one [`CostReport`] per cell plus per-query
//! records and attention-mass rows. Cells are isolated: one failing cell
//! does not stop the rest.
//!
//! The throughput benchmark times end-to-end query processing per cell
//! (aggregation included for fused mode, amortized by the demonstration
//! bank) with the first iterations discarded as warmup and the median taken
//! over the remaining repetitions.

use std::time::Instant;

use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{AggregationConfig, Demonstration, FusedTokens, ProjectionLayer};
use crate::backbone::BackboneWeights;
use crate::bank::DemonstrationBank;
use crate::config::InstructionTemplates;
use crate::cost::{peak_forward_bytes, CostReport};
use crate::counters;
use crate::engine::{attention_mass, generate, perplexity};
use crate::error::{Error, Result};
use crate::prompt::{
    build_prompt_baseline, build_prompt_fused, build_prompt_text_only, PromptSequence,
    SegmentKind,
};
use crate::report::{AttnMassRow, QueryRecord};
use crate::rices::rices_rank;
use crate::synth::{synth_eval_set, EvalQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fused,
    Baseline,
    /// Demo texts only; demo images dropped, query image kept.
    TextOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fused => "fused",
            Mode::Baseline => "baseline",
            Mode::TextOnly => "text_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selection {
    Random,
    Rices,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    /// Shot counts, strictly ascending.
    pub shots: Vec<usize>,
    pub modes: Vec<Mode>,
    pub selection: Selection,
    pub n_queries: usize,
    pub pool_size: usize,
    pub seed: u64,
    /// 0 skips generation (perplexity-only runs).
    pub max_new_tokens: usize,
    /// Timed repetitions per throughput cell (median reported).
    pub repetitions: usize,
    /// Discarded iterations before timing starts.
    pub warmup: usize,
    /// Aggregation layer count; 0 means the full stack.
    pub aggregation_layers: usize,
    /// Queries per cell that get attention-mass analysis.
    pub attn_queries: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            shots: vec![0, 1, 2, 4, 8, 16],
            modes: vec![Mode::Fused, Mode::Baseline],
            selection: Selection::Random,
            n_queries: 8,
            pool_size: 32,
            seed: 0,
            max_new_tokens: 8,
            repetitions: 5,
            warmup: 3,
            aggregation_layers: 0,
            attn_queries: 2,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("need at least one shot count and mode".into()));
        }
        if !self.shots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "shot counts must be strictly ascending, got {:?}",
                self.shots
            )));
        }
        let max_shots = *self.shots.last().expect("non-empty");
        if max_shots > self.pool_size {
            return Err(Error::Config(format!(
                "largest shot count {max_shots} exceeds pool size {}",
                self.pool_size
            )));
        }
        if self.n_queries == 0 {
            return Err(Error::Config("need at least one query".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("need at least one repetition".into()));
        }
        Ok(())
    }

    pub fn aggregation(&self, w: &BackboneWeights) -> AggregationConfig {
        if self.aggregation_layers == 0 {
            AggregationConfig::full(&w.config)
        } else {
            AggregationConfig::new(self.aggregation_layers)
        }
    }
}

/// Evaluation data with per-(shots, query) demonstration choices fixed up
/// front, identical across modes so comparisons are paired.
struct EvalData {
    pool: Vec<Demonstration>,
    queries: Vec<EvalQuery>,
}

impl EvalData {
    fn prepare(spec: &RunSpec, w: &BackboneWeights, templates: &InstructionTemplates) -> Result<Self> {
        let (pool, queries) = synth_eval_set(
            spec.pool_size,
            spec.n_queries,
            spec.seed,
            &w.config,
            &templates.caption_instruction(),
        )?;
        Ok(EvalData { pool, queries })
    }

    fn select(
        &self,
        spec: &RunSpec,
        w: &BackboneWeights,
        shots: usize,
        query_id: usize,
    ) -> Result<Vec<usize>> {
        if shots == 0 {
            return Ok(Vec::new());
        }
        match spec.selection {
            Selection::Random => {
                let stream = spec
                    .seed
                    .wrapping_mul(0x9e37_79b9)
                    .wrapping_add(query_id as u64)
                    .wrapping_add((shots as u64) << 32);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                Ok(rand::seq::index::sample(&mut rng, self.pool.len(), shots).into_vec())
            }
            Selection::Rices => {
                let ranked = rices_rank(&self.queries[query_id].query.image, &self.pool, w)?;
                Ok(ranked.into_iter().take(shots).collect())
            }
        }
    }
}

fn segment_group(kind: SegmentKind) -> &'static str {
    match kind {
        SegmentKind::FusedDemo(_) => "demo_fused",
        SegmentKind::VisualDemo(_) => "demo_visual",
        SegmentKind::TextDemo(_) => "demo_text",
        SegmentKind::VisualQuery => "query_visual",
        SegmentKind::TextQuery => "query_text",
        SegmentKind::Generated => "generated",
    }
}

fn build_prompt_for_mode(
    mode: Mode,
    demos: &[Demonstration],
    fused: &[FusedTokens],
    query: &EvalQuery,
    w: &BackboneWeights,
) -> Result<PromptSequence> {
    match mode {
        Mode::Fused => build_prompt_fused(fused, &query.query, w),
        Mode::Baseline => build_prompt_baseline(demos, &query.query, w),
        Mode::TextOnly => build_prompt_text_only(demos, &query.query, w),
    }
}

pub struct GridOutput {
    pub cells: Vec<CostReport>,
    pub queries: Vec<QueryRecord>,
    pub attn_rows: Vec<AttnMassRow>,
    /// Labels of cells that failed (the others still complete).
    pub cell_errors: Vec<String>,
}

/// Run the full {shots x modes} grid.
pub fn run_grid(
    spec: &RunSpec,
    w: &BackboneWeights,
    proj: &ProjectionLayer,
    templates: &InstructionTemplates,
) -> Result<GridOutput> {
    spec.validate()?;
    let data = EvalData::prepare(spec, w, templates)?;
    let agg = spec.aggregation(w);
    agg.validate(&w.config)?;
    let bank = DemonstrationBank::new();

    let mut out = GridOutput {
        cells: Vec::new(),
        queries: Vec::new(),
        attn_rows: Vec::new(),
        cell_errors: Vec::new(),
    };
    for &shots in &spec.shots {
        for &mode in &spec.modes {
            match run_cell(spec, w, proj, &agg, &bank, &data, shots, mode) {
                Ok((report, records, attn)) => {
                    out.cells.push(report);
                    out.queries.extend(records);
                    out.attn_rows.extend(attn);
                }
                Err(e) => out
                    .cell_errors
                    .push(format!("cell shots={shots} mode={mode}: {e}")),
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &RunSpec,
    w: &BackboneWeights,
    proj: &ProjectionLayer,
    agg: &AggregationConfig,
    bank: &DemonstrationBank,
    data: &EvalData,
    shots: usize,
    mode: Mode,
) -> Result<(CostReport, Vec<QueryRecord>, Vec<AttnMassRow>)> {
    let mut records = Vec::with_capacity(data.queries.len());
    let mut attn_rows = Vec::new();
    let mut agg_elements = 0u64;
    let mut gen_elements = 0u64;
    let mut text_tokens_used = 0usize;
    let mut demos_used = 0usize;
    let mut total_secs = 0.0f64;
    let mut total_tokens = 0usize;
    let mut finite_ppl_sum = 0.0;
    let mut finite_ppl_count = 0usize;
    let mut inf_count = 0usize;

    for (query_id, query) in data.queries.iter().enumerate() {
        let started = Instant::now();
        let picked = data.select(spec, w, shots, query_id)?;
        let demos: Vec<Demonstration> = picked.iter().map(|&i| data.pool[i].clone()).collect();

        let before_agg = counters::snapshot();
        let fused: Vec<FusedTokens> = if mode == Mode::Fused {
            demos
                .iter()
                .map(|d| bank.get_or_aggregate(d, agg, w, proj))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let after_agg = counters::snapshot();

        let prompt = build_prompt_for_mode(mode, &demos, &fused, query, w)?;
        let output = if spec.max_new_tokens > 0 {
            let gen = generate(&prompt, spec.max_new_tokens, w)?;
            total_tokens += gen.token_ids.len();
            gen.text
        } else {
            String::new()
        };
        let elapsed = started.elapsed();
        let after_gen = counters::snapshot();

        agg_elements += after_agg.lm_attn_elements - before_agg.lm_attn_elements;
        gen_elements += after_gen.lm_attn_elements - after_agg.lm_attn_elements;
        total_secs += elapsed.as_secs_f64();
        text_tokens_used += demos.iter().map(|d| d.text_ids().len()).sum::<usize>();
        demos_used += demos.len();

        let ppl = perplexity(&prompt, &query.gold, w)?;
        if ppl.overflowed {
            inf_count += 1;
        } else {
            finite_ppl_sum += ppl.value;
            finite_ppl_count += 1;
        }

        records.push(QueryRecord {
            query_id,
            n_shots: shots,
            mode: mode.to_string(),
            output,
            ppl: if ppl.overflowed { None } else { Some(ppl.value) },
            ppl_overflowed: ppl.overflowed,
            prompt_len: prompt.len(),
            wall_time_ns: elapsed.as_nanos() as u64,
        });

        if mode == Mode::Baseline && shots >= 1 && query_id < spec.attn_queries {
            let layer = w.config.n_layers - 1;
            let mass = attention_mass(&prompt, w, layer)?;
            for (seg, &fraction) in prompt.segments.iter().zip(mass.fractions.iter()) {
                attn_rows.push(AttnMassRow {
                    n_shots: shots,
                    query_id,
                    layer,
                    segment: seg.kind.to_string(),
                    group: segment_group(seg.kind).to_string(),
                    fraction,
                });
            }
        }
    }

    let mean_text = if demos_used > 0 {
        text_tokens_used as f64 / demos_used as f64
    } else {
        0.0
    };
    let m = w.config.visual_tokens_per_image;
    let remaining_ratio = if demos_used > 0 {
        mean_text / (m as f64 + mean_text)
    } else {
        1.0
    };
    let prompt_len = records.first().map(|r| r.prompt_len).unwrap_or(0);
    let report = CostReport {
        mode: mode.to_string(),
        n_shots: shots,
        visual_tokens_per_demo: m,
        mean_text_tokens: mean_text,
        remaining_ratio,
        prompt_len,
        attn_elements_aggregation: agg_elements,
        attn_elements_generation: gen_elements,
        peak_bytes_estimate: peak_forward_bytes(
            prompt_len + spec.max_new_tokens,
            &w.config,
            w.config.n_layers,
        ),
        tokens_per_second: if total_secs > 0.0 {
            total_tokens as f64 / total_secs
        } else {
            0.0
        },
        queries_per_second: if total_secs > 0.0 {
            data.queries.len() as f64 / total_secs
        } else {
            0.0
        },
        ppl_mean: if finite_ppl_count > 0 {
            Some(finite_ppl_sum / finite_ppl_count as f64)
        } else {
            None
        },
        ppl_inf_count: inf_count,
    };
    Ok((report, records, attn_rows))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Time end-to-end query processing per cell. Warmup iterations populate
/// the demonstration bank, so timed fused repetitions run bank-warm and
/// perform zero aggregation forwards.
pub fn bench_throughput(
    spec: &RunSpec,
    w: &BackboneWeights,
    proj: &ProjectionLayer,
    templates: &InstructionTemplates,
) -> Result<Vec<CostReport>> {
    spec.validate()?;
    let data = EvalData::prepare(spec, w, templates)?;
    let agg = spec.aggregation(w);
    let mut reports = Vec::new();

    for &shots in &spec.shots {
        for &mode in &spec.modes {
            let bank = DemonstrationBank::new();
            let run_once = |timed: bool| -> Result<(f64, usize, u64, u64, usize)> {
                let before = counters::snapshot();
                let started = Instant::now();
                let mut tokens = 0usize;
                let mut prompt_len = 0usize;
                let mut agg_elems = 0u64;
                for (query_id, query) in data.queries.iter().enumerate() {
                    let picked = data.select(spec, w, shots, query_id)?;
                    let demos: Vec<Demonstration> =
                        picked.iter().map(|&i| data.pool[i].clone()).collect();
                    let a0 = counters::snapshot();
                    let fused: Vec<FusedTokens> = if mode == Mode::Fused {
                        demos
                            .iter()
                            .map(|d| bank.get_or_aggregate(d, &agg, w, proj))
                            .collect::<Result<_>>()?
                    } else {
                        Vec::new()
                    };
                    agg_elems += counters::since(a0).lm_attn_elements;
                    let prompt = build_prompt_for_mode(mode, &demos, &fused, query, w)?;
                    prompt_len = prompt.len();
                    if spec.max_new_tokens > 0 {
                        let gen = generate(&prompt, spec.max_new_tokens, w)?;
                        tokens += gen.token_ids.len();
                    }
                }
                let secs = started.elapsed().as_secs_f64();
                let total = counters::since(before).lm_attn_elements;
                let _ = timed;
                Ok((secs, tokens, agg_elems, total - agg_elems, prompt_len))
            };

            for _ in 0..spec.warmup {
                run_once(false)?;
            }
            let mut tok_rates = Vec::with_capacity(spec.repetitions);
            let mut query_rates = Vec::with_capacity(spec.repetitions);
            let mut last = (0.0, 0usize, 0u64, 0u64, 0usize);
            for _ in 0..spec.repetitions {
                let r = run_once(true)?;
                if r.0 > 0.0 {
                    tok_rates.push(r.1 as f64 / r.0);
                    query_rates.push(data.queries.len() as f64 / r.0);
                }
                last = r;
            }

            let mean_text = if shots > 0 {
                let mut total = 0usize;
                let mut count = 0usize;
                for query_id in 0..data.queries.len() {
                    for &i in &data.select(spec, w, shots, query_id)? {
                        total += data.pool[i].text_ids().len();
                        count += 1;
                    }
                }
                total as f64 / count as f64
            } else {
                0.0
            };
            let m = w.config.visual_tokens_per_image;
            reports.push(CostReport {
                mode: mode.to_string(),
                n_shots: shots,
                visual_tokens_per_demo: m,
                mean_text_tokens: mean_text,
                remaining_ratio: if shots > 0 {
                    mean_text / (m as f64 + mean_text)
                } else {
                    1.0
                },
                prompt_len: last.4,
                attn_elements_aggregation: last.2,
                attn_elements_generation: last.3,
                peak_bytes_estimate: peak_forward_bytes(
                    last.4 + spec.max_new_tokens,
                    &w.config,
                    w.config.n_layers,
                ),
                tokens_per_second: median(&mut tok_rates),
                queries_per_second: median(&mut query_rates),
                ppl_mean: None,
                ppl_inf_count: 0,
            });
        }
    }
    Ok(reports)
}
