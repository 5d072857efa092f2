//! Projection-layer training under the language-modeling objective.
//!
//! Each training instance aggregates its image-text pairs independently
//! (bare paired texts, no instruction wrapper), concatenates the fused
//! blocks, teacher-forces the remaining text, and takes the mean token NLL
//! over the remaining-text positions. Only the projection weight and bias
//! receive gradients; the backbone is borrowed immutably and stays
//! bit-identical by construction.
//!
//! Training is deterministic: batches are drawn cyclically from the corpus
//! by step index, and a checkpoint restores bit-exact state (projection,
//! Adam moments, step, loss history), so 50 + 50 resumed steps equal 100
//! straight steps.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use log::warn;

use crate::aggregator::{
    aggregate_hidden, project_on_tape, AggregationConfig, Demonstration, ProjectionLayer,
};
use crate::backbone::{BackboneWeights, ModelConfig};
use crate::digest::{digest_parts, f64_bytes, Digest32};
use crate::error::{Error, Result};
use crate::synth::TrainingInstance;
use crate::tensor::{Mat, Tape, TensorRef};
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub effective_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Aggregation layer count; 0 means the full stack.
    pub aggregation_layers: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            effective_batch: 16,
            epochs: 10,
            seed: 0,
            aggregation_layers: 0,
            checkpoint_every_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.effective_batch == 0 {
            return Err(Error::Config("effective batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn aggregation(&self, model: &ModelConfig) -> AggregationConfig {
        if self.aggregation_layers == 0 {
            AggregationConfig::full(model)
        } else {
            AggregationConfig::new(self.aggregation_layers)
        }
    }

    pub fn digest(&self) -> Digest32 {
        let json = serde_json::to_string(self).expect("config serializes");
        digest_parts(&[json.as_bytes()])
    }
}

/// Mutable training state: the projection, its Adam moments, and history.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub projection: ProjectionLayer,
    m_weight: Vec<f64>,
    v_weight: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainerState {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self> {
        model_config.validate()?;
        train_config.validate()?;
        train_config
            .aggregation(&model_config)
            .validate(&model_config)?;
        let d = model_config.d_model;
        Ok(TrainerState {
            projection: ProjectionLayer::init(d, train_config.seed),
            model_config,
            train_config,
            m_weight: vec![0.0; d * d],
            v_weight: vec![0.0; d * d],
            m_bias: vec![0.0; d],
            v_bias: vec![0.0; d],
            step: 0,
            loss_history: Vec::new(),
        })
    }

    fn config_digest(&self) -> Digest32 {
        digest_parts(&[
            self.model_config.digest().as_bytes(),
            self.train_config.digest().as_bytes(),
        ])
    }
}

/// Handles into the loss graph of one instance.
pub struct LmLossParts {
    pub loss: TensorRef,
    pub weight: TensorRef,
    pub bias: TensorRef,
    /// Fused tokens per pair (pre-position), for inspection.
    pub fused: Vec<Mat>,
    /// True when the remaining text was truncated to fit the context.
    pub truncated: bool,
}

/// Build the Eq.-style LM loss for one instance on `tape`.
///
/// Each pair is aggregated independently with the backbone frozen; the
/// projection enters the tape as the only trainable leaves, so the gradient
/// map of `loss` contains exactly the projection weight and bias.
pub fn lm_loss_on_tape(
    tape: &mut Tape,
    inst: &TrainingInstance,
    w: &BackboneWeights,
    proj: &ProjectionLayer,
    agg: &AggregationConfig,
) -> Result<LmLossParts> {
    agg.validate(&w.config)?;
    let d = w.config.d_model;

    // Independent aggregation per pair (no gradients needed: the hidden
    // states do not depend on the projection).
    let mut hiddens = Vec::with_capacity(inst.pairs.len());
    for (img, text) in &inst.pairs {
        let demo = Demonstration::new(img.clone(), "", text.clone())?;
        hiddens.push(aggregate_hidden(&demo, agg, w)?);
    }
    let fused_total: usize = hiddens.iter().map(|h| h.rows).sum();
    if fused_total + 1 > w.config.max_seq {
        return Err(Error::SkipInstance(format!(
            "fused prefix of {fused_total} rows leaves no room for remaining text \
             (max_seq {})",
            w.config.max_seq
        )));
    }

    let mut yr_ids = tokenizer::tokenize(&inst.remaining_text);
    let mut truncated = false;
    if fused_total + yr_ids.len() > w.config.max_seq {
        let keep = w.config.max_seq - fused_total;
        warn!(
            "remaining text truncated from {} to {keep} tokens to fit max_seq {}",
            yr_ids.len(),
            w.config.max_seq
        );
        yr_ids.truncate(keep);
        truncated = true;
    }

    let weight = tape.leaf(
        proj.weight.data.clone(),
        &[proj.weight.rows, proj.weight.cols],
        true,
    )?;
    let bias = tape.leaf(proj.bias.clone(), &[proj.bias.len()], true)?;

    let mut parts = Vec::with_capacity(hiddens.len() + 1);
    let mut fused_mats = Vec::with_capacity(hiddens.len());
    let mut slot = 0usize;
    for h in &hiddens {
        let h_t = tape.constant(h.data.clone(), &[h.rows, h.cols])?;
        let fused = project_on_tape(tape, h_t, weight, bias)?;
        fused_mats.push(Mat::new(h.rows, d, tape.data(fused).to_vec())?);
        // positions of the slots this block occupies
        let pos = tape.constant(
            w.pos_embed[slot * d..(slot + h.rows) * d].to_vec(),
            &[h.rows, d],
        )?;
        parts.push(tape.add(fused, pos)?);
        slot += h.rows;
    }
    let yr_rows = w.embed_tokens(&yr_ids, fused_total)?;
    parts.push(tape.constant(yr_rows.data, &[yr_rows.rows, yr_rows.cols])?);

    let x = tape.concat_rows(&parts)?;
    let hidden = w.forward_on_tape(tape, x, 0, w.config.n_layers)?;
    // row fused_total - 1 + t predicts remaining-text token t
    let pred = tape.slice_rows(hidden, fused_total - 1, yr_ids.len())?;
    let logits = w.lm_logits_on_tape(tape, pred)?;
    let loss = tape.cross_entropy(logits, &yr_ids)?;

    Ok(LmLossParts {
        loss,
        weight,
        bias,
        fused: fused_mats,
        truncated,
    })
}

/// Loss value only.
pub fn lm_loss(
    inst: &TrainingInstance,
    w: &BackboneWeights,
    proj: &ProjectionLayer,
    agg: &AggregationConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let parts = lm_loss_on_tape(&mut tape, inst, w, proj, agg)?;
    Ok(tape.data(parts.loss)[0])
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub mean_loss: f64,
    pub grad_norm: f64,
    /// Instances skipped for capacity, by batch index.
    pub skipped: Vec<usize>,
    pub wall_time_ns: u128,
}

/// One optimization step: accumulate gradients over the batch, apply a
/// single Adam update to the projection (and nothing else).
pub fn train_step(
    state: &mut TrainerState,
    batch: &[TrainingInstance],
    w: &BackboneWeights,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Usage("train_step: empty batch".into()));
    }
    let started = std::time::Instant::now();
    let agg = state.train_config.aggregation(&state.model_config);
    let d = state.model_config.d_model;
    let mut grad_weight = vec![0.0; d * d];
    let mut grad_bias = vec![0.0; d];
    let mut loss_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();

    for (i, inst) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let parts = match lm_loss_on_tape(&mut tape, inst, w, &state.projection, &agg) {
            Ok(p) => p,
            Err(Error::SkipInstance(reason)) => {
                warn!("instance {i} skipped: {reason}");
                skipped.push(i);
                continue;
            }
            Err(Error::Capacity(reason)) => {
                warn!("instance {i} skipped: {reason}");
                skipped.push(i);
                continue;
            }
            Err(e @ Error::NonFinite { .. }) => {
                return Err(Error::BatchItem {
                    index: i,
                    source: Box::new(e),
                });
            }
            Err(e) => return Err(e),
        };
        let loss = tape.data(parts.loss)[0];
        if !loss.is_finite() {
            return Err(Error::BatchItem {
                index: i,
                source: Box::new(Error::NonFinite { op: "lm_loss" }),
            });
        }
        let grads = tape.backward(parts.loss)?;
        let gw = grads.get(parts.weight).expect("projection weight gradient");
        let gb = grads.get(parts.bias).expect("projection bias gradient");
        for (a, g) in grad_weight.iter_mut().zip(gw) {
            *a += g;
        }
        for (a, g) in grad_bias.iter_mut().zip(gb) {
            *a += g;
        }
        loss_sum += loss;
        used += 1;
    }

    if used == 0 {
        return Err(Error::Usage(
            "train_step: every instance in the batch was skipped".into(),
        ));
    }
    // mean over the instances that contributed
    let inv = 1.0 / used as f64;
    for g in grad_weight.iter_mut() {
        *g *= inv;
    }
    for g in grad_bias.iter_mut() {
        *g *= inv;
    }
    let mean_loss = loss_sum * inv;
    let grad_norm = grad_weight
        .iter()
        .chain(grad_bias.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();

    // Adam with bias correction; t starts at 1.
    let t = (state.step + 1) as f64;
    let tc = &state.train_config;
    let bc1 = 1.0 - tc.beta1.powf(t);
    let bc2 = 1.0 - tc.beta2.powf(t);
    let apply = |param: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64]| {
        for i in 0..param.len() {
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * grad[i];
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= tc.learning_rate * m_hat / (v_hat.sqrt() + tc.epsilon);
        }
    };
    apply(
        &mut state.projection.weight.data,
        &mut state.m_weight,
        &mut state.v_weight,
        &grad_weight,
    );
    apply(
        &mut state.projection.bias,
        &mut state.m_bias,
        &mut state.v_bias,
        &grad_bias,
    );

    state.step += 1;
    state.loss_history.push(mean_loss);
    Ok(StepReport {
        step: state.step,
        mean_loss,
        grad_norm,
        skipped,
        wall_time_ns: started.elapsed().as_nanos(),
    })
}

/// Deterministic batch for a step: `effective_batch` instances drawn
/// cyclically from the corpus.
pub fn batch_for_step(corpus: &[TrainingInstance], step: u64, batch: usize) -> Vec<TrainingInstance> {
    let n = corpus.len();
    let start = (step as usize * batch) % n;
    (0..batch).map(|i| corpus[(start + i) % n].clone()).collect()
}

/// Run `n_steps` steps over the corpus, invoking `on_step` after each.
pub fn train_for_steps(
    state: &mut TrainerState,
    corpus: &[TrainingInstance],
    w: &BackboneWeights,
    n_steps: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    for _ in 0..n_steps {
        let batch = batch_for_step(corpus, state.step, state.train_config.effective_batch);
        let report = train_step(state, &batch, w)?;
        on_step(&report);
    }
    Ok(())
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"FCKP";
const CKPT_VERSION: u32 = 1;

/// Projection, Adam moments, step counter, and loss history. The backbone
/// is deliberately absent; the config digest pins what the checkpoint
/// belongs to.
pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(state.config_digest().as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.model_config.d_model as u32).to_le_bytes());
    for arr in [
        &state.projection.weight.data,
        &state.projection.bias,
        &state.m_weight,
        &state.v_weight,
        &state.m_bias,
        &state.v_bias,
    ] {
        out.extend_from_slice(&f64_bytes(arr));
    }
    out.extend_from_slice(&(state.loss_history.len() as u64).to_le_bytes());
    out.extend_from_slice(&f64_bytes(&state.loss_history));
    let digest = digest_parts(&[&out]);
    out.extend_from_slice(digest.as_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Restore a checkpoint. Refuses to load when the configs do not match the
/// ones the checkpoint was written under.
pub fn load_checkpoint(
    path: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainerState> {
    let bytes = fs::read(path)?;
    let corrupt = |detail: &str| Error::Corruption(format!("{}: {detail}", path.display()));
    if bytes.len() < 32 {
        return Err(corrupt("file too short"));
    }
    let (payload, stored_digest) = bytes.split_at(bytes.len() - 32);
    if digest_parts(&[payload]).as_bytes() != stored_digest {
        return Err(corrupt("checkpoint digest mismatch"));
    }

    fn take(cur: &mut Cursor<&[u8]>, n: usize) -> Option<Vec<u8>> {
        let mut buf = vec![0u8; n];
        cur.read_exact(&mut buf).ok()?;
        Some(buf)
    }
    fn take_arr(cur: &mut Cursor<&[u8]>, n: usize) -> Option<Vec<f64>> {
        Some(
            take(cur, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
    let eof = || corrupt("unexpected end of file");
    let mut cur = Cursor::new(payload);

    if take(&mut cur, 4).ok_or_else(eof)? != CKPT_MAGIC {
        return Err(corrupt("bad magic (not a checkpoint)"));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4).ok_or_else(eof)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let stored_config = Digest32(take(&mut cur, 32).ok_or_else(eof)?.try_into().unwrap());
    let mut state = TrainerState::new(model_config.clone(), train_config.clone())?;
    if stored_config != state.config_digest() {
        return Err(Error::Config(format!(
            "{}: checkpoint was written under a different model/train config",
            path.display()
        )));
    }
    state.step = u64::from_le_bytes(take(&mut cur, 8).ok_or_else(eof)?.try_into().unwrap());
    let d = u32::from_le_bytes(take(&mut cur, 4).ok_or_else(eof)?.try_into().unwrap()) as usize;
    if d != model_config.d_model {
        return Err(Error::Config(format!(
            "{}: checkpoint d_model {d} vs expected {}",
            path.display(),
            model_config.d_model
        )));
    }
    state.projection.weight = Mat::new(d, d, take_arr(&mut cur, d * d).ok_or_else(eof)?)?;
    state.projection.bias = take_arr(&mut cur, d).ok_or_else(eof)?;
    state.m_weight = take_arr(&mut cur, d * d).ok_or_else(eof)?;
    state.v_weight = take_arr(&mut cur, d * d).ok_or_else(eof)?;
    state.m_bias = take_arr(&mut cur, d).ok_or_else(eof)?;
    state.v_bias = take_arr(&mut cur, d).ok_or_else(eof)?;
    let hist_len =
        u64::from_le_bytes(take(&mut cur, 8).ok_or_else(eof)?.try_into().unwrap()) as usize;
    state.loss_history = take_arr(&mut cur, hist_len).ok_or_else(eof)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, TrainingInstance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            visual_tokens_per_image: 4,
            patch_size: 4,
            max_seq: 256,
            seed: 41,
            ..ModelConfig::default()
        }
    }

    fn tc() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            effective_batch: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn rig_constant_logits(w: &mut BackboneWeights, favored: &[(usize, f64)]) {
        let d = w.config.d_model;
        let v = w.config.vocab_size;
        w.final_ln_gain = vec![0.0; d];
        let mut bias = vec![0.0; d];
        bias[0] = 1.0;
        w.final_ln_bias = bias;
        w.lm_head = vec![0.0; d * v];
        for &(tok, logit) in favored {
            w.lm_head[tok] = logit;
        }
    }

    fn instance_with_remaining(remaining: &str) -> TrainingInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = crate::synth::motif_image(3, &cfg(), &mut rng);
        TrainingInstance::new(vec![(img, "a gold panel.".into())], remaining.into()).unwrap()
    }

    #[test]
    fn rigged_certain_head_gives_near_zero_loss() {
        let mut w = BackboneWeights::init(cfg()).unwrap();
        let tok = tokenizer::tokenize("a")[0];
        rig_constant_logits(&mut w, &[(tok, 1e9)]);
        let inst = instance_with_remaining("aaaa");
        let loss = lm_loss(
            &inst,
            &w,
            &ProjectionLayer::init(16, 0),
            &AggregationConfig::full(&w.config),
        )
        .unwrap();
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn uniform_head_gives_ln_vocab_loss() {
        let mut w = BackboneWeights::init(cfg()).unwrap();
        rig_constant_logits(&mut w, &[]);
        let inst = instance_with_remaining("whatever text");
        let loss = lm_loss(
            &inst,
            &w,
            &ProjectionLayer::init(16, 0),
            &AggregationConfig::full(&w.config),
        )
        .unwrap();
        let expect = (w.config.vocab_size as f64).ln();
        assert!((loss - expect).abs() < 1e-10, "loss = {loss} vs {expect}");
    }

    #[test]
    fn gradient_map_contains_exactly_the_projection() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let proj = ProjectionLayer::init(16, 1);
        let inst = instance_with_remaining(" altogether gold in order.");
        let mut tape = Tape::new();
        let parts = lm_loss_on_tape(
            &mut tape,
            &inst,
            &w,
            &proj,
            &AggregationConfig::full(&w.config),
        )
        .unwrap();
        let grads = tape.backward(parts.loss).unwrap();
        assert_eq!(grads.len(), 2, "exactly weight and bias get gradients");
        assert!(grads.contains(parts.weight));
        assert!(grads.contains(parts.bias));
    }

    #[test]
    fn training_fused_tokens_match_aggregator_bitwise() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let proj = ProjectionLayer::init(16, 5);
        let agg = AggregationConfig::half(&w.config);
        let corpus = synth_corpus(3, 77, &cfg());
        for inst in &corpus {
            let mut tape = Tape::new();
            let parts = lm_loss_on_tape(&mut tape, inst, &w, &proj, &agg).unwrap();
            for ((img, text), fused) in inst.pairs.iter().zip(parts.fused.iter()) {
                let demo = Demonstration::new(img.clone(), "", text.clone()).unwrap();
                let reference = crate::aggregator::aggregate(&demo, &agg, &w, &proj).unwrap();
                assert_eq!(&reference.tokens, fused);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let proj = ProjectionLayer::init(16, 2);
        let agg = AggregationConfig::full(&w.config);
        let corpus = synth_corpus(2, 55, &cfg());

        for inst in &corpus {
            let mut tape = Tape::new();
            let parts = lm_loss_on_tape(&mut tape, inst, &w, &proj, &agg).unwrap();
            let grads = tape.backward(parts.loss).unwrap();
            let gw = grads.get(parts.weight).unwrap();

            // central differences over a subset of weight entries
            let h = 1e-5;
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for &i in &[0usize, 17, 40, 123, 255] {
                let mut plus = proj.clone();
                plus.weight.data[i] += h;
                let lp = lm_loss(inst, &w, &plus, &agg).unwrap();
                let mut minus = proj.clone();
                minus.weight.data[i] -= h;
                let lm = lm_loss(inst, &w, &minus, &agg).unwrap();
                num.push((lp - lm) / (2.0 * h));
                ana.push(gw[i]);
            }
            let err: f64 = ana
                .iter()
                .zip(num.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / scale.max(1e-12) < 1e-4, "rel err {}", err / scale);
        }
    }

    #[test]
    fn zero_gradient_leaves_projection_bit_identical() {
        // constant-logits rig: loss does not depend on the projection at all
        let mut w = BackboneWeights::init(cfg()).unwrap();
        rig_constant_logits(&mut w, &[(tokenizer::tokenize("a")[0], 2.0)]);
        let mut state = TrainerState::new(cfg(), tc()).unwrap();
        let before = state.projection.clone();
        let batch = vec![instance_with_remaining("abcd")];
        let report = train_step(&mut state, &batch, &w).unwrap();
        assert_eq!(report.grad_norm, 0.0);
        assert_eq!(state.projection, before, "Adam with zero gradient and zero moments");
    }

    #[test]
    fn backbone_is_bitwise_frozen_across_steps() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let digest_before = w.digest();
        let mut state = TrainerState::new(cfg(), tc()).unwrap();
        let wp_before = state.projection.digest();
        let corpus = synth_corpus(8, 99, &cfg());
        train_for_steps(&mut state, &corpus, &w, 3, |_| {}).unwrap();
        assert_eq!(w.digest(), digest_before);
        assert_ne!(state.projection.digest(), wp_before);
    }

    #[test]
    fn deterministic_loss_curves() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let corpus = synth_corpus(8, 123, &cfg());
        let mut s1 = TrainerState::new(cfg(), tc()).unwrap();
        let mut s2 = TrainerState::new(cfg(), tc()).unwrap();
        train_for_steps(&mut s1, &corpus, &w, 4, |_| {}).unwrap();
        train_for_steps(&mut s2, &corpus, &w, 4, |_| {}).unwrap();
        assert_eq!(s1.loss_history, s2.loss_history);
        assert_eq!(s1.projection, s2.projection);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.fckp");
        let w = BackboneWeights::init(cfg()).unwrap();
        let corpus = synth_corpus(10, 7, &cfg());

        let mut straight = TrainerState::new(cfg(), tc()).unwrap();
        train_for_steps(&mut straight, &corpus, &w, 6, |_| {}).unwrap();

        let mut resumed = TrainerState::new(cfg(), tc()).unwrap();
        train_for_steps(&mut resumed, &corpus, &w, 3, |_| {}).unwrap();
        save_checkpoint(&resumed, &path).unwrap();
        let mut restored = load_checkpoint(&path, &cfg(), &tc()).unwrap();
        train_for_steps(&mut restored, &corpus, &w, 3, |_| {}).unwrap();

        assert_eq!(straight.projection, restored.projection);
        assert_eq!(straight.loss_history, restored.loss_history);
        assert_eq!(straight.step, restored.step);
    }

    #[test]
    fn checkpoint_refuses_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.fckp");
        let state = TrainerState::new(cfg(), tc()).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let mut other = tc();
        other.learning_rate = 9e-1;
        assert!(matches!(
            load_checkpoint(&path, &cfg(), &other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_contains_no_backbone_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.fckp");
        let state = TrainerState::new(cfg(), tc()).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let ckpt_size = fs::metadata(&path).unwrap().len();
        // projection + moments: 3 * (d^2 + d) doubles, plus tiny header
        let d = 16u64;
        let bound = 3 * (d * d + d) * 8 + 256;
        assert!(ckpt_size < bound, "{ckpt_size} vs bound {bound}");

        let wpath = dir.path().join("w.ficl");
        let w = BackboneWeights::init(cfg()).unwrap();
        crate::weights_io::save_weights(&w, &wpath).unwrap();
        let wsize = fs::metadata(&wpath).unwrap().len();
        assert!(ckpt_size * 10 < wsize, "checkpoint must be far smaller than weights");
    }

    #[test]
    fn aggregation_attention_cost_is_sum_of_squares() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let proj = ProjectionLayer::init(16, 0);
        let agg = AggregationConfig::full(&w.config);
        let corpus = synth_corpus(1, 31, &cfg());
        let inst = &corpus[0];

        let m = w.config.visual_tokens_per_image;
        let heads = w.config.n_heads;
        let n = agg.n_layers;
        let l_layers = w.config.n_layers;
        let per_pair: u64 = inst
            .pairs
            .iter()
            .map(|(_, text)| {
                let l = m + tokenizer::tokenize(text).len();
                (n * heads * l * l) as u64
            })
            .sum();
        let fused_total: usize = inst
            .pairs
            .iter()
            .map(|(_, text)| tokenizer::tokenize(text).len())
            .sum();
        let g = tokenizer::tokenize(&inst.remaining_text).len();
        let gen_len = fused_total + g;
        let generation = (l_layers * heads * gen_len * gen_len) as u64;

        let before = crate::counters::snapshot();
        lm_loss(inst, &w, &proj, &agg).unwrap();
        let delta = crate::counters::since(before);
        assert_eq!(delta.lm_attn_elements, per_pair + generation);
    }
}
