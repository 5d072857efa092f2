//! The frozen toy multimodal model.
//!
//! A perceiver-style vision encoder turns any image into exactly `M` visual
//! tokens via learnable queries cross-attending over patch embeddings; a
//! decoder-only transformer LM with pre-norm blocks provides per-layer access
//! (`forward_layers`) so that aggregation can stop after the first `N`
//! layers. Every parameter group is frozen: the single trainable projection
//! lives in the aggregator module, not here.
//!
//! Sequences handed to `forward_layers` are expected to already carry their
//! positional embeddings (see [`BackboneWeights::embed_tokens`] /
//! [`BackboneWeights::add_positions`]); the layer stack itself is a pure
//! function of its input, which is what makes splitting it at any layer
//! reproduce the full forward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::digest::{digest_parts, f64_bytes, Digest32};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Mat, Tape, TensorRef};
use crate::tokenizer;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Visual tokens per image (`M`); also the number of learnable queries.
    pub visual_tokens_per_image: usize,
    pub patch_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            vocab_size: tokenizer::VOCAB_SIZE,
            visual_tokens_per_image: 16,
            patch_size: 4,
            max_seq: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.visual_tokens_per_image == 0
            || self.patch_size == 0
            || self.max_seq == 0
        {
            return Err(Error::Config("all model extents must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by 4 for the 2-d patch positions",
                self.d_model
            )));
        }
        if self.vocab_size < tokenizer::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} below tokenizer vocabulary {}",
                self.vocab_size,
                tokenizer::VOCAB_SIZE
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Digest over the canonical JSON form.
    pub fn digest(&self) -> Digest32 {
        let json = serde_json::to_string(self).expect("config serializes");
        digest_parts(&[json.as_bytes()])
    }
}

// ── Weights ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VisionWeights {
    pub patch_proj: Vec<f64>,
    pub patch_bias: Vec<f64>,
    pub queries: Vec<f64>,
    pub in_ln_gain: Vec<f64>,
    pub in_ln_bias: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub out_ln_gain: Vec<f64>,
    pub out_ln_bias: Vec<f64>,
}

/// All parameters of the toy backbone. Read-only after construction; any
/// number of concurrent forward passes may share one instance.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub config: ModelConfig,
    pub tok_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f64>,
    pub final_ln_bias: Vec<f64>,
    pub lm_head: Vec<f64>,
    pub vision: VisionWeights,
}

/// One named parameter group, with its freeze flag. Every group of the
/// backbone is frozen; the flag is what tape injection consults.
pub struct ParamGroup<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub frozen: bool,
}

struct InitRng {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl InitRng {
    fn new(seed: u64) -> Self {
        InitRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn noise(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal.sample(&mut self.rng)).collect()
    }
}

impl BackboneWeights {
    /// Deterministic initialization from `config.seed`: Gaussian(0, 0.02)
    /// matrices, zero biases, unit norm gains, drawn in declared group order.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let m = config.visual_tokens_per_image;
        let p2 = config.patch_size * config.patch_size;
        let mlp = config.mlp_dim();
        let mut r = InitRng::new(config.seed);

        let tok_embed = r.noise(v * d);
        let pos_embed = r.noise(config.max_seq * d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: r.noise(d * d),
                bq: vec![0.0; d],
                wk: r.noise(d * d),
                bk: vec![0.0; d],
                wv: r.noise(d * d),
                bv: vec![0.0; d],
                wo: r.noise(d * d),
                bo: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w_up: r.noise(d * mlp),
                b_up: vec![0.0; mlp],
                w_down: r.noise(mlp * d),
                b_down: vec![0.0; d],
            })
            .collect();
        let final_ln_gain = vec![1.0; d];
        let final_ln_bias = vec![0.0; d];
        let lm_head = r.noise(d * v);
        let vision = VisionWeights {
            patch_proj: r.noise(p2 * d),
            patch_bias: vec![0.0; d],
            queries: r.noise(m * d),
            in_ln_gain: vec![1.0; d],
            in_ln_bias: vec![0.0; d],
            wq: r.noise(d * d),
            bq: vec![0.0; d],
            wk: r.noise(d * d),
            bk: vec![0.0; d],
            wv: r.noise(d * d),
            bv: vec![0.0; d],
            wo: r.noise(d * d),
            bo: vec![0.0; d],
            out_ln_gain: vec![1.0; d],
            out_ln_bias: vec![0.0; d],
        };

        Ok(BackboneWeights {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_ln_gain,
            final_ln_bias,
            lm_head,
            vision,
        })
    }

    /// Parameter groups in declared order.
    pub fn groups(&self) -> Vec<ParamGroup<'_>> {
        fn push<'a>(
            out: &mut Vec<ParamGroup<'a>>,
            name: String,
            shape: Vec<usize>,
            data: &'a [f64],
        ) {
            out.push(ParamGroup {
                name,
                shape,
                data,
                frozen: true,
            });
        }
        let c = &self.config;
        let d = c.d_model;
        let mlp = c.mlp_dim();
        let p2 = c.patch_size * c.patch_size;
        let mut out_vec = Vec::new();
        let out = &mut out_vec;
        push(out, "tok_embed".into(), vec![c.vocab_size, d], &self.tok_embed);
        push(out, "pos_embed".into(), vec![c.max_seq, d], &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            push(out, format!("layer{i}.ln1.gain"), vec![d], &l.ln1_gain);
            push(out, format!("layer{i}.ln1.bias"), vec![d], &l.ln1_bias);
            push(out, format!("layer{i}.wq"), vec![d, d], &l.wq);
            push(out, format!("layer{i}.bq"), vec![d], &l.bq);
            push(out, format!("layer{i}.wk"), vec![d, d], &l.wk);
            push(out, format!("layer{i}.bk"), vec![d], &l.bk);
            push(out, format!("layer{i}.wv"), vec![d, d], &l.wv);
            push(out, format!("layer{i}.bv"), vec![d], &l.bv);
            push(out, format!("layer{i}.wo"), vec![d, d], &l.wo);
            push(out, format!("layer{i}.bo"), vec![d], &l.bo);
            push(out, format!("layer{i}.ln2.gain"), vec![d], &l.ln2_gain);
            push(out, format!("layer{i}.ln2.bias"), vec![d], &l.ln2_bias);
            push(out, format!("layer{i}.w_up"), vec![d, mlp], &l.w_up);
            push(out, format!("layer{i}.b_up"), vec![mlp], &l.b_up);
            push(out, format!("layer{i}.w_down"), vec![mlp, d], &l.w_down);
            push(out, format!("layer{i}.b_down"), vec![d], &l.b_down);
        }
        push(out, "final_ln.gain".into(), vec![d], &self.final_ln_gain);
        push(out, "final_ln.bias".into(), vec![d], &self.final_ln_bias);
        push(out, "lm_head".into(), vec![d, c.vocab_size], &self.lm_head);
        let vw = &self.vision;
        push(out, "vision.patch_proj".into(), vec![p2, d], &vw.patch_proj);
        push(out, "vision.patch_bias".into(), vec![d], &vw.patch_bias);
        push(
            out,
            "vision.queries".into(),
            vec![c.visual_tokens_per_image, d],
            &vw.queries,
        );
        push(out, "vision.in_ln.gain".into(), vec![d], &vw.in_ln_gain);
        push(out, "vision.in_ln.bias".into(), vec![d], &vw.in_ln_bias);
        push(out, "vision.wq".into(), vec![d, d], &vw.wq);
        push(out, "vision.bq".into(), vec![d], &vw.bq);
        push(out, "vision.wk".into(), vec![d, d], &vw.wk);
        push(out, "vision.bk".into(), vec![d], &vw.bk);
        push(out, "vision.wv".into(), vec![d, d], &vw.wv);
        push(out, "vision.bv".into(), vec![d], &vw.bv);
        push(out, "vision.wo".into(), vec![d, d], &vw.wo);
        push(out, "vision.bo".into(), vec![d], &vw.bo);
        push(out, "vision.out_ln.gain".into(), vec![d], &vw.out_ln_gain);
        push(out, "vision.out_ln.bias".into(), vec![d], &vw.out_ln_bias);
        out_vec
    }

    /// Per-group content digests, in declared order.
    pub fn group_digests(&self) -> Vec<(String, Digest32)> {
        self.groups()
            .into_iter()
            .map(|g| {
                let d = digest_parts(&[g.name.as_bytes(), &f64_bytes(g.data)]);
                (g.name, d)
            })
            .collect()
    }

    /// Combined digest over all group digests; this is the weights version
    /// recorded on fused tokens and bank entries.
    pub fn digest(&self) -> Digest32 {
        let per_group = self.group_digests();
        let parts: Vec<&[u8]> = per_group.iter().map(|(_, d)| d.as_bytes() as &[u8]).collect();
        digest_parts(&parts)
    }
}

// ── Sequence embedding ───────────────────────────────────────────────

impl BackboneWeights {
    /// Token embeddings plus learned positions for slots
    /// `[start_pos, start_pos + ids.len())`.
    pub fn embed_tokens(&self, ids: &[usize], start_pos: usize) -> Result<Mat> {
        let d = self.config.d_model;
        if start_pos + ids.len() > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "token slots [{start_pos}, {}) exceed max_seq {}",
                start_pos + ids.len(),
                self.config.max_seq
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::Index {
                    op: "embed_tokens",
                    detail: format!("token id {id} >= vocab {}", self.config.vocab_size),
                });
            }
            let tok = &self.tok_embed[id * d..(id + 1) * d];
            let pos = &self.pos_embed[(start_pos + i) * d..(start_pos + i + 1) * d];
            data.extend(tok.iter().zip(pos.iter()).map(|(t, p)| t + p));
        }
        Mat::new(ids.len(), d, data)
    }

    /// Add the learned positional rows for slots starting at `start_pos` to
    /// arbitrary embedding rows (visual tokens, fused tokens).
    pub fn add_positions(&self, rows: &Mat, start_pos: usize) -> Result<Mat> {
        let d = self.config.d_model;
        if rows.cols != d {
            return Err(Error::Dimension {
                op: "add_positions",
                detail: format!("{} cols vs d_model {d}", rows.cols),
            });
        }
        if start_pos + rows.rows > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "slots [{start_pos}, {}) exceed max_seq {}",
                start_pos + rows.rows,
                self.config.max_seq
            )));
        }
        let mut out = rows.clone();
        for r in 0..rows.rows {
            let pos = &self.pos_embed[(start_pos + r) * d..(start_pos + r + 1) * d];
            for c in 0..d {
                out.data[r * d + c] += pos[c];
            }
        }
        Ok(out)
    }
}

// ── Vision encoder ───────────────────────────────────────────────────

/// Fixed-count visual tokens for one image.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub tokens: Mat,
    pub source_hash: Digest32,
}

/// Sinusoidal 2-d position code for a patch grid cell; the first half of the
/// dimensions encodes the row, the second half the column.
fn patch_position(row: usize, col: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let quarter = d / 4;
    let mut out = vec![0.0; d];
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
        out[2 * i] = (row as f64 * omega).sin();
        out[2 * i + 1] = (row as f64 * omega).cos();
        out[half + 2 * i] = (col as f64 * omega).sin();
        out[half + 2 * i + 1] = (col as f64 * omega).cos();
    }
    out
}

impl BackboneWeights {
    /// Encode an image into exactly `M` visual tokens: pad to a square
    /// multiple of the patch size, embed patches (linear projection plus 2-d
    /// position), and let the learnable queries cross-attend once.
    pub fn encode_image(&self, img: &Image) -> Result<VisualTokens> {
        let c = &self.config;
        let d = c.d_model;
        let p = c.patch_size;
        let padded = img.pad_to_square(p);
        let grid = padded.height / p;
        let n_patches = grid * grid;

        let mut patch_data = Vec::with_capacity(n_patches * p * p);
        for gr in 0..grid {
            for gc in 0..grid {
                for pr in 0..p {
                    let base = (gr * p + pr) * padded.width + gc * p;
                    patch_data.extend_from_slice(&padded.pixels[base..base + p]);
                }
            }
        }

        let mut tape = Tape::new();
        let patches = tape.constant(patch_data, &[n_patches, p * p])?;
        let proj = tape.constant(self.vision.patch_proj.clone(), &[p * p, d])?;
        let pbias = tape.constant(self.vision.patch_bias.clone(), &[d])?;
        let projected = tape.matmul(patches, proj)?;
        let mut embedded = tape.add_row(projected, pbias)?;
        let mut pos2d = Vec::with_capacity(n_patches * d);
        for gr in 0..grid {
            for gc in 0..grid {
                pos2d.extend(patch_position(gr, gc, d));
            }
        }
        let pos = tape.constant(pos2d, &[n_patches, d])?;
        embedded = tape.add(embedded, pos)?;

        let in_gain = tape.constant(self.vision.in_ln_gain.clone(), &[d])?;
        let in_bias = tape.constant(self.vision.in_ln_bias.clone(), &[d])?;
        let kv = tape.layer_norm(embedded, in_gain, in_bias, LN_EPS)?;

        let queries = tape.constant(
            self.vision.queries.clone(),
            &[c.visual_tokens_per_image, d],
        )?;
        let attn = cross_attention(
            &mut tape,
            queries,
            kv,
            &AttnWeights {
                wq: &self.vision.wq,
                bq: &self.vision.bq,
                wk: &self.vision.wk,
                bk: &self.vision.bk,
                wv: &self.vision.wv,
                bv: &self.vision.bv,
                wo: &self.vision.wo,
                bo: &self.vision.bo,
            },
            c,
        )?;
        let resid = tape.add(queries, attn)?;
        let out_gain = tape.constant(self.vision.out_ln_gain.clone(), &[d])?;
        let out_bias = tape.constant(self.vision.out_ln_bias.clone(), &[d])?;
        let tokens = tape.layer_norm(resid, out_gain, out_bias, LN_EPS)?;

        counters::add_image_encode();
        Ok(VisualTokens {
            tokens: Mat::new(
                c.visual_tokens_per_image,
                d,
                tape.data(tokens).to_vec(),
            )?,
            source_hash: img.digest(),
        })
    }
}

struct AttnWeights<'a> {
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
}

/// Non-causal multi-head cross attention (vision encoder). Counts its score
/// elements on the vision counter.
fn cross_attention(
    tape: &mut Tape,
    q_in: TensorRef,
    kv_in: TensorRef,
    w: &AttnWeights<'_>,
    cfg: &ModelConfig,
) -> Result<TensorRef> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let wq = tape.constant(w.wq.to_vec(), &[d, d])?;
    let bq = tape.constant(w.bq.to_vec(), &[d])?;
    let wk = tape.constant(w.wk.to_vec(), &[d, d])?;
    let bk = tape.constant(w.bk.to_vec(), &[d])?;
    let wv = tape.constant(w.wv.to_vec(), &[d, d])?;
    let bv = tape.constant(w.bv.to_vec(), &[d])?;
    let wo = tape.constant(w.wo.to_vec(), &[d, d])?;
    let bo = tape.constant(w.bo.to_vec(), &[d])?;

    let qm = tape.matmul(q_in, wq)?;
    let q = tape.add_row(qm, bq)?;
    let km = tape.matmul(kv_in, wk)?;
    let k = tape.add_row(km, bk)?;
    let vm = tape.matmul(kv_in, wv)?;
    let v = tape.add_row(vm, bv)?;

    let tq = tape.shape(q)[0];
    let tk = tape.shape(k)[0];
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        counters::add_vision_attn_elements((tq * tk) as u64);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax_rows(scaled)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    let om = tape.matmul(ctx, wo)?;
    tape.add_row(om, bo)
}

// ── Decoder stack ────────────────────────────────────────────────────

/// Saved attention internals for one decoder layer (analysis only).
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub q: Mat,
    pub k: Mat,
    /// Attention probabilities of the last query row over all key positions.
    pub probs_last_row: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
}

/// Per-layer key/value rows for incremental decoding.
pub struct KvCache {
    /// (K, V) per decoder layer, each `len x d_model`.
    layers: Vec<(Mat, Mat)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct BlockOptions<'a> {
    /// Cached K/V rows preceding the current input rows (incremental step).
    kv_prefix: Option<(&'a Mat, &'a Mat)>,
    /// Capture this block's new K/V rows.
    capture_kv: bool,
    /// Capture Q/K and the last row's attention probabilities.
    trace: bool,
}

struct BlockOutput {
    out: TensorRef,
    kv: Option<(Mat, Mat)>,
    trace: Option<LayerTrace>,
}

impl BackboneWeights {
    fn decoder_block(
        &self,
        tape: &mut Tape,
        x: TensorRef,
        layer: usize,
        opts: &BlockOptions<'_>,
    ) -> Result<BlockOutput> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let lw = &self.layers[layer];

        let ln1_g = tape.constant(lw.ln1_gain.clone(), &[d])?;
        let ln1_b = tape.constant(lw.ln1_bias.clone(), &[d])?;
        let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;

        let wq = tape.constant(lw.wq.clone(), &[d, d])?;
        let bq = tape.constant(lw.bq.clone(), &[d])?;
        let wk = tape.constant(lw.wk.clone(), &[d, d])?;
        let bk = tape.constant(lw.bk.clone(), &[d])?;
        let wv = tape.constant(lw.wv.clone(), &[d, d])?;
        let bv = tape.constant(lw.bv.clone(), &[d])?;
        let qm = tape.matmul(h, wq)?;
        let q = tape.add_row(qm, bq)?;
        let km = tape.matmul(h, wk)?;
        let k_new = tape.add_row(km, bk)?;
        let vm = tape.matmul(h, wv)?;
        let v_new = tape.add_row(vm, bv)?;

        // Absolute position of the first query row: with a cached prefix the
        // new rows sit after it, and the causal mask must account for that.
        let (k_all, v_all, offset) = match opts.kv_prefix {
            Some((pk, pv)) => {
                let pk_t = tape.constant(pk.data.clone(), &[pk.rows, pk.cols])?;
                let pv_t = tape.constant(pv.data.clone(), &[pv.rows, pv.cols])?;
                let k_all = tape.concat_rows(&[pk_t, k_new])?;
                let v_all = tape.concat_rows(&[pv_t, v_new])?;
                (k_all, v_all, pk.rows)
            }
            None => (k_new, v_new, 0),
        };

        let tq = tape.shape(q)[0];
        let tk = tape.shape(k_all)[0];
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut head_traces = Vec::new();
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k_all, hd * dh, dh)?;
            let vh = tape.slice_cols(v_all, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            counters::add_lm_attn_elements((tq * tk) as u64);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let probs = tape.causal_softmax_rows(scaled, offset)?;
            if opts.trace {
                let pdata = tape.data(probs);
                head_traces.push(HeadTrace {
                    q: Mat::new(tq, dh, tape.data(qh).to_vec())?,
                    k: Mat::new(tk, dh, tape.data(kh).to_vec())?,
                    probs_last_row: pdata[(tq - 1) * tk..tq * tk].to_vec(),
                });
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let wo = tape.constant(lw.wo.clone(), &[d, d])?;
        let bo = tape.constant(lw.bo.clone(), &[d])?;
        let cm = tape.matmul(ctx, wo)?;
        let attn_out = tape.add_row(cm, bo)?;
        let x1 = tape.add(x, attn_out)?;

        let ln2_g = tape.constant(lw.ln2_gain.clone(), &[d])?;
        let ln2_b = tape.constant(lw.ln2_bias.clone(), &[d])?;
        let h2 = tape.layer_norm(x1, ln2_g, ln2_b, LN_EPS)?;
        let w_up = tape.constant(lw.w_up.clone(), &[d, cfg.mlp_dim()])?;
        let b_up = tape.constant(lw.b_up.clone(), &[cfg.mlp_dim()])?;
        let w_down = tape.constant(lw.w_down.clone(), &[cfg.mlp_dim(), d])?;
        let b_down = tape.constant(lw.b_down.clone(), &[d])?;
        let um = tape.matmul(h2, w_up)?;
        let up = tape.add_row(um, b_up)?;
        let act = tape.gelu(up)?;
        let dm = tape.matmul(act, w_down)?;
        let mlp = tape.add_row(dm, b_down)?;
        let out = tape.add(x1, mlp)?;

        let kv = if opts.capture_kv {
            let tk_new = tape.shape(k_new)[0];
            Some((
                Mat::new(tk_new, d, tape.data(k_new).to_vec())?,
                Mat::new(tk_new, d, tape.data(v_new).to_vec())?,
            ))
        } else {
            None
        };
        Ok(BlockOutput {
            out,
            kv,
            trace: if opts.trace {
                Some(LayerTrace { heads: head_traces })
            } else {
                None
            },
        })
    }

    /// Apply decoder layers `[from_layer, to_layer)` on a tape. The input is
    /// a `t x d_model` tensor that already includes positional embeddings.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: TensorRef,
        from_layer: usize,
        to_layer: usize,
    ) -> Result<TensorRef> {
        self.check_layer_range(from_layer, to_layer)?;
        let t = tape.shape(x)[0];
        if t > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence length {t} exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        counters::add_forward_pass();
        let mut cur = x;
        for layer in from_layer..to_layer {
            cur = self
                .decoder_block(
                    tape,
                    cur,
                    layer,
                    &BlockOptions {
                        kv_prefix: None,
                        capture_kv: false,
                        trace: false,
                    },
                )?
                .out;
        }
        Ok(cur)
    }

    fn check_layer_range(&self, from_layer: usize, to_layer: usize) -> Result<()> {
        if from_layer >= to_layer || to_layer > self.config.n_layers {
            return Err(Error::Usage(format!(
                "layer range [{from_layer}, {to_layer}) invalid for {} layers",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    /// Hidden states after decoder layers `[from_layer, to_layer)`.
    pub fn forward_layers(&self, seq: &Mat, from_layer: usize, to_layer: usize) -> Result<Mat> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.data.clone(), &[seq.rows, seq.cols])?;
        let out = self.forward_on_tape(&mut tape, x, from_layer, to_layer)?;
        Mat::new(seq.rows, seq.cols, tape.data(out).to_vec())
    }

    /// Like [`forward_layers`](Self::forward_layers) but also returns the
    /// attention internals of every applied layer.
    pub fn forward_layers_traced(
        &self,
        seq: &Mat,
        from_layer: usize,
        to_layer: usize,
    ) -> Result<(Mat, Vec<LayerTrace>)> {
        self.check_layer_range(from_layer, to_layer)?;
        if seq.rows > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence length {} exceeds max_seq {}",
                seq.rows, self.config.max_seq
            )));
        }
        counters::add_forward_pass();
        let mut tape = Tape::new();
        let mut cur = tape.constant(seq.data.clone(), &[seq.rows, seq.cols])?;
        let mut traces = Vec::new();
        for layer in from_layer..to_layer {
            let out = self.decoder_block(
                &mut tape,
                cur,
                layer,
                &BlockOptions {
                    kv_prefix: None,
                    capture_kv: false,
                    trace: true,
                },
            )?;
            traces.push(out.trace.expect("trace requested"));
            cur = out.out;
        }
        Ok((Mat::new(seq.rows, seq.cols, tape.data(cur).to_vec())?, traces))
    }

    /// Full forward over all layers capturing per-layer K/V rows, for
    /// incremental decoding. Returns the final hidden states and the cache.
    pub fn forward_prefill(&self, seq: &Mat) -> Result<(Mat, KvCache)> {
        self.check_layer_range(0, self.config.n_layers)?;
        if seq.rows > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence length {} exceeds max_seq {}",
                seq.rows, self.config.max_seq
            )));
        }
        counters::add_forward_pass();
        let mut tape = Tape::new();
        let mut cur = tape.constant(seq.data.clone(), &[seq.rows, seq.cols])?;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let out = self.decoder_block(
                &mut tape,
                cur,
                layer,
                &BlockOptions {
                    kv_prefix: None,
                    capture_kv: true,
                    trace: false,
                },
            )?;
            layers.push(out.kv.expect("kv requested"));
            cur = out.out;
        }
        Ok((
            Mat::new(seq.rows, seq.cols, tape.data(cur).to_vec())?,
            KvCache {
                layers,
                len: seq.rows,
            },
        ))
    }

    /// Advance the cache by one or more new rows (embeddings with positions
    /// already added) and return their final hidden states.
    pub fn forward_step(&self, cache: &mut KvCache, new_rows: &Mat) -> Result<Mat> {
        if cache.len + new_rows.rows > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "cache {} + {} new rows exceed max_seq {}",
                cache.len, new_rows.rows, self.config.max_seq
            )));
        }
        let mut tape = Tape::new();
        let mut cur = tape.constant(new_rows.data.clone(), &[new_rows.rows, new_rows.cols])?;
        for layer in 0..self.config.n_layers {
            let (pk, pv) = {
                let (k, v) = &cache.layers[layer];
                (k.clone(), v.clone())
            };
            let out = self.decoder_block(
                &mut tape,
                cur,
                layer,
                &BlockOptions {
                    kv_prefix: Some((&pk, &pv)),
                    capture_kv: true,
                    trace: false,
                },
            )?;
            let (nk, nv) = out.kv.expect("kv requested");
            let (k, v) = &mut cache.layers[layer];
            k.append_rows(&nk)?;
            v.append_rows(&nv)?;
            cur = out.out;
        }
        cache.len += new_rows.rows;
        Mat::new(new_rows.rows, new_rows.cols, tape.data(cur).to_vec())
    }

    /// Final layer norm then LM head projection: `t x d -> t x vocab`.
    pub fn lm_logits_on_tape(&self, tape: &mut Tape, hidden: TensorRef) -> Result<TensorRef> {
        let d = self.config.d_model;
        let g = tape.constant(self.final_ln_gain.clone(), &[d])?;
        let b = tape.constant(self.final_ln_bias.clone(), &[d])?;
        let normed = tape.layer_norm(hidden, g, b, LN_EPS)?;
        let head = tape.constant(self.lm_head.clone(), &[d, self.config.vocab_size])?;
        tape.matmul(normed, head)
    }

    pub fn lm_logits(&self, hidden: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let h = tape.constant(hidden.data.clone(), &[hidden.rows, hidden.cols])?;
        let out = self.lm_logits_on_tape(&mut tape, h)?;
        Mat::new(hidden.rows, self.config.vocab_size, tape.data(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            visual_tokens_per_image: 4,
            patch_size: 4,
            max_seq: 64,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    fn ramp_image(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.n_heads = 5; // 64 % 5 != 0
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let a = BackboneWeights::init(small_cfg()).unwrap();
        let b = BackboneWeights::init(small_cfg()).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut other = small_cfg();
        other.seed = 2;
        let c = BackboneWeights::init(other).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn encode_image_shape_and_determinism() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let img = ramp_image(8, 12);
        let a = w.encode_image(&img).unwrap();
        assert_eq!(a.tokens.rows, 4);
        assert_eq!(a.tokens.cols, 16);
        let b = w.encode_image(&img).unwrap();
        assert_eq!(a.tokens, b.tokens, "same image twice is bit-identical");
    }

    #[test]
    fn encode_image_distinguishes_images() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let zero = Image::zeros(8, 8).unwrap();
        let one = Image::new(8, 8, vec![1.0; 64]).unwrap();
        let a = w.encode_image(&zero).unwrap();
        let b = w.encode_image(&one).unwrap();
        let dist: f64 = a
            .tokens
            .data
            .iter()
            .zip(b.tokens.data.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn encode_image_padding_invariance() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let img = ramp_image(6, 10);
        let padded = img.pad_to_square(4);
        let a = w.encode_image(&img).unwrap();
        let b = w.encode_image(&padded).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn layer_composition_splits_anywhere() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let seq = w.embed_tokens(&crate::tokenizer::tokenize("split me"), 0).unwrap();
        let full = w.forward_layers(&seq, 0, 4).unwrap();
        for n in 1..4 {
            let first = w.forward_layers(&seq, 0, n).unwrap();
            let rest = w.forward_layers(&first, n, 4).unwrap();
            for (a, b) in rest.data.iter().zip(full.data.iter()) {
                assert!((a - b).abs() < 1e-10, "split at {n}");
            }
        }
    }

    #[test]
    fn empty_layer_range_is_rejected() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let seq = w.embed_tokens(&[10], 0).unwrap();
        assert!(matches!(
            w.forward_layers(&seq, 2, 2),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn forward_is_causal() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let ids = crate::tokenizer::tokenize("causal test!");
        let seq = w.embed_tokens(&ids, 0).unwrap();
        let base = w.forward_layers(&seq, 0, 4).unwrap();

        // perturb token j: positions < j are bit-identical
        let j = 7;
        let mut other_ids = ids.clone();
        other_ids[j] += 1;
        let seq2 = w.embed_tokens(&other_ids, 0).unwrap();
        let out2 = w.forward_layers(&seq2, 0, 4).unwrap();
        let d = w.config.d_model;
        for r in 0..j {
            assert_eq!(&base.data[r * d..(r + 1) * d], &out2.data[r * d..(r + 1) * d]);
        }
        // and the perturbed position itself changes
        assert_ne!(&base.data[j * d..(j + 1) * d], &out2.data[j * d..(j + 1) * d]);
    }

    #[test]
    fn single_token_causal_mask_is_noop() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let seq = w.embed_tokens(&[42], 0).unwrap();
        let out = w.forward_layers(&seq, 0, 4).unwrap();
        assert_eq!(out.rows, 1);
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn capacity_is_enforced() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let ids = vec![5usize; 65];
        assert!(matches!(
            w.embed_tokens(&ids, 0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn lm_logits_matches_hand_computation() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let d = w.config.d_model;
        let hidden = Mat::new(1, d, (0..d).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let logits = w.lm_logits(&hidden).unwrap();
        assert_eq!(logits.rows, 1);
        assert_eq!(logits.cols, w.config.vocab_size);

        // by hand: layer norm then matmul against the head
        let row = hidden.row(0);
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let normed: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * w.final_ln_gain[i] + w.final_ln_bias[i])
            .collect();
        for j in 0..w.config.vocab_size {
            let mut acc = 0.0;
            for (i, n) in normed.iter().enumerate() {
                acc += n * w.lm_head[i * w.config.vocab_size + j];
            }
            assert!((acc - logits.data[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn prefill_plus_steps_match_full_forward() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let ids = crate::tokenizer::tokenize("abcdefgh");
        let seq = w.embed_tokens(&ids, 0).unwrap();
        let full = w.forward_layers(&seq, 0, w.config.n_layers).unwrap();

        // prefill on the first 5 rows, then step the remaining 3 one by one
        let prefix = Mat::new(5, seq.cols, seq.data[..5 * seq.cols].to_vec()).unwrap();
        let (_, mut cache) = w.forward_prefill(&prefix).unwrap();
        let mut last_rows = Vec::new();
        for r in 5..8 {
            let row = Mat::new(1, seq.cols, seq.row(r).to_vec()).unwrap();
            let out = w.forward_step(&mut cache, &row).unwrap();
            last_rows.push(out.data);
        }
        for (i, row) in last_rows.iter().enumerate() {
            let r = 5 + i;
            assert_eq!(row.as_slice(), full.row(r), "row {r} differs");
        }
    }

    #[test]
    fn attention_element_counter_is_exact() {
        let w = BackboneWeights::init(small_cfg()).unwrap();
        let t = 10usize;
        let seq = w.embed_tokens(&vec![50; t], 0).unwrap();
        let before = counters::snapshot();
        w.forward_layers(&seq, 0, 3).unwrap();
        let delta = counters::since(before);
        assert_eq!(
            delta.lm_attn_elements,
            (3 * w.config.n_heads * t * t) as u64
        );
        assert_eq!(delta.forward_passes, 1);
    }
}
