//! Prompt assembly for the three evaluation modes.
//!
//! A [`PromptSequence`] is the matrix actually fed to layer 0 -- embeddings
//! with positional rows already added -- plus a span table that tags every
//! row range with what it is (fused demo, visual demo, demo text, query
//! image, query instruction). The span table tiles the sequence exactly and
//! is what the attention-mass analysis aggregates over.
//!
//! Layouts:
//! - fused:     `[Y1 .. Yn][query visual][query instruction]`
//! - baseline:  `[V1 T1 .. Vn Tn][query visual][query instruction]`
//! - text-only: `[T1 .. Tn][query visual][query instruction]` (demo images
//!   dropped, instruction wrappers kept)
//!
//! At n = 0 all three produce the identical zero-shot prompt.

use std::fmt;

use crate::aggregator::{concat_fused, Demonstration, FusedTokens};
use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Mat;
use crate::tokenizer;

/// What occupies a span of prompt rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    FusedDemo(usize),
    VisualDemo(usize),
    TextDemo(usize),
    VisualQuery,
    TextQuery,
    Generated,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentKind::FusedDemo(i) => write!(f, "fused_demo[{i}]"),
            SegmentKind::VisualDemo(i) => write!(f, "visual_demo[{i}]"),
            SegmentKind::TextDemo(i) => write!(f, "text_demo[{i}]"),
            SegmentKind::VisualQuery => f.write_str("visual_query"),
            SegmentKind::TextQuery => f.write_str("text_query"),
            SegmentKind::Generated => f.write_str("generated"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// A query: one image plus a non-empty instruction.
#[derive(Debug, Clone)]
pub struct Query {
    pub image: Image,
    pub instruction: String,
}

impl Query {
    pub fn new(image: Image, instruction: impl Into<String>) -> Result<Self> {
        let instruction = instruction.into();
        if instruction.is_empty() {
            return Err(Error::Usage("query instruction must be non-empty".into()));
        }
        Ok(Query { image, instruction })
    }
}

/// Embeddings (positions included) plus the segment span table.
#[derive(Debug, Clone)]
pub struct PromptSequence {
    pub embeddings: Mat,
    pub segments: Vec<Segment>,
}

impl PromptSequence {
    fn empty(d_model: usize) -> Self {
        PromptSequence {
            embeddings: Mat::zeros(0, d_model),
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows == 0
    }

    /// Rows of one segment.
    pub fn segment_rows(&self, seg: &Segment) -> Mat {
        let d = self.embeddings.cols;
        Mat::new(
            seg.len,
            d,
            self.embeddings.data[seg.start * d..(seg.start + seg.len) * d].to_vec(),
        )
        .expect("span within sequence")
    }

    /// Spans must tile the sequence exactly: no gaps, no overlaps.
    pub fn spans_tile_exactly(&self) -> bool {
        let mut next = 0;
        for seg in &self.segments {
            if seg.start != next || seg.len == 0 {
                return false;
            }
            next += seg.len;
        }
        next == self.embeddings.rows
    }

    fn push_rows(&mut self, kind: SegmentKind, rows: &Mat) -> Result<()> {
        let start = self.embeddings.rows;
        self.embeddings.append_rows(rows)?;
        self.segments.push(Segment {
            kind,
            start,
            len: rows.rows,
        });
        Ok(())
    }

    /// Append token rows (embedding + position by slot) as a new segment.
    /// Used for teacher-forced continuations.
    pub fn append_tokens(
        &mut self,
        kind: SegmentKind,
        ids: &[usize],
        w: &BackboneWeights,
    ) -> Result<()> {
        let rows = w.embed_tokens(ids, self.len())?;
        self.push_rows(kind, &rows)
    }
}

fn append_query(prompt: &mut PromptSequence, q: &Query, w: &BackboneWeights) -> Result<()> {
    let visual = w.encode_image(&q.image)?;
    let vis_rows = w.add_positions(&visual.tokens, prompt.len())?;
    prompt.push_rows(SegmentKind::VisualQuery, &vis_rows)?;
    prompt.append_tokens(SegmentKind::TextQuery, &tokenizer::tokenize(&q.instruction), w)
}

/// Total rows a query occupies: M visual plus its instruction tokens.
fn query_len(q: &Query, w: &BackboneWeights) -> usize {
    w.config.visual_tokens_per_image + tokenizer::tokenize(&q.instruction).len()
}

/// Check demo lengths against capacity, naming the first demo that does not
/// fit once the query's own rows are accounted for.
fn check_capacity(demo_lens: &[usize], q: &Query, w: &BackboneWeights) -> Result<()> {
    let budget = w.config.max_seq;
    let q_len = query_len(q, w);
    if q_len > budget {
        return Err(Error::Capacity(format!(
            "query alone needs {q_len} slots, max_seq {budget}"
        )));
    }
    let mut used = q_len;
    for (i, len) in demo_lens.iter().enumerate() {
        used += len;
        if used > budget {
            return Err(Error::Capacity(format!(
                "demo {i} does not fit: {used} slots needed, max_seq {budget}"
            )));
        }
    }
    Ok(())
}

/// Fused prompt: `[Y1 .. Yn][query visual][query instruction]`.
pub fn build_prompt_fused(
    demos: &[FusedTokens],
    q: &Query,
    w: &BackboneWeights,
) -> Result<PromptSequence> {
    let lens: Vec<usize> = demos.iter().map(|f| f.text_len).collect();
    check_capacity(&lens, q, w)?;
    let mut prompt = PromptSequence::empty(w.config.d_model);
    if !demos.is_empty() {
        // concat_fused also enforces that all parts share one version
        let seq = concat_fused(demos)?;
        let mut offset = 0;
        for (i, &len) in seq.lens.iter().enumerate() {
            let block = Mat::new(
                len,
                w.config.d_model,
                seq.tokens.data[offset * w.config.d_model..(offset + len) * w.config.d_model]
                    .to_vec(),
            )?;
            let rows = w.add_positions(&block, prompt.len())?;
            prompt.push_rows(SegmentKind::FusedDemo(i), &rows)?;
            offset += len;
        }
    }
    append_query(&mut prompt, q, w)?;
    Ok(prompt)
}

/// Full-token baseline prompt: `[V1 T1 .. Vn Tn][query visual][query
/// instruction]`.
pub fn build_prompt_baseline(
    demos: &[Demonstration],
    q: &Query,
    w: &BackboneWeights,
) -> Result<PromptSequence> {
    let m = w.config.visual_tokens_per_image;
    let lens: Vec<usize> = demos.iter().map(|d| m + d.text_ids().len()).collect();
    check_capacity(&lens, q, w)?;
    let mut prompt = PromptSequence::empty(w.config.d_model);
    for (i, demo) in demos.iter().enumerate() {
        let visual = w.encode_image(&demo.image)?;
        let vis_rows = w.add_positions(&visual.tokens, prompt.len())?;
        prompt.push_rows(SegmentKind::VisualDemo(i), &vis_rows)?;
        prompt.append_tokens(SegmentKind::TextDemo(i), &demo.text_ids(), w)?;
    }
    append_query(&mut prompt, q, w)?;
    Ok(prompt)
}

/// Demo texts only (images dropped, instruction wrappers kept); the query
/// keeps its image.
pub fn build_prompt_text_only(
    demos: &[Demonstration],
    q: &Query,
    w: &BackboneWeights,
) -> Result<PromptSequence> {
    let lens: Vec<usize> = demos.iter().map(|d| d.text_ids().len()).collect();
    check_capacity(&lens, q, w)?;
    let mut prompt = PromptSequence::empty(w.config.d_model);
    for (i, demo) in demos.iter().enumerate() {
        prompt.append_tokens(SegmentKind::TextDemo(i), &demo.text_ids(), w)?;
    }
    append_query(&mut prompt, q, w)?;
    Ok(prompt)
}
