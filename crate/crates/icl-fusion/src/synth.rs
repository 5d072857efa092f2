//! Synthetic interleaved image-text corpus.
//!
//! Stands in for web-scale interleaved data: each instance holds up to five
//! image-text pairs plus a remaining text that continues them. Images are
//! patch-block barcodes that visually encode a motif index (first four
//! blocks are the bits, the rest random texture), paired texts name the
//! motif through a small fixed grammar, and the remaining text lists the
//! instance's motifs in order. Image and text therefore carry mutual
//! information by construction, and [`decode_motif`] recovers the index
//! from pixels alone.
//!
//! Everything is deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::Demonstration;
use crate::backbone::ModelConfig;
use crate::digest::{digest_parts, Digest32};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::Query;

/// Motif vocabulary; the barcode stores an index into this list.
pub const MOTIF_WORDS: [&str; 16] = [
    "ruby", "jade", "onyx", "gold", "teal", "plum", "rust", "sage", "iris", "coal", "dawn",
    "dusk", "fern", "opal", "zinc", "wave",
];

/// Most pairs a training instance may hold.
pub const MAX_PAIRS: usize = 5;

const MOTIF_BITS: usize = 4;
/// Texture levels chosen to survive the PGM byte round trip exactly.
const TEXTURE_LEVELS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Sentence forms. Variant 0 is the canonical caption used for remaining
/// texts and evaluation gold; paired texts draw from the other variants so
/// an instance's remaining text never repeats one of its paired texts.
const SENTENCE_TEMPLATES: [&str; 3] = ["a |W| panel.", "the |W| grid.", "one |W| tile."];

pub fn motif_word(index: usize) -> &'static str {
    MOTIF_WORDS[index % MOTIF_WORDS.len()]
}

/// One interleaved training instance: `k` image-text pairs and a remaining
/// text disjoint from (but continuing) the paired texts.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub pairs: Vec<(Image, String)>,
    pub remaining_text: String,
}

impl TrainingInstance {
    pub fn new(pairs: Vec<(Image, String)>, remaining_text: String) -> Result<Self> {
        if pairs.is_empty() || pairs.len() > MAX_PAIRS {
            return Err(Error::Usage(format!(
                "instance must hold 1..={MAX_PAIRS} pairs, got {}",
                pairs.len()
            )));
        }
        if remaining_text.is_empty() {
            return Err(Error::Usage("remaining text must be non-empty".into()));
        }
        Ok(TrainingInstance {
            pairs,
            remaining_text,
        })
    }

    pub fn digest(&self) -> Digest32 {
        let mut parts: Vec<Vec<u8>> = Vec::new();
        for (img, text) in &self.pairs {
            parts.push(img.digest().as_bytes().to_vec());
            parts.push(text.as_bytes().to_vec());
        }
        parts.push(self.remaining_text.as_bytes().to_vec());
        let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
        digest_parts(&refs)
    }
}

/// Barcode image for a motif: a 4x4 grid of patch-sized blocks. The first
/// four blocks hold the motif bits (full / zero intensity), the remaining
/// twelve hold random texture so images of one motif still differ.
pub fn motif_image(motif: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image {
    let p = cfg.patch_size;
    let grid = 4usize;
    let side = grid * p;
    let mut pixels = vec![0.0; side * side];
    for block in 0..grid * grid {
        let level = if block < MOTIF_BITS {
            if (motif >> block) & 1 == 1 {
                1.0
            } else {
                0.0
            }
        } else {
            TEXTURE_LEVELS[rng.random_range(0..TEXTURE_LEVELS.len())]
        };
        let (br, bc) = (block / grid, block % grid);
        for r in 0..p {
            for c in 0..p {
                pixels[(br * p + r) * side + bc * p + c] = level;
            }
        }
    }
    Image::new(side, side, pixels).expect("valid barcode image")
}

/// Recover the motif index from a barcode image (threshold 0.5 on the first
/// four blocks). Returns None if the image is too small to hold the code.
pub fn decode_motif(img: &Image, patch_size: usize) -> Option<usize> {
    let p = patch_size;
    if img.height < p || img.width < MOTIF_BITS * p {
        return None;
    }
    let mut motif = 0usize;
    for block in 0..MOTIF_BITS {
        // sample the block's center pixel
        let r = p / 2;
        let c = block * p + p / 2;
        if img.pixels[r * img.width + c] > 0.5 {
            motif |= 1 << block;
        }
    }
    Some(motif)
}

fn sentence(motif: usize, variant: usize) -> String {
    SENTENCE_TEMPLATES[variant % SENTENCE_TEMPLATES.len()].replace("|W|", motif_word(motif))
}

/// Canonical caption for a motif (variant 0).
pub fn canonical_caption(motif: usize) -> String {
    sentence(motif, 0)
}

/// Remaining text: the canonical captions of the instance's motifs, in
/// order. Continues the motifs without repeating any paired sentence.
fn remaining_text(motifs: &[usize]) -> String {
    let caps: Vec<String> = motifs.iter().map(|&m| canonical_caption(m)).collect();
    format!(" {}", caps.join(" "))
}

/// Generate a deterministic corpus of `n_instances`.
pub fn synth_corpus(n_instances: usize, seed: u64, cfg: &ModelConfig) -> Vec<TrainingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_instances)
        .map(|_| {
            let k = rng.random_range(1..=MAX_PAIRS);
            let motifs: Vec<usize> = (0..k)
                .map(|_| rng.random_range(0..MOTIF_WORDS.len()))
                .collect();
            let pairs: Vec<(Image, String)> = motifs
                .iter()
                .map(|&m| {
                    let img = motif_image(m, cfg, &mut rng);
                    // paired texts use the non-canonical variants only
                    let variant = 1 + rng.random_range(0..SENTENCE_TEMPLATES.len() - 1);
                    (img, sentence(m, variant))
                })
                .collect();
            TrainingInstance::new(pairs, remaining_text(&motifs)).expect("generator invariants")
        })
        .collect()
}

pub fn corpus_digest(corpus: &[TrainingInstance]) -> Digest32 {
    let digests: Vec<Digest32> = corpus.iter().map(|i| i.digest()).collect();
    let refs: Vec<&[u8]> = digests.iter().map(|d| d.as_bytes() as &[u8]).collect();
    digest_parts(&refs)
}

/// An evaluation query with its gold continuation.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub query: Query,
    pub gold: String,
}

/// Instruction-wrapped demonstrations and held-out queries over the same
/// grammar. `instruction` is the full prefix the caption is expected to
/// follow (e.g. the caption template plus a trailing space).
pub fn synth_eval_set(
    n_demos: usize,
    n_queries: usize,
    seed: u64,
    cfg: &ModelConfig,
    instruction: &str,
) -> Result<(Vec<Demonstration>, Vec<EvalQuery>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demos = (0..n_demos)
        .map(|_| {
            let motif = rng.random_range(0..MOTIF_WORDS.len());
            let img = motif_image(motif, cfg, &mut rng);
            Demonstration::new(img, instruction, canonical_caption(motif))
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = (0..n_queries)
        .map(|_| {
            let motif = rng.random_range(0..MOTIF_WORDS.len());
            let img = motif_image(motif, cfg, &mut rng);
            Ok(EvalQuery {
                query: Query::new(img, instruction)?,
                gold: canonical_caption(motif),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((demos, queries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            visual_tokens_per_image: 4,
            patch_size: 4,
            max_seq: 256,
            seed: 0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_digest() {
        let a = synth_corpus(50, 7, &cfg());
        let b = synth_corpus(50, 7, &cfg());
        assert_eq!(corpus_digest(&a), corpus_digest(&b));
        let c = synth_corpus(50, 8, &cfg());
        assert_ne!(corpus_digest(&a), corpus_digest(&c));
    }

    #[test]
    fn pair_counts_are_roughly_uniform() {
        let corpus = synth_corpus(1000, 13, &cfg());
        let mut counts = [0usize; MAX_PAIRS];
        for inst in &corpus {
            counts[inst.pairs.len() - 1] += 1;
        }
        // chi-square against uniform over {1..5}, df = 4, alpha = 0.05
        let expected = 1000.0 / MAX_PAIRS as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 9.488, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn paired_text_names_the_image_motif() {
        let corpus = synth_corpus(200, 3, &cfg());
        for inst in &corpus {
            for (img, text) in &inst.pairs {
                let motif = decode_motif(img, 4).expect("barcode decodes");
                assert!(
                    text.contains(motif_word(motif)),
                    "text {text:?} does not name motif {}",
                    motif_word(motif)
                );
            }
        }
    }

    #[test]
    fn remaining_text_continues_the_motifs() {
        let corpus = synth_corpus(100, 21, &cfg());
        for inst in &corpus {
            for (img, _) in &inst.pairs {
                let motif = decode_motif(img, 4).unwrap();
                assert!(inst.remaining_text.contains(motif_word(motif)));
            }
            // disjoint from the paired texts: different sentence shape
            for (_, text) in &inst.pairs {
                assert!(!inst.remaining_text.contains(text));
            }
        }
    }

    #[test]
    fn barcode_survives_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for motif in 0..MOTIF_WORDS.len() {
            let img = motif_image(motif, &cfg(), &mut rng);
            let path = dir.path().join(format!("m{motif}.pgm"));
            crate::image::write_pgm(&img, &path).unwrap();
            let back = crate::image::read_pgm(&path).unwrap();
            assert_eq!(img, back, "motif {motif} image must round-trip exactly");
            assert_eq!(decode_motif(&back, 4), Some(motif));
        }
    }

    #[test]
    fn eval_set_gold_matches_query_motif() {
        let (demos, queries) = synth_eval_set(10, 10, 5, &cfg(), "caption: ").unwrap();
        assert_eq!(demos.len(), 10);
        for q in &queries {
            let motif = decode_motif(&q.query.image, 4).unwrap();
            assert!(q.gold.contains(motif_word(motif)));
        }
    }
}
