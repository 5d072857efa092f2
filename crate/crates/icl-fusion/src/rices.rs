//! Retrieval-based in-context example selection.
//!
//! Each image is embedded as the mean of its visual token rows; candidates
//! are ranked by cosine similarity to the query embedding, descending, with
//! ties keeping pool order. Zero-norm embeddings cannot be compared and are
//! excluded with a warning.

use log::warn;

use crate::aggregator::Demonstration;
use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::image::Image;

/// Mean visual-token embedding of an image.
pub fn image_embedding(img: &Image, w: &BackboneWeights) -> Result<Vec<f64>> {
    let tokens = w.encode_image(img)?;
    let d = tokens.tokens.cols;
    let m = tokens.tokens.rows as f64;
    let mut out = vec![0.0; d];
    for r in 0..tokens.tokens.rows {
        for (o, v) in out.iter_mut().zip(tokens.tokens.row(r)) {
            *o += v / m;
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Full pool ordering by similarity to the query image, descending.
/// `rices_select(.., k)` is always a prefix of `rices_select(.., k + 1)`
/// because the ordering does not depend on k.
pub fn rices_rank(
    query_img: &Image,
    pool: &[Demonstration],
    w: &BackboneWeights,
) -> Result<Vec<usize>> {
    let q = image_embedding(query_img, w)?;
    let qn = norm(&q);
    if qn == 0.0 {
        warn!("query image has a zero-norm embedding; returning pool order");
        return Ok((0..pool.len()).collect());
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (i, demo) in pool.iter().enumerate() {
        let e = image_embedding(&demo.image, w)?;
        let n = norm(&e);
        if n == 0.0 {
            warn!("pool item {i} has a zero-norm embedding; excluded from retrieval");
            continue;
        }
        scored.push((i, cosine(&q, &e, qn, n)));
    }
    // stable sort: ties keep pool order
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarities"));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Top-k demonstrations by image cosine similarity.
pub fn rices_select(
    query_img: &Image,
    pool: &[Demonstration],
    k: usize,
    w: &BackboneWeights,
) -> Result<Vec<Demonstration>> {
    if k > pool.len() {
        return Err(Error::Usage(format!(
            "k = {k} exceeds pool size {}",
            pool.len()
        )));
    }
    let ranked = rices_rank(query_img, pool, w)?;
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|i| pool[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            visual_tokens_per_image: 4,
            patch_size: 4,
            max_seq: 64,
            seed: 31,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap()
    }

    fn pool(n: u64) -> Vec<Demonstration> {
        (0..n)
            .map(|i| Demonstration::new(image(i), "cap: ", format!("item {i}")).unwrap())
            .collect()
    }

    #[test]
    fn identical_image_ranks_first() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let pool = pool(8);
        let ranked = rices_rank(&pool[5].image, &pool, &w).unwrap();
        assert_eq!(ranked[0], 5);
    }

    #[test]
    fn k_equals_pool_is_permutation() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let pool = pool(6);
        let selected = rices_select(&image(100), &pool, 6, &w).unwrap();
        assert_eq!(selected.len(), 6);
        let mut labels: Vec<String> = selected.iter().map(|d| d.label.clone()).collect();
        labels.sort();
        let mut expect: Vec<String> = pool.iter().map(|d| d.label.clone()).collect();
        expect.sort();
        assert_eq!(labels, expect);
    }

    #[test]
    fn matches_exhaustive_cosine_sort() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let pool = pool(20);
        let query = image(999);
        let ranked = rices_rank(&query, &pool, &w).unwrap();

        // oracle: compute all cosines, independent stable sort
        let qe = image_embedding(&query, &w).unwrap();
        let qn = norm(&qe);
        let mut sims: Vec<(usize, f64)> = pool
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let e = image_embedding(&d.image, &w).unwrap();
                (i, cosine(&qe, &e, qn, norm(&e)))
            })
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1));
        let expected: Vec<usize> = sims.into_iter().map(|(i, _)| i).collect();
        assert_eq!(ranked, expected);
    }

    #[test]
    fn prefix_property() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let pool = pool(10);
        let query = image(50);
        for k in 0..pool.len() {
            let a = rices_select(&query, &pool, k, &w).unwrap();
            let b = rices_select(&query, &pool, k + 1, &w).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.label, y.label);
            }
        }
    }

    #[test]
    fn k_beyond_pool_errors() {
        let w = BackboneWeights::init(cfg()).unwrap();
        let pool = pool(3);
        assert!(rices_select(&image(0), &pool, 4, &w).is_err());
    }
}
