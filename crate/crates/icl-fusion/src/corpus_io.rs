//! Corpus files: demo/query records and the interleaved training corpus.
//!
//! Both are JSONL, one record per line. Demo records reference image files
//! (PGM or raw) relative to the corpus file's directory; the training
//! corpus writer drops its barcode images into an `images/` subdirectory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::Demonstration;
use crate::error::{Error, Result};
use crate::image::{read_image, write_pgm};
use crate::synth::TrainingInstance;

/// One demo or query record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoRecord {
    pub image_path: String,
    pub instruction: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub question: Option<String>,
}

pub fn write_demo_corpus(path: &Path, records: &[DemoRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_demo_corpus(path: &Path) -> Result<Vec<DemoRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Load records as demonstrations, resolving image paths against the corpus
/// file's directory. Records without a label cannot serve as
/// demonstrations and are rejected.
pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_demo_corpus(path)?
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let label = rec.label.ok_or_else(|| {
                Error::Config(format!("record {i} in {} has no label", path.display()))
            })?;
            let image = read_image(&base.join(&rec.image_path))?;
            Demonstration::new(image, rec.instruction, label)
        })
        .collect()
}

/// Write demonstrations as a demo corpus plus PGM images under
/// `dir/images/`. Returns the corpus path.
pub fn write_demonstrations(dir: &Path, demos: &[Demonstration], name: &str) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(demos.len());
    for (i, demo) in demos.iter().enumerate() {
        let file = format!("images/{name}_{i:05}.pgm");
        write_pgm(&demo.image, &dir.join(&file))?;
        records.push(DemoRecord {
            image_path: file,
            instruction: demo.instruction.clone(),
            label: Some(demo.label.clone()),
            question: None,
        });
    }
    let corpus = dir.join(format!("{name}.jsonl"));
    write_demo_corpus(&corpus, &records)?;
    Ok(corpus)
}

/// One interleaved training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub k: usize,
    pub images: Vec<String>,
    pub texts: Vec<String>,
    pub remaining_text: String,
}

/// Write a training corpus: `dir/images/*.pgm` plus `dir/corpus.jsonl`.
pub fn write_training_corpus(dir: &Path, corpus: &[TrainingInstance]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut lines = String::new();
    for (i, inst) in corpus.iter().enumerate() {
        let mut image_files = Vec::with_capacity(inst.pairs.len());
        let mut texts = Vec::with_capacity(inst.pairs.len());
        for (j, (img, text)) in inst.pairs.iter().enumerate() {
            let file = format!("images/inst{i:05}_img{j}.pgm");
            write_pgm(img, &dir.join(&file))?;
            image_files.push(file);
            texts.push(text.clone());
        }
        let record = TrainRecord {
            k: inst.pairs.len(),
            images: image_files,
            texts,
            remaining_text: inst.remaining_text.clone(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    fs::write(&path, lines)?;
    Ok(path)
}

pub fn read_training_corpus(path: &Path) -> Result<Vec<TrainingInstance>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let rec: TrainRecord = serde_json::from_str(line)
            .map_err(|e| Error::Corruption(format!("{}:{i}: {e}", path.display())))?;
        if rec.k != rec.images.len() || rec.k != rec.texts.len() {
            return Err(Error::Corruption(format!(
                "{}:{i}: k = {} but {} images / {} texts",
                path.display(),
                rec.k,
                rec.images.len(),
                rec.texts.len()
            )));
        }
        let pairs = rec
            .images
            .iter()
            .zip(rec.texts)
            .map(|(img_path, text)| Ok((read_image(&base.join(img_path))?, text)))
            .collect::<Result<Vec<_>>>()?;
        out.push(TrainingInstance::new(pairs, rec.remaining_text)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::synth::{corpus_digest, synth_corpus, synth_eval_set};

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
    fn training_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(6, 3, &cfg());
        let path = write_training_corpus(dir.path(), &corpus).unwrap();
        let back = read_training_corpus(&path).unwrap();
        // barcode levels are byte-exact through PGM, so digests must match
        assert_eq!(corpus_digest(&corpus), corpus_digest(&back));
    }

    #[test]
    fn demo_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (demos, _) = synth_eval_set(4, 1, 9, &cfg(), "cap: ").unwrap();
        let path = write_demonstrations(dir.path(), &demos, "pool").unwrap();
        let back = load_demonstrations(&path).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in demos.iter().zip(back.iter()) {
            assert_eq!(a.digest(), b.digest());
        }
    }

    #[test]
    fn record_without_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        fs::write(
            &path,
            r#"{"image_path": "x.pgm", "instruction": "cap: "}"#,
        )
        .unwrap();
        assert!(matches!(
            load_demonstrations(&path),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inconsistent_k_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        fs::write(
            &path,
            r#"{"k": 2, "images": ["a.pgm"], "texts": ["t"], "remaining_text": "r"}"#,
        )
        .unwrap();
        assert!(matches!(
            read_training_corpus(&path),
            Err(Error::Corruption(_))
        ));
    }
}
