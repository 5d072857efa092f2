//! Backbone weight file format.
//!
//! Little-endian binary: magic `FICL`, version, a config block, then one
//! descriptor per parameter group (name, shape, content digest) followed by
//! the raw f64 arrays in declared order. Digests are verified on load, so
//! truncation or bit flips surface as corruption errors rather than silently
//! wrong weights.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::backbone::{BackboneWeights, ModelConfig};
use crate::digest::{digest_parts, f64_bytes, Digest32};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FICL";
const VERSION: u32 = 1;

pub fn save_weights(w: &BackboneWeights, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_config(&mut out, &w.config);

    let groups = w.groups();
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in &groups {
        out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        out.extend_from_slice(&(g.shape.len() as u32).to_le_bytes());
        for &dim in &g.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        let digest = digest_parts(&[g.name.as_bytes(), &f64_bytes(g.data)]);
        out.extend_from_slice(digest.as_bytes());
    }
    for g in &groups {
        out.extend_from_slice(&f64_bytes(g.data));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_config(out: &mut Vec<u8>, c: &ModelConfig) {
    for v in [
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.vocab_size,
        c.visual_tokens_per_image,
        c.patch_size,
        c.max_seq,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: &str) -> Error {
        Error::Corruption(format!("{}: {detail}", self.path))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| self.corrupt("unexpected end of file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Load and verify a weight file. The embedded config is returned inside the
/// weights; use [`load_weights_expecting`] to enforce a particular config.
pub fn load_weights(path: &Path) -> Result<BackboneWeights> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        cur: Cursor::new(bytes.as_slice()),
        path: path.display().to_string(),
    };

    if r.bytes(4)? != MAGIC {
        return Err(r.corrupt("bad magic (not a weight file)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(&format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        d_model: r.u32()? as usize,
        n_layers: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        visual_tokens_per_image: r.u32()? as usize,
        patch_size: r.u32()? as usize,
        max_seq: r.u32()? as usize,
        seed: r.u64()?,
    };
    config.validate()?;

    let n_groups = r.u32()? as usize;
    let mut descriptors = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| r.corrupt("group name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let digest = Digest32(
            r.bytes(32)?
                .try_into()
                .expect("32 bytes"),
        );
        descriptors.push((name, shape, digest));
    }

    let mut arrays = Vec::with_capacity(n_groups);
    for (name, shape, digest) in &descriptors {
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let actual = digest_parts(&[name.as_bytes(), &f64_bytes(&data)]);
        if actual != *digest {
            return Err(r.corrupt(&format!("digest mismatch for group '{name}'")));
        }
        arrays.push((name.clone(), shape.clone(), data));
    }

    assemble(config, arrays).map_err(|e| match e {
        Error::Corruption(d) => Error::Corruption(format!("{}: {d}", path.display())),
        other => other,
    })
}

/// Load, verifying that the file's config matches `expected`.
pub fn load_weights_expecting(path: &Path, expected: &ModelConfig) -> Result<BackboneWeights> {
    let w = load_weights(path)?;
    if w.config != *expected {
        return Err(Error::Config(format!(
            "{}: weight file config does not match expected config (file d_model {}, expected {})",
            path.display(),
            w.config.d_model,
            expected.d_model
        )));
    }
    Ok(w)
}

/// Rebuild the typed weight struct from named groups, verifying that the
/// file's layout matches what this build declares.
fn assemble(
    config: ModelConfig,
    arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
) -> Result<BackboneWeights> {
    // Template gives the expected declared order and shapes.
    let template = BackboneWeights::init(config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = template
        .groups()
        .iter()
        .map(|g| (g.name.clone(), g.shape.clone()))
        .collect();
    if arrays.len() != expected.len() {
        return Err(Error::Corruption(format!(
            "{} groups in file, {} expected",
            arrays.len(),
            expected.len()
        )));
    }
    let mut w = template;
    for (slot, (name, shape, data)) in arrays.into_iter().enumerate() {
        let (exp_name, exp_shape) = &expected[slot];
        if &name != exp_name || &shape != exp_shape {
            return Err(Error::Corruption(format!(
                "group {slot} is '{name}' {shape:?}, expected '{exp_name}' {exp_shape:?}"
            )));
        }
        write_group(&mut w, slot, data);
    }
    Ok(w)
}

/// Store `data` into the group at declared-order position `slot`.
fn write_group(w: &mut BackboneWeights, slot: usize, data: Vec<f64>) {
    const PER_LAYER: usize = 16;
    let n_layers = w.config.n_layers;
    let layer_base = 2;
    let tail_base = layer_base + n_layers * PER_LAYER;
    match slot {
        0 => w.tok_embed = data,
        1 => w.pos_embed = data,
        s if s < tail_base => {
            let layer = (s - layer_base) / PER_LAYER;
            let l = &mut w.layers[layer];
            let fields: [&mut Vec<f64>; PER_LAYER] = [
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_up,
                &mut l.b_up,
                &mut l.w_down,
                &mut l.b_down,
            ];
            *fields[(s - layer_base) % PER_LAYER] = data;
        }
        s => {
            let v = &mut w.vision;
            let tail: [&mut Vec<f64>; 18] = [
                &mut w.final_ln_gain,
                &mut w.final_ln_bias,
                &mut w.lm_head,
                &mut v.patch_proj,
                &mut v.patch_bias,
                &mut v.queries,
                &mut v.in_ln_gain,
                &mut v.in_ln_bias,
                &mut v.wq,
                &mut v.bq,
                &mut v.wk,
                &mut v.bk,
                &mut v.wv,
                &mut v.bv,
                &mut v.wo,
                &mut v.bo,
                &mut v.out_ln_gain,
                &mut v.out_ln_bias,
            ];
            *tail[s - tail_base] = data;
        }
    }
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
            max_seq: 32,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ficl");
        let w = BackboneWeights::init(cfg()).unwrap();
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(w.digest(), back.digest());
        assert_eq!(w.config, back.config);
    }

    #[test]
    fn truncated_file_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ficl");
        let w = BackboneWeights::init(cfg()).unwrap();
        save_weights(&w, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn flipped_bit_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ficl");
        let w = BackboneWeights::init(cfg()).unwrap();
        save_weights(&w, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn mismatched_config_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ficl");
        let w = BackboneWeights::init(cfg()).unwrap();
        save_weights(&w, &path).unwrap();
        let mut other = cfg();
        other.d_model = 32;
        assert!(matches!(
            load_weights_expecting(&path, &other),
            Err(Error::Config(_))
        ));
    }
}
