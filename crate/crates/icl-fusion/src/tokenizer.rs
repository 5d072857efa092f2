//! Byte-level tokenizer.
//!
//! Ids 0..=2 are the specials (PAD, BOS, EOS); byte `b` maps to `b + 3`.
//! No external vocabulary asset, and `detokenize(tokenize(t)) == t` exactly
//! for any UTF-8 string.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First byte id; byte b encodes as b + BYTE_OFFSET.
pub const BYTE_OFFSET: usize = 3;
/// 256 bytes plus the three specials.
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET;

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize + BYTE_OFFSET).collect()
}

/// Lossy decoding for model output: specials and out-of-range ids are
/// skipped, invalid UTF-8 becomes replacement characters. A freely sampled
/// byte sequence need not be valid UTF-8.
pub fn detokenize_lossy(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| (BYTE_OFFSET..VOCAB_SIZE).contains(&id))
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Inverse of [`tokenize`]. Specials are skipped; ids beyond the vocabulary
/// or byte sequences that do not form UTF-8 are errors.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= VOCAB_SIZE {
            return Err(Error::Index {
                op: "detokenize",
                detail: format!("id {id} >= vocab {VOCAB_SIZE}"),
            });
        }
        if id >= BYTE_OFFSET {
            bytes.push((id - BYTE_OFFSET) as u8);
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::Index {
        op: "detokenize",
        detail: format!("invalid UTF-8: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_is_empty() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn byte_offset_arithmetic() {
        assert_eq!(tokenize("A"), vec![68]);
    }

    #[test]
    fn specials_are_skipped() {
        assert_eq!(detokenize(&[BOS, 68, EOS]).unwrap(), "A");
    }

    #[test]
    fn out_of_range_id_errors() {
        assert!(detokenize(&[VOCAB_SIZE]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(text in "\\PC{0,100}") {
            prop_assert_eq!(detokenize(&tokenize(&text)).unwrap(), text);
        }
    }
}
