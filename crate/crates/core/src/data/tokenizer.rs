//! Byte-level tokenizer: every UTF-8 byte is its own token, followed by
//! three special tokens.

use std::ops::Deref;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Token ids, all below [`VOCAB_SIZE`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::TokenRange {
                id,
                vocab: VOCAB_SIZE,
            });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(text.bytes().map(u32::from).collect())
    }

    /// Decodes byte tokens, skipping specials. Byte runs that are not valid
    /// UTF-8 (possible for sampled output) decode lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                BOS | EOS | PAD => {}
                _ => {
                    return Err(Error::TokenRange {
                        id,
                        vocab: VOCAB_SIZE,
                    })
                }
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_is_identity() {
        assert_eq!(ByteTokenizer.encode("A").ids(), &[65]);
    }

    #[test]
    fn multibyte_characters_split_into_utf8_bytes() {
        let want: Vec<u32> = "é".as_bytes().iter().map(|&b| b as u32).collect();
        assert_eq!(want, vec![195, 169]);
        assert_eq!(ByteTokenizer.encode("é").ids(), want.as_slice());
    }

    #[test]
    fn decode_rejects_out_of_range() {
        assert!(matches!(
            ByteTokenizer.decode(&[65, 259]),
            Err(Error::TokenRange { id: 259, .. })
        ));
        assert!(TokenSequence::new(vec![1000]).is_err());
    }

    #[test]
    fn specials_are_skipped_on_decode() {
        assert_eq!(
            ByteTokenizer.decode(&[BOS, 104, 105, EOS, PAD]).unwrap(),
            "hi"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(s in any::<String>()) {
            let t = ByteTokenizer;
            prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
        }
    }
}
