//! Byte-level tokenizer: every byte is its own token, plus two control ids.

pub const SEPARATOR_ID: u16 = 256;
pub const PAD_ID: u16 = 257;
pub const VOCAB_SIZE: usize = 258;
pub const TOKENIZER_ID: &str = "byte-v1";

pub fn tokenize(text: &[u8]) -> Vec<u16> {
    text.iter().map(|&b| u16::from(b)).collect()
}

/// Inverse of [`tokenize`]. Control ids have no byte form and are dropped.
pub fn detokenize(tokens: &[u16]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        assert_eq!(detokenize(&[65, SEPARATOR_ID, 66, PAD_ID]), b"AB".to_vec());
    }

    proptest! {
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let ids = tokenize(&bytes);
            prop_assert!(ids.iter().all(|&t| t < 256));
            prop_assert_eq!(detokenize(&ids), bytes);
        }
    }
}
