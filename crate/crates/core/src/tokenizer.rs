//! Byte-level tokenizer with a fixed 259-symbol vocabulary.

use alloc::vec::Vec;

pub const VOCAB_SIZE: usize = 259;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const DEFAULT_MAX_TOKENS: usize = 77;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unpadded positions (BOS through EOS).
    pub fn active(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m).count()
    }
}

/// `[BOS, bytes…]` truncated to `max_tokens − 1`, then `EOS`, then padding.
pub fn tokenize(prompt: &str, max_tokens: usize) -> TokenSequence {
    assert!(max_tokens >= 2, "max_tokens must leave room for BOS and EOS");
    let mut ids = Vec::with_capacity(max_tokens);
    ids.push(BOS);
    ids.extend(prompt.bytes().map(usize::from));
    ids.truncate(max_tokens - 1);
    ids.push(EOS);
    let active = ids.len();
    ids.resize(max_tokens, PAD);
    let attention_mask = (0..max_tokens).map(|i| i < active).collect();
    TokenSequence {
        ids,
        attention_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_prompt() {
        let t = tokenize("", 77);
        assert_eq!(t.len(), 77);
        assert_eq!(&t.ids[..3], &[BOS, EOS, PAD]);
        assert_eq!(&t.attention_mask[..3], &[true, true, false]);
        assert_eq!(t.active(), 2);
    }

    #[test]
    fn byte_values() {
        let t = tokenize("ab", 77);
        assert_eq!(&t.ids[..5], &[BOS, 97, 98, EOS, PAD]);
        assert!(t.ids[4..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn truncation() {
        let prompt: alloc::string::String = core::iter::repeat('x').take(200).collect();
        let t = tokenize(&prompt, 77);
        assert_eq!(t.len(), 77);
        assert_eq!(t.ids[76], EOS);
        assert_eq!(t.ids[0], BOS);
        assert!(t.attention_mask.iter().all(|m| *m));
        assert!(t.ids.iter().all(|&i| i < VOCAB_SIZE));
    }

    #[test]
    fn multibyte_utf8() {
        let t = tokenize("é", 6);
        assert_eq!(t.ids, vec![BOS, 0xC3, 0xA9, EOS, PAD, PAD]);
    }
}
