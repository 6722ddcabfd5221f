//! Byte-level tokenizer: one token per UTF-8 byte plus three specials.

pub type TokenId = u32;

pub const UNK: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;

/// Smallest vocabulary that holds every byte and the specials.
pub const MIN_VOCAB: usize = 259;

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> String;

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        detokenize(tokens)
    }

    fn count(&self, text: &str) -> usize {
        text.len()
    }
}

pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`tokenize`] for byte tokens. Specials render as `<unk>`,
/// `<s>` and `</s>`; ids beyond the specials render as `<|id|>`. Invalid
/// UTF-8 byte runs are replaced lossily.
pub fn detokenize(tokens: &[TokenId]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &t in tokens {
        if t < 256 {
            bytes.push(t as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match t {
            UNK => out.push_str("<unk>"),
            BOS => out.push_str("<s>"),
            EOS => out.push_str("</s>"),
            other => out.push_str(&format!("<|{other}|>")),
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("3 days").len(), 6);
        assert_eq!(tokenize("é").len(), 2);
    }

    #[test]
    fn specials_render() {
        assert_eq!(detokenize(&[104, UNK, EOS, 300]), "h<unk></s><|300|>");
    }

    proptest! {
        #[test]
        fn round_trip(s in any::<String>()) {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
