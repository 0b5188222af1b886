//! Byte-level tokenizer with a fixed block of special tokens.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
/// Predictor token; `k` predictor slots are `k` copies of this id.
pub const PRED: TokenId = 260;

pub const N_VOCAB: usize = 261;

pub fn is_special(id: TokenId) -> bool {
    (PAD..N_VOCAB as TokenId).contains(&id)
}

/// Encode UTF-8 text as one id per byte. Never emits a special id.
pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Decode ids back to text, dropping special tokens.
///
/// Byte sequences that are not valid UTF-8 (possible for model output) are
/// decoded lossily.
pub fn decode(ids: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= N_VOCAB {
            return Err(Error::Vocabulary(id));
        }
        if !is_special(id) {
            bytes.push(id as u8);
        }
    }
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

pub fn name(id: TokenId) -> Option<&'static str> {
    match id {
        PAD => Some("[PAD]"),
        BOS => Some("[BOS]"),
        EOS => Some("[EOS]"),
        SEP => Some("[SEP]"),
        PRED => Some("[PRED]"),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(encode("").is_empty());
        assert_eq!(encode("A"), vec![65]);
        assert_eq!(decode(&[65, 66]).unwrap(), "AB");
        assert_eq!(decode(&[BOS, 65, EOS]).unwrap(), "A");
        assert_eq!(decode(&[PRED, PAD, SEP]).unwrap(), "");
    }

    #[test]
    fn invalid_id_is_rejected() {
        assert!(matches!(decode(&[261]), Err(Error::Vocabulary(261))));
    }

    #[test]
    fn specials_are_dense_and_above_bytes() {
        let ids = [PAD, BOS, EOS, SEP, PRED];
        assert_eq!(ids, [256, 257, 258, 259, 260]);
        assert_eq!(N_VOCAB, 261);
        assert!(ids.iter().all(|&i| is_special(i) && name(i).is_some()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(s in any::<String>()) {
            let ids = encode(&s);
            prop_assert!(ids.iter().all(|&i| !is_special(i)));
            prop_assert_eq!(decode(&ids).unwrap(), s);
        }
    }
}
