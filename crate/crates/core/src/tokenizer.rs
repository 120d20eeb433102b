//! Fixed vocabulary over the canonical row grammar.
//!
//! Layout (id: token):
//!
//! | ids          | tokens                              |
//! |--------------|-------------------------------------|
//! | 0..=3        | `[PAD]` `[UNK]` `[CLS]` `[SEP]`     |
//! | 4..=7        | `column` `:` `,` `.`                |
//! | 8..=102      | integers `0` ..= `94`               |
//! | 103          | `[MASK]`                            |
//! | 104..=10103  | four-digit fragments `0000`..`9999` |

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 103;
pub const FIRST_INTEGER_ID: u32 = 8;
pub const FIRST_VALUE_ID: u32 = 104;
pub const LAST_VALUE_ID: u32 = FIRST_VALUE_ID + 9_999;
pub const VOCAB_SIZE: usize = 10_104;
/// Sequence length used for the token triples.
pub const MAX_SEQ_LEN: usize = 512;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const STRUCTURAL: [&str; 4] = ["column", ":", ",", "."];

pub fn is_value_id(id: u32) -> bool {
    (FIRST_VALUE_ID..=LAST_VALUE_ID).contains(&id)
}

pub fn value_id(code: u16) -> u32 {
    FIRST_VALUE_ID + code as u32
}

/// Grid code carried by a four-digit token id.
pub fn value_code(id: u32) -> Option<u16> {
    is_value_id(id).then(|| (id - FIRST_VALUE_ID) as u16)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

pub fn build_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = Vec::with_capacity(VOCAB_SIZE);
    tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
    tokens.extend(STRUCTURAL.iter().map(|s| s.to_string()));
    tokens.extend((0..95).map(|i| i.to_string()));
    tokens.push("[MASK]".to_string());
    tokens.extend((0..10_000).map(|i| format!("{i:04}")));
    Vocabulary::from_tokens(tokens).expect("built-in layout is valid")
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        if tokens.get(MASK_ID as usize).map(String::as_str) != Some("[MASK]") {
            return Err(Error::InvalidVocab("[MASK] must have id 103".into()));
        }
        for (id, s) in SPECIALS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*s) {
                return Err(Error::InvalidVocab(format!("{s} must have id {id}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// UTF-8, one token per line, LF endings; line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut s = String::with_capacity(self.tokens.len() * 5);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the vocab file contents.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_contents().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_contents()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.contains('\r') {
            return Err(Error::InvalidVocab("CR line endings".into()));
        }
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| Error::InvalidVocab("missing trailing newline".into()))?;
        Self::from_tokens(body.split('\n').map(str::to_string).collect())
    }
}

/// Splits canonical text into surface tokens: alphanumeric runs,
/// bracketed specials like `[MASK]`, and single punctuation characters.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = text[i..].chars().next().expect("in bounds");
        let len = c.len_utf8();
        if c.is_whitespace() {
            i += len;
        } else if c == '[' {
            let end = text[i..].find(']').map(|e| i + e + 1).unwrap_or(i + len);
            out.push(&text[i..end]);
            i = end;
        } else if c.is_alphanumeric() {
            let end = text[i..]
                .char_indices()
                .find(|(_, ch)| !ch.is_alphanumeric())
                .map(|(e, _)| i + e)
                .unwrap_or(text.len());
            out.push(&text[i..end]);
            i = end;
        } else {
            out.push(&text[i..i + len]);
            i += len;
        }
    }
    out
}

pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    pre_tokenize(text)
        .into_iter()
        .map(|t| vocab.id_of(t).unwrap_or(UNK_ID))
        .collect()
}

/// Canonical detokenization. Framing and padding tokens are dropped.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    let mut glue_next = true;
    for &id in ids {
        let tok = vocab.token_of(id).ok_or(Error::InvalidTokenId(id))?;
        if matches!(id, PAD_ID | CLS_ID | SEP_ID) {
            continue;
        }
        let attach = matches!(tok, ":" | "," | ".");
        if !(glue_next || attach) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == ".";
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTriple {
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Original id at masked positions, `None` (ignored) elsewhere.
    pub labels: Vec<Option<u32>>,
}

impl TokenTriple {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Number of leading real (non-padding) positions.
    pub fn n_real(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Frames `ids` as `[CLS] ids [SEP]` and right-pads to `max_len`.
pub fn make_triple(ids: &[u32], max_len: usize) -> Result<TokenTriple> {
    if ids.len() + 2 > max_len {
        return Err(Error::SequenceTooLong {
            body: ids.len(),
            max_len,
        });
    }
    let mut input_ids = Vec::with_capacity(max_len);
    input_ids.push(CLS_ID);
    input_ids.extend_from_slice(ids);
    input_ids.push(SEP_ID);
    let real = input_ids.len();
    input_ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    Ok(TokenTriple {
        input_ids,
        attention_mask,
        labels: vec![None; max_len],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serializer::serialize_row;
    use crate::tabular::code_to_value;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn surfaces(ids: &[u32], v: &Vocabulary) -> Vec<String> {
        ids.iter().map(|&i| v.token_of(i).unwrap().to_string()).collect()
    }

    #[test]
    fn layout_pins() {
        let v = build_vocab();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.len(), 4 + 1 + 3 + 95 + 1 + 10_000);
        assert_eq!(v.id_of("[MASK]"), Some(103));
        assert_eq!(v.id_of("0000"), Some(104));
        assert_eq!(v.id_of("9999"), Some(10_103));
        assert_eq!(v.id_of("0"), Some(FIRST_INTEGER_ID));
        assert_eq!(v.id_of("94"), Some(102));
        assert_eq!(v.id_of("95"), None);
        assert_eq!(v.id_of("column"), Some(4));
    }

    #[test]
    fn vocab_is_a_bijection() {
        let v = build_vocab();
        for id in 0..v.len() as u32 {
            let t = v.token_of(id).unwrap();
            assert_eq!(v.id_of(t), Some(id));
        }
    }

    #[test]
    fn encodes_reference_token_sequence() {
        let v = build_vocab();
        let ids = encode("column 0: 0.2349", &v);
        assert_eq!(surfaces(&ids, &v), ["column", "0", ":", "0", ".", "2349"]);
        assert_eq!(encode("zebra", &v), vec![UNK_ID]);
    }

    #[test]
    fn decodes_reference_ids() {
        let v = build_vocab();
        let ids: Vec<u32> = ["column", "0", ":", "0", ".", "3788"]
            .iter()
            .map(|t| v.id_of(t).unwrap())
            .collect();
        assert_eq!(decode(&ids, &v).unwrap(), "column 0: 0.3788");
        let mut padded = vec![CLS_ID];
        padded.extend(&ids);
        padded.extend([SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(decode(&padded, &v).unwrap(), "column 0: 0.3788");
        assert!(matches!(decode(&[20_000], &v), Err(Error::InvalidTokenId(20_000))));
    }

    #[test]
    fn masked_text_encodes_mask_id() {
        let v = build_vocab();
        let ids = encode("column 0: 0.1230, column 1: 0.[MASK]", &v);
        assert_eq!(ids.len(), 13);
        assert_eq!(*ids.last().unwrap(), MASK_ID);
        assert_eq!(decode(&ids, &v).unwrap(), "column 0: 0.1230, column 1: 0.[MASK]");
    }

    #[test]
    fn triple_framing_and_boundaries() {
        let t = make_triple(&[4, 8, 5, 8, 7, 104], MAX_SEQ_LEN).unwrap();
        assert_eq!(t.len(), 512);
        assert_eq!(t.n_real(), 8);
        assert!(t.attention_mask[..8].iter().all(|&m| m == 1));
        assert!(t.attention_mask[8..].iter().all(|&m| m == 0));
        assert_eq!(t.input_ids[0], CLS_ID);
        assert_eq!(t.input_ids[7], SEP_ID);
        assert_eq!(t.n_labels(), 0);

        let full = make_triple(&vec![104; 510], MAX_SEQ_LEN).unwrap();
        assert_eq!(full.n_real(), 512);
        assert!(matches!(
            make_triple(&vec![104; 511], MAX_SEQ_LEN),
            Err(Error::SequenceTooLong { body: 511, .. })
        ));
    }

    #[test]
    fn vocab_file_round_trip_and_hash() {
        let v = build_vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(!bytes.contains(&b'\r'));
        let back = Vocabulary::read(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id_of("[MASK]"), Some(MASK_ID));
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.hash().len(), 64);

        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocabulary::read(&p).is_err());
    }

    proptest! {
        #[test]
        fn serialized_rows_round_trip(codes in proptest::collection::vec(0u16..10_000, 1..40)) {
            let v = build_vocab();
            let values: Vec<f64> = codes.iter().map(|&c| code_to_value(c)).collect();
            let text = serialize_row(&values, &BTreeSet::new()).unwrap().text;
            let ids = encode(&text, &v);
            prop_assert!(!ids.contains(&UNK_ID));
            prop_assert_eq!(ids.iter().filter(|&&i| is_value_id(i)).count(), codes.len());
            prop_assert_eq!(decode(&ids, &v).unwrap(), text);
        }
    }
}
