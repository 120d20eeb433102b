//! Canonical sentence form of a normalized row:
//! `column 0: 0.1230, column 1: 0.4321`.
//!
//! The grammar is written out in `docs/row-grammar.ebnf`.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tabular::value_to_code;

pub const COLUMN_WORD: &str = "column";
pub const MASK_SURFACE: &str = "[MASK]";
/// Column labels are single integer tokens `0 ..= 94`.
pub const MAX_COLUMNS: usize = 95;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedRow {
    pub text: String,
    /// Byte span of each column's fragment (the part after `0.`).
    pub value_slots: Vec<Range<usize>>,
    pub masked_columns: BTreeSet<usize>,
}

impl SerializedRow {
    pub fn fragment(&self, column: usize) -> &str {
        &self.text[self.value_slots[column].clone()]
    }
}

pub fn serialize_row(values: &[f64], masked: &BTreeSet<usize>) -> Result<SerializedRow> {
    if values.len() > MAX_COLUMNS {
        return Err(Error::ColumnOutOfRange {
            index: values.len() - 1,
            columns: MAX_COLUMNS,
        });
    }
    if let Some(&bad) = masked.iter().find(|&&c| c >= values.len()) {
        return Err(Error::ColumnOutOfRange {
            index: bad,
            columns: values.len(),
        });
    }
    let mut text = String::with_capacity(values.len() * 18);
    let mut value_slots = Vec::with_capacity(values.len());
    for (j, &v) in values.iter().enumerate() {
        if j > 0 {
            text.push_str(", ");
        }
        text.push_str(COLUMN_WORD);
        text.push(' ');
        text.push_str(&j.to_string());
        text.push_str(": 0.");
        let start = text.len();
        if masked.contains(&j) {
            text.push_str(MASK_SURFACE);
        } else {
            let code = value_to_code(v)?;
            text.push_str(&format!("{code:04}"));
        }
        value_slots.push(start..text.len());
    }
    Ok(SerializedRow {
        text,
        value_slots,
        masked_columns: masked.clone(),
    })
}

/// Serializes a row with missing cells rendered as masks.
pub fn serialize_partial(values: &[Option<f64>]) -> Result<SerializedRow> {
    let masked: BTreeSet<usize> = values
        .iter()
        .enumerate()
        .filter_map(|(j, v)| v.is_none().then_some(j))
        .collect();
    let dense: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
    serialize_row(&dense, &masked)
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Grammar {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.text[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.fail(format!("expected {lit:?}"))
        }
    }

    fn digits(&mut self) -> &'a str {
        let rest = &self.text[self.pos..];
        let n = rest.bytes().take_while(u8::is_ascii_digit).count();
        self.pos += n;
        &rest[..n]
    }
}

/// Inverse of [`serialize_row`] for rows without masks.
pub fn parse_row(text: &str, n_columns: usize) -> Result<Vec<f64>> {
    let mut cur = Cursor { text, pos: 0 };
    let mut values = Vec::with_capacity(n_columns);
    loop {
        let j = values.len();
        if j > 0 {
            cur.expect(", ")?;
        }
        cur.expect(COLUMN_WORD)?;
        cur.expect(" ")?;
        let label_at = cur.pos;
        let label = cur.digits();
        if label != j.to_string() {
            return Err(Error::Grammar {
                offset: label_at,
                message: format!("expected column label {j}, found {label:?}"),
            });
        }
        cur.expect(": 0.")?;
        let frag_at = cur.pos;
        let frag = cur.digits();
        if frag.len() != 4 {
            return Err(Error::Grammar {
                offset: frag_at,
                message: format!("value fragment must be 4 digits, found {frag:?}"),
            });
        }
        let code: u16 = frag.parse().expect("four ascii digits");
        values.push(code as f64 / 10_000.0);
        if cur.pos == text.len() {
            break;
        }
    }
    if values.len() != n_columns {
        return Err(Error::ColumnCountMismatch {
            expected: n_columns,
            found: values.len(),
        });
    }
    Ok(values)
}
