//! Masked-language-model imputation for numeric tables.
//!
//! Rows are min-max normalized onto a 4-decimal grid, written as
//! `column k: 0.dddd` sentences, and tokenized so that every cell value is a
//! single four-digit token. A small transformer encoder trained to fill
//! `[MASK]`ed value tokens then imputes missing cells.

pub mod checkpoint;
pub mod cost_meter;
pub mod error;
pub mod imputer;
pub mod model;
pub mod serializer;
pub mod tabular;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
