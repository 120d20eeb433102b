//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes plain values and returns a JSON string, either the
//! result object or `{"error": "..."}`, so the same functions run (and are
//! tested) natively.

use std::collections::BTreeSet;

use serde::Serialize;
use tabmlm::cost_meter::{carbon_with_factor, FlopsReport};
use tabmlm::model::{ModelConfig, POSITION_OFFSET};
use tabmlm::serializer::serialize_row;
use tabmlm::tabular::{quantize_code, code_to_value};
use tabmlm::tokenizer::{
    build_vocab, decode, encode, pre_tokenize, value_id, Vocabulary, CLS_ID, MASK_ID, SEP_ID, UNK_ID,
};
use wasm_bindgen::prelude::*;

thread_local! {
    static VOCAB: Vocabulary = build_vocab();
}

fn respond<T: Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Serialize)]
struct Token {
    surface: String,
    id: u32,
    kind: &'static str,
}

#[derive(Serialize)]
struct Tokenized {
    text: String,
    tokens: Vec<Token>,
    unknown: usize,
    decoded: String,
}

fn kind(id: u32) -> &'static str {
    match id {
        0..=3 => "special",
        4..=7 => "word",
        8..=102 => "integer",
        103 => "mask",
        _ => "value",
    }
}

fn tokenize_impl(text: &str) -> Result<Tokenized, String> {
    VOCAB.with(|vocab| {
        let ids = encode(text, vocab);
        let surfaces = pre_tokenize(text);
        let mut tokens = vec![Token { surface: "[CLS]".into(), id: CLS_ID, kind: "special" }];
        for (s, &id) in surfaces.iter().zip(&ids) {
            tokens.push(Token { surface: s.to_string(), id, kind: kind(id) });
        }
        tokens.push(Token { surface: "[SEP]".into(), id: SEP_ID, kind: "special" });
        Ok(Tokenized {
            text: text.to_string(),
            unknown: ids.iter().filter(|&&id| id == UNK_ID).count(),
            decoded: decode(&ids, vocab).map_err(|e| e.to_string())?,
            tokens,
        })
    })
}

/// Tokenizes free text with the fixed vocabulary.
#[wasm_bindgen]
pub fn tokenize(text: &str) -> String {
    respond(tokenize_impl(text))
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|c| !c.trim().is_empty())
        .map(|c| c.trim().parse::<f64>().map_err(|_| format!("not a number: {c:?}")))
        .collect()
}

fn serialize_impl(values: &str, masked: &str) -> Result<Tokenized, String> {
    let raw = parse_list(values)?;
    if raw.is_empty() {
        return Err("enter at least one value".into());
    }
    let row = raw
        .iter()
        .map(|&x| quantize_code(x).map(code_to_value).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mask = BTreeSet::new();
    for m in masked.split(',').filter(|m| !m.trim().is_empty()) {
        let j: usize = m.trim().parse().map_err(|_| format!("bad column index {m:?}"))?;
        if j >= row.len() {
            return Err(format!("column {j} out of range"));
        }
        mask.insert(j);
    }
    let text = serialize_row(&row, &mask).map_err(|e| e.to_string())?.text;
    tokenize_impl(&text)
}

/// Serializes normalized values in `[0, 1]` (comma separated) into row
/// text, masking the listed column indices, and tokenizes the result.
#[wasm_bindgen]
pub fn serialize_and_tokenize(values: &str, masked: &str) -> String {
    respond(serialize_impl(values, masked))
}

#[derive(Serialize)]
struct Quantized {
    raw: f64,
    normalized: f64,
    code: u16,
    token: String,
    token_id: u32,
    quantized: f64,
    restored: f64,
    error: f64,
    max_error: f64,
    clamped: bool,
}

fn quantize_impl(x: f64, min: f64, max: f64) -> Result<Quantized, String> {
    if !(x.is_finite() && min.is_finite() && max.is_finite()) {
        return Err("inputs must be finite".into());
    }
    if !(max > min) {
        return Err("max must exceed min".into());
    }
    let t = (x - min) / (max - min);
    let clamped = !(0.0..=1.0).contains(&t);
    let code = quantize_code(t.clamp(0.0, 1.0)).map_err(|e| e.to_string())?;
    let q = code_to_value(code);
    let restored = q * (max - min) + min;
    Ok(Quantized {
        raw: x,
        normalized: t,
        code,
        token: format!("{code:04}"),
        token_id: value_id(code),
        quantized: q,
        restored,
        error: (restored - x).abs(),
        max_error: 0.5e-4 * (max - min),
        clamped,
    })
}

/// Walks one source value through normalization, grid rounding, its value
/// token, and back.
#[wasm_bindgen]
pub fn quantize_value(x: f64, min: f64, max: f64) -> String {
    respond(quantize_impl(x, min, max))
}

#[derive(Serialize)]
struct Cost {
    params_total: u64,
    params_embeddings: u64,
    params_encoder: u64,
    params_head: u64,
    macs_forward: u64,
    flops_forward: u64,
    macs_train: u64,
    flops_train: u64,
    report: String,
}

#[allow(clippy::too_many_arguments)]
fn cost_impl(
    vocab: usize,
    hidden: usize,
    heads: usize,
    layers: usize,
    ffn: usize,
    max_seq: usize,
    seq_len: usize,
    batch: usize,
) -> Result<Cost, String> {
    let cfg = ModelConfig {
        vocab_size: vocab,
        max_positions: max_seq + POSITION_OFFSET,
        hidden,
        heads,
        layers,
        ffn_dim: ffn,
        ..ModelConfig::paper()
    };
    let r = FlopsReport::new(&cfg, seq_len, batch).map_err(|e| e.to_string())?;
    Ok(Cost {
        params_total: r.params.total,
        params_embeddings: r.params.embeddings,
        params_encoder: r.params.encoder,
        params_head: r.params.head,
        macs_forward: r.macs.forward,
        flops_forward: r.macs.forward_flops(),
        macs_train: r.macs.train_macs(),
        flops_train: r.macs.train_flops(),
        report: r.to_text(false),
    })
}

/// Parameter and multiply-accumulate counts for an encoder shape.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn model_cost(
    vocab: usize,
    hidden: usize,
    heads: usize,
    layers: usize,
    ffn: usize,
    max_seq: usize,
    seq_len: usize,
    batch: usize,
) -> String {
    respond(cost_impl(vocab, hidden, heads, layers, ffn, max_seq, seq_len, batch))
}

/// Preset dimensions as JSON: `paper`, `desk` or `tiny`.
#[wasm_bindgen]
pub fn preset(name: &str) -> String {
    respond(
        ModelConfig::preset(name)
            .map(|c| {
                serde_json::json!({
                    "vocab": c.vocab_size,
                    "hidden": c.hidden,
                    "heads": c.heads,
                    "layers": c.layers,
                    "ffn": c.ffn_dim,
                    "max_seq": c.max_seq_len(),
                })
            })
            .ok_or_else(|| format!("unknown preset {name:?}")),
    )
}

/// Emissions in grams and the equivalent car distance.
#[wasm_bindgen]
pub fn carbon(kwh: f64, intensity: f64, multiplier: f64, g_per_km: f64) -> String {
    respond(
        carbon_with_factor(kwh, intensity, multiplier, g_per_km)
            .map(|r| {
                serde_json::json!({
                    "grams": r.grams,
                    "car_km": r.car_km,
                    "text": r.to_text(),
                })
            })
            .map_err(|e| e.to_string()),
    )
}

/// The `[MASK]` token id, exposed for the page legend.
#[wasm_bindgen]
pub fn mask_id() -> u32 {
    MASK_ID
}
