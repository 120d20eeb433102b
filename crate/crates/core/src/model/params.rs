use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Weights are stored input-major: a dense layer computes `x · W + b`
/// with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

/// MLM head. The decoder matrix is the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_dense: Array2<f64>,
    pub b_dense: Array1<f64>,
    pub ln_g: Array1<f64>,
    pub ln_b: Array1<f64>,
    pub out_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub type_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn m(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

fn v(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}

impl LayerParams {
    fn zeros(h: usize, f: usize) -> Self {
        LayerParams {
            w_q: m(h, h),
            b_q: v(h),
            w_k: m(h, h),
            b_k: v(h),
            w_v: m(h, h),
            b_v: v(h),
            w_o: m(h, h),
            b_o: v(h),
            ln1_g: v(h),
            ln1_b: v(h),
            w_ff1: m(h, f),
            b_ff1: v(f),
            w_ff2: m(f, h),
            b_ff2: v(h),
            ln2_g: v(h),
            ln2_b: v(h),
        }
    }
}

macro_rules! layer_fields {
    ($mac:ident, $l:expr, $prefix:expr, $out:expr) => {
        $mac!($out, $prefix, "attention.query.weight", $l.w_q);
        $mac!($out, $prefix, "attention.query.bias", $l.b_q);
        $mac!($out, $prefix, "attention.key.weight", $l.w_k);
        $mac!($out, $prefix, "attention.key.bias", $l.b_k);
        $mac!($out, $prefix, "attention.value.weight", $l.w_v);
        $mac!($out, $prefix, "attention.value.bias", $l.b_v);
        $mac!($out, $prefix, "attention.output.weight", $l.w_o);
        $mac!($out, $prefix, "attention.output.bias", $l.b_o);
        $mac!($out, $prefix, "attention.layer_norm.gain", $l.ln1_g);
        $mac!($out, $prefix, "attention.layer_norm.bias", $l.ln1_b);
        $mac!($out, $prefix, "ffn.intermediate.weight", $l.w_ff1);
        $mac!($out, $prefix, "ffn.intermediate.bias", $l.b_ff1);
        $mac!($out, $prefix, "ffn.output.weight", $l.w_ff2);
        $mac!($out, $prefix, "ffn.output.bias", $l.b_ff2);
        $mac!($out, $prefix, "ffn.layer_norm.gain", $l.ln2_g);
        $mac!($out, $prefix, "ffn.layer_norm.bias", $l.ln2_b);
    };
}

macro_rules! push_ref {
    ($out:expr, $prefix:expr, $name:expr, $t:expr) => {
        $out.push(NamedTensor {
            name: format!("{}{}", $prefix, $name),
            shape: $t.shape().to_vec(),
            data: $t.as_slice().expect("standard layout"),
        })
    };
}

macro_rules! push_mut {
    ($out:expr, $prefix:expr, $name:expr, $t:expr) => {
        $out.push((
            format!("{}{}", $prefix, $name),
            $t.as_slice_mut().expect("standard layout"),
        ))
    };
}

impl Parameters {
    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, f) = (config.hidden, config.ffn_dim);
        Parameters {
            config: config.clone(),
            tok_emb: m(config.vocab_size, h),
            pos_emb: m(config.max_positions, h),
            type_emb: m(config.type_vocab, h),
            layers: (0..config.layers).map(|_| LayerParams::zeros(h, f)).collect(),
            head: HeadParams {
                w_dense: m(h, h),
                b_dense: v(h),
                ln_g: v(h),
                ln_b: v(h),
                out_bias: v(config.vocab_size),
            },
        }
    }

    /// Every tensor in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        push_ref!(out, "", "embeddings.token", self.tok_emb);
        push_ref!(out, "", "embeddings.position", self.pos_emb);
        push_ref!(out, "", "embeddings.type", self.type_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let prefix = format!("layer.{i}.");
            layer_fields!(push_ref, l, prefix, out);
        }
        push_ref!(out, "", "mlm_head.dense.weight", self.head.w_dense);
        push_ref!(out, "", "mlm_head.dense.bias", self.head.b_dense);
        push_ref!(out, "", "mlm_head.layer_norm.gain", self.head.ln_g);
        push_ref!(out, "", "mlm_head.layer_norm.bias", self.head.ln_b);
        push_ref!(out, "", "mlm_head.decoder.bias", self.head.out_bias);
        out
    }

    /// Same order as [`Parameters::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        push_mut!(out, "", "embeddings.token", self.tok_emb);
        push_mut!(out, "", "embeddings.position", self.pos_emb);
        push_mut!(out, "", "embeddings.type", self.type_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer.{i}.");
            layer_fields!(push_mut, l, prefix, out);
        }
        push_mut!(out, "", "mlm_head.dense.weight", self.head.w_dense);
        push_mut!(out, "", "mlm_head.dense.bias", self.head.b_dense);
        push_mut!(out, "", "mlm_head.layer_norm.gain", self.head.ln_g);
        push_mut!(out, "", "mlm_head.layer_norm.bias", self.head.ln_b);
        push_mut!(out, "", "mlm_head.decoder.bias", self.head.out_bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Replaces tensor contents by name; shapes must match exactly.
    pub fn load_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let expected = self
            .named_tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| t.shape)
            .ok_or_else(|| Error::Shape(format!("unknown tensor {name}")))?;
        if expected != shape {
            return Err(Error::Shape(format!(
                "{name}: expected {expected:?}, got {shape:?}"
            )));
        }
        for (n, slot) in self.named_tensors_mut() {
            if n == name {
                slot.copy_from_slice(data);
            }
        }
        Ok(())
    }

    /// The tied decoder matrix, `[vocab, hidden]`.
    pub fn decoder(&self) -> &Array2<f64> {
        &self.tok_emb
    }
}

fn is_normal_init(name: &str) -> bool {
    name.ends_with(".weight") || name.starts_with("embeddings.")
}

/// Weights and embeddings ~ Normal(0, 0.02); biases 0; layer-norm gains 1.
/// Tensors are filled in canonical order from one ChaCha8 stream.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut params = Parameters::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    for (name, data) in params.named_tensors_mut() {
        if name.ends_with(".gain") {
            data.fill(1.0);
        } else if is_normal_init(&name) {
            for x in data.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}
