//! Closed-form parameter and multiply-accumulate counts, and carbon
//! arithmetic.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub embeddings: u64,
    pub per_layer: u64,
    pub encoder: u64,
    pub head: u64,
    pub total: u64,
}

/// Trainable parameters; the decoder matrix is tied to the token embedding
/// so the head contributes only its own dense, norm and output bias.
pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let [v, p, t, h, f, l] = [
        config.vocab_size,
        config.max_positions,
        config.type_vocab,
        config.hidden,
        config.ffn_dim,
        config.layers,
    ]
    .map(|x| x as u64);
    let embeddings = v * h + p * h + t * h;
    let attention = 4 * (h * h + h);
    let ffn = (h * f + f) + (f * h + h);
    let norms = 2 * (2 * h);
    let per_layer = attention + ffn + norms;
    let encoder = l * per_layer;
    let head = (h * h + h) + 2 * h + v;
    ParamCounts {
        embeddings,
        per_layer,
        encoder,
        head,
        total: embeddings + encoder + head,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCounts {
    pub seq_len: u64,
    pub batch: u64,
    pub projections: u64,
    pub ffn: u64,
    pub attention: u64,
    pub per_layer: u64,
    pub encoder: u64,
    pub head: u64,
    pub forward: u64,
}

impl MacCounts {
    pub fn forward_flops(&self) -> u64 {
        2 * self.forward
    }

    /// Backward modeled as twice the forward cost.
    pub fn train_macs(&self) -> u64 {
        3 * self.forward
    }

    pub fn train_flops(&self) -> u64 {
        2 * self.train_macs()
    }
}

/// Multiply-accumulates of one forward pass over `batch` sequences of
/// `seq_len` tokens, with the MLM head applied at every position.
pub fn count_macs(config: &ModelConfig, seq_len: usize, batch: usize) -> Result<MacCounts> {
    if seq_len > config.max_seq_len() {
        return Err(Error::SequenceTooLong {
            body: seq_len.saturating_sub(2),
            max_len: config.max_seq_len(),
        });
    }
    let [s, b, h, f, v, l] = [seq_len, batch, config.hidden, config.ffn_dim, config.vocab_size, config.layers]
        .map(|x| x as u64);
    let projections = 4 * s * h * h;
    let ffn = 2 * s * h * f;
    let attention = 2 * s * s * h;
    let per_layer = projections + ffn + attention;
    let encoder = l * per_layer;
    let head = h * h * s + v * h * s;
    Ok(MacCounts {
        seq_len: s,
        batch: b,
        projections: b * projections,
        ffn: b * ffn,
        attention: b * attention,
        per_layer: b * per_layer,
        encoder: b * encoder,
        head: b * head,
        forward: b * (encoder + head),
    })
}

/// Rough count of non-MAC floating-point work in a forward pass: 3 per
/// softmax input, 5 per layer-norm input, 8 per GELU input.
pub fn other_ops_estimate(config: &ModelConfig, seq_len: usize, batch: usize) -> u64 {
    let [s, b, h, f, v, a, l] = [
        seq_len,
        batch,
        config.hidden,
        config.ffn_dim,
        config.vocab_size,
        config.heads,
        config.layers,
    ]
    .map(|x| x as u64);
    let per_layer = 3 * a * s * s + 5 * 2 * s * h + 8 * s * f;
    let head = 8 * s * h + 5 * s * h + 3 * s * v;
    b * (l * per_layer + head)
}

/// Figures stated in the published write-up, kept for side-by-side display.
pub mod published {
    pub const PARAMS: f64 = 1.16e6;
    pub const FORWARD_MACS: f64 = 201e9;
    pub const FORWARD_FLOPS_STATED: &str = "402 TFLOPs";
    pub const TRAIN_MACS: f64 = 603e9;
    pub const TRAIN_FLOPS_STATED: &str = "1.2 TFLOPs";
}

pub const DISCREPANCY_NOTE: &str = "\
note: the published figures are not mutually consistent. A 768-hidden, 6-layer \
encoder with a 51,100-token vocabulary has tens of millions of parameters, not \
1.16 million, and 2 x 201 billion MACs is 402 GFLOPs, not TFLOPs. The \
train/forward ratio of 3 (603/201) is reproduced exactly. Counts above come \
from the closed forms, which are checked against tensor enumeration and an \
instrumented forward pass.";

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub config: ModelConfig,
    pub params: ParamCounts,
    pub macs: MacCounts,
    pub other_ops: u64,
}

impl FlopsReport {
    pub fn new(config: &ModelConfig, seq_len: usize, batch: usize) -> Result<Self> {
        config.validate()?;
        Ok(FlopsReport {
            config: config.clone(),
            params: count_params(config),
            macs: count_macs(config, seq_len, batch)?,
            other_ops: other_ops_estimate(config, seq_len, batch),
        })
    }

    pub fn to_kv(&self) -> Vec<(&'static str, u64)> {
        let (p, m) = (&self.params, &self.macs);
        vec![
            ("seq_len", m.seq_len),
            ("batch", m.batch),
            ("params_embeddings", p.embeddings),
            ("params_per_layer", p.per_layer),
            ("params_encoder", p.encoder),
            ("params_head", p.head),
            ("params_total", p.total),
            ("params_trainable", p.total),
            ("macs_projections", m.projections),
            ("macs_ffn", m.ffn),
            ("macs_attention", m.attention),
            ("macs_encoder", m.encoder),
            ("macs_head", m.head),
            ("macs_forward", m.forward),
            ("flops_forward", m.forward_flops()),
            ("macs_forward_backward", m.train_macs()),
            ("flops_forward_backward", m.train_flops()),
            ("other_ops_estimate", self.other_ops),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in self.to_kv() {
            writeln!(s, "{k},{v}").unwrap();
        }
        s
    }

    /// Human-readable report. With `compare`, the published figures are
    /// printed next to the computed ones along with [`DISCREPANCY_NOTE`].
    pub fn to_text(&self, compare: bool) -> String {
        let (p, m) = (&self.params, &self.macs);
        let c = &self.config;
        let mut s = String::new();
        writeln!(
            s,
            "model: V={} P={} H={} A={} L={} F={}; seq_len={} batch={}",
            c.vocab_size, c.max_positions, c.hidden, c.heads, c.layers, c.ffn_dim, m.seq_len, m.batch
        )
        .unwrap();
        let row = |s: &mut String, label: &str, value: u64, published: Option<String>| {
            let v = format!("{value} ({})", human(value as f64));
            match published {
                Some(pv) if compare => writeln!(s, "  {label:<26}{v:<28}published: {pv}").unwrap(),
                _ => writeln!(s, "  {label:<26}{v}").unwrap(),
            }
        };
        writeln!(s, "parameters").unwrap();
        row(&mut s, "embeddings", p.embeddings, None);
        row(&mut s, "encoder layers", p.encoder, None);
        row(&mut s, "mlm head (tied decoder)", p.head, None);
        row(&mut s, "total trainable", p.total, Some(human(published::PARAMS)));
        writeln!(s, "multiply-accumulates").unwrap();
        row(&mut s, "projections", m.projections, None);
        row(&mut s, "feed-forward", m.ffn, None);
        row(&mut s, "attention", m.attention, None);
        row(&mut s, "mlm head", m.head, None);
        row(&mut s, "forward MACs", m.forward, Some(human(published::FORWARD_MACS)));
        row(&mut s, "forward FLOPs", m.forward_flops(), Some(published::FORWARD_FLOPS_STATED.into()));
        row(&mut s, "fwd+bwd MACs", m.train_macs(), Some(human(published::TRAIN_MACS)));
        row(&mut s, "fwd+bwd FLOPs", m.train_flops(), Some(published::TRAIN_FLOPS_STATED.into()));
        row(&mut s, "other ops (estimate)", self.other_ops, None);
        if compare {
            writeln!(s, "{DISCREPANCY_NOTE}").unwrap();
        }
        s
    }
}

fn human(x: f64) -> String {
    const UNITS: [(f64, &str); 4] = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "k")];
    for (scale, unit) in UNITS {
        if x >= scale {
            return format!("{:.3}{unit}", x / scale);
        }
    }
    format!("{x}")
}

/// Default grid carbon intensity, g CO2 per kWh.
pub const DEFAULT_INTENSITY: f64 = 541.33;
/// Grams of CO2 per kilometre driven by an average car.
pub const DEFAULT_G_PER_KM: f64 = 107.512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarbonReport {
    pub energy_kwh: f64,
    pub intensity_g_per_kwh: f64,
    pub multiplier: f64,
    pub grams: f64,
    pub g_per_km: f64,
    pub car_km: f64,
}

pub fn carbon(energy_kwh: f64, intensity_g_per_kwh: f64, multiplier: f64) -> Result<CarbonReport> {
    carbon_with_factor(energy_kwh, intensity_g_per_kwh, multiplier, DEFAULT_G_PER_KM)
}

pub fn carbon_with_factor(
    energy_kwh: f64,
    intensity_g_per_kwh: f64,
    multiplier: f64,
    g_per_km: f64,
) -> Result<CarbonReport> {
    for (name, v) in [
        ("energy", energy_kwh),
        ("intensity", intensity_g_per_kwh),
        ("multiplier", multiplier),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::NegativeInput(name));
        }
    }
    if !(g_per_km > 0.0) || !g_per_km.is_finite() {
        return Err(Error::NegativeInput("g_per_km"));
    }
    let grams = energy_kwh * intensity_g_per_kwh * multiplier;
    Ok(CarbonReport {
        energy_kwh,
        intensity_g_per_kwh,
        multiplier,
        grams,
        g_per_km,
        car_km: grams / g_per_km,
    })
}

impl CarbonReport {
    pub fn to_kv(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("energy_kwh", self.energy_kwh),
            ("intensity_g_per_kwh", self.intensity_g_per_kwh),
            ("multiplier", self.multiplier),
            ("emissions_g", self.grams),
            ("g_per_km", self.g_per_km),
            ("car_km", self.car_km),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in self.to_kv() {
            writeln!(s, "{k},{v}").unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} kWh x {} g/kWh x {} = {:.2} g CO2, about {:.2} km by car at {} g/km\n",
            self.energy_kwh, self.intensity_g_per_kwh, self.multiplier, self.grams, self.car_km, self.g_per_km
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_forward_macs, init_params, Parameters};
    use crate::tokenizer::make_triple;
    use proptest::prelude::*;

    fn enumerate_params(cfg: &ModelConfig) -> u64 {
        Parameters::zeros(cfg)
            .named_tensors()
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum()
    }

    fn instrumented_macs(cfg: &ModelConfig, seq_len: usize, batch: usize) -> u64 {
        let params = init_params(cfg, 0).unwrap();
        let body: Vec<u32> = (0..seq_len - 2).map(|i| (4 + i % (cfg.vocab_size - 4)) as u32).collect();
        let triples: Vec<_> = (0..batch).map(|_| make_triple(&body, seq_len).unwrap()).collect();
        count_forward_macs(&params, &triples).unwrap()
    }

    fn micro() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            max_positions: 16,
            hidden: 8,
            heads: 1,
            layers: 1,
            ffn_dim: 32,
            type_vocab: 1,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    #[test]
    fn dense_layer_count() {
        let cfg = ModelConfig { hidden: 3, ffn_dim: 2, ..micro() };
        let p = count_params(&cfg);
        // The first FFN projection is a 3 -> 2 dense layer: 6 weights + 2 biases.
        let ffn_in = 3 * 2 + 2;
        assert_eq!(ffn_in, 8);
        assert_eq!(p.per_layer, 4 * (9 + 3) + ffn_in + (2 * 3 + 3) + 12);
    }

    #[test]
    fn micro_params_match_enumeration() {
        assert_eq!(count_params(&micro()).total, enumerate_params(&micro()));
    }

    #[test]
    fn full_size_params_match_enumeration() {
        let cfg = ModelConfig::paper();
        let p = count_params(&cfg);
        assert_eq!(p.total, enumerate_params(&cfg));
        assert_eq!(p.total, 82_810_780);
    }

    #[test]
    fn micro_macs_match_instrumentation() {
        for (s, b) in [(12, 1), (14, 3), (3, 2)] {
            assert_eq!(count_macs(&micro(), s, b).unwrap().forward, instrumented_macs(&micro(), s, b));
        }
    }

    #[test]
    fn doubling_layers_doubles_encoder_term() {
        let a = count_macs(&ModelConfig::desk(), 64, 2).unwrap();
        let b = count_macs(&ModelConfig { layers: 4, ..ModelConfig::desk() }, 64, 2).unwrap();
        assert_eq!(b.encoder, 2 * a.encoder);
        assert_eq!(b.head, a.head);
    }

    #[test]
    fn train_is_three_forward() {
        let m = count_macs(&ModelConfig::paper(), 512, 64).unwrap();
        assert_eq!(m.train_macs(), 3 * m.forward);
        assert_eq!(m.forward_flops(), 2 * m.forward);
        assert_eq!(published::TRAIN_MACS / published::FORWARD_MACS, 3.0);
    }

    #[test]
    fn rejects_overlong_sequence() {
        assert!(count_macs(&micro(), 15, 1).is_err());
        assert!(count_macs(&micro(), 14, 1).is_ok());
    }

    #[test]
    fn report_totals_and_text() {
        let r = FlopsReport::new(&ModelConfig::paper(), 512, 1).unwrap();
        assert_eq!(r.params.total, r.params.embeddings + r.params.encoder + r.params.head);
        assert_eq!(r.macs.forward, r.macs.encoder + r.macs.head);
        let text = r.to_text(true);
        assert!(text.contains("published: 1.160M"));
        assert!(text.contains("402 TFLOPs"));
        assert!(text.contains("not mutually consistent"));
        assert!(!r.to_text(false).contains("published"));
        assert!(r.to_csv().contains("params_total,82810780\n"));
    }

    #[test]
    fn carbon_figures() {
        let r = carbon(6.17, DEFAULT_INTENSITY, 1.0).unwrap();
        assert!((r.grams - 3340.0061).abs() < 1e-9);
        assert!((r.grams - 3339.37).abs() / 3339.37 < 5e-4);
        assert!((r.car_km - 31.06).abs() / 31.06 < 1e-3);
        assert_eq!(carbon(0.075, 50.0, 1.0).unwrap().grams, 3.75);
        let z = carbon(0.0, 123.0, 1.0).unwrap();
        assert_eq!((z.grams, z.car_km), (0.0, 0.0));
    }

    #[test]
    fn carbon_rejects_negative() {
        assert!(matches!(carbon(-1.0, 1.0, 1.0), Err(Error::NegativeInput("energy"))));
        assert!(matches!(carbon(1.0, -1.0, 1.0), Err(Error::NegativeInput("intensity"))));
        assert!(matches!(carbon(1.0, 1.0, -0.5), Err(Error::NegativeInput("multiplier"))));
        assert!(carbon(f64::NAN, 1.0, 1.0).is_err());
        assert!(carbon_with_factor(1.0, 1.0, 1.0, 0.0).is_err());
    }

    fn small_config() -> impl Strategy<Value = (ModelConfig, usize, usize)> {
        (1usize..4, 1usize..5, 1usize..3, 1usize..24, 5usize..40, 3usize..20, 1usize..3)
            .prop_flat_map(|(heads, dh, layers, ffn, vocab, pos, types)| {
                let cfg = ModelConfig {
                    vocab_size: vocab,
                    max_positions: pos + 2,
                    hidden: heads * dh,
                    heads,
                    layers,
                    ffn_dim: ffn,
                    type_vocab: types,
                    dropout: 0.0,
                    layer_norm_eps: 1e-5,
                };
                (Just(cfg), 2usize..=pos, 1usize..3)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn closed_forms_match_oracles((cfg, s, b) in small_config()) {
            prop_assert_eq!(count_params(&cfg).total, enumerate_params(&cfg));
            let m = count_macs(&cfg, s, b).unwrap();
            prop_assert_eq!(m.forward, instrumented_macs(&cfg, s, b));
            prop_assert_eq!(m.train_macs(), 3 * m.forward);
        }

        #[test]
        fn carbon_is_linear_in_energy(e in 0.0f64..100.0, i in 0.0f64..1000.0, a in 0.0f64..10.0) {
            let one = carbon(e, i, 1.0).unwrap().grams;
            let scaled = carbon(a * e, i, 1.0).unwrap().grams;
            prop_assert!((scaled - a * one).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }
    }
}
