//! Masked-value training loop.
//!
//! Every source of randomness is a ChaCha8 stream keyed by
//! `(seed, epoch, slot)`: slot 0 shuffles the epoch, slot `b + 1` drives the
//! masking and dropout of batch `b`. A run resumed from a checkpoint
//! therefore replays exactly the same draws as an uninterrupted one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grad, init_params, Gradients, ModelConfig, Parameters};
use crate::serializer::serialize_row;
use crate::tabular::{shuffle_in_place, Table};
use crate::tokenizer::{self, encode, is_value_id, make_triple, TokenTriple, Vocabulary, MASK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Only four-digit value tokens are masked.
    ValueTokens,
    /// Any real token except the `[CLS]`/`[SEP]` framing.
    AnyToken,
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolicy::ValueTokens => "value-tokens-only",
            MaskPolicy::AnyToken => "any-token",
        })
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value-tokens-only" | "value" => Ok(MaskPolicy::ValueTokens),
            "any-token" | "any" => Ok(MaskPolicy::AnyToken),
            other => Err(Error::InvalidTrainConfig(format!("unknown mask policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_rate: f64,
    pub seed: u64,
    pub mask_policy: MaskPolicy,
    /// Checkpoint after every this many epochs (and always after the last).
    pub checkpoint_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 1,
            mask_rate: 0.15,
            seed: 0,
            mask_policy: MaskPolicy::ValueTokens,
            checkpoint_interval: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad("mask_rate must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("learning_rate".into(), format!("{}", self.learning_rate)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("mask_rate".into(), format!("{}", self.mask_rate)),
            ("seed".into(), self.seed.to_string()),
            ("mask_policy".into(), self.mask_policy.to_string()),
            ("checkpoint_interval".into(), self.checkpoint_interval.to_string()),
            ("beta1".into(), format!("{}", self.beta1)),
            ("beta2".into(), format!("{}", self.beta2)),
            ("adam_eps".into(), format!("{}", self.adam_eps)),
        ]
    }
}

/// Per-epoch mean masked cross-entropy.
pub type LossCurve = Vec<f64>;

/// Masks `k = max(1, round(rate * candidates))` candidate positions with
/// `[MASK]` and records their original ids as labels.
pub fn apply_masking<R: Rng>(
    triple: &TokenTriple,
    mask_rate: f64,
    policy: MaskPolicy,
    rng: &mut R,
) -> Result<TokenTriple> {
    let n_real = triple.n_real();
    let mut candidates: Vec<usize> = (0..n_real)
        .filter(|&i| {
            let id = triple.input_ids[i];
            match policy {
                MaskPolicy::ValueTokens => is_value_id(id),
                MaskPolicy::AnyToken => !matches!(id, tokenizer::CLS_ID | tokenizer::SEP_ID | tokenizer::PAD_ID),
            }
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoMaskCandidates);
    }
    let k = ((mask_rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    // partial Fisher-Yates: the first k slots become a uniform k-subset
    for i in 0..k {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let mut out = triple.clone();
    out.labels.iter_mut().for_each(|l| *l = None);
    for &pos in &candidates[..k] {
        out.labels[pos] = Some(triple.input_ids[pos]);
        out.input_ids[pos] = MASK_ID;
    }
    Ok(out)
}

/// Unmasked triples for every row of a normalized table.
pub fn build_triples(table: &Table, vocab: &Vocabulary, seq_len: usize) -> Result<Vec<TokenTriple>> {
    let none = BTreeSet::new();
    table
        .rows
        .iter()
        .map(|row| {
            let text = serialize_row(row, &none)?.text;
            make_triple(&encode(&text, vocab), seq_len)
        })
        .collect()
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: Parameters::zeros(config),
            v: Parameters::zeros(config),
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate;
        let g = grads.named_tensors();
        let p = params.named_tensors_mut();
        let m = self.m.named_tensors_mut();
        let v = self.v.named_tensors_mut();
        for (((gt, (_, pt)), (_, mt)), (_, vt)) in g.iter().zip(p).zip(m).zip(v) {
            for i in 0..pt.len() {
                let gi = gt.data[i];
                mt[i] = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * gi;
                vt[i] = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = mt[i] / bc1;
                let vhat = vt[i] / bc2;
                pt[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_curve: LossCurve,
}

impl TrainState {
    pub fn fresh(model: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(TrainState {
            params: init_params(model, seed)?,
            adam: AdamState::new(model),
            epoch: 0,
            loss_curve: Vec::new(),
        })
    }
}

/// Deterministic stream for `(seed, epoch, slot)`.
pub fn stream_rng(seed: u64, epoch: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | slot as u64);
    rng
}

/// Row visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n_rows: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_rows).collect();
    shuffle_in_place(&mut order, &mut stream_rng(seed, epoch, 0));
    order
}

fn check_compat(model: &ModelConfig, triples: &[TokenTriple]) -> Result<()> {
    if model.vocab_size < tokenizer::VOCAB_SIZE {
        return Err(Error::InvalidConfig(format!(
            "model vocab {} is smaller than the tokenizer vocab {}",
            model.vocab_size,
            tokenizer::VOCAB_SIZE
        )));
    }
    if let Some(t) = triples.iter().find(|t| t.len() > model.max_seq_len()) {
        return Err(Error::SequenceTooLong {
            body: t.len(),
            max_len: model.max_seq_len(),
        });
    }
    Ok(())
}

/// Trains from a fresh initialization (parameters seeded by `config.seed`).
pub fn train(
    triples: &[TokenTriple],
    config: &TrainConfig,
    model: &ModelConfig,
    on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let state = TrainState::fresh(model, config.seed)?;
    resume(state, triples, config, on_checkpoint)
}

/// Continues `state` up to `config.epochs` completed epochs.
pub fn resume(
    mut state: TrainState,
    triples: &[TokenTriple],
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if triples.is_empty() {
        return Err(Error::EmptyTable("no training rows"));
    }
    check_compat(&state.params.config, triples)?;
    let use_dropout = state.params.config.dropout > 0.0;

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let order = epoch_order(config.seed, epoch, triples.len());

        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rng = stream_rng(config.seed, epoch, b + 1);
            let batch = chunk
                .iter()
                .map(|&i| apply_masking(&triples[i], config.mask_rate, config.mask_policy, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let total: usize = batch.iter().map(TokenTriple::n_labels).sum();
            let scale = 1.0 / total as f64;
            let mut grads = Parameters::zeros(&state.params.config);
            let drop_rng = if use_dropout { Some(&mut rng) } else { None };
            let (batch_loss, _) = batch_loss_and_grad(&state.params, &batch, drop_rng, scale, &mut grads)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            state.adam.update(&mut state.params, &grads, config);
            epoch_loss += batch_loss;
            epoch_count += total;
        }
        state.loss_curve.push(epoch_loss / epoch_count as f64);
        state.epoch += 1;
        if state.epoch % config.checkpoint_interval == 0 || state.epoch == config.epochs {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::code_to_value;
    use crate::tokenizer::build_vocab;

    fn value_triple(n_values: usize) -> TokenTriple {
        let vocab = build_vocab();
        let values: Vec<f64> = (0..n_values).map(|i| code_to_value(i as u16 * 7)).collect();
        let text = serialize_row(&values, &BTreeSet::new()).unwrap().text;
        make_triple(&encode(&text, &vocab), 256).unwrap()
    }

    #[test]
    fn nine_values_mask_exactly_one() {
        let t = value_triple(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = apply_masking(&t, 0.15, MaskPolicy::ValueTokens, &mut rng).unwrap();
        assert_eq!(m.n_labels(), 1);
        let pos = m.labels.iter().position(Option::is_some).unwrap();
        assert_eq!(m.input_ids[pos], MASK_ID);
        assert!(is_value_id(m.labels[pos].unwrap()));
        assert_eq!(m.labels[pos], Some(t.input_ids[pos]));
    }

    #[test]
    fn small_candidate_sets_still_mask_one() {
        let t = value_triple(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = apply_masking(&t, 0.15, MaskPolicy::ValueTokens, &mut rng).unwrap();
        assert_eq!(m.n_labels(), 1);
    }

    #[test]
    fn masking_is_seeded() {
        let t = value_triple(30);
        let a = apply_masking(&t, 0.15, MaskPolicy::ValueTokens, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = apply_masking(&t, 0.15, MaskPolicy::ValueTokens, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_labels(), 5); // round(4.5) rounds half away from zero
    }

    #[test]
    fn any_token_policy_reaches_structure() {
        let t = value_triple(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = apply_masking(&t, 0.5, MaskPolicy::AnyToken, &mut rng).unwrap();
        // 3 clauses of 6 tokens plus 2 commas
        assert_eq!(m.n_labels(), 10);
        assert!(m.labels[0].is_none());
        assert!(m.labels[t.n_real() - 1].is_none());
    }

    #[test]
    fn no_candidates_is_an_error() {
        let t = make_triple(&[4, 8, 5], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            apply_masking(&t, 0.15, MaskPolicy::ValueTokens, &mut rng),
            Err(Error::NoMaskCandidates)
        ));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { mask_rate: 0.0, ..ok.clone() },
            TrainConfig { mask_rate: 1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { checkpoint_interval: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("any-token".parse::<MaskPolicy>().unwrap(), MaskPolicy::AnyToken);
        assert!("bogus".parse::<MaskPolicy>().is_err());
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream_rng(1, 0, 0).gen();
        let b: u64 = stream_rng(1, 0, 1).gen();
        let c: u64 = stream_rng(1, 1, 0).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, stream_rng(1, 0, 0).gen::<u64>());
    }
}
