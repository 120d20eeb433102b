use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabmlm::checkpoint::Checkpoint;
use tabmlm::model::ModelConfig;
use tabmlm::tabular::{code_to_value, Table};
use tabmlm::tokenizer::build_vocab;
use tabmlm::trainer::{build_triples, epoch_order, resume, train, TrainConfig, TrainState};

fn model() -> ModelConfig {
    ModelConfig { hidden: 32, heads: 2, layers: 1, ffn_dim: 64, ..ModelConfig::tiny() }
}

fn dependency_table(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..10000u16);
            vec![code_to_value(c), code_to_value(9999 - c)]
        })
        .collect();
    Table::new(vec!["x".into(), "y".into()], rows).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, learning_rate: 1e-3, batch_size: 4, seed: 11, checkpoint_interval: 2, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn every_epoch_visits_each_row_once(seed in any::<u64>(), epoch in 0usize..1000, n in 1usize..300) {
        let mut order = epoch_order(seed, epoch, n);
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn epoch_orders_differ_between_epochs() {
    assert_ne!(epoch_order(1, 0, 64), epoch_order(1, 1, 64));
    assert_eq!(epoch_order(1, 5, 64), epoch_order(1, 5, 64));
}

#[test]
fn resume_through_checkpoint_bytes_is_bitwise_identical() {
    let vocab = build_vocab();
    let m = model();
    let triples = build_triples(&dependency_table(12, 4), &vocab, m.max_seq_len()).unwrap();
    let full = train(&triples, &config(6), &m, |_| Ok(())).unwrap();

    let mut saved = None;
    train(&triples, &config(6), &m, |s: &TrainState| {
        if s.epoch == 2 {
            saved = Some(Checkpoint::from_state(s, &vocab.hash(), Default::default()).to_bytes());
        }
        Ok(())
    })
    .unwrap();
    let state = Checkpoint::from_bytes(&saved.unwrap()).unwrap().into_state().unwrap();
    let resumed = resume(state, &triples, &config(6), |_| Ok(())).unwrap();

    let a = Checkpoint::from_state(&full, &vocab.hash(), Default::default()).to_bytes();
    let b = Checkpoint::from_state(&resumed, &vocab.hash(), Default::default()).to_bytes();
    assert!(a == b, "resumed run diverged");
    assert_eq!(full.loss_curve.len(), 6);
}

#[test]
fn dependency_loss_decreases_over_windows() {
    let vocab = build_vocab();
    let m = model();
    let triples = build_triples(&dependency_table(32, 9), &vocab, m.max_seq_len()).unwrap();
    let cfg = TrainConfig { epochs: 60, learning_rate: 2e-3, batch_size: 8, seed: 5, checkpoint_interval: 60, ..Default::default() };
    let state = train(&triples, &cfg, &m, |_| Ok(())).unwrap();
    let curve: &[f64] = &state.loss_curve;
    let window = |k: usize| curve[k * 20..(k + 1) * 20].iter().sum::<f64>() / 20.0;
    assert!(window(1) < window(0), "{curve:?}");
    assert!(window(2) < window(1), "{curve:?}");
}
