//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criterion 6 reads California Housing from `$CAL_HOUSING_CSV` or
//! `data/california_housing.csv` (nine numeric columns with a header row).

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabmlm::checkpoint::Checkpoint;
use tabmlm::cost_meter::{
    carbon, count_macs, count_params, published, FlopsReport, DISCREPANCY_NOTE,
};
use tabmlm::imputer::{ablate_column, impute_row, mean_baseline_mae, Decoding};
use tabmlm::model::{
    backward, count_forward_macs, forward, init_params, mlm_loss, ModelConfig, Mode, Parameters,
};
use tabmlm::serializer::{parse_row, serialize_row};
use tabmlm::tabular::{code_to_value, compute_stats, load_csv, normalize, split_shuffle, ColumnStats, SplitSpec, Table};
use tabmlm::tokenizer::{build_vocab, decode, encode, make_triple, pre_tokenize, TokenTriple, MASK_ID};
use tabmlm::trainer::{build_triples, train, TrainConfig, TrainState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Bytes of every checkpoint plus the rendered reports of one run.
#[derive(PartialEq)]
struct Artifacts {
    checkpoints: Vec<Vec<u8>>,
    report: String,
}

fn collect_checkpoints(
    triples: &[TokenTriple],
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> (TrainState, Vec<(usize, Parameters)>, Vec<Vec<u8>>) {
    let vocab_hash = build_vocab().hash();
    let mut params = Vec::new();
    let mut bytes = Vec::new();
    let state = train(triples, cfg, model, |s| {
        params.push((s.epoch, s.params.clone()));
        bytes.push(Checkpoint::from_state(s, &vocab_hash, Default::default()).to_bytes());
        Ok(())
    })
    .expect("training run");
    (state, params, bytes)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let vocab = build_vocab();
    let surfaces = pre_tokenize("column 0: 0.2349");
    let expected = ["column", "0", ":", "0", ".", "2349"];
    if surfaces != expected {
        return outcome(false, format!("surfaces {surfaces:?}"));
    }
    let ids = encode("column 0: 0.2349", &vocab);
    let back: Vec<&str> = ids.iter().map(|&id| vocab.token_of(id).unwrap_or("?")).collect();
    if back != expected {
        return outcome(false, format!("ids {ids:?} map to {back:?}"));
    }
    if vocab.id_of("[MASK]") != Some(103) || MASK_ID != 103 {
        return outcome(false, "[MASK] is not id 103");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..10_000 {
        let cols = rng.gen_range(1..=12);
        let row: Vec<f64> = (0..cols).map(|_| code_to_value(rng.gen_range(0..10_000))).collect();
        let text = serialize_row(&row, &BTreeSet::new()).unwrap().text;
        let decoded = decode(&encode(&text, &vocab), &vocab).unwrap();
        if decoded != text || parse_row(&decoded, cols).unwrap() != row {
            return outcome(false, format!("row {n} did not round-trip: {text:?} -> {decoded:?}"));
        }
    }
    let took = start.elapsed();
    outcome(took < Duration::from_secs(5), format!("10000 rows exact, {:.2}s (limit 5s)", took.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 30,
        max_positions: 14,
        hidden: 8,
        heads: 1,
        layers: 1,
        ffn_dim: 32,
        type_vocab: 1,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
    };
    let mut p = init_params(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (_, data) in p.named_tensors_mut() {
        for x in data.iter_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let mut batch = Vec::new();
    for body in [vec![4u32, 9, 5, 20, 7, 25, 6, 11, 5, 29], vec![4, 10, 5, 21, 7, 13]] {
        let mut t = make_triple(&body, 12).unwrap();
        for pos in [2, 5] {
            t.labels[pos] = Some(t.input_ids[pos]);
            t.input_ids[pos] = 1 + pos as u32;
        }
        batch.push(t);
    }
    let labels: Vec<_> = batch.iter().map(|t| t.labels.clone()).collect();
    let loss = |p: &Parameters| mlm_loss(&forward(p, &batch).unwrap(), &labels).unwrap();
    let (_, g) = backward(&p, &batch, Mode::Eval).unwrap();
    let grads: Vec<Vec<f64>> = g.named_tensors().iter().map(|t| t.data.to_vec()).collect();

    let h = 1e-4;
    let mut worst = 0.0f64;
    let n_coords = 150;
    for _ in 0..n_coords {
        let ti = rng.gen_range(0..grads.len());
        let ci = rng.gen_range(0..grads[ti].len());
        let orig = p.named_tensors()[ti].data[ci];
        p.named_tensors_mut()[ti].1[ci] = orig + h;
        let up = loss(&p);
        p.named_tensors_mut()[ti].1[ci] = orig - h;
        let down = loss(&p);
        p.named_tensors_mut()[ti].1[ci] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = grads[ti][ci];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-4 && took < Duration::from_secs(60),
        format!("{n_coords} coordinates, max relative error {worst:.2e} (limit 1e-4), {:.2}s", took.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for v in [30usize, 10_104] {
        let cfg = ModelConfig {
            vocab_size: v,
            max_positions: 14,
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            type_vocab: 1,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        };
        // all-zero weights make every logit exactly zero
        let p = Parameters::zeros(&cfg);
        let mut t = make_triple(&[4, 9, 5, 20, 7], 12).unwrap();
        for pos in [2, 4] {
            t.labels[pos] = Some(t.input_ids[pos]);
            t.input_ids[pos] = 1;
        }
        let loss = mlm_loss(&forward(&p, std::slice::from_ref(&t)).unwrap(), &[t.labels.clone()]).unwrap();
        let err = (loss - (v as f64).ln()).abs();
        pass &= err <= 1e-9;
        details.push(format!("V={v}: |loss - ln V| = {err:.1e}"));
    }
    outcome(pass, details.join(", ") + " (limit 1e-9)")
}

fn memorization_run() -> (f64, Artifacts, Duration) {
    let start = Instant::now();
    let vocab = build_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| vec![code_to_value(rng.gen_range(0..10_000)), code_to_value(rng.gen_range(0..10_000))])
        .collect();
    let table = Table::new(vec!["a".into(), "b".into()], rows).unwrap();
    let model = ModelConfig::tiny();
    let triples = build_triples(&table, &vocab, model.max_seq_len()).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 8.5e-4,
        batch_size: 1,
        seed: 3,
        checkpoint_interval: 50,
        ..Default::default()
    };
    let (state, _, checkpoints) = collect_checkpoints(&triples, &cfg, &model);
    let last = *state.loss_curve.last().unwrap();
    let report = state.loss_curve.iter().map(|l| format!("{l:e}\n")).collect();
    (last, Artifacts { checkpoints, report }, start.elapsed())
}

fn criterion_4(run: &(f64, Artifacts, Duration)) -> Outcome {
    let (loss, _, took) = run;
    outcome(
        *loss < 1e-3 && *took < Duration::from_secs(120),
        format!("final mean masked loss {loss:.3e} (limit 1e-3), {:.1}s (limit 120s)", took.as_secs_f64()),
    )
}

fn dependency_run() -> (f64, f64, Artifacts, Duration) {
    let start = Instant::now();
    let vocab = build_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..256)
        .map(|_| {
            let c = rng.gen_range(0..10_000u16);
            vec![code_to_value(c), code_to_value(9999 - c)]
        })
        .collect();
    let table = Table::new(vec!["x".into(), "y".into()], rows).unwrap();
    let model = ModelConfig::desk();
    let triples = build_triples(&table, &vocab, model.max_seq_len()).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 5e-4,
        batch_size: 8,
        seed: 3,
        checkpoint_interval: 20,
        ..Default::default()
    };
    let (state, _, checkpoints) = collect_checkpoints(&triples, &cfg, &model);

    let stats = ColumnStats { min: vec![0.0; 2], max: vec![1.0; 2] };
    let mut report = String::from("row,truth,imputed\n");
    let mut model_err = 0.0;
    let mut baseline_err = 0.0;
    let mean = table.column(1).sum::<f64>() / table.n_rows() as f64;
    for (i, r) in table.rows.iter().enumerate() {
        let res = impute_row(&state.params, &[Some(r[0]), None], &stats, &vocab, Decoding::Restricted, Some(r)).unwrap();
        let cell = &res.cells[0];
        model_err += cell.abs_error.unwrap();
        baseline_err += (mean - r[1]).abs();
        report.push_str(&format!("{i},{:.4},{:.4}\n", r[1], cell.normalized.unwrap()));
    }
    let n = table.n_rows() as f64;
    (model_err / n, baseline_err / n, Artifacts { checkpoints, report }, start.elapsed())
}

fn criterion_5(run: &(f64, f64, Artifacts, Duration)) -> Outcome {
    let (mae, baseline, _, took) = run;
    // col1 uniform on the grid: E|U - 1/2| = 1/4
    let baseline_ok = (baseline - 0.25).abs() < 0.03;
    outcome(
        *mae <= 0.02 && baseline_ok && *took <= Duration::from_secs(600),
        format!(
            "imputation MAE {mae:.4} (limit 0.02), mean baseline {baseline:.4} (analytic 0.25), {:.0}s (limit 600s)",
            took.as_secs_f64()
        ),
    )
}

fn housing_path() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("CAL_HOUSING_CSV").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/california_housing.csv")),
    ];
    candidates.into_iter().flatten().find(|p| p.is_file())
}

type HousingRun = Result<(Vec<(f64, f64, f64)>, Artifacts, Duration), String>;

fn housing_run() -> HousingRun {
    let path = housing_path().ok_or("California Housing CSV not found (set CAL_HOUSING_CSV)")?;
    let start = Instant::now();
    let vocab = build_vocab();
    let raw = load_csv(&path).map_err(|e| e.to_string())?;
    if raw.n_columns() != 9 {
        return Err(format!("expected 9 columns, found {}", raw.n_columns()));
    }
    let stats = compute_stats(&raw).map_err(|e| e.to_string())?;
    let table = normalize(&raw, &stats).map_err(|e| e.to_string())?;
    let (train_t, val) = split_shuffle(&table, SplitSpec { n_train: 2000, seed: 42 }).map_err(|e| e.to_string())?;
    let model = ModelConfig::desk();
    let triples = build_triples(&train_t, &vocab, model.max_seq_len()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 5e-4,
        batch_size: 16,
        seed: 3,
        checkpoint_interval: 10,
        ..Default::default()
    };
    let (_, params, checkpoints) = collect_checkpoints(&triples, &cfg, &model);
    let unit = ColumnStats { min: vec![0.0; 9], max: vec![1.0; 9] };
    let mut per_column = Vec::new();
    let mut report = String::from("column,first,last,baseline\n");
    for j in 0..9 {
        let r = ablate_column(&params, &val, j, 25, &unit, &vocab).map_err(|e| e.to_string())?;
        let baseline = mean_baseline_mae(&train_t, &val, j, 25).map_err(|e| e.to_string())?;
        report.push_str(&format!("{j},{:e},{:e},{baseline:e}\n", r.first_mean(), r.last_mean()));
        per_column.push((r.first_mean(), r.last_mean(), baseline));
    }
    Ok((per_column, Artifacts { checkpoints, report }, start.elapsed()))
}

fn criterion_6(run: &HousingRun) -> Outcome {
    match run {
        Err(e) => outcome(false, e.clone()),
        Ok((cols, _, took)) => {
            let beats = cols.iter().filter(|(_, last, base)| last < base).count();
            let decreased = cols.iter().filter(|(first, last, _)| last < first).count();
            outcome(
                beats >= 6 && decreased == 9 && *took <= Duration::from_secs(3600),
                format!(
                    "beats baseline on {beats}/9 (need 6), decreased on {decreased}/9 (need 9), {:.0}s",
                    took.as_secs_f64()
                ),
            )
        }
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let heads = rng.gen_range(1..4);
        let cfg = ModelConfig {
            vocab_size: rng.gen_range(5..40),
            max_positions: rng.gen_range(5..22),
            hidden: heads * rng.gen_range(1..5),
            heads,
            layers: rng.gen_range(1..3),
            ffn_dim: rng.gen_range(1..24),
            type_vocab: rng.gen_range(1..3),
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        };
        let seq = rng.gen_range(2..=cfg.max_seq_len());
        let batch = rng.gen_range(1..3);
        let enumerated: u64 = Parameters::zeros(&cfg)
            .named_tensors()
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum();
        let closed = count_params(&cfg).total;
        if closed != enumerated {
            return outcome(false, format!("case {case}: params {closed} vs enumerated {enumerated}"));
        }
        let p = init_params(&cfg, case).unwrap();
        let body: Vec<u32> = (0..seq - 2).map(|i| (4 + i % (cfg.vocab_size - 4)) as u32).collect();
        let triples: Vec<_> = (0..batch).map(|_| make_triple(&body, seq).unwrap()).collect();
        let instrumented = count_forward_macs(&p, &triples).unwrap();
        let macs = count_macs(&cfg, seq, batch).unwrap();
        if macs.forward != instrumented {
            return outcome(false, format!("case {case}: macs {} vs instrumented {instrumented}", macs.forward));
        }
        if macs.train_macs() != 3 * macs.forward {
            return outcome(false, format!("case {case}: train MACs are not 3x forward"));
        }
    }
    let text = FlopsReport::new(&ModelConfig::paper(), 512, 1).unwrap().to_text(true);
    let shows_published = text.contains(published::FORWARD_FLOPS_STATED)
        && text.contains(published::TRAIN_FLOPS_STATED)
        && text.contains(DISCREPANCY_NOTE.lines().next().unwrap());
    outcome(
        shows_published && published::TRAIN_MACS / published::FORWARD_MACS == 3.0,
        "100 random configs exact against enumeration and instrumented forward; train = 3x forward; full-size report carries published figures and note",
    )
}

fn criterion_8() -> Outcome {
    let a = carbon(6.17, 541.33, 1.0).unwrap();
    let b = carbon(0.075, 50.0, 1.0).unwrap();
    let g_rel = (a.grams - 3339.37).abs() / 3339.37;
    let km_rel = (a.car_km - 31.06).abs() / 31.06;
    outcome(
        g_rel <= 5e-4 && km_rel <= 1e-3 && b.grams == 3.75,
        format!(
            "{:.4} g ({:.3}% off), {:.3} km ({:.3}% off), {} g exact",
            a.grams,
            100.0 * g_rel,
            a.car_km,
            100.0 * km_rel,
            b.grams
        ),
    )
}

fn criterion_9(
    mem: [&Artifacts; 2],
    dep: [&Artifacts; 2],
    housing: [Option<&Artifacts>; 2],
) -> Outcome {
    let same_mem = mem[0] == mem[1];
    let same_dep = dep[0] == dep[1];
    let (pass, housing_note) = match housing {
        [Some(a), Some(b)] => (a == b, if a == b { "identical" } else { "differ" }),
        _ => (false, "not run (data absent)"),
    };
    outcome(
        same_mem && same_dep && pass,
        format!(
            "criterion 4 {}, criterion 5 {}, criterion 6 {housing_note}",
            if same_mem { "identical" } else { "differ" },
            if same_dep { "identical" } else { "differ" },
        ),
    )
}

fn main() {
    // cargo passes libtest flags; this harness has no filtering
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let mem = [memorization_run(), memorization_run()];
    report(4, criterion_4(&mem[0]));
    let dep = [dependency_run(), dependency_run()];
    report(5, criterion_5(&dep[0]));
    let housing = [housing_run(), housing_run()];
    report(6, criterion_6(&housing[0]));

    report(7, criterion_7());
    report(8, criterion_8());
    report(
        9,
        criterion_9(
            [&mem[0].1, &mem[1].1],
            [&dep[0].2, &dep[1].2],
            [housing[0].as_ref().ok().map(|h| &h.1), housing[1].as_ref().ok().map(|h| &h.1)],
        ),
    );

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
