use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use tabmlm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tabmlm::model::ModelConfig;
use tabmlm::tabular::load_csv;
use tabmlm::tokenizer::Vocabulary;
use tabmlm::trainer::{build_triples, resume, MaskPolicy, TrainConfig, TrainState};

use crate::config::{ConfigFile, Resolver, UsageError};
use crate::manifest::{self, Manifest};
use crate::ConfigArg;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, loss curve and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// value-tokens-only or any-token.
    #[arg(long)]
    mask_policy: Option<MaskPolicy>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// paper, desk or tiny.
    #[arg(long)]
    model_preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint; unset settings default to the ones it recorded.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

const KEYS: &[&str] = &[
    "epochs",
    "lr",
    "batch",
    "mask_rate",
    "mask_policy",
    "checkpoint_every",
    "model_preset",
    "seed",
];

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.ckpt")
}

/// Checkpoints in `dir`, sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(epoch) = name
            .strip_prefix("checkpoint-epoch-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse().ok())
        {
            out.push((epoch, path));
        }
    }
    out.sort();
    Ok(out)
}

fn fallback<T: FromStr>(recorded: Option<String>, default: T) -> Result<T> {
    match recorded {
        Some(v) => v
            .parse()
            .map_err(|_| tabmlm::Error::Checkpoint(format!("recorded setting {v:?} is unreadable")).into()),
        None => Ok(default),
    }
}

fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(s, "{},{l:e}", i + 1).unwrap();
    }
    s
}

fn copy_into(src: &Path, dir: &Path) -> Result<()> {
    let dst = dir.join(src.file_name().expect("file path"));
    std::fs::copy(src, &dst).with_context(|| format!("copying {} to {}", src.display(), dst.display()))?;
    Ok(())
}

pub fn run(args: Args) -> Result<()> {
    let file = ConfigFile::load(args.config.config.as_deref())?;
    file.check_keys(KEYS)?;

    let vocab_path = args.data.join("vocab.txt");
    let vocab = Vocabulary::read(&vocab_path)?;
    let vocab_hash = vocab.hash();

    let resumed = match &args.resume {
        Some(p) => Some(load_checkpoint(p, Some(&vocab_hash))?),
        None => None,
    };
    let recorded = |k: &str| resumed.as_ref().and_then(|c| c.extra.get(&format!("train.{k}")).cloned());
    let d = TrainConfig::default();
    let mut r = Resolver::new(&file);
    let epochs = r.get("epochs", args.epochs, fallback(recorded("epochs"), d.epochs)?)?;
    let lr = r.get("lr", args.lr, fallback(recorded("lr"), d.learning_rate)?)?;
    let batch = r.get("batch", args.batch, fallback(recorded("batch"), d.batch_size)?)?;
    let mask_rate = r.get("mask_rate", args.mask_rate, fallback(recorded("mask_rate"), d.mask_rate)?)?;
    let mask_policy = r.get("mask_policy", args.mask_policy, fallback(recorded("mask_policy"), d.mask_policy)?)?;
    let checkpoint_every = r.get(
        "checkpoint_every",
        args.checkpoint_every,
        fallback(recorded("checkpoint_every"), d.checkpoint_interval)?,
    )?;
    let preset = r.get("model_preset", args.model_preset, fallback(recorded("model_preset"), "desk".to_string())?)?;
    let seed = r.get("seed", args.seed, fallback(recorded("seed"), d.seed)?)?;

    let Some(preset_config) = ModelConfig::preset(&preset) else {
        bail!(UsageError(format!("unknown model preset {preset:?} (paper, desk, tiny)")));
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        mask_rate,
        seed,
        mask_policy,
        checkpoint_interval: checkpoint_every,
        ..d
    };

    let state = match resumed {
        Some(ck) => {
            if ck.params.config != preset_config {
                bail!(UsageError(format!(
                    "checkpoint model does not match preset {preset:?}"
                )));
            }
            ck.into_state()?
        }
        None => TrainState::fresh(&preset_config, seed)?,
    };

    let table = load_csv(args.data.join("train.csv"))?;
    let triples = build_triples(&table, &vocab, preset_config.max_seq_len())?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    copy_into(&args.data.join("stats.csv"), &args.out)?;
    copy_into(&vocab_path, &args.out)?;

    let mut extra = BTreeMap::new();
    for (k, v) in &r.resolved {
        extra.insert(format!("train.{k}"), v.clone());
    }
    extra.insert("columns".into(), table.column_names.join(";"));

    let out = args.out.clone();
    let start_epoch = state.epoch;
    let final_state = resume(state, &triples, &cfg, |s| {
        let path = out.join(checkpoint_name(s.epoch));
        save_checkpoint(&Checkpoint::from_state(s, &vocab_hash, extra.clone()), &path)?;
        let loss_path = out.join("loss.csv");
        std::fs::write(&loss_path, loss_csv(&s.loss_curve)).map_err(|e| tabmlm::Error::io(&loss_path, e))?;
        eprintln!("epoch {:>4}  loss {:.6}", s.epoch, s.loss_curve.last().copied().unwrap_or(f64::NAN));
        Ok(())
    })?;
    std::fs::write(out.join("loss.csv"), loss_csv(&final_state.loss_curve))
        .with_context(|| format!("writing {}", out.join("loss.csv").display()))?;

    let mut m = Manifest::new("train");
    m.config(&r.resolved)
        .set("vocab_hash", &vocab_hash)
        .path("input.data", &args.data);
    if let Some(p) = &args.resume {
        m.path("input.resume", p).set("resumed_at_epoch", start_epoch);
    }
    m.path("output", &args.out)
        .set("train_rows", table.n_rows())
        .set("final_epoch", final_state.epoch)
        .set(
            "final_loss",
            final_state.loss_curve.last().map_or("none".into(), |l| format!("{l:e}")),
        );
    for (k, v) in preset_config.to_kv() {
        m.set(format!("model.{k}"), v);
    }
    m.write(&manifest::in_dir(&args.out))?;
    Ok(())
}
