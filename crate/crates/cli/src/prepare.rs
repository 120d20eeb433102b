use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use tabmlm::tabular::{compute_stats, load_csv, normalize, split_shuffle, SplitSpec};
use tabmlm::tokenizer::build_vocab;

use crate::config::{ConfigFile, Resolver, UsageError};
use crate::manifest::{self, Manifest};
use crate::ConfigArg;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Source CSV with a header row and numeric cells.
    #[arg(long)]
    input: PathBuf,
    /// Rows assigned to the training split; the rest go to validation.
    #[arg(long)]
    train_rows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

pub fn run(args: Args) -> Result<()> {
    let file = ConfigFile::load(args.config.config.as_deref())?;
    file.check_keys(&["train_rows", "seed"])?;
    let mut r = Resolver::new(&file);
    let Some(n_train) = r.get_opt("train_rows", args.train_rows)? else {
        bail!(UsageError("--train-rows is required".into()));
    };
    let seed = r.get("seed", args.seed, 0)?;

    let table = load_csv(&args.input)?;
    if n_train == 0 || n_train >= table.n_rows() {
        bail!(UsageError(format!(
            "--train-rows must be between 1 and {} for {} rows",
            table.n_rows() - 1,
            table.n_rows()
        )));
    }
    let stats = compute_stats(&table)?;
    let normalized = normalize(&table, &stats)?;
    let (train, val) = split_shuffle(&normalized, SplitSpec { n_train, seed })?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let vocab = build_vocab();
    stats.write_csv(args.out.join("stats.csv"), &table.column_names)?;
    train.write_csv(args.out.join("train.csv"), Some(4))?;
    val.write_csv(args.out.join("val.csv"), Some(4))?;
    vocab.write(args.out.join("vocab.txt"))?;

    let mut m = Manifest::new("prepare");
    m.config(&r.resolved)
        .set("vocab_hash", vocab.hash())
        .path("input", &args.input)
        .path("output", &args.out)
        .set("rows_total", table.n_rows())
        .set("rows_train", train.n_rows())
        .set("rows_val", val.n_rows())
        .set("columns", table.column_names.join(";"));
    m.write(&manifest::in_dir(&args.out))?;
    println!(
        "prepared {} train / {} validation rows, {} columns -> {}",
        train.n_rows(),
        val.n_rows(),
        table.n_columns(),
        args.out.display()
    );
    Ok(())
}
