use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use tabmlm::checkpoint::load_checkpoint;
use tabmlm::imputer::{ablate_column, export_heatmap, mean_baseline_mae};
use tabmlm::tabular::{load_csv, ColumnStats};
use tabmlm::tokenizer::Vocabulary;

use crate::config::{ConfigFile, Resolver, UsageError};
use crate::manifest::{self, Manifest};
use crate::train::list_checkpoints;
use crate::ConfigArg;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Output directory of a `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Directory written by `prepare` (val.csv, train.csv, stats.csv).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated column indices, or `all`.
    #[arg(long)]
    columns: Option<String>,
    /// Validation rows sampled every this many rows.
    #[arg(long)]
    stride: Option<usize>,
    /// Report errors in source units instead of normalized units.
    #[arg(long)]
    denormalized: bool,
    #[command(flatten)]
    config: ConfigArg,
}

fn parse_columns(spec: &str, n: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..n).collect());
    }
    spec.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(j) if j < n => Ok(j),
            _ => Err(UsageError(format!("bad column {s:?} (table has {n} columns)")).into()),
        })
        .collect()
}

pub fn run(args: Args) -> Result<()> {
    let file = ConfigFile::load(args.config.config.as_deref())?;
    file.check_keys(&["columns", "stride"])?;
    let mut r = Resolver::new(&file);
    let columns_spec: String = r.get("columns", args.columns, "all".into())?;
    let stride = r.get("stride", args.stride, 25usize)?;
    if stride == 0 {
        bail!(UsageError("--stride must be at least 1".into()));
    }
    r.resolved.push(("denormalized".into(), args.denormalized.to_string()));

    let vocab = Vocabulary::read(args.data.join("vocab.txt"))?;
    let hash = vocab.hash();
    let (names, stats) = ColumnStats::read_csv(args.data.join("stats.csv"))?;
    let train = load_csv(args.data.join("train.csv"))?;
    let val = load_csv(args.data.join("val.csv"))?;
    let columns = parse_columns(&columns_spec, val.n_columns())?;

    let paths = list_checkpoints(&args.run)?;
    if paths.is_empty() {
        bail!(tabmlm::Error::Checkpoint(format!("no checkpoints in {}", args.run.display())));
    }
    let checkpoints = paths
        .iter()
        .map(|(e, p)| Ok((*e, load_checkpoint(p, Some(&hash))?.params)))
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut summary = String::from("column,name,first_epoch_mae,last_epoch_mae,mean_baseline_mae,beats_baseline,decreased\n");
    let unit = |j: usize| if args.denormalized { stats.range(j) } else { 1.0 };
    for &j in &columns {
        let report = ablate_column(&checkpoints, &val, j, stride, &stats, &vocab)?;
        let report = if args.denormalized { report.denormalized(&stats) } else { report };
        let stem = args.out.join(format!("column-{j}"));
        export_heatmap(
            &report,
            stem.with_extension("csv"),
            stem.with_extension("pgm"),
            stem.with_extension("index.csv"),
        )?;
        let baseline = mean_baseline_mae(&train, &val, j, stride)? * unit(j);
        let (first, last) = (report.first_mean(), report.last_mean());
        writeln!(
            summary,
            "{j},{},{first:e},{last:e},{baseline:e},{},{}",
            names[j],
            last < baseline,
            last < first
        )
        .unwrap();
        println!(
            "column {j} ({}): mae first {first:.4} last {last:.4} baseline {baseline:.4}",
            names[j]
        );
    }
    std::fs::write(args.out.join("summary.csv"), summary).context("writing summary.csv")?;

    let mut m = Manifest::new("evaluate");
    m.config(&r.resolved)
        .set("vocab_hash", &hash)
        .path("input.run", &args.run)
        .path("input.data", &args.data)
        .set("checkpoint_epochs", paths.iter().map(|(e, _)| e.to_string()).collect::<Vec<_>>().join(","))
        .path("output", &args.out);
    m.write(&manifest::in_dir(&args.out))?;
    Ok(())
}
