use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tabmlm::checkpoint::load_checkpoint;
use tabmlm::imputer::{impute_row, Decoding};
use tabmlm::tabular::{load_csv_with_missing, ColumnStats};
use tabmlm::tokenizer::Vocabulary;

use crate::config::{ConfigFile, Resolver};
use crate::manifest::{self, Manifest};
use crate::ConfigArg;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// CSV in source units; cells equal to the marker are imputed.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    missing_marker: Option<String>,
    /// Filled CSV in source units.
    #[arg(long)]
    out: PathBuf,
    /// Column statistics [default: stats.csv next to the checkpoint].
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Vocabulary file [default: vocab.txt next to the checkpoint].
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Per-cell report [default: <out>.cells.csv].
    #[arg(long)]
    report: Option<PathBuf>,
    /// Decode over the whole vocabulary instead of value tokens only.
    #[arg(long)]
    no_restrict: bool,
    #[command(flatten)]
    config: ConfigArg,
}

fn sibling(of: &Path, name: &str) -> PathBuf {
    of.parent().unwrap_or(Path::new(".")).join(name)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn run(args: Args) -> Result<()> {
    let file = ConfigFile::load(args.config.config.as_deref())?;
    file.check_keys(&["missing_marker"])?;
    let mut r = Resolver::new(&file);
    let marker: String = r.get("missing_marker", args.missing_marker, String::new())?;
    let decoding = if args.no_restrict { Decoding::Unrestricted } else { Decoding::Restricted };
    r.resolved.push(("decoding".into(), format!("{decoding:?}").to_lowercase()));

    let stats_path = args.stats.clone().unwrap_or_else(|| sibling(&args.model, "stats.csv"));
    let vocab_path = args.vocab.clone().unwrap_or_else(|| sibling(&args.model, "vocab.txt"));
    let vocab = Vocabulary::read(&vocab_path)?;
    let ckpt = load_checkpoint(&args.model, Some(&vocab.hash()))?;
    let (stat_names, stats) = ColumnStats::read_csv(&stats_path)?;

    let table = load_csv_with_missing(&args.input, &marker)?;
    if table.column_names != stat_names {
        let err = tabmlm::Error::ColumnCountMismatch {
            expected: stat_names.len(),
            found: table.column_names.len(),
        };
        return Err(anyhow::Error::new(err).context(format!(
            "input header {:?} differs from model columns {:?}",
            table.column_names, stat_names
        )));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let raw: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;

    let mut writer = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    writer.write_record(reader.headers()?)?;
    let mut report = String::from("row,column,token_id,normalized,value\n");
    let mut filled = 0usize;
    let mut clamped = 0usize;
    for (i, (row, record)) in table.rows.iter().zip(&raw).enumerate() {
        let mut cells: Vec<String> = record.iter().map(str::to_string).collect();
        if row.iter().any(Option::is_none) {
            let normalized: Vec<Option<f64>> = row
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    c.map(|x| {
                        if x < stats.min[j] || x > stats.max[j] {
                            clamped += 1;
                        }
                        stats.normalize_clamped(j, x)
                    })
                })
                .collect();
            let res = impute_row(&ckpt.params, &normalized, &stats, &vocab, decoding, None)?;
            for c in &res.cells {
                let name = &table.column_names[c.column];
                match (c.normalized, c.denormalized) {
                    (Some(q), Some(x)) => {
                        cells[c.column] = format!("{x}");
                        writeln!(report, "{},{name},{},{q:.4},{x}", i + 1, c.token_id).unwrap();
                        filled += 1;
                    }
                    _ => {
                        writeln!(report, "{},{name},{},,", i + 1, c.token_id).unwrap();
                    }
                }
            }
        }
        writer.write_record(&cells)?;
    }
    writer.flush()?;

    let report_path = args.report.clone().unwrap_or_else(|| with_suffix(&args.out, ".cells.csv"));
    std::fs::write(&report_path, report).with_context(|| format!("writing {}", report_path.display()))?;

    let mut m = Manifest::new("impute");
    m.config(&r.resolved)
        .set("vocab_hash", vocab.hash())
        .path("input.model", &args.model)
        .set("input.model_epoch", ckpt.epoch)
        .path("input.data", &args.input)
        .path("input.stats", &stats_path)
        .path("output", &args.out)
        .path("output.report", &report_path)
        .set("cells_missing", table.n_missing())
        .set("cells_filled", filled)
        .set("cells_clamped", clamped);
    m.write(&manifest::beside(&args.out))?;
    eprintln!("filled {filled} of {} missing cells", table.n_missing());
    if clamped > 0 {
        eprintln!("warning: {clamped} present cells were outside the training range and were clamped");
    }
    Ok(())
}
