//! Cell imputation by masked prediction, the per-column ablation protocol,
//! and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{predict_at, Parameters};
use crate::serializer::serialize_partial;
use crate::tabular::{code_to_value, ColumnStats, Table};
use crate::tokenizer::{
    encode, make_triple, value_code, TokenTriple, Vocabulary, FIRST_VALUE_ID, LAST_VALUE_ID,
    MASK_ID,
};

/// Anything that produces vocabulary logits at chosen positions of a triple.
pub trait Predictor {
    fn predict(&self, triple: &TokenTriple, positions: &[usize]) -> Result<Array2<f64>>;
}

impl Predictor for Parameters {
    fn predict(&self, triple: &TokenTriple, positions: &[usize]) -> Result<Array2<f64>> {
        predict_at(self, triple, positions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoding {
    /// Argmax over the four-digit value ids only.
    #[default]
    Restricted,
    /// Argmax over the whole vocabulary.
    Unrestricted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedCell {
    pub column: usize,
    pub token_id: u32,
    /// `None` only under unrestricted decoding when the argmax is not a value token.
    pub normalized: Option<f64>,
    pub denormalized: Option<f64>,
    /// Normalized-unit absolute error, when a truth row was supplied.
    pub abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImputationResult {
    pub cells: Vec<ImputedCell>,
}

impl ImputationResult {
    /// Copies `row`, replacing every missing cell with its normalized imputation.
    pub fn fill(&self, row: &[Option<f64>]) -> Vec<Option<f64>> {
        let mut out = row.to_vec();
        for c in &self.cells {
            out[c.column] = c.normalized;
        }
        out
    }
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Picks a token id from one row of logits.
pub fn decode_logits(logits: &[f64], decoding: Decoding) -> Result<u32> {
    if logits.len() <= LAST_VALUE_ID as usize {
        return Err(Error::InvalidConfig(format!(
            "model emits {} logits; the value vocabulary needs {}",
            logits.len(),
            LAST_VALUE_ID + 1
        )));
    }
    Ok(match decoding {
        Decoding::Restricted => {
            let slice = &logits[FIRST_VALUE_ID as usize..=LAST_VALUE_ID as usize];
            FIRST_VALUE_ID + argmax(slice.iter().copied()) as u32
        }
        Decoding::Unrestricted => argmax(logits.iter().copied()) as u32,
    })
}

/// Imputes every `None` cell of a normalized row in one forward pass.
///
/// Present cells must already lie on the grid. `truth`, if given, is the
/// complete normalized row used to fill `abs_error`.
pub fn impute_row<P: Predictor + ?Sized>(
    predictor: &P,
    row: &[Option<f64>],
    stats: &ColumnStats,
    vocab: &Vocabulary,
    decoding: Decoding,
    truth: Option<&[f64]>,
) -> Result<ImputationResult> {
    if stats.n_columns() != row.len() {
        return Err(Error::ColumnCountMismatch {
            expected: row.len(),
            found: stats.n_columns(),
        });
    }
    if let Some(t) = truth {
        if t.len() != row.len() {
            return Err(Error::ColumnCountMismatch {
                expected: row.len(),
                found: t.len(),
            });
        }
    }
    let missing: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_none()).collect();
    if missing.is_empty() {
        return Err(Error::NothingToImpute("row has no missing cells"));
    }
    let ids = encode(&serialize_partial(row)?.text, vocab);
    let triple = make_triple(&ids, ids.len() + 2)?;
    let positions: Vec<usize> = triple
        .input_ids
        .iter()
        .enumerate()
        .filter_map(|(p, &id)| (id == MASK_ID).then_some(p))
        .collect();
    debug_assert_eq!(positions.len(), missing.len());
    let logits = predictor.predict(&triple, &positions)?;

    let cells = missing
        .iter()
        .zip(logits.rows())
        .map(|(&column, l)| {
            let token_id = decode_logits(l.as_slice().expect("contiguous logits"), decoding)?;
            let normalized = value_code(token_id).map(code_to_value);
            Ok(ImputedCell {
                column,
                token_id,
                normalized,
                denormalized: normalized.map(|q| stats.denormalize(column, q)),
                abs_error: match (truth, normalized) {
                    (Some(t), Some(q)) => Some((q - t[column]).abs()),
                    _ => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputationResult { cells })
}

/// Errors of one column's imputation over a series of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub column: usize,
    pub epochs: Vec<usize>,
    pub rows: Vec<usize>,
    /// `[epochs, rows]`, absolute errors in normalized units.
    pub errors: Array2<f64>,
}

impl AblationReport {
    pub fn mean_error(&self, epoch_index: usize) -> f64 {
        self.errors.row(epoch_index).mean().unwrap_or(0.0)
    }

    pub fn first_mean(&self) -> f64 {
        self.mean_error(0)
    }

    pub fn last_mean(&self) -> f64 {
        self.mean_error(self.epochs.len() - 1)
    }

    /// The same report with errors scaled into source units.
    pub fn denormalized(&self, stats: &ColumnStats) -> AblationReport {
        let range = stats.range(self.column);
        AblationReport {
            errors: self.errors.mapv(|e| e * range),
            ..self.clone()
        }
    }
}

/// Row indices `0, stride, 2·stride, …` below `n_rows`.
pub fn sampled_rows(n_rows: usize, stride: usize) -> Vec<usize> {
    (0..n_rows).step_by(stride.max(1)).collect()
}

/// Hides column `column` of every sampled validation row and imputes it with
/// each checkpoint in turn.
pub fn ablate_column<P: Predictor>(
    checkpoints: &[(usize, P)],
    val: &Table,
    column: usize,
    stride: usize,
    stats: &ColumnStats,
    vocab: &Vocabulary,
) -> Result<AblationReport> {
    if checkpoints.is_empty() {
        return Err(Error::NothingToImpute("no checkpoints"));
    }
    if val.n_rows() == 0 {
        return Err(Error::EmptyTable("validation set"));
    }
    if column >= val.n_columns() {
        return Err(Error::ColumnOutOfRange {
            index: column,
            columns: val.n_columns(),
        });
    }
    let rows = sampled_rows(val.n_rows(), stride);
    let mut errors = Array2::zeros((checkpoints.len(), rows.len()));
    for (e, (_, predictor)) in checkpoints.iter().enumerate() {
        for (r, &i) in rows.iter().enumerate() {
            let truth = &val.rows[i];
            let mut partial: Vec<Option<f64>> = truth.iter().copied().map(Some).collect();
            partial[column] = None;
            let res = impute_row(predictor, &partial, stats, vocab, Decoding::Restricted, Some(truth))?;
            errors[[e, r]] = res.cells[0].abs_error.expect("restricted decoding yields a value");
        }
    }
    Ok(AblationReport {
        column,
        epochs: checkpoints.iter().map(|(e, _)| *e).collect(),
        rows,
        errors,
    })
}

/// Mean absolute error of filling `column` of the sampled validation rows
/// with the training-set column mean.
pub fn mean_baseline_mae(train: &Table, val: &Table, column: usize, stride: usize) -> Result<f64> {
    if train.n_rows() == 0 || val.n_rows() == 0 {
        return Err(Error::EmptyTable("baseline needs training and validation rows"));
    }
    let mean = train.column(column).sum::<f64>() / train.n_rows() as f64;
    let rows = sampled_rows(val.n_rows(), stride);
    Ok(rows.iter().map(|&i| (val.rows[i][column] - mean).abs()).sum::<f64>() / rows.len() as f64)
}

/// 8-bit grayscale levels, `round(255 · e / max)`; all zero when `max` is 0.
pub fn heatmap_pixels(errors: &Array2<f64>) -> Vec<u8> {
    let max = errors.iter().copied().fold(0.0, f64::max);
    errors
        .iter()
        .map(|&e| if max > 0.0 { (255.0 * e / max).round() as u8 } else { 0 })
        .collect()
}

/// Writes the error matrix as CSV, a binary PGM image, and a sidecar listing
/// the epoch and row ids of the matrix axes.
pub fn export_heatmap(
    report: &AblationReport,
    csv_path: impl AsRef<Path>,
    image_path: impl AsRef<Path>,
    index_path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w) = report.errors.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyTable("ablation report"));
    }
    let mut csv = String::new();
    for row in report.errors.rows() {
        let cells: Vec<String> = row.iter().map(|e| format!("{e:.16e}")).collect();
        writeln!(csv, "{}", cells.join(",")).unwrap();
    }
    write_file(csv_path.as_ref(), csv.as_bytes())?;

    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(heatmap_pixels(&report.errors));
    write_file(image_path.as_ref(), &pgm)?;

    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let index = format!(
        "column,{}\nepoch,{}\nrow,{}\n",
        report.column,
        join(&report.epochs),
        join(&report.rows)
    );
    write_file(index_path.as_ref(), index.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a heatmap CSV written by [`export_heatmap`].
pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (i, line) in text.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.parse().map_err(|_| Error::NonNumericCell {
                    row: i + 1,
                    column: String::new(),
                    value: s.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: width.unwrap(),
                found: row.len(),
            });
        }
        data.extend(row);
        height += 1;
    }
    Array2::from_shape_vec((height, width.unwrap_or(0)), data).map_err(|e| Error::Shape(e.to_string()))
}
