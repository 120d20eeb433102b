//! Numeric tables: CSV loading, column statistics, zero-one normalization
//! with 4-decimal quantization, and seeded train/validation splits.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest representable normalized value. Everything lives in one
/// four-digit fractional token, so 1.0 is clamped down to this.
pub const MAX_NORMALIZED: f64 = 0.9999;
/// Number of distinct quantized values (`0.0000 ..= 0.9999`).
pub const GRID_SIZE: u16 = 10_000;

/// A dense numeric table. Every row has `column_names.len()` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// A table that may contain missing cells (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub n_train: usize,
    pub seed: u64,
}

impl Table {
    pub fn new(column_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if column_names.is_empty() {
            return Err(Error::EmptyTable("no columns"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != column_names.len() {
                return Err(Error::RaggedRow {
                    row: i,
                    expected: column_names.len(),
                    found: row.len(),
                });
            }
        }
        Ok(Table { column_names, rows })
    }

    pub fn n_columns(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, index: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[index])
    }

    /// Writes the table as CSV. With `decimals`, every cell is printed with
    /// that many fractional digits; otherwise the shortest exact form is used.
    pub fn write_csv(&self, path: impl AsRef<Path>, decimals: Option<usize>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(&self.column_names.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| match decimals {
                    Some(d) => format!("{v:.d$}"),
                    None => format!("{v}"),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl IncompleteTable {
    pub fn n_missing(&self) -> usize {
        self.rows.iter().flatten().filter(|c| c.is_none()).count()
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumericCell {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

/// Reads a headed CSV in which every cell is a finite number.
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Table> {
    let incomplete = read_csv(path.as_ref(), None)?;
    let rows = incomplete
        .rows
        .into_iter()
        .map(|r| r.into_iter().map(|c| c.expect("no marker, no missing cells")).collect())
        .collect();
    Ok(Table {
        column_names: incomplete.column_names,
        rows,
    })
}

/// Reads a headed CSV where cells equal to `marker` are missing.
pub fn load_csv_with_missing(path: impl AsRef<Path>, marker: &str) -> Result<IncompleteTable> {
    read_csv(path.as_ref(), Some(marker))
}

fn read_csv(path: &Path, marker: Option<&str>) -> Result<IncompleteTable> {
    let mut reader = open_reader(path)?;
    let column_names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if column_names.is_empty() || column_names.iter().all(String::is_empty) {
        return Err(Error::EmptyTable("missing header"));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        if record.len() != column_names.len() {
            return Err(Error::RaggedRow {
                row: row_no,
                expected: column_names.len(),
                found: record.len(),
            });
        }
        let row = record
            .iter()
            .zip(&column_names)
            .map(|(raw, name)| match marker {
                Some(m) if raw == m => Ok(None),
                _ => parse_cell(raw, row_no, name).map(Some),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable("no data rows"));
    }
    Ok(IncompleteTable { column_names, rows })
}

/// Per-column exact min and max in a single pass.
pub fn compute_stats(table: &Table) -> Result<ColumnStats> {
    if table.rows.is_empty() {
        return Err(Error::EmptyTable("no rows to compute statistics"));
    }
    let n = table.n_columns();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for row in &table.rows {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(ColumnStats { min, max })
}

impl ColumnStats {
    pub fn n_columns(&self) -> usize {
        self.min.len()
    }

    pub fn range(&self, column: usize) -> f64 {
        self.max[column] - self.min[column]
    }

    /// Maps a normalized value back into source units.
    pub fn denormalize(&self, column: usize, normalized: f64) -> f64 {
        normalized * self.range(column) + self.min[column]
    }

    /// Normalizes a source value, clamping anything outside `[min, max]`
    /// onto the grid edges.
    pub fn normalize_clamped(&self, column: usize, x: f64) -> f64 {
        let t = ((x - self.min[column]) / self.range(column)).clamp(0.0, 1.0);
        quantize(t).expect("clamped into [0, 1]")
    }

    fn check_degenerate(&self, names: &[String]) -> Result<()> {
        for j in 0..self.n_columns() {
            if !(self.max[j] > self.min[j]) {
                return Err(Error::DegenerateColumn {
                    column: names.get(j).cloned().unwrap_or_else(|| j.to_string()),
                    value: self.min[j],
                });
            }
        }
        Ok(())
    }

    /// Two-row CSV: header, min row, max row.
    pub fn write_csv(&self, path: impl AsRef<Path>, column_names: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        write!(
            f,
            "{}\n{}\n{}\n",
            column_names.join(","),
            fmt(&self.min),
            fmt(&self.max)
        )
        .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, ColumnStats)> {
        let table = load_csv(path)?;
        if table.n_rows() != 2 {
            return Err(Error::EmptyTable("stats file must hold exactly a min row and a max row"));
        }
        let stats = ColumnStats {
            min: table.rows[0].clone(),
            max: table.rows[1].clone(),
        };
        if stats.min.iter().zip(&stats.max).any(|(a, b)| a > b) {
            return Err(Error::EmptyTable("stats file has min > max"));
        }
        Ok((table.column_names, stats))
    }
}

/// Round-half-up to 4 decimals, clamped to 0.9999.
pub fn quantize(x: f64) -> Result<f64> {
    quantize_code(x).map(code_to_value)
}

/// Grid index `k` such that the quantized value is `k / 10^4`.
pub fn quantize_code(x: f64) -> Result<u16> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfRange(x));
    }
    let k = (x * 10_000.0 + 0.5).floor() as u32;
    Ok(k.min(GRID_SIZE as u32 - 1) as u16)
}

pub fn code_to_value(code: u16) -> f64 {
    code as f64 / 10_000.0
}

/// Inverse of [`code_to_value`] for values already on the grid.
pub fn value_to_code(value: f64) -> Result<u16> {
    let scaled = value * 10_000.0;
    let k = scaled.round();
    if !(0.0..GRID_SIZE as f64).contains(&k) || (scaled - k).abs() > 1e-6 {
        return Err(Error::NotQuantized(value));
    }
    Ok(k as u16)
}

/// Zero-one normalization of every cell followed by [`quantize`].
pub fn normalize(table: &Table, stats: &ColumnStats) -> Result<Table> {
    if stats.n_columns() != table.n_columns() {
        return Err(Error::ColumnCountMismatch {
            expected: table.n_columns(),
            found: stats.n_columns(),
        });
    }
    stats.check_degenerate(&table.column_names)?;
    let rows = table
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, &x)| quantize((x - stats.min[j]) / stats.range(j)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        column_names: table.column_names.clone(),
        rows,
    })
}

/// Seeded permutation of `0..n`.
///
/// The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`;
/// the permutation is a descending Fisher-Yates pass where step `i` swaps
/// position `i` with `gen_range(0..=i)`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle_in_place(&mut idx, &mut rng);
    idx
}

pub(crate) fn shuffle_in_place<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Row indices of the (train, validation) halves.
pub fn split_indices(total: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.n_train == 0 || spec.n_train >= total {
        return Err(Error::InvalidSplit {
            n_train: spec.n_train,
            total,
        });
    }
    let mut perm = permutation(total, spec.seed);
    let val = perm.split_off(spec.n_train);
    Ok((perm, val))
}

pub fn split_shuffle(table: &Table, spec: SplitSpec) -> Result<(Table, Table)> {
    let (train_idx, val_idx) = split_indices(table.n_rows(), spec)?;
    let take = |idx: &[usize]| Table {
        column_names: table.column_names.clone(),
        rows: idx.iter().map(|&i| table.rows[i].clone()).collect(),
    };
    Ok((take(&train_idx), take(&val_idx)))
}
