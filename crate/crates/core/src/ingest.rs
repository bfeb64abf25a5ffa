//! CSV ingestion, dataset preprocessing recipes and synthetic data.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distributions::sample_exponential;
use crate::error::{Error, Result};
use crate::matrix::{FactorPair, ObservedMatrix};
use crate::rng::ChainRng;

pub const DEFAULT_MISSING_TOKEN: &str = "NA";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    pub missing_token: String,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: false,
            missing_token: DEFAULT_MISSING_TOKEN.to_string(),
        }
    }
}

/// Parsed cells before any domain checks. Missing cells hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl RawTable {
    /// Validates nonnegativity of observed cells.
    pub fn into_observed(self) -> Result<ObservedMatrix> {
        ObservedMatrix::new(self.values, self.mask)
    }

    /// Replaces the inferred mask. A cell marked observed must hold a value.
    pub fn apply_mask(mut self, mask: &Array2<bool>) -> Result<Self> {
        if mask.dim() != self.mask.dim() {
            return Err(Error::dims(self.mask.dim(), mask.dim()));
        }
        for ((r, c), &m) in mask.indexed_iter() {
            if m && !self.mask[[r, c]] {
                return Err(Error::Format(format!(
                    "mask marks cell ({r}, {c}) observed but the data cell is missing"
                )));
            }
        }
        self.mask = mask.clone();
        Ok(self)
    }
}

fn read_records<R: Read>(reader: R, has_header: bool) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    let width = records[0].len();
    if width == 0 {
        return Err(Error::Format("empty first row".into()));
    }
    if let Some((row, rec)) = records.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::Format(format!(
            "ragged row {row}: {} fields, expected {width}",
            rec.len()
        )));
    }
    Ok(records)
}

/// Parses a rectangular numeric table; empty cells and `missing_token`
/// cells become unobserved.
pub fn read_table<R: Read>(reader: R, opts: &CsvOptions) -> Result<RawTable> {
    let records = read_records(reader, opts.has_header)?;
    let (rows, cols) = (records.len(), records[0].len());
    let mut values = Array2::zeros((rows, cols));
    let mut mask = Array2::from_elem((rows, cols), false);
    for (r, rec) in records.iter().enumerate() {
        for (c, cell) in rec.iter().enumerate() {
            if cell.is_empty() || cell == opts.missing_token {
                continue;
            }
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                row: r,
                col: c,
                value: cell.to_string(),
            })?;
            values[[r, c]] = v;
            mask[[r, c]] = true;
        }
    }
    Ok(RawTable { values, mask })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn read_table_path(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawTable> {
    read_table(open(path.as_ref())?, opts)
}

/// Loads a header-less CSV into an observed matrix.
pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<ObservedMatrix> {
    load_csv_with(
        path,
        &CsvOptions {
            missing_token: missing_token.to_string(),
            ..CsvOptions::default()
        },
    )
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<ObservedMatrix> {
    read_table_path(path, opts)?.into_observed()
}

/// Reads a 0/1 mask file.
pub fn load_mask(path: impl AsRef<Path>, has_header: bool) -> Result<Array2<bool>> {
    let records = read_records(open(path.as_ref())?, has_header)?;
    let (rows, cols) = (records.len(), records[0].len());
    let mut mask = Array2::from_elem((rows, cols), false);
    for (r, rec) in records.iter().enumerate() {
        for (c, cell) in rec.iter().enumerate() {
            mask[[r, c]] = match cell {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        row: r,
                        col: c,
                        value: other.to_string(),
                    })
                }
            };
        }
    }
    Ok(mask)
}

/// Writes observed values in shortest round-trip form and `missing_token`
/// for unobserved cells.
pub fn write_csv<W: Write>(writer: W, data: &ObservedMatrix, missing_token: &str) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for r in 0..data.rows() {
        let row: Vec<String> = (0..data.cols())
            .map(|c| {
                if data.is_observed(r, c) {
                    data.value(r, c).to_string()
                } else {
                    missing_token.to_string()
                }
            })
            .collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv_path(path: impl AsRef<Path>, data: &ObservedMatrix, missing_token: &str) -> Result<()> {
    write_csv(File::create(path)?, data, missing_token)
}

pub fn write_matrix_csv<W: Write>(writer: W, m: &Array2<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in m.rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Preprocessing applied to raw dataset values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case")]
pub enum DatasetRecipe {
    /// Undo the natural log, cap, and round to integers. With
    /// `cap_after_exp = false` the cap is applied on the log scale instead.
    GdscIc50 { cap_value: f64, cap_after_exp: bool },
    /// Multiply by `scale_factor` and round to integers.
    GeneBodyMeth { scale_factor: f64 },
    Raw,
}

impl DatasetRecipe {
    pub fn gdsc() -> Self {
        DatasetRecipe::GdscIc50 {
            cap_value: 100.0,
            cap_after_exp: true,
        }
    }

    pub fn methylation() -> Self {
        DatasetRecipe::GeneBodyMeth { scale_factor: 20.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            DatasetRecipe::GdscIc50 { cap_value, .. } => ("cap_value", cap_value),
            DatasetRecipe::GeneBodyMeth { scale_factor } => ("scale_factor", scale_factor),
            DatasetRecipe::Raw => return Ok(()),
        };
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
        }
    }

    /// Transform of one observed value. Rounding is half away from zero.
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            DatasetRecipe::GdscIc50 {
                cap_value,
                cap_after_exp: true,
            } => v.exp().min(cap_value).round(),
            DatasetRecipe::GdscIc50 {
                cap_value,
                cap_after_exp: false,
            } => v.min(cap_value).exp().round(),
            DatasetRecipe::GeneBodyMeth { scale_factor } => (v * scale_factor).round(),
            DatasetRecipe::Raw => v,
        }
    }
}

impl fmt::Display for DatasetRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetRecipe::GdscIc50 { .. } => "gdsc",
            DatasetRecipe::GeneBodyMeth { .. } => "meth",
            DatasetRecipe::Raw => "raw",
        })
    }
}

impl FromStr for DatasetRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gdsc" => Ok(DatasetRecipe::gdsc()),
            "meth" => Ok(DatasetRecipe::methylation()),
            "raw" => Ok(DatasetRecipe::Raw),
            other => Err(Error::Config(format!(
                "unknown recipe {other:?} (expected gdsc, meth or raw)"
            ))),
        }
    }
}

/// Applies `recipe` to the observed cells of a raw table. Raw GDSC values
/// are log-scale and may be negative, so this runs before domain checks.
pub fn preprocess_table(mut table: RawTable, recipe: &DatasetRecipe) -> Result<RawTable> {
    recipe.validate()?;
    for ((r, c), v) in table.values.indexed_iter_mut() {
        if table.mask[[r, c]] {
            *v = recipe.apply(*v);
        }
    }
    Ok(table)
}

pub fn preprocess(data: &ObservedMatrix, recipe: &DatasetRecipe) -> Result<ObservedMatrix> {
    let table = RawTable {
        values: data.values().clone(),
        mask: data.mask().clone(),
    };
    preprocess_table(table, recipe)?.into_observed()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub lambda: f64,
    pub noise_var: f64,
    pub observed_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub data: ObservedMatrix,
    pub truth: FactorPair,
    pub true_sigma2: f64,
}

/// Draws data from the exponential-prior generative model: `W`, `Z` entries
/// from `E(λ)`, `A = WZ + N(0, noise_var)` clamped at zero, and a uniform
/// mask covering `round(fraction·M·N)` cells (at least one).
pub fn synth_gee(spec: &SynthSpec) -> Result<SyntheticData> {
    let SynthSpec {
        rows,
        cols,
        rank,
        lambda,
        noise_var,
        observed_fraction,
        seed,
    } = *spec;
    if rows == 0 || cols == 0 || rank == 0 {
        return Err(Error::InvalidParameter("dimensions must be positive".into()));
    }
    if !(observed_fraction > 0.0 && observed_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "observed fraction must lie in (0, 1], got {observed_fraction}"
        )));
    }
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let mut rng = ChainRng::new(seed, 0);
    let mut w = Array2::zeros((rows, rank));
    for v in w.iter_mut() {
        *v = sample_exponential(lambda, &mut rng)?;
    }
    let mut z = Array2::zeros((rank, cols));
    for v in z.iter_mut() {
        *v = sample_exponential(lambda, &mut rng)?;
    }
    let mut values = w.dot(&z);
    if noise_var > 0.0 {
        let normal = Normal::new(0.0, noise_var.sqrt())
            .map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;
        for v in values.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    let total = rows * cols;
    let count = ((observed_fraction * total as f64).round() as usize).clamp(1, total);
    let mut mask = Array2::from_elem((rows, cols), false);
    if count == total {
        mask.fill(true);
    } else {
        for i in index::sample(&mut rng, total, count) {
            mask[[i / cols, i % cols]] = true;
        }
    }
    Ok(SyntheticData {
        data: ObservedMatrix::new(values, mask)?,
        truth: FactorPair::new(w, z)?,
        true_sigma2: noise_var,
    })
}
