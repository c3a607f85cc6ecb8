//! On-disk datasets: a JSON manifest pointing at CSV files.
//!
//! ```json
//! {
//!   "schema": "mmfa-dataset/1",
//!   "instances": 500,
//!   "gaussian": { "path": "gaussian.csv", "features": 10, "mask": "mask.csv" },
//!   "categorical": [
//!     { "path": "cat0.csv", "categories": 5, "trials": { "column": "trials" } },
//!     { "path": "cat1.csv", "categories": 3, "trials": 1 }
//!   ]
//! }
//! ```
//!
//! Every CSV has a header row. Real-valued cells that are empty or `NA` are
//! missing. Categorical files hold one count column per category plus,
//! optionally, the named trials column; without a `trials` entry the row
//! sums are the trial counts. Paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalBlock, GaussianBlock, HeteroDataset, ObservationMask};
use crate::error::{MmfaError, Result};

pub const DATASET_SCHEMA: &str = "mmfa-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<GaussianEntry>,
    #[serde(default)]
    pub categorical: Vec<CategoricalEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEntry {
    pub path: String,
    pub features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEntry {
    pub path: String,
    pub categories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<TrialsSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrialsSpec {
    Constant(u32),
    Column { column: String },
}

/// Scientific notation with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn schema(msg: String) -> MmfaError {
    MmfaError::Schema(msg)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> MmfaError {
    let msg = format!("{}: {e}", path.display());
    match e.kind() {
        csv::ErrorKind::Io(io) => MmfaError::Io(std::io::Error::new(io.kind(), msg)),
        _ => schema(msg),
    }
}

fn check_shape(path: &Path, t: &Table, rows: usize, cols: usize) -> Result<()> {
    if t.rows.len() != rows || t.header.len() != cols {
        return Err(MmfaError::DimensionMismatch(format!(
            "{}: manifest declares {rows} instances x {cols} features, file has {} rows x {} columns",
            path.display(),
            t.rows.len(),
            t.header.len()
        )));
    }
    Ok(())
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

fn parse_f64(path: &Path, row: usize, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| schema(format!("{} row {}: {cell:?} is not a finite number", path.display(), row + 1)))
}

fn parse_count(path: &Path, row: usize, cell: &str) -> Result<u32> {
    cell.parse::<u32>()
        .map_err(|_| schema(format!("{} row {}: {cell:?} is not a nonnegative integer count", path.display(), row + 1)))
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.schema != DATASET_SCHEMA {
            return Err(schema(format!("unsupported dataset schema {:?}, expected {DATASET_SCHEMA:?}", m.schema)));
        }
        Ok(m)
    }

    /// Loads the dataset described by this manifest; relative paths are
    /// resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<HeteroDataset<f64>> {
        let p = self.instances;
        let resolve = |rel: &str| -> PathBuf { base.join(rel) };

        let gaussian = match &self.gaussian {
            None => None,
            Some(g) => {
                let path = resolve(&g.path);
                let t = read_table(&path)?;
                check_shape(&path, &t, p, g.features)?;
                let mut values = DMatrix::zeros(p, g.features);
                let mut mask = ObservationMask::all_observed(p, g.features);
                let mut any_missing = false;
                for (i, row) in t.rows.iter().enumerate() {
                    for (j, cell) in row.iter().enumerate() {
                        if is_missing(cell) {
                            mask.set(i, j, false);
                            any_missing = true;
                        } else {
                            values[(i, j)] = parse_f64(&path, i, cell)?;
                        }
                    }
                }
                if let Some(mp) = &g.mask {
                    let mpath = resolve(mp);
                    let mt = read_table(&mpath)?;
                    check_shape(&mpath, &mt, p, g.features)?;
                    for (i, row) in mt.rows.iter().enumerate() {
                        for (j, cell) in row.iter().enumerate() {
                            match cell.as_str() {
                                "1" => {}
                                "0" => {
                                    mask.set(i, j, false);
                                    any_missing = true;
                                }
                                other => {
                                    return Err(schema(format!("{} row {}: mask cell {other:?} is not 0/1", mpath.display(), i + 1)))
                                }
                            }
                        }
                    }
                }
                Some(GaussianBlock::new(values, any_missing.then_some(mask))?)
            }
        };

        let mut categorical = Vec::with_capacity(self.categorical.len());
        for entry in &self.categorical {
            let path = resolve(&entry.path);
            let t = read_table(&path)?;
            let trials_col = match &entry.trials {
                Some(TrialsSpec::Column { column }) => Some(
                    t.header
                        .iter()
                        .position(|h| h == column)
                        .ok_or_else(|| schema(format!("{}: no trials column {column:?}", path.display())))?,
                ),
                _ => None,
            };
            let count_cols: Vec<usize> = (0..t.header.len()).filter(|&c| Some(c) != trials_col).collect();
            if count_cols.len() != entry.categories || t.rows.len() != p {
                return Err(MmfaError::DimensionMismatch(format!(
                    "{}: manifest declares {p} instances x {} categories, file has {} rows x {} count columns",
                    path.display(),
                    entry.categories,
                    t.rows.len(),
                    count_cols.len()
                )));
            }
            let mut full = DMatrix::<u32>::zeros(p, entry.categories);
            for (i, row) in t.rows.iter().enumerate() {
                let mut sum = 0u64;
                for (d, &c) in count_cols.iter().enumerate() {
                    let z = parse_count(&path, i, &row[c])?;
                    full[(i, d)] = z;
                    sum += z as u64;
                }
                let declared = match (&entry.trials, trials_col) {
                    (Some(TrialsSpec::Constant(n)), _) => Some(*n as u64),
                    (_, Some(c)) => Some(parse_count(&path, i, &row[c])? as u64),
                    _ => None,
                };
                if let Some(n) = declared {
                    if n != sum {
                        return Err(schema(format!(
                            "{} row {}: counts sum to {sum} but trials is {n}",
                            path.display(),
                            i + 1
                        )));
                    }
                }
            }
            categorical.push(CategoricalBlock::from_counts(&full)?);
        }
        if gaussian.is_none() && categorical.is_empty() {
            return Err(schema("manifest lists no modality".into()));
        }
        HeteroDataset::new(gaussian, categorical)
    }
}

/// Reads a manifest file and its dataset.
pub fn load_dataset(manifest: &Path) -> Result<HeteroDataset<f64>> {
    let m = DatasetManifest::read(manifest)?;
    m.load(manifest.parent().unwrap_or(Path::new(".")))
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `rows × cols` numbers with a `prefix0..` header.
pub fn write_matrix_csv(path: &Path, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    write_csv(path, &header, (0..m.nrows()).map(|i| m.row(i).iter().map(|&x| fmt_f64(x)).collect()))
}

/// Writes `data` as `manifest.json` plus CSVs into `dir`; masked real-valued
/// entries are written as empty cells. Returns the manifest path.
pub fn write_dataset(dir: &Path, data: &HeteroDataset<f64>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = data.instances();
    let gaussian = match data.gaussian() {
        None => None,
        Some(g) => {
            let header: Vec<String> = (0..g.features()).map(|j| format!("y{j}")).collect();
            let rows = (0..p).map(|i| {
                (0..g.features())
                    .map(|j| if g.is_observed(i, j) { fmt_f64(g.values()[(i, j)]) } else { String::new() })
                    .collect()
            });
            write_csv(&dir.join("gaussian.csv"), &header, rows)?;
            Some(GaussianEntry { path: "gaussian.csv".into(), features: g.features(), mask: None })
        }
    };
    let mut categorical = Vec::new();
    for (m, block) in data.categorical().iter().enumerate() {
        let name = format!("categorical{m}.csv");
        let full = block.full_counts();
        let mut header: Vec<String> = (0..block.categories()).map(|d| format!("z{d}")).collect();
        header.push("trials".into());
        let rows = (0..p).map(|i| {
            let mut r: Vec<String> = full.row(i).iter().map(|z| z.to_string()).collect();
            r.push(format!("{}", block.trials()[i] as u64));
            r
        });
        write_csv(&dir.join(&name), &header, rows)?;
        categorical.push(CategoricalEntry {
            path: name,
            categories: block.categories(),
            trials: Some(TrialsSpec::Column { column: "trials".into() }),
        });
    }
    let manifest = DatasetManifest { schema: DATASET_SCHEMA.into(), instances: p, gaussian, categorical };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}
