//! Dataset ingestion: dense CSV and sparse `label idx:val` text.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Sparse,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "sparse" | "svmlight" | "libsvm" => Ok(Self::Sparse),
            other => Err(Error::Config(format!("unknown data format '{other}' (expected csv or sparse)"))),
        }
    }
}

/// Per-column z-scoring parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Fits on the given rows. Constant columns get scale 1.
    pub fn fit(features: &DMatrix<f64>, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData("cannot standardize on zero rows".into()));
        }
        let d = features.ncols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for (j, (m, s)) in mean.iter_mut().zip(scale.iter_mut()).enumerate() {
            *m = rows.iter().map(|&i| features[(i, j)]).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (features[(i, j)] - *m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            *s = if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 };
        }
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        crate::error::check_dims("standardization columns", self.mean.len(), features.ncols())?;
        Ok(DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.scale[j]
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub features: DMatrix<f64>,
    /// `None` marks an unlabeled row.
    pub labels: Vec<Option<f64>>,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: DMatrix<f64>, labels: Vec<Option<f64>>) -> Result<Self> {
        crate::error::check_dims("label count", features.nrows(), labels.len())?;
        if features.ncols() == 0 {
            return Err(Error::Data("dataset has zero feature columns".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite feature values".into()));
        }
        if labels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite labels".into()));
        }
        let feature_names = (1..=features.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self { name: name.into(), features, labels, feature_names, standardization: None })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    /// Labels of the given rows; errors if any of them is unlabeled.
    pub fn labels_of(&self, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&i| self.labels[i].ok_or_else(|| Error::Data(format!("row {i} has no label"))))
            .collect()
    }

    /// Z-scores every column with statistics from `fit_rows`, and keeps them.
    pub fn standardize(&mut self, fit_rows: &[usize]) -> Result<()> {
        let st = Standardization::fit(&self.features, fit_rows)?;
        self.features = st.apply(&self.features)?;
        self.standardization = Some(st);
        Ok(())
    }
}

/// Writes a headed CSV with the feature columns followed by `label_field`
/// (empty cells for unlabeled rows). Readable by [`read_csv`].
pub fn write_csv<W: std::io::Write>(
    writer: W,
    features: &DMatrix<f64>,
    feature_names: &[String],
    labels: &[Option<f64>],
    label_field: &str,
) -> Result<()> {
    crate::error::check_dims("feature names", features.ncols(), feature_names.len())?;
    crate::error::check_dims("label count", features.nrows(), labels.len())?;
    let err = |e: csv::Error| Error::Data(format!("csv output: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
    header.push(label_field);
    w.write_record(&header).map_err(err)?;
    for (i, label) in labels.iter().enumerate() {
        let mut rec: Vec<String> = features.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(label.map(|v| format!("{v}")).unwrap_or_default());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

impl Dataset {
    pub fn write_csv<W: std::io::Write>(&self, writer: W, label_field: &str) -> Result<()> {
        write_csv(writer, &self.features, &self.feature_names, &self.labels, label_field)
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

pub fn load_dataset(path: &Path, format: DataFormat, label_field: &str) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut ds = match format {
        DataFormat::Csv => read_csv(file, label_field)?,
        DataFormat::Sparse => read_sparse(BufReader::new(file))?,
    };
    ds.name = dataset_name(path);
    Ok(ds)
}

fn parse_cell(text: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| Error::Parse {
        line,
        column: column.to_string(),
        message: format!("'{text}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, column: column.to_string(), message: format!("'{text}' is not finite") });
    }
    Ok(v)
}

/// Reads a headed CSV. The `label_field` column holds labels (empty =
/// unlabeled); every other column is a feature.
pub fn read_csv<R: Read>(reader: R, label_field: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, column: String::new(), message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let label_col = header
        .iter()
        .position(|h| h == label_field)
        .ok_or_else(|| Error::Data(format!("label column '{label_field}' not found in header {header:?}")))?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&j| j != label_col).collect();
    if feature_cols.is_empty() {
        return Err(Error::Data("CSV has zero feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            column: String::new(),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for &j in &feature_cols {
            values.push(parse_cell(&record[j], line, &header[j])?);
        }
        let label = &record[label_col];
        labels.push(if label.is_empty() { None } else { Some(parse_cell(label, line, label_field)?) });
    }
    let features = DMatrix::from_row_slice(labels.len(), feature_cols.len(), &values);
    let mut ds = Dataset::new("csv", features, labels)?;
    ds.feature_names = feature_cols.iter().map(|&j| header[j].clone()).collect();
    Ok(ds)
}

/// Reads sparse rows `label idx:val idx:val ...` with 1-based indices.
/// A label of `?` marks an unlabeled row; `#` starts a comment.
pub fn read_sparse<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = tokens.next().unwrap_or_default();
        labels.push(if label == "?" { None } else { Some(parse_cell(label, line_no, "label")?) });
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                column: tok.to_string(),
                message: "expected idx:val".into(),
            })?;
            let idx: usize = idx.parse().ok().filter(|&i| i >= 1).ok_or_else(|| Error::Parse {
                line: line_no,
                column: idx.to_string(),
                message: "feature index must be a positive integer".into(),
            })?;
            entries.push((idx - 1, parse_cell(val, line_no, &idx.to_string())?));
            dim = dim.max(idx);
        }
        rows.push(entries);
    }
    if dim == 0 {
        return Err(Error::Data("sparse file has zero feature columns".into()));
    }
    let mut features = DMatrix::zeros(rows.len(), dim);
    for (i, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            features[(i, j)] = v;
        }
    }
    Dataset::new("sparse", features, labels)
}
