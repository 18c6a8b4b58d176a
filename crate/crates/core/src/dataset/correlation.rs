use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nd::Matrix;

/// Conditional co-occurrence `C[i][j] = P(label j | label i)` and its truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCorrelation {
    pub full: Matrix,
    pub truncated: Matrix,
    pub sigma: f64,
}

impl LabelCorrelation {
    pub fn new(full: Matrix, sigma: f64) -> Result<Self> {
        let truncated = truncate_correlation(&full, sigma)?;
        Ok(LabelCorrelation {
            full,
            truncated,
            sigma,
        })
    }
}

/// `C[i][j] = (Y[:,i] . Y[:,j]) / (Y[:,i] . Y[:,i])` over the rows of `labels`.
///
/// A label that never occurs gets the unit row `e_i`.
pub fn build_correlation(labels: &Matrix) -> Matrix {
    let c = labels.cols();
    let mut co = Matrix::zeros(c, c);
    for row in labels.iter_rows() {
        for i in 0..c {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..c {
                co[(i, j)] += row[i] * row[j];
            }
        }
    }
    Matrix::from_fn(c, c, |i, j| {
        let count = co[(i, i)];
        if count == 0.0 {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            co[(i, j)] / count
        }
    })
}

/// Keeps entries strictly above `sigma` and zeroes the rest.
pub fn truncate_correlation(c: &Matrix, sigma: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::contract(format!(
            "truncation threshold must lie in [0, 1], got {sigma}"
        )));
    }
    Ok(c.map(|x| if x > sigma { x } else { 0.0 }))
}

/// Sample-to-sample similarity in label space for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGraph {
    /// `(Y Yᵀ) ./ (G Gᵀ)`, zero where no label is jointly known.
    pub similarity: Matrix,
    /// 1 where at least one label is jointly known, else 0.
    pub valid: Matrix,
}

pub fn label_similarity_graph(labels: &Matrix, label_mask: &Matrix) -> Result<LabelGraph> {
    labels.check_same_shape(label_mask, "label_similarity_graph")?;
    let yy = labels.matmul(&labels.transpose())?;
    let gg = label_mask.matmul(&label_mask.transpose())?;
    let valid = gg.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    let similarity = yy.zip_map(&gg, |a, b| if b > 0.0 { a / b } else { 0.0 })?;
    Ok(LabelGraph { similarity, valid })
}

/// Writes the square submatrix of `c` on `labels` as CSV, with a header row
/// of label indices.
pub fn export_correlation_csv(c: &Matrix, labels: &[usize], path: &Path) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= c.rows()) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} labels",
            c.rows()
        )));
    }
    let sub = c.submatrix(labels);
    let mut out = String::new();
    let header: Vec<String> = labels.iter().map(usize::to_string).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in sub.iter_rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
