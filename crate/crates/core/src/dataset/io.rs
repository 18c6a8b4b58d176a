use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{MultiViewDataset, Split};
use crate::error::{Error, Result};
use crate::nd::Matrix;

pub const MANIFEST: &str = "manifest.json";

/// Writes a headerless CSV, one matrix row per line, shortest round-trip decimals.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 8);
    for row in m.iter_rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, format!("row {r}"), e))?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::parse(
                    path,
                    format!("row {r}"),
                    format!("expected {c} columns, found {}", record.len()),
                ))
            }
            _ => {}
        }
        for (k, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|e| Error::parse(path, format!("row {r} column {k}"), e))?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub views: Vec<String>,
    pub labels: String,
    pub view_indicator: String,
    pub label_indicator: String,
    pub split: String,
}

impl DatasetFiles {
    fn standard(m: usize) -> Self {
        DatasetFiles {
            views: (0..m).map(|v| format!("view_{v}.csv")).collect(),
            labels: "Y.csv".into(),
            view_indicator: "W.csv".into(),
            label_indicator: "G.csv".into(),
            split: "split.csv".into(),
        }
    }
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub view_dims: Vec<usize>,
    pub seed: u64,
    pub files: DatasetFiles,
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| Error::parse(path, "manifest", e))?;
        let count = |field: &str| -> Result<u64> {
            root.get(field)
                .ok_or_else(|| Error::parse(path, field, "missing"))?
                .as_u64()
                .ok_or_else(|| Error::parse(path, field, "expected a non-negative integer"))
        };
        let n = count("n")? as usize;
        let m = count("m")? as usize;
        let c = count("c")? as usize;
        let seed = count("seed")?;
        let view_dims: Vec<usize> = root
            .get("view_dims")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse(path, "view_dims", "expected an array"))?
            .iter()
            .map(|v| v.as_u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::parse(path, "view_dims", "expected integers"))?;
        if view_dims.len() != m {
            return Err(Error::parse(
                path,
                "view_dims",
                format!("{} entries for m = {m}", view_dims.len()),
            ));
        }
        let files = match root.get("files") {
            None => DatasetFiles::standard(m),
            Some(v) => serde_json::from_value::<DatasetFiles>(v.clone())
                .map_err(|e| Error::parse(path, "files", e))?,
        };
        if files.views.len() != m {
            return Err(Error::parse(
                path,
                "files.views",
                format!("{} entries for m = {m}", files.views.len()),
            ));
        }
        Ok(DatasetManifest {
            n,
            m,
            c,
            view_dims,
            seed,
            files,
        })
    }
}

pub fn save_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        n: ds.n_samples(),
        m: ds.n_views(),
        c: ds.n_classes(),
        view_dims: ds.view_dims(),
        seed: ds.seed(),
        files: DatasetFiles::standard(ds.n_views()),
    };
    for (x, name) in ds.views().iter().zip(&manifest.files.views) {
        write_matrix_csv(x, &dir.join(name))?;
    }
    write_matrix_csv(ds.labels(), &dir.join(&manifest.files.labels))?;
    write_matrix_csv(ds.view_mask(), &dir.join(&manifest.files.view_indicator))?;
    write_matrix_csv(ds.label_mask(), &dir.join(&manifest.files.label_indicator))?;
    let split: String = ds.split().iter().map(|s| format!("{s}\n")).collect();
    let split_path = dir.join(&manifest.files.split);
    fs::write(&split_path, split).map_err(|e| Error::io(&split_path, e))?;

    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text, &path)?;

    let check = |m: &Matrix, rows: usize, cols: usize, file: &str| -> Result<()> {
        if m.shape() != (rows, cols) {
            return Err(Error::parse(
                dir.join(file),
                "shape",
                format!("expected {rows}x{cols}, found {}x{}", m.rows(), m.cols()),
            ));
        }
        Ok(())
    };
    let mut views = Vec::with_capacity(manifest.m);
    for (name, &d) in manifest.files.views.iter().zip(&manifest.view_dims) {
        let x = read_matrix_csv(&dir.join(name))?;
        check(&x, manifest.n, d, name)?;
        views.push(x);
    }
    let y = read_matrix_csv(&dir.join(&manifest.files.labels))?;
    check(&y, manifest.n, manifest.c, &manifest.files.labels)?;
    let w = read_matrix_csv(&dir.join(&manifest.files.view_indicator))?;
    check(&w, manifest.n, manifest.m, &manifest.files.view_indicator)?;
    let g = read_matrix_csv(&dir.join(&manifest.files.label_indicator))?;
    check(&g, manifest.n, manifest.c, &manifest.files.label_indicator)?;

    let split_path = dir.join(&manifest.files.split);
    let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| {
            l.parse::<Split>()
                .map_err(|e| Error::parse(&split_path, format!("line {}", k + 1), e))
        })
        .collect::<Result<Vec<_>>>()?;
    MultiViewDataset::new(views, y, w, g, split, manifest.seed)
}
