//! Importance-distribution export: per-example and mean `S`, CSV files and a
//! PPM heatmap.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{Batch, Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{Extraction, Model};
use crate::numerics::{Graph, Mode};

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceExport {
    pub task: String,
    /// One row per example, one column per layer `0..=l`.
    pub per_example: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Eval-mode importance distribution of every example.
pub fn importance_matrix(model: &Model, examples: &[&Example]) -> Result<Vec<Vec<f64>>> {
    if !matches!(model.extraction(), Extraction::Dynamic(_) | Extraction::Fixed(_)) {
        return Err(Error::Config("model has no importance distribution".into()));
    }
    let max_len = model.config().encoder.max_len;
    let mut rows = Vec::with_capacity(examples.len());
    for e in examples {
        let batch = Batch::from_examples(&[e], None, max_len)?;
        let mut g = Graph::with_params(model.params(), Mode::Eval);
        let trace = model.forward(&mut g, &batch.ids[0], &batch.mask[0], 0)?;
        let s = trace.s.expect("extraction produces S");
        rows.push(g.value(s).data().to_vec());
    }
    Ok(rows)
}

/// Column means of a non-empty matrix.
pub fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let width = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; width];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

/// Per-example and mean importance of a dynamic-extractor model.
pub fn analyze(model: &Model, dataset: &Dataset) -> Result<ImportanceExport> {
    if !matches!(model.extraction(), Extraction::Dynamic(_)) {
        return Err(Error::Config(format!(
            "variant {} has no dynamic extractor; importance analysis needs per-example distributions",
            model.config().variant
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Input("cannot analyze an empty dataset".into()));
    }
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let per_example = importance_matrix(model, &refs)?;
    let mean = column_mean(&per_example);
    Ok(ImportanceExport {
        task: dataset.spec.name.clone(),
        per_example,
        mean,
    })
}

fn layer_header(first: &str, layers: usize) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain((0..layers).map(|i| format!("layer_{i}")))
        .collect()
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = (String, Vec<f64>)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for (id, values) in rows {
        // `{:?}` prints the shortest representation that parses back exactly.
        let record = std::iter::once(id).chain(values.iter().map(|v| format!("{v:?}")));
        w.write_record(record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `example_id,layer_0,...,layer_l`, one row per example.
pub fn write_per_example_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let layers = rows.first().map_or(0, Vec::len);
    write_rows(
        path,
        layer_header("example_id", layers),
        rows.iter().enumerate().map(|(i, r)| (i.to_string(), r.clone())),
    )
}

/// `task,layer_0,...,layer_l`, one row per task run.
pub fn write_mean_csv(path: &Path, runs: &[(String, Vec<f64>)]) -> Result<()> {
    let layers = runs.first().map_or(0, |r| r.1.len());
    write_rows(path, layer_header("task", layers), runs.iter().cloned())
}

/// Reads a CSV written by this module back into (row ids, values).
pub fn read_importance_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(e.to_string()))?
        .clone();
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("layer_{i}") {
            return Err(Error::Data {
                path: path.into(),
                row: 0,
                msg: format!("unexpected column {h:?}"),
            });
        }
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let data_err = |msg: String| Error::Data {
            path: path.into(),
            row,
            msg,
        };
        let record = record.map_err(|e| data_err(e.to_string()))?;
        ids.push(record.get(0).unwrap_or_default().to_string());
        let values = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| data_err(format!("not a number: {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok((ids, rows))
}

/// Binary PPM heatmap: one band of `cell_h` pixel rows per matrix row and
/// `cell_w` pixels per column, white at 0 shading to dark blue at the matrix
/// maximum.
pub fn render_heatmap(rows: &[Vec<f64>], cell_w: usize, cell_h: usize) -> Vec<u8> {
    let cols = rows.first().map_or(0, Vec::len);
    let (width, height) = (cols * cell_w, rows.len() * cell_h);
    let max = rows.iter().flatten().copied().fold(0.0f64, f64::max);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for row in rows {
        let mut line = Vec::with_capacity(width * 3);
        for &v in row {
            let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
            let shade = |lo: f64| (255.0 - t * (255.0 - lo)).round() as u8;
            let px = [shade(8.0), shade(48.0), shade(107.0)];
            for _ in 0..cell_w {
                line.extend_from_slice(&px);
            }
        }
        for _ in 0..cell_h {
            out.extend_from_slice(&line);
        }
    }
    out
}

pub fn write_heatmap(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&render_heatmap(rows, 24, 2)).map_err(|e| Error::io(path, e))
}
