//! Labeled datasets, train-fitted standardisation and plain CSV I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, RevarError};
use crate::numkit::{mean, std_dev, Matrix};

/// Inputs plus one target per row. For classifiers the target holds the
/// class index as a whole number.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(RevarError::Dimension {
                context: "Dataset targets",
                expected: x.rows(),
                got: y.len(),
            });
        }
        Ok(Dataset { x, y })
    }

    pub fn empty(dim: usize) -> Self {
        Dataset {
            x: Matrix::zeros(0, dim),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Number of classes implied by the largest label.
    pub fn n_classes(&self) -> usize {
        self.y.iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1
    }
}

/// Per-column affine map fitted on training data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    /// Target shift/scale; identity for classification.
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Standardizer {
    pub fn fit(data: &Dataset, standardize_targets: bool) -> Self {
        let cols = data.dim();
        let mut x_mean = Vec::with_capacity(cols);
        let mut x_scale = Vec::with_capacity(cols);
        for c in 0..cols {
            let col = data.x.col(c);
            x_mean.push(mean(&col));
            let s = std_dev(&col);
            x_scale.push(if s > 0.0 { s } else { 1.0 });
        }
        let (y_mean, y_scale) = if standardize_targets {
            let s = std_dev(&data.y);
            (mean(&data.y), if s > 0.0 { s } else { 1.0 })
        } else {
            (0.0, 1.0)
        };
        Standardizer {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn transform_x(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.x_mean[c]) / self.x_scale[c];
            }
        }
        out
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: self.transform_x(&data.x),
            y: data
                .y
                .iter()
                .map(|v| (v - self.y_mean) / self.y_scale)
                .collect(),
        }
    }
}

/// Renders a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.16e}")
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| RevarError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| RevarError::io(path, e))
}

/// Reads a numeric CSV with a header row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| RevarError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| RevarError::Format {
            path: path.display().to_string(),
            message: "empty file".into(),
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| RevarError::Format {
            path: path.display().to_string(),
            message: format!("row {}: {e}", i + 1),
        })?;
        if row.len() != header.len() {
            return Err(RevarError::Format {
                path: path.display().to_string(),
                message: format!("row {} has {} cells, header has {}", i + 1, row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_centres_train() {
        let x = Matrix::from_rows(&[[1.0, 10.0], [3.0, 10.0], [5.0, 10.0]]).unwrap();
        let d = Dataset::new(x, vec![2.0, 4.0, 9.0]).unwrap();
        let s = Standardizer::fit(&d, true);
        let t = s.transform(&d);
        assert!(mean(&t.x.col(0)).abs() < 1e-12);
        assert!((std_dev(&t.x.col(0)) - 1.0).abs() < 1e-12);
        assert_eq!(t.x.col(1), vec![0.0; 3]);
        assert!((std_dev(&t.y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn float_rendering_round_trips() {
        for v in [0.1, -3.0e-300, 1.0 / 3.0, 12345.678, f64::MAX] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec![1.0, 0.25], vec![-2.5, 1e-9]];
        write_csv(&p, &["a".into(), "b".into()], &rows).unwrap();
        let (h, back) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(back, rows);
    }
}
