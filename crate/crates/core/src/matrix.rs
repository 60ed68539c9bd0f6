//! Row-major sample matrices (`n` samples × `d` columns).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let rows = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension("columns of unequal length".into()));
        }
        let data = (0..rows).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
        Ok(Matrix {
            rows,
            cols: cols.len(),
            data,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.cols).copied().collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · wᵀ` for a `k × cols` matrix `w` given as rows.
    pub fn project(&self, w: &[Vec<f64>]) -> Result<Matrix> {
        if w.iter().any(|row| row.len() != self.cols) {
            return Err(Error::Dimension(format!(
                "projection rows must have {} entries",
                self.cols
            )));
        }
        let data = (0..self.rows)
            .flat_map(|r| {
                let x = self.row(r);
                w.iter().map(move |wr| wr.iter().zip(x).map(|(a, b)| a * b).sum())
            })
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: w.len(),
            data,
        })
    }
}
