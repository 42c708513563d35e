//! Incomplete datasets: observed proxies `X*` plus derived indicators `R`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("row {row} has {got} cells, expected {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("non-finite value at row {row}, column X{col}")]
    NonFinite { row: usize, col: usize },
    #[error("dataset needs at least one variable")]
    NoVariables,
}

/// Row-major table of `n × K` proxies; `NaN` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    k: usize,
    n: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(k: usize, rows: Vec<Vec<Option<f64>>>) -> Result<Self, DataError> {
        if k == 0 {
            return Err(DataError::NoVariables);
        }
        let n = rows.len();
        let mut values = Vec::with_capacity(n * k);
        for (row, cells) in rows.into_iter().enumerate() {
            if cells.len() != k {
                return Err(DataError::RaggedRow { row, got: cells.len(), expected: k });
            }
            for (j, c) in cells.into_iter().enumerate() {
                match c {
                    Some(v) if !v.is_finite() => return Err(DataError::NonFinite { row, col: j + 1 }),
                    Some(v) => values.push(v),
                    None => values.push(f64::NAN),
                }
            }
        }
        Ok(Dataset { k, n, values })
    }

    /// Builds a dataset from complete values and a missingness mask
    /// (`observed[i * k + j]` for variable `j + 1` of row `i`).
    pub fn from_masked(k: usize, complete: &[f64], observed: &[bool]) -> Self {
        assert_eq!(complete.len(), observed.len());
        assert_eq!(complete.len() % k, 0);
        let values = complete.iter().zip(observed).map(|(&v, &o)| if o { v } else { f64::NAN }).collect();
        Dataset { k, n: complete.len() / k, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Proxy `X*_j` of a row (`j` is 1-based).
    pub fn x(&self, row: usize, j: usize) -> Option<f64> {
        let v = self.values[row * self.k + j - 1];
        (!v.is_nan()).then_some(v)
    }

    /// Raw proxy with `NaN` for missing.
    pub fn raw(&self, row: usize, j: usize) -> f64 {
        self.values[row * self.k + j - 1]
    }

    /// Indicator `R_j` of a row.
    pub fn r(&self, row: usize, j: usize) -> bool {
        !self.raw(row, j).is_nan()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.k..(row + 1) * self.k]
    }

    /// True when `X_j` is observed in every row.
    pub fn fully_observed(&self, j: usize) -> bool {
        (0..self.n).all(|i| self.r(i, j))
    }

    /// Fraction of rows with `R_j = 1`.
    pub fn observed_fraction(&self, j: usize) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (0..self.n).filter(|&i| self.r(i, j)).count() as f64 / self.n as f64
    }
}
