//! Shared training plumbing: loss logs and deterministic minibatch order.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng64;

/// Per-step training record, written as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Values of `name` on rows where it is not NaN.
    pub fn present(&self, name: &str) -> Vec<f64> {
        self.column(name).unwrap_or_default().into_iter().filter(|v| !v.is_nan()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if i == 0 {
                    let _ = write!(out, "{}", *v as u64);
                } else if v.is_nan() {
                    out.push_str("nan");
                } else {
                    let _ = write!(out, "{v:.9e}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            crate::io::create_dir(dir)?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Cycles through shuffled epochs of `0..n`.
pub struct BatchOrder {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut Rng64) -> Vec<usize> {
        let size = size.min(self.n).max(1);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

pub(crate) fn ensure_finite(loss: f64, stage: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.into(),
            step,
        })
    }
}
