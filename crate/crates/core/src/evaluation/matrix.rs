use serde::Serialize;

use super::EvalError;
use crate::params::ParameterSet;
use crate::trainer::{DataRef, Split, Trainer};

/// Square matrix of scores: entry `(i, j)` is client `i`'s model evaluated on
/// client `j`'s test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMatrix {
    n: usize,
    cells: Vec<f64>,
}

impl EvalMatrix {
    pub fn new(n: usize, cells: Vec<f64>) -> Result<Self, EvalError> {
        if n == 0 || cells.len() != n * n {
            return Err(EvalError::BadMatrix(cells.len()));
        }
        Ok(Self { n, cells })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let n = rows.len();
        let total: usize = rows.iter().map(Vec::len).sum();
        if rows.iter().any(|r| r.len() != n) {
            return Err(EvalError::BadMatrix(total));
        }
        Self::new(n, rows.into_iter().flatten().collect())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, model: usize, test: usize) -> f64 {
        self.cells[model * self.n + test]
    }

    pub fn row(&self, model: usize) -> &[f64] {
        &self.cells[model * self.n..(model + 1) * self.n]
    }

    /// In-distribution scores (the diagonal).
    pub fn id_values(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Cross-distribution score per model: mean over the other clients' test
    /// splits. `None` for a single client.
    pub fn cd_values(&self) -> Option<Vec<f64>> {
        (self.n > 1).then(|| {
            (0..self.n)
                .map(|i| {
                    let off: f64 = (0..self.n).filter(|&j| j != i).map(|j| self.get(i, j)).sum();
                    off / (self.n - 1) as f64
                })
                .collect()
        })
    }
}

pub fn eval_matrix(models: &[ParameterSet], trainer: &dyn Trainer) -> Result<EvalMatrix, EvalError> {
    let n = trainer.n_clients();
    if models.len() < n {
        return Err(EvalError::MissingModel(models.len()));
    }
    let mut cells = Vec::with_capacity(n * n);
    for model in &models[..n] {
        for test in 0..n {
            cells.push(trainer.evaluate(model, DataRef::new(test, Split::Test))?);
        }
    }
    EvalMatrix::new(n, cells)
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// ID and CD statistics pooled over clients and runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryRow {
    pub id_mean: f64,
    pub id_std: f64,
    pub cd_mean: Option<f64>,
    pub cd_std: Option<f64>,
    pub n_values: usize,
}

pub fn summarize(runs: &[EvalMatrix]) -> Option<SummaryRow> {
    let id: Vec<f64> = runs.iter().flat_map(EvalMatrix::id_values).collect();
    let cd: Vec<f64> = runs.iter().filter_map(EvalMatrix::cd_values).flatten().collect();
    let (id_mean, id_std) = mean_std(&id)?;
    let cd_stats = mean_std(&cd);
    Some(SummaryRow {
        id_mean,
        id_std,
        cd_mean: cd_stats.map(|s| s.0),
        cd_std: cd_stats.map(|s| s.1),
        n_values: id.len(),
    })
}
