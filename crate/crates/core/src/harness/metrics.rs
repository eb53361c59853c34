//! Continual-learning scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular score matrix. `get(i, t)` is the score on the task that
/// arrived at phase `i`, measured after phase `t >= i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    /// `columns[t][i]` for `i <= t`.
    columns: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            columns: Vec::new(),
        }
    }

    /// Builds a matrix from rows where `rows[i][t]` is `None` for `t < i`.
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let k = rows.len();
        let mut m = Self::new(k);
        let phases = rows.first().map_or(0, |r| r.len());
        for t in 0..phases {
            let mut col = Vec::with_capacity(t + 1);
            for (i, row) in rows.iter().enumerate().take(t + 1) {
                let v =
                    row.get(t).copied().flatten().ok_or_else(|| {
                        Error::IncompleteMatrix(format!("missing entry ({i}, {t})"))
                    })?;
                col.push(v);
            }
            m.push_column(col)?;
        }
        Ok(m)
    }

    /// Appends the scores measured after the next phase; one per seen task.
    pub fn push_column(&mut self, column: Vec<f64>) -> Result<()> {
        let t = self.columns.len();
        if t >= self.tasks {
            return Err(Error::InvalidArgument(format!(
                "matrix already holds all {} phases",
                self.tasks
            )));
        }
        if column.len() != t + 1 {
            return Err(Error::DimensionMismatch {
                what: "accuracy column length",
                expected: t + 1,
                got: column.len(),
            });
        }
        if let Some(v) = column.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("score {v} outside [0, 1]")));
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn phases(&self) -> usize {
        self.columns.len()
    }

    pub fn is_complete(&self) -> bool {
        self.columns.len() == self.tasks
    }

    pub fn get(&self, task: usize, phase: usize) -> Option<f64> {
        self.columns.get(phase).and_then(|c| c.get(task)).copied()
    }

    pub fn column(&self, phase: usize) -> Option<&[f64]> {
        self.columns.get(phase).map(Vec::as_slice)
    }

    /// The square matrix over the phases recorded so far.
    pub fn recorded(&self) -> AccuracyMatrix {
        Self {
            tasks: self.columns.len(),
            columns: self.columns.clone(),
        }
    }
}

/// Mean of the final column.
pub fn compute_op(a: &AccuracyMatrix) -> Result<f64> {
    if !a.is_complete() || a.tasks() == 0 {
        return Err(Error::IncompleteMatrix(format!(
            "{} of {} phases recorded",
            a.phases(),
            a.tasks()
        )));
    }
    let last = a.column(a.tasks() - 1).unwrap();
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over earlier tasks of (final score − score right after learning).
pub fn compute_bwt(a: &AccuracyMatrix) -> Result<f64> {
    let k = a.tasks();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "backward transfer needs at least two tasks".into(),
        ));
    }
    if !a.is_complete() {
        return Err(Error::IncompleteMatrix(format!(
            "{} of {k} phases recorded",
            a.phases()
        )));
    }
    let sum: f64 = (0..k - 1)
        .map(|i| a.get(i, k - 1).unwrap() - a.get(i, i).unwrap())
        .sum();
    Ok(sum / (k - 1) as f64)
}

/// Routing accuracy per seen task (arrival order) after each phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingAccuracyTrace {
    pub phases: Vec<Vec<f64>>,
}

impl RoutingAccuracyTrace {
    pub fn push(&mut self, per_task: Vec<f64>) {
        self.phases.push(per_task);
    }

    /// Mean over seen tasks, per phase.
    pub fn averages(&self) -> Vec<f64> {
        self.phases
            .iter()
            .map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64)
            .collect()
    }

    pub fn min(&self) -> f64 {
        self.phases.iter().flatten().copied().fold(1.0, f64::min)
    }
}
