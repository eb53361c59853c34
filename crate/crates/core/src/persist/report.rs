//! Deterministic run reports: a text table, long-form CSV, and JSON.
//!
//! All numbers are printed with four decimals. Nothing time- or
//! host-dependent is written, so equal runs give byte-identical files.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::harness::{compute_bwt, compute_op, Progress, SweepReport};

pub const DECIMALS: usize = 4;

/// `v` rounded to the report precision.
pub fn round4(v: f64) -> f64 {
    format!("{v:.4}").parse().unwrap()
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Scores of a (possibly unfinished) continual run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub tasks_total: usize,
    pub phases_done: usize,
    /// Task ids in arrival order; row `i` of every matrix is `task_order[i]`.
    pub task_order: Vec<usize>,
    /// `accuracy[i][t]`, `None` above the diagonal.
    pub accuracy: Vec<Vec<Option<f64>>>,
    /// Over the phases completed so far.
    pub op: Option<f64>,
    /// Absent with fewer than two completed phases.
    pub bwt: Option<f64>,
    /// `routing[i][t]`, `None` above the diagonal.
    pub routing: Vec<Vec<Option<f64>>>,
    pub routing_average: Vec<f64>,
}

impl RunReport {
    pub fn from_progress(progress: &Progress) -> Result<Self> {
        let done = progress.phases_done();
        let matrix = progress.accuracy.recorded();
        let op = if done > 0 {
            Some(round4(compute_op(&matrix)?))
        } else {
            None
        };
        let bwt = if done >= 2 {
            Some(round4(compute_bwt(&matrix)?))
        } else {
            None
        };
        let accuracy = (0..done)
            .map(|i| (0..done).map(|t| matrix.get(i, t).map(round4)).collect())
            .collect();
        let routing = (0..done)
            .map(|i| {
                (0..done)
                    .map(|t| {
                        progress
                            .routing
                            .phases
                            .get(t)
                            .and_then(|p| p.get(i))
                            .copied()
                            .map(round4)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            tasks_total: progress.accuracy.tasks(),
            phases_done: done,
            task_order: progress.task_order.clone(),
            accuracy,
            op,
            bwt,
            routing,
            routing_average: progress
                .routing
                .averages()
                .into_iter()
                .map(round4)
                .collect(),
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "phases completed: {} of {}",
            self.phases_done, self.tasks_total
        )
        .unwrap();
        if self.phases_done == 0 {
            return out;
        }
        out.push_str("\naccuracy (row = task, column = phase)\n");
        write_matrix(&mut out, &self.task_order, &self.accuracy);
        out.push_str("\nrouting accuracy (row = task, column = phase)\n");
        write_matrix(&mut out, &self.task_order, &self.routing);
        out.push_str("\nmean routing accuracy per phase:");
        for v in &self.routing_average {
            write!(out, " {}", fmt4(*v)).unwrap();
        }
        out.push('\n');
        if let Some(op) = self.op {
            writeln!(out, "\nOP  {}", fmt4(op)).unwrap();
        }
        if let Some(bwt) = self.bwt {
            writeln!(out, "BWT {}", fmt4(bwt)).unwrap();
        }
        out
    }

    /// One `metric,task,phase,value` record per number; `task`/`phase` are
    /// empty for run-level metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,task,phase,value\n");
        for (name, m) in [("accuracy", &self.accuracy), ("routing", &self.routing)] {
            for (i, row) in m.iter().enumerate() {
                for (t, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        writeln!(out, "{name},{},{t},{}", self.task_order[i], fmt4(*v)).unwrap();
                    }
                }
            }
        }
        for (t, v) in self.routing_average.iter().enumerate() {
            writeln!(out, "routing_average,,{t},{}", fmt4(*v)).unwrap();
        }
        if let Some(op) = self.op {
            writeln!(out, "op,,,{}", fmt4(op)).unwrap();
        }
        if let Some(bwt) = self.bwt {
            writeln!(out, "bwt,,,{}", fmt4(bwt)).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn write_matrix(out: &mut String, labels: &[usize], m: &[Vec<Option<f64>>]) {
    out.push_str("task  ");
    for t in 0..m.len() {
        write!(out, " {:>7}", format!("t{t}")).unwrap();
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(m) {
        write!(out, "{label:>4}  ").unwrap();
        for v in row {
            match v {
                Some(v) => write!(out, " {:>7}", fmt4(*v)).unwrap(),
                None => write!(out, " {:>7}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
}

/// Final scores of a checkpoint on an evaluation stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task_order: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub routing_accuracy: Vec<f64>,
    pub op: f64,
}

impl EvalReport {
    pub fn new(task_order: Vec<usize>, accuracy: Vec<f64>, routing_accuracy: Vec<f64>) -> Self {
        let op = accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64;
        Self {
            task_order,
            accuracy: accuracy.into_iter().map(round4).collect(),
            routing_accuracy: routing_accuracy.into_iter().map(round4).collect(),
            op: round4(op),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("task  accuracy  routing\n");
        for ((id, a), r) in self
            .task_order
            .iter()
            .zip(&self.accuracy)
            .zip(&self.routing_accuracy)
        {
            writeln!(out, "{id:>4}  {:>8}  {:>7}", fmt4(*a), fmt4(*r)).unwrap();
        }
        writeln!(out, "\nOP  {}", fmt4(self.op)).unwrap();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,accuracy,routing\n");
        for ((id, a), r) in self
            .task_order
            .iter()
            .zip(&self.accuracy)
            .zip(&self.routing_accuracy)
        {
            writeln!(out, "{id},{},{}", fmt4(*a), fmt4(*r)).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// `OP (BWT)` grid over split layer (rows) and expansion size (columns).
pub fn sweep_table(report: &SweepReport) -> String {
    let mut out = String::from("OP (BWT); rows = split layer, columns = expansion size\n");
    out.push_str("split ");
    for e in &report.expanded_dims {
        write!(out, " {:>17}", format!("E={e}")).unwrap();
    }
    out.push('\n');
    for &l in &report.split_layers {
        write!(out, "{l:>5} ").unwrap();
        for &e in &report.expanded_dims {
            let cell = report.cell(l, e).expect("sweep holds every cell");
            let text = match cell.bwt {
                Some(b) => format!("{} ({})", fmt4(cell.op), fmt4(b)),
                None => fmt4(cell.op),
            };
            write!(out, " {text:>17}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("split_layer,expanded_dim,op,bwt,min_routing_accuracy\n");
    for c in &report.cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.split_layer,
            c.expanded_dim,
            fmt4(c.op),
            c.bwt.map(fmt4).unwrap_or_default(),
            fmt4(c.min_routing_accuracy)
        )
        .unwrap();
    }
    out
}
