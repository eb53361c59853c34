//! Grid over the feature split layer and the expansion size.

use serde::{Deserialize, Serialize};

use super::continual::run_continual;
use super::metrics::{compute_bwt, compute_op};
use super::stream::generate_task_stream;
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub split_layer: usize,
    pub expanded_dim: usize,
    pub op: f64,
    /// Absent for single-task streams.
    pub bwt: Option<f64>,
    pub min_routing_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub split_layers: Vec<usize>,
    pub expanded_dims: Vec<usize>,
    /// Row-major over `split_layers × expanded_dims`.
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, split_layer: usize, expanded_dim: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.split_layer == split_layer && c.expanded_dim == expanded_dim)
    }
}

pub fn run_sweep(
    base: &RunConfig,
    split_layers: &[usize],
    expanded_dims: &[usize],
) -> Result<SweepReport> {
    let stream = generate_task_stream(&base.stream, base.encoder.vocab)?;
    let mut cells = Vec::with_capacity(split_layers.len() * expanded_dims.len());
    for &split_layer in split_layers {
        for &expanded_dim in expanded_dims {
            let mut cfg = base.clone();
            cfg.encoder.split_layer = split_layer;
            cfg.pipeline.expanded_dim = expanded_dim;
            let outcome = run_continual(&stream, &cfg)?;
            let acc = outcome.accuracy();
            cells.push(SweepCell {
                split_layer,
                expanded_dim,
                op: compute_op(acc)?,
                bwt: if acc.tasks() >= 2 {
                    Some(compute_bwt(acc)?)
                } else {
                    None
                },
                min_routing_accuracy: outcome.routing().min(),
            });
        }
    }
    Ok(SweepReport {
        split_layers: split_layers.to_vec(),
        expanded_dims: expanded_dims.to_vec(),
        cells,
    })
}
