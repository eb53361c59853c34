//! Router input features: mean pooling over the sequence followed by a
//! frozen random projection with a rectifier.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::{self, ExpandedBatch};

/// Name and version of the generator used for projection matrices. Changing
/// either changes every stored pipeline, so both are recorded in checkpoints.
pub const PROJECTION_RNG: &str = "chacha8-rand_distr-normal";
pub const PROJECTION_RNG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Standard deviation `1/√d`.
    #[default]
    InvSqrtDim,
    /// Standard deviation 1.
    Unit,
}

impl ScaleMode {
    fn std_dev(self, in_dim: usize) -> f64 {
        match self {
            ScaleMode::InvSqrtDim => 1.0 / (in_dim as f64).sqrt(),
            ScaleMode::Unit => 1.0,
        }
    }
}

/// Frozen `d × E` Gaussian projection followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionPipeline {
    projection: DMatrix<f64>,
    seed: u64,
    scale_mode: ScaleMode,
}

impl ExpansionPipeline {
    /// Draws the projection row by row from a ChaCha8 stream seeded with `seed`.
    pub fn new(seed: u64, in_dim: usize, out_dim: usize, scale_mode: ScaleMode) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(
                "pipeline dimensions must be >= 1".into(),
            ));
        }
        if out_dim <= in_dim {
            log::warn!(
                "expansion size {out_dim} does not exceed input size {in_dim}; features are not expanded"
            );
        }
        let normal = Normal::new(0.0, scale_mode.std_dev(in_dim))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..in_dim * out_dim {
            data.push(normal.sample(&mut rng));
        }
        Ok(Self {
            projection: DMatrix::from_row_slice(in_dim, out_dim, &data),
            seed,
            scale_mode,
        })
    }

    /// Pipeline with an explicit projection matrix. The seed is recorded as 0.
    pub fn from_projection(projection: DMatrix<f64>) -> Self {
        Self {
            projection,
            seed: 0,
            scale_mode: ScaleMode::Unit,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.scale_mode
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    /// `max(0, pooled · P)`.
    pub fn expand(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                what: "pooled feature length",
                expected: self.in_dim(),
                got: pooled.len(),
            });
        }
        let v = DVector::from_column_slice(pooled);
        Ok((self.projection.transpose() * v)
            .iter()
            .map(|&z| z.max(0.0))
            .collect())
    }

    /// Row-wise expansion of an `n × d` matrix.
    pub fn expand_rows(&self, pooled: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if pooled.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                what: "pooled feature width",
                expected: self.in_dim(),
                got: pooled.ncols(),
            });
        }
        Ok((pooled * &self.projection).map(|z| z.max(0.0)))
    }
}

/// Average over the rows of a `T × d` matrix.
pub fn mean_pool(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    let t = h.nrows();
    if t == 0 {
        return Err(Error::EmptyDataset("cannot pool an empty sequence"));
    }
    Ok(h.row_sum().iter().map(|&s| s / t as f64).collect())
}

/// Training accuracy of a ridge classifier (the router's own solver) fit on
/// the given per-task feature sets, optionally after expansion.
pub fn separability_probe(
    datasets_by_task: &[Vec<Vec<f64>>],
    pipeline: Option<&ExpansionPipeline>,
    lambda: f64,
) -> Result<f64> {
    if datasets_by_task.len() < 2 {
        return Err(Error::InvalidArgument(
            "separability probe needs at least two tasks".into(),
        ));
    }
    if datasets_by_task.iter().any(|d| d.len() < 2) {
        return Err(Error::InvalidArgument(
            "separability probe needs at least two samples per task".into(),
        ));
    }
    let dim = datasets_by_task[0][0].len();
    let k = datasets_by_task.len();
    let mut batches = Vec::with_capacity(k);
    for (task, rows) in datasets_by_task.iter().enumerate() {
        let mut m = DMatrix::zeros(rows.len(), dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "probe sample length",
                    expected: dim,
                    got: row.len(),
                });
            }
            m.row_mut(i).copy_from_slice(row);
        }
        let features = match pipeline {
            Some(p) => p.expand_rows(&m)?,
            None => m,
        };
        batches.push(ExpandedBatch::single_class(features, task, k)?);
    }
    let e = batches[0].features().ncols();
    let w = router::solve_joint(&batches, e, lambda)?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for (task, batch) in batches.iter().enumerate() {
        let scores = batch.features() * &w;
        for row in scores.row_iter() {
            let logits: Vec<f64> = row.iter().copied().collect();
            if router::argmax(&logits) == task {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Four Gaussian clusters at `(±1, ±1)`; the two classes are the diagonals,
/// so no linear map through the origin separates them.
pub fn xor_clusters(seed: u64, per_cluster: usize, spread: f64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).expect("spread must be finite and non-negative");
    let centers = [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
    let mut classes = vec![Vec::new(), Vec::new()];
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            let x = center[0] + noise.sample(&mut rng);
            let y = center[1] + noise.sample(&mut rng);
            classes[c / 2].push(vec![x, y]);
        }
    }
    classes
}
