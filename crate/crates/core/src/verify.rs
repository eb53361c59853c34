//! Self-test of the router identities on random ridge problems: the joint
//! closed form, the recursive update, the direct weight recursion, and
//! chunk-size independence must all give the same weights.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::router::{max_abs_diff, solve_joint, ExpandedBatch, RlsState};

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

const DIMS: [usize; 3] = [8, 32, 64];
const LAMBDAS: [f64; 3] = [0.1, 1.0, 10.0];

/// One random ridge problem split into per-task batches.
#[derive(Clone, Debug)]
pub struct RidgeInstance {
    pub dim: usize,
    pub lambda: f64,
    /// Task `t`'s labels are `t + 1` wide.
    pub batches: Vec<ExpandedBatch>,
}

impl RidgeInstance {
    /// E in {8, 32, 64}, 2 to 5 tasks of 1 to 100 rows, lambda in {0.1, 1, 10}.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let dim = *DIMS.choose(rng).unwrap();
        let lambda = *LAMBDAS.choose(rng).unwrap();
        let tasks = rng.random_range(2..=5);
        let batches = (0..tasks)
            .map(|t| {
                let n = rng.random_range(1..=100);
                let h = DMatrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                ExpandedBatch::single_class(h, t, t + 1).unwrap()
            })
            .collect();
        Self {
            dim,
            lambda,
            batches,
        }
    }

    pub fn largest_batch(&self) -> usize {
        self.batches
            .iter()
            .map(ExpandedBatch::len)
            .max()
            .unwrap_or(1)
    }

    fn fold(&self, chunk_size: usize, direct: bool) -> Result<RlsState> {
        let mut s = RlsState::new(self.dim, self.lambda)?.with_chunk_size(chunk_size);
        for b in &self.batches {
            s.grow_label_space(1)?;
            if direct {
                s.update_weight_direct(b)?;
            } else {
                s.update(b)?;
            }
        }
        Ok(s)
    }
}

/// Worst element-wise disagreement seen for each identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Residuals {
    /// Recursive update vs joint solve.
    pub joint_vs_recursive: f64,
    /// Recursive update vs direct weight recursion.
    pub weight_forms: f64,
    /// Chunk sizes 1, 7, 64 and the largest batch, against each other.
    pub chunking: f64,
    /// `max |R − Rᵀ|` after the recursive fold.
    pub symmetry: f64,
    /// `max |W − R·Q|` after the recursive fold.
    pub consistency: f64,
}

impl Residuals {
    fn max(self, o: Self) -> Self {
        Self {
            joint_vs_recursive: self.joint_vs_recursive.max(o.joint_vs_recursive),
            weight_forms: self.weight_forms.max(o.weight_forms),
            chunking: self.chunking.max(o.chunking),
            symmetry: self.symmetry.max(o.symmetry),
            consistency: self.consistency.max(o.consistency),
        }
    }

    pub fn worst(&self) -> f64 {
        [
            self.joint_vs_recursive,
            self.weight_forms,
            self.chunking,
            self.symmetry,
            self.consistency,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

pub fn check_instance(inst: &RidgeInstance) -> Result<Residuals> {
    let joint = solve_joint(&inst.batches, inst.dim, inst.lambda)?;
    let rec = inst.fold(crate::router::DEFAULT_CHUNK_SIZE, false)?;
    let direct = inst.fold(crate::router::DEFAULT_CHUNK_SIZE, true)?;
    let chunked = [1, 7, 64, inst.largest_batch()]
        .into_iter()
        .map(|c| inst.fold(c, false).map(|s| s.weights().clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut chunking = 0.0f64;
    for a in &chunked {
        for b in &chunked {
            chunking = chunking.max(max_abs_diff(a, b));
        }
    }
    Ok(Residuals {
        joint_vs_recursive: max_abs_diff(rec.weights(), &joint),
        weight_forms: max_abs_diff(rec.weights(), direct.weights()),
        chunking,
        symmetry: rec.symmetry_residual(),
        consistency: rec.consistency_residual(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceSummary {
    pub instances: usize,
    pub seed: u64,
    pub residuals: Residuals,
}

impl EquivalenceSummary {
    pub fn passed(&self) -> bool {
        self.residuals.within(EQUIVALENCE_TOLERANCE)
    }
}

pub fn run_equivalence_suite(instances: usize, seed: u64) -> Result<EquivalenceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals = Residuals::default();
    for _ in 0..instances {
        residuals = residuals.max(check_instance(&RidgeInstance::random(&mut rng))?);
    }
    Ok(EquivalenceSummary {
        instances,
        seed,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let s = run_equivalence_suite(5, 17).unwrap();
        assert!(s.passed(), "{s:?}");
    }

    #[test]
    fn instances_respect_the_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let inst = RidgeInstance::random(&mut rng);
            assert!(DIMS.contains(&inst.dim));
            assert!(LAMBDAS.contains(&inst.lambda));
            assert!((2..=5).contains(&inst.batches.len()));
            assert!(inst.batches.iter().all(|b| (1..=100).contains(&b.len())));
        }
    }
}
