//! Ablation baselines: one adapter shared by all tasks, and a router trained
//! by gradient descent instead of the recursive closed form.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::continual::Learner;
use super::metrics::{AccuracyMatrix, RoutingAccuracyTrace};
use super::stream::TaskStream;
use crate::config::{BpRouterConfig, RunConfig};
use crate::encoder::{train_adapter_from, AdapterHyper, LowRankAdapter};
use crate::error::{Error, Result};
use crate::router::argmax;

/// Sequential fine-tuning of a single adapter across the stream; no router.
pub fn run_single_adapter_baseline(
    stream: &TaskStream,
    config: &RunConfig,
) -> Result<AccuracyMatrix> {
    let learner = Learner::new(config.clone())?;
    let order = stream.arrival_order()?;
    let first = *order
        .first()
        .ok_or(Error::EmptyDataset("task stream has no tasks"))?;
    let encoder = learner.encoder();
    // Seeded like the first task's own adapter, so a one-task stream matches
    // the routed system exactly.
    let seed = learner.task_seed(first);
    let mut adapter = LowRankAdapter::new(encoder.config(), first, config.adapter.rank, seed)?;
    let hyper = AdapterHyper {
        seed,
        ..config.adapter.clone()
    };
    let mut matrix = AccuracyMatrix::new(order.len());
    for (phase, &task_id) in order.iter().enumerate() {
        train_adapter_from(encoder, &mut adapter, &stream.task(task_id).train, &hyper)?;
        let column = order[..=phase]
            .iter()
            .map(|&id| {
                let eval = &stream.task(id).eval;
                let mut correct = 0;
                for s in eval {
                    if encoder.generate(Some(&adapter), &s.prompt, config.max_answer_len)?
                        == s.answer
                    {
                        correct += 1;
                    }
                }
                Ok(correct as f64 / eval.len().max(1) as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        matrix.push_column(column)?;
    }
    Ok(matrix)
}

/// Two-layer perceptron router over expanded features; one output per task.
#[derive(Clone, Debug)]
pub struct MlpRouter {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl MlpRouter {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, (2.0 / input as f64).sqrt()).unwrap();
        Self {
            w1: DMatrix::from_fn(input, hidden, |_, _| init.sample(&mut rng)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(hidden, 0),
            b2: DVector::zeros(0),
        }
    }

    pub fn classes(&self) -> usize {
        self.w2.ncols()
    }

    /// Adds a zero-initialized output.
    pub fn add_class(&mut self) {
        let k = self.classes() + 1;
        let w2 = std::mem::replace(&mut self.w2, DMatrix::zeros(0, 0));
        self.w2 = w2.resize_horizontally(k, 0.0);
        let b2 = std::mem::replace(&mut self.b2, DVector::zeros(0));
        self.b2 = b2.resize_vertically(k, 0.0);
    }

    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &self.w1;
        for (j, b) in self.b1.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let a = self.hidden(x).map(|v| v.max(0.0));
        let mut out = a * &self.w2;
        for (j, b) in self.b2.iter().enumerate() {
            out.column_mut(j).add_scalar_mut(*b);
        }
        out
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let logits = self.logits(x);
        logits
            .row_iter()
            .map(|r| argmax(&r.iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    /// Full-batch gradient descent on softmax cross-entropy.
    pub fn train(&mut self, x: &DMatrix<f64>, labels: &[usize], lr: f64, epochs: usize) {
        let n = x.nrows() as f64;
        let k = self.classes();
        for _ in 0..epochs {
            let z = self.hidden(x);
            let a = z.map(|v| v.max(0.0));
            let mut logits = &a * &self.w2;
            for (j, b) in self.b2.iter().enumerate() {
                logits.column_mut(j).add_scalar_mut(*b);
            }
            let mut d = DMatrix::zeros(x.nrows(), k);
            for i in 0..x.nrows() {
                let row = logits.row(i);
                let max = row.max();
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for j in 0..k {
                    d[(i, j)] = ((row[j] - max).exp() / sum) / n;
                }
                d[(i, labels[i])] -= 1.0 / n;
            }
            let dw2 = a.transpose() * &d;
            let db2 = d.row_sum().transpose();
            let mut dz = &d * self.w2.transpose();
            dz.zip_apply(&z, |g, zv| {
                if zv <= 0.0 {
                    *g = 0.0
                }
            });
            let dw1 = x.transpose() * &dz;
            let db1 = dz.row_sum().transpose();
            self.w2 -= dw2 * lr;
            self.b2 -= db2 * lr;
            self.w1 -= dw1 * lr;
            self.b1 -= db1 * lr;
        }
    }
}

/// Trains an [`MlpRouter`] phase by phase on each task's router-fit data only
/// and records its routing accuracy on every seen task.
pub fn run_bp_router_baseline(
    stream: &TaskStream,
    config: &RunConfig,
) -> Result<RoutingAccuracyTrace> {
    let learner = Learner::new(config.clone())?;
    let order = stream.arrival_order()?;
    let BpRouterConfig {
        hidden,
        learning_rate,
        epochs,
        seed,
    } = config.bp_router.clone();
    let e = learner.pipeline().out_dim();
    let hidden = if hidden == 0 { e } else { hidden };
    let mut mlp = MlpRouter::new(e, hidden, seed);
    let eval_rows: Vec<DMatrix<f64>> = order
        .iter()
        .map(|&id| learner.expanded_rows(&stream.task(id).eval))
        .collect::<Result<_>>()?;

    let mut trace = RoutingAccuracyTrace::default();
    for (phase, &task_id) in order.iter().enumerate() {
        mlp.add_class();
        let x = learner.expanded_rows(&stream.task(task_id).router_fit)?;
        let labels = vec![phase; x.nrows()];
        mlp.train(&x, &labels, learning_rate, epochs);
        let per_task = (0..=phase)
            .map(|j| {
                let pred = mlp.predict(&eval_rows[j]);
                pred.iter().filter(|&&p| p == j).count() as f64 / pred.len().max(1) as f64
            })
            .collect();
        trace.push(per_task);
    }
    Ok(trace)
}
