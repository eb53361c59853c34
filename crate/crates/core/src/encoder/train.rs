//! Adapter fine-tuning by exact backpropagation through the upper blocks.
//!
//! Blocks act on each position independently, so a training example reduces
//! to the lower-stack features of the positions whose next token is part of
//! the answer. Those rows are computed once, since the lower stack is frozen.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gelu, gelu_grad, layer_norm, layer_norm_backward, Encoder, LowRankAdapter, EOS_TOKEN};
use crate::error::{Error, Result};
use crate::harness::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterHyper {
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdapterHyper {
    fn default() -> Self {
        Self {
            rank: 4,
            learning_rate: 0.01,
            epochs: 40,
            batch_size: 32,
            seed: 4,
        }
    }
}

/// Lower-stack features and next-token targets of every supervised position.
#[derive(Clone, Debug)]
pub struct TrainingRows {
    pub features: DMatrix<f64>,
    pub targets: Vec<usize>,
}

impl TrainingRows {
    /// Supervises every position from the last prompt token onward; the
    /// targets are the answer tokens followed by the end token.
    pub fn from_samples(encoder: &Encoder, samples: &[Sample]) -> Result<Self> {
        let d = encoder.config().hidden;
        let mut rows: Vec<f64> = Vec::new();
        let mut targets = Vec::new();
        for s in samples {
            if s.prompt.is_empty() {
                return Err(Error::EmptyDataset("sample with empty prompt"));
            }
            let mut seq = s.prompt.clone();
            seq.extend_from_slice(&s.answer);
            let h = encoder.forward_lower(&seq)?;
            seq.push(EOS_TOKEN);
            if seq.iter().any(|&t| t >= encoder.config().vocab) {
                return Err(Error::OutOfVocab {
                    token: *seq.iter().max().unwrap(),
                    vocab: encoder.config().vocab,
                });
            }
            for p in (s.prompt.len() - 1)..(seq.len() - 1) {
                rows.extend(h.row(p).iter());
                targets.push(seq[p + 1]);
            }
        }
        let n = targets.len();
        Ok(Self {
            features: DMatrix::from_row_slice(n, d, &rows),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

struct LayerCache {
    u: DMatrix<f64>,
    u_y: DMatrix<f64>,
    u_inv: Vec<f64>,
    u_b: DMatrix<f64>,
    pre: DMatrix<f64>,
    g: DMatrix<f64>,
    g_b: DMatrix<f64>,
}

/// Mean next-token cross-entropy and its gradient with respect to every
/// adapter factor.
pub fn adapter_gradient(
    encoder: &Encoder,
    adapter: &LowRankAdapter,
    rows: &TrainingRows,
) -> Result<(f64, LowRankAdapter)> {
    adapter.check_compatible(encoder.config())?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no supervised positions"));
    }
    let n = rows.len();
    let mut x = rows.features.clone();
    let mut caches = Vec::with_capacity(adapter.layers().len());
    for (i, layer) in encoder.config().adapted_layers().enumerate() {
        let block = encoder.block(layer);
        let la = &adapter.layers()[i];
        let (u_y, u_inv) = layer_norm(&x);
        let u = u_y.clone();
        let u_b = &u * &la.up.b;
        let mut pre = &u * &block.up.weight + &u_b * &la.up.a;
        super::add_row_bias(&mut pre, &block.up.bias);
        let g = pre.map(gelu);
        let g_b = &g * &la.down.b;
        let mut out = &g * &block.down.weight + &g_b * &la.down.a;
        super::add_row_bias(&mut out, &block.down.bias);
        x += out;
        caches.push(LayerCache {
            u,
            u_y,
            u_inv,
            u_b,
            pre,
            g,
            g_b,
        });
    }
    let (z, z_inv) = layer_norm(&x);
    let logits = &z * encoder.unembedding();

    let mut loss = 0.0;
    let mut dlogits = DMatrix::zeros(n, logits.ncols());
    for i in 0..n {
        let row = logits.row(i);
        let max = row.max();
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let target = rows.targets[i];
        loss += log_z - row[target];
        for j in 0..row.len() {
            dlogits[(i, j)] = (row[j] - log_z).exp() / n as f64;
        }
        dlogits[(i, target)] -= 1.0 / n as f64;
    }
    loss /= n as f64;

    let dz = dlogits * encoder.unembedding().transpose();
    let mut dx = layer_norm_backward(&dz, &z, &z_inv);
    let mut grad = adapter.zeros_like();
    let layers: Vec<usize> = encoder.config().adapted_layers().collect();
    for (i, &layer) in layers.iter().enumerate().rev() {
        let block = encoder.block(layer);
        let la = &adapter.layers()[i];
        let c = &caches[i];
        let gl = &mut grad.layers_mut()[i];

        // down map: out = g·W₂ + (g·B₂)·A₂ + b₂
        let d_out = &dx;
        gl.down.a = c.g_b.transpose() * d_out;
        let d_out_at = d_out * la.down.a.transpose();
        gl.down.b = c.g.transpose() * &d_out_at;
        let dg = d_out * block.down.weight.transpose() + &d_out_at * la.down.b.transpose();
        let mut dpre = dg;
        dpre.zip_apply(&c.pre, |d, p| *d *= gelu_grad(p));

        // up map: pre = u·W₁ + (u·B₁)·A₁ + b₁
        gl.up.a = c.u_b.transpose() * &dpre;
        let dpre_at = &dpre * la.up.a.transpose();
        gl.up.b = c.u.transpose() * &dpre_at;
        let du = &dpre * block.up.weight.transpose() + &dpre_at * la.up.b.transpose();
        dx += layer_norm_backward(&du, &c.u_y, &c.u_inv);
    }
    Ok((loss, grad))
}

/// Mean next-token cross-entropy of the adapted model on `rows`.
pub fn dataset_loss(
    encoder: &Encoder,
    adapter: Option<&LowRankAdapter>,
    rows: &TrainingRows,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no supervised positions"));
    }
    let logits = encoder.forward_upper(adapter, &rows.features)?;
    let mut loss = 0.0;
    for (i, &t) in rows.targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[t];
    }
    Ok(loss / rows.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Full-dataset loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh adapter for `task_id` on `samples`; the encoder is only read.
pub fn train_adapter(
    encoder: &Encoder,
    samples: &[Sample],
    hyper: &AdapterHyper,
    task_id: usize,
) -> Result<(LowRankAdapter, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("adapter training set"));
    }
    let mut adapter = LowRankAdapter::new(encoder.config(), task_id, hyper.rank, hyper.seed)?;
    let report = train_adapter_from(encoder, &mut adapter, samples, hyper)?;
    Ok((adapter, report))
}

/// Continues training an existing adapter with a fresh optimizer state.
pub fn train_adapter_from(
    encoder: &Encoder,
    adapter: &mut LowRankAdapter,
    samples: &[Sample],
    hyper: &AdapterHyper,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("adapter training set"));
    }
    if hyper.rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
    }
    if hyper.learning_rate <= 0.0 || hyper.learning_rate.is_nan() || hyper.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "learning rate and batch size must be positive".into(),
        ));
    }
    let rows = TrainingRows::from_samples(encoder, samples)?;
    let mut opt = Adam::new(adapter, hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_ada7);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let sub = rows.select(batch);
            let (_, grad) = adapter_gradient(encoder, adapter, &sub)?;
            opt.step(adapter, &grad);
        }
        report
            .epoch_losses
            .push(dataset_loss(encoder, Some(adapter), &rows)?);
    }
    Ok(report)
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    fn new(adapter: &LowRankAdapter, lr: f64) -> Self {
        let zeros: Vec<DMatrix<f64>> = adapter
            .parameters()
            .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, adapter: &mut LowRankAdapter, grad: &LowRankAdapter) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in adapter
            .parameters_mut()
            .zip(grad.parameters())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
