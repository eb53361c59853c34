//! Desk-scale layered encoder.
//!
//! Tokens are embedded and pushed through `total_layers` pre-norm residual
//! feed-forward blocks, `x ← x + W₂·gelu(W₁·LN(x) + b₁) + b₂`, then a final
//! layer norm and a vocabulary projection. Blocks `1..=split_layer` form the
//! frozen lower stack whose output feeds the router; the remaining blocks
//! carry per-task low-rank adapters on both affine maps.
//!
//! Layers are numbered from 1, so a layer `l` is adapted iff `l > split_layer`.

mod adapter;
mod train;

pub use adapter::{AdapterBank, AffineMap, LayerAdapter, LoraPair, LowRankAdapter};
pub use train::{
    adapter_gradient, dataset_loss, train_adapter, train_adapter_from, AdapterHyper, TrainReport,
    TrainingRows,
};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::argmax;

/// End-of-sequence token id.
pub const EOS_TOKEN: usize = 0;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub total_layers: usize,
    pub split_layer: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            total_layers: 4,
            split_layer: 2,
            hidden: 32,
            ffn_hidden: 64,
            vocab: 64,
            seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split_layer < 1 || self.split_layer >= self.total_layers {
            return Err(Error::Config(format!(
                "split_layer must satisfy 1 <= split_layer < total_layers ({} vs {})",
                self.split_layer, self.total_layers
            )));
        }
        if self.hidden == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("hidden sizes must be >= 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must hold at least two tokens".into()));
        }
        Ok(())
    }

    /// Layer numbers that carry adapters.
    pub fn adapted_layers(&self) -> std::ops::RangeInclusive<usize> {
        (self.split_layer + 1)..=self.total_layers
    }
}

/// Affine map `x·W + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    fn random(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias_std: f64) -> Self {
        let w = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
        let b = Normal::new(0.0, bias_std).unwrap();
        let weight =
            DMatrix::from_row_iterator(d_in, d_out, (0..d_in * d_out).map(|_| w.sample(rng)));
        let bias = (0..d_out).map(|_| b.sample(rng)).collect();
        Self { weight, bias }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weight;
        add_row_bias(&mut out, &self.bias);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub up: Affine,
    pub down: Affine,
}

/// Frozen base network.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    embedding: DMatrix<f64>,
    blocks: Vec<Block>,
    unembedding: DMatrix<f64>,
}

impl Encoder {
    /// Draws all weights from a ChaCha8 stream seeded with `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, h) = (config.vocab, config.hidden, config.ffn_hidden);
        let embedding =
            DMatrix::from_row_iterator(v, d, (0..v * d).map(|_| StandardNormal.sample(&mut rng)));
        let blocks = (0..config.total_layers)
            .map(|_| Block {
                up: Affine::random(&mut rng, d, h, 0.1),
                down: Affine::random(&mut rng, h, d, 0.1),
            })
            .collect();
        let out = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let unembedding =
            DMatrix::from_row_iterator(d, v, (0..d * v).map(|_| out.sample(&mut rng)));
        Ok(Self {
            config,
            embedding,
            blocks,
            unembedding,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn block(&self, layer: usize) -> &Block {
        &self.blocks[layer - 1]
    }

    /// Embeds tokens and applies the first `split_layer` blocks: `T × d`.
    pub fn forward_lower(&self, tokens: &[usize]) -> Result<DMatrix<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyDataset("token sequence is empty"));
        }
        let d = self.config.hidden;
        let mut x = DMatrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.config.vocab {
                return Err(Error::OutOfVocab {
                    token: tok,
                    vocab: self.config.vocab,
                });
            }
            x.row_mut(t).copy_from(&self.embedding.row(tok));
        }
        for block in &self.blocks[..self.config.split_layer] {
            let u = layer_norm(&x).0;
            let g = block.up.apply(&u).map(gelu);
            x += block.down.apply(&g);
        }
        Ok(x)
    }

    /// Applies the upper blocks (with the adapter's deltas when given), the
    /// final norm, and the vocabulary projection: `T × V` logits.
    pub fn forward_upper(
        &self,
        adapter: Option<&LowRankAdapter>,
        h: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if h.ncols() != self.config.hidden {
            return Err(Error::DimensionMismatch {
                what: "lower feature width",
                expected: self.config.hidden,
                got: h.ncols(),
            });
        }
        if let Some(a) = adapter {
            a.check_compatible(&self.config)?;
        }
        let mut x = h.clone();
        for layer in self.config.adapted_layers() {
            let block = self.block(layer);
            let la = adapter.map(|a| a.layer(layer));
            let u = layer_norm(&x).0;
            let mut a1 = block.up.apply(&u);
            if let Some(la) = la {
                a1 += (&u * &la.up.b) * &la.up.a;
            }
            let g = a1.map(gelu);
            let mut a2 = block.down.apply(&g);
            if let Some(la) = la {
                a2 += (&g * &la.down.b) * &la.down.a;
            }
            x += a2;
        }
        let z = layer_norm(&x).0;
        Ok(z * &self.unembedding)
    }

    /// Greedy choice for the token following `tokens`.
    pub fn next_token(&self, adapter: Option<&LowRankAdapter>, tokens: &[usize]) -> Result<usize> {
        let h = self.forward_lower(tokens)?;
        let logits = self.forward_upper(adapter, &h)?;
        let last = logits.row(logits.nrows() - 1);
        let row: Vec<f64> = last.iter().copied().collect();
        Ok(argmax(&row))
    }

    /// Greedy decoding until the end-of-sequence token or `max_len` new
    /// tokens. The end-of-sequence token is not part of the result.
    pub fn generate(
        &self,
        adapter: Option<&LowRankAdapter>,
        prompt: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let next = self.next_token(adapter, &tokens)?;
            if next == EOS_TOKEN {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    /// Little-endian dump of every frozen weight, for byte comparisons.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |m: &DMatrix<f64>| {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&self.embedding);
        for b in &self.blocks {
            push(&b.up.weight);
            push(&DMatrix::from_row_slice(1, b.up.bias.len(), &b.up.bias));
            push(&b.down.weight);
            push(&DMatrix::from_row_slice(1, b.down.bias.len(), &b.down.bias));
        }
        push(&self.unembedding);
        out
    }

    pub(crate) fn unembedding(&self) -> &DMatrix<f64> {
        &self.unembedding
    }
}

pub(crate) fn add_row_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    for (j, &b) in bias.iter().enumerate() {
        m.column_mut(j).add_scalar_mut(b);
    }
}

/// Row-wise normalization without learned gain or bias. Returns the
/// normalized rows and each row's `1/σ`.
pub(crate) fn layer_norm(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            y[(i, j)] = (x[(i, j)] - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}

/// Gradient through [`layer_norm`] given its outputs.
pub(crate) fn layer_norm_backward(
    dy: &DMatrix<f64>,
    y: &DMatrix<f64>,
    inv: &[f64],
) -> DMatrix<f64> {
    let (n, d) = dy.shape();
    let mut dx = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut mean_dy = 0.0;
        let mut mean_dyy = 0.0;
        for j in 0..d {
            mean_dy += dy[(i, j)];
            mean_dyy += dy[(i, j)] * y[(i, j)];
        }
        mean_dy /= d as f64;
        mean_dyy /= d as f64;
        for j in 0..d {
            dx[(i, j)] = inv[i] * (dy[(i, j)] - mean_dy - y[(i, j)] * mean_dyy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
