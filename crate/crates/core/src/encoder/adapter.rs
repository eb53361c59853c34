//! Low-rank adapters and the per-task adapter bank.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineMap {
    /// `d → ffn_hidden`
    Up,
    /// `ffn_hidden → d`
    Down,
}

/// `ΔW = B·A` with `B: d_in × r` and `A: r × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

impl LoraPair {
    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * &self.a
    }

    fn zeros_like(&self) -> Self {
        Self {
            b: DMatrix::zeros(self.b.nrows(), self.b.ncols()),
            a: DMatrix::zeros(self.a.nrows(), self.a.ncols()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter {
    pub up: LoraPair,
    pub down: LoraPair,
}

impl LayerAdapter {
    pub fn pair(&self, which: AffineMap) -> &LoraPair {
        match which {
            AffineMap::Up => &self.up,
            AffineMap::Down => &self.down,
        }
    }
}

/// One task's adapter: a [`LayerAdapter`] for every layer above the split.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    task_id: usize,
    rank: usize,
    first_layer: usize,
    layers: Vec<LayerAdapter>,
}

impl LowRankAdapter {
    /// `B = 0`, `A ~ N(0, 1/r)` drawn from `seed`, so `ΔW = 0` initially.
    pub fn new(config: &EncoderConfig, task_id: usize, rank: usize, seed: u64) -> Result<Self> {
        Self::init(config, task_id, rank, seed, None)
    }

    /// Both factors random, `B` entries with standard deviation `b_std`.
    /// Used for tests that need a non-zero delta.
    pub fn random(
        config: &EncoderConfig,
        task_id: usize,
        rank: usize,
        seed: u64,
        b_std: f64,
    ) -> Result<Self> {
        Self::init(config, task_id, rank, seed, Some(b_std))
    }

    fn init(
        config: &EncoderConfig,
        task_id: usize,
        rank: usize,
        seed: u64,
        b_std: Option<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_dist = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).unwrap();
        let b_dist = b_std.map(|s| Normal::new(0.0, s).unwrap());
        let (d, h) = (config.hidden, config.ffn_hidden);
        let mut pair = |d_in: usize, d_out: usize| {
            let a = DMatrix::from_row_iterator(
                rank,
                d_out,
                (0..rank * d_out).map(|_| a_dist.sample(&mut rng)),
            );
            let b = match &b_dist {
                Some(dist) => DMatrix::from_row_iterator(
                    d_in,
                    rank,
                    (0..d_in * rank).map(|_| dist.sample(&mut rng)),
                ),
                None => DMatrix::zeros(d_in, rank),
            };
            LoraPair { b, a }
        };
        let layers = config
            .adapted_layers()
            .map(|_| LayerAdapter {
                up: pair(d, h),
                down: pair(h, d),
            })
            .collect();
        Ok(Self {
            task_id,
            rank,
            first_layer: config.split_layer + 1,
            layers,
        })
    }

    /// Reassembles an adapter from stored factors.
    pub fn from_parts(
        task_id: usize,
        rank: usize,
        first_layer: usize,
        layers: Vec<LayerAdapter>,
    ) -> Result<Self> {
        if rank == 0 || first_layer < 2 {
            return Err(Error::ShapeMismatch(format!(
                "adapter rank {rank}, first layer {first_layer}"
            )));
        }
        for la in &layers {
            for p in [&la.up, &la.down] {
                if p.b.ncols() != rank || p.a.nrows() != rank {
                    return Err(Error::ShapeMismatch(format!(
                        "adapter factors {}x{} / {}x{} do not have rank {rank}",
                        p.b.nrows(),
                        p.b.ncols(),
                        p.a.nrows(),
                        p.a.ncols()
                    )));
                }
            }
            if la.up.a.ncols() != la.down.b.nrows() || la.up.b.nrows() != la.down.a.ncols() {
                return Err(Error::ShapeMismatch(
                    "adapter up/down factors disagree".into(),
                ));
            }
        }
        Ok(Self {
            task_id,
            rank,
            first_layer,
            layers,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn last_layer(&self) -> usize {
        self.first_layer + self.layers.len() - 1
    }

    pub fn layers(&self) -> &[LayerAdapter] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerAdapter] {
        &mut self.layers
    }

    /// Adapter for layer number `layer`. Panics outside the adapted range;
    /// use [`LowRankAdapter::delta`] for a checked lookup.
    pub fn layer(&self, layer: usize) -> &LayerAdapter {
        &self.layers[layer - self.first_layer]
    }

    /// `ΔW = B·A` of one affine map in layer number `layer`.
    pub fn delta(&self, layer: usize, which: AffineMap) -> Result<DMatrix<f64>> {
        if layer < self.first_layer || layer > self.last_layer() {
            return Err(Error::LayerNotAdapted {
                layer,
                first: self.first_layer,
                last: self.last_layer(),
            });
        }
        Ok(self.layer(layer).pair(which).delta())
    }

    pub(crate) fn check_compatible(&self, config: &EncoderConfig) -> Result<()> {
        let ok = self.first_layer == config.split_layer + 1
            && self.last_layer() == config.total_layers
            && self.layers.iter().all(|la| {
                la.up.b.nrows() == config.hidden
                    && la.up.a.ncols() == config.ffn_hidden
                    && la.down.b.nrows() == config.ffn_hidden
                    && la.down.a.ncols() == config.hidden
            });
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "adapter for task {} does not fit the encoder layout",
                self.task_id
            )))
        }
    }

    /// Every factor matrix in a fixed order: per layer `B_up, A_up, B_down, A_down`.
    pub fn parameters(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.layers
            .iter()
            .flat_map(|la| [&la.up.b, &la.up.a, &la.down.b, &la.down.a])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut DMatrix<f64>> {
        self.layers.iter_mut().flat_map(|la| {
            let LayerAdapter { up, down } = la;
            [&mut up.b, &mut up.a, &mut down.b, &mut down.a]
        })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            task_id: self.task_id,
            rank: self.rank,
            first_layer: self.first_layer,
            layers: self
                .layers
                .iter()
                .map(|la| LayerAdapter {
                    up: la.up.zeros_like(),
                    down: la.down.zeros_like(),
                })
                .collect(),
        }
    }

    /// Little-endian dump of all factors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in self.parameters() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Insertion-ordered map from task id to adapter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterBank {
    adapters: Vec<LowRankAdapter>,
}

impl AdapterBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an adapter; a second adapter for the same task is rejected.
    pub fn insert(&mut self, adapter: LowRankAdapter) -> Result<()> {
        if self.get(adapter.task_id()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "adapter bank already holds task {}",
                adapter.task_id()
            )));
        }
        self.adapters.push(adapter);
        Ok(())
    }

    pub fn get(&self, task_id: usize) -> Option<&LowRankAdapter> {
        self.adapters.iter().find(|a| a.task_id() == task_id)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LowRankAdapter> {
        self.adapters.iter()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.task_id()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> EncoderConfig {
        EncoderConfig {
            total_layers: 4,
            split_layer: 2,
            hidden: 8,
            ffn_hidden: 8,
            vocab: 16,
            seed: 3,
        }
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let a = LowRankAdapter::new(&config(), 0, 2, 1).unwrap();
        for layer in 3..=4 {
            for which in [AffineMap::Up, AffineMap::Down] {
                assert!(a.delta(layer, which).unwrap().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn delta_is_outer_product_for_rank_one() {
        let cfg = EncoderConfig {
            hidden: 2,
            ffn_hidden: 2,
            ..config()
        };
        let mut a = LowRankAdapter::new(&cfg, 0, 1, 1).unwrap();
        a.layers_mut()[0].up = LoraPair {
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            a: DMatrix::from_row_slice(1, 2, &[2.0, 3.0]),
        };
        assert_eq!(
            a.delta(3, AffineMap::Up).unwrap(),
            DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 0.0, 0.0])
        );
    }

    #[test]
    fn delta_rank_is_bounded_by_adapter_rank() {
        let a = LowRankAdapter::random(&config(), 0, 2, 9, 1.0).unwrap();
        for layer in 3..=4 {
            for which in [AffineMap::Up, AffineMap::Down] {
                let sv = a.delta(layer, which).unwrap().singular_values();
                let mut sv: Vec<f64> = sv.iter().copied().collect();
                sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
                assert!(sv[1] > 1e-6);
                assert!(sv[2..].iter().all(|&s| s < 1e-10), "{sv:?}");
            }
        }
    }

    #[test]
    fn delta_rejects_frozen_layers() {
        let a = LowRankAdapter::new(&config(), 0, 2, 1).unwrap();
        assert!(matches!(
            a.delta(2, AffineMap::Up),
            Err(Error::LayerNotAdapted {
                layer: 2,
                first: 3,
                last: 4
            })
        ));
        assert!(a.delta(5, AffineMap::Down).is_err());
    }

    #[test]
    fn rank_zero_is_rejected() {
        assert!(LowRankAdapter::new(&config(), 0, 0, 1).is_err());
    }

    #[test]
    fn bank_keys_are_unique_and_ordered() {
        let mut bank = AdapterBank::new();
        for t in [3, 1, 2] {
            bank.insert(LowRankAdapter::new(&config(), t, 2, t as u64).unwrap())
                .unwrap();
        }
        assert_eq!(bank.task_ids(), vec![3, 1, 2]);
        assert!(bank
            .insert(LowRankAdapter::new(&config(), 1, 2, 0).unwrap())
            .is_err());
        assert_eq!(bank.get(2).unwrap().task_id(), 2);
        assert!(bank.get(7).is_none());
    }
}
