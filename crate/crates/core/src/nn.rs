//! Small layer building blocks over the autograd tape.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use tim_autograd::{ParamId, ParamStore, Tape, Var};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Fully connected layer `x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/√in, 1/√in)`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform((in_dim, out_dim), bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform((1, out_dim), bound, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zero_bias(self, store: &mut ParamStore) -> Self {
        store.get_mut(self.bias).fill(0.0);
        self
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

pub fn uniform(shape: (usize, usize), bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

pub fn normal(shape: (usize, usize), std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Inverted dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Channel-wise dropout: one keep/drop decision per channel per group of
/// rows, applied identically to every row of the group.
pub fn channel_dropout_mask(group_rows: &[usize], cols: usize, p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let total: usize = group_rows.iter().sum();
    let keep = 1.0 / (1.0 - p);
    let mut mask = Array2::zeros((total, cols));
    let mut row = 0;
    for &n in group_rows {
        let channels: Vec<f64> = (0..cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        for r in row..row + n {
            for (c, &v) in channels.iter().enumerate() {
                mask[[r, c]] = v;
            }
        }
        row += n;
    }
    mask
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn channel_mask_is_constant_within_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = channel_dropout_mask(&[3, 2], 16, 0.5, &mut rng);
        for c in 0..16 {
            assert!((0..3).all(|r| mask[[r, c]] == mask[[0, c]]));
            assert!((3..5).all(|r| mask[[r, c]] == mask[[3, c]]));
        }
        assert!(mask.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn linear_init_within_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 16, 8, &mut rng);
        assert!(store.get(l.weight).iter().all(|w| w.abs() <= 0.25));
        assert_eq!(store.get(l.bias).dim(), (1, 8));
    }
}
