//! Small helpers for building random test instances.

#![doc(hidden)]

use ndarray::Array2;
use rand_distr::StandardNormal;

use crate::model::{HeadParams, ModelParams};
use crate::rng::Stream;
use ndarray::Array1;
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Stream) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_tokens(m: usize, d: usize, rng: &mut Stream) -> Array2<f64> {
    random_matrix(m, d, rng)
}

/// Random model with N(0,1)-scaled entries shrunk to keep logits moderate,
/// and a unit-norm random w_O.
pub fn random_params(d: usize, d_h: usize, d_v: usize, n_heads: usize, rng: &mut Stream) -> ModelParams {
    let heads = (0..n_heads)
        .map(|_| HeadParams {
            w_q: random_matrix(d, d_h, rng) * 0.3,
            w_k: random_matrix(d, d_h, rng) * 0.3,
            w_v: random_matrix(d, d_v, rng) * 0.3,
        })
        .collect();
    let mut w_o: Array1<f64> = Array1::from_shape_fn(d_v, |_| rng.sample(StandardNormal));
    let n = w_o.dot(&w_o).sqrt();
    w_o.mapv_inplace(|v| v / n);
    ModelParams { heads, w_o, version: 0 }
}
