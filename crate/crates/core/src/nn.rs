//! Parameter-backed layers shared by the encoder and the task heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Matrix, ParamId, ParamStore, Tape, Var};

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-12;

pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// `y = x W + b`
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), normal_matrix(input, output, INIT_STD, rng)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros((1, output))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Matrix::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Dropout configuration for one forward pass. `None` disables it.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let (r, c) = tape.value(x).dim();
            let keep = 1.0 - d.rate;
            let mask = Matrix::from_shape_simple_fn((r, c), || {
                if d.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            tape.dropout(x, mask)
        }
        _ => x,
    }
}
