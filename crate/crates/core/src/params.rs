use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};

/// A named trainable tensor. `decay` marks weights that receive decoupled
/// weight decay (biases and embedding tables do not).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub decay: bool,
}

impl Param {
    pub fn weight(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            decay: true,
        }
    }

    pub fn bias(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            decay: false,
        }
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::new(rows, cols, data).expect("positive shape")
}

pub fn bind_all(g: &mut Graph, params: &[Param]) -> Vec<Var> {
    params.iter().map(|p| g.param(&p.value)).collect()
}

/// Binds parameters as constants, for inference without gradient tracking.
pub fn bind_frozen(g: &mut Graph, params: &[Param]) -> Vec<Var> {
    params.iter().map(|p| g.constant(p.value.clone())).collect()
}

pub fn count(params: &[Param]) -> usize {
    params.iter().map(|p| p.value.len()).sum()
}
