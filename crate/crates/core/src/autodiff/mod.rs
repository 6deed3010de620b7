//! Minimal reverse-mode automatic differentiation for 3D encoder-decoder nets.
//!
//! Only the layers the two segmentation nets use are provided: 3x3x3 convolution,
//! 2x2x2 max pooling, 4x4x4 stride-2 transposed convolution, batch normalization,
//! ReLU/sigmoid/softmax, channel concatenation, bootstrapped cross entropy and
//! soft Dice loss. Everything is generic over [`Scalar`] so the same code path can
//! be checked against finite differences in `f64`.

mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use graph::{Graph, RunningStats, Var, BN_EPS, BN_MOMENTUM, DICE_EPS};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("max pooling needs even spatial extents, got {0:?}")]
    OddExtent(Vec<usize>),
    #[error("target label {value} out of range for {classes} classes")]
    TargetOutOfRange { value: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already differentiated")]
    GraphConsumed,
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
}

/// A trainable tensor with its Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Self { name: name.into(), value, grad: None, adam_m: vec![T::zero(); n], adam_v: vec![T::zero(); n], step_count: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter. Fails without touching
/// anything if a gradient is missing. Consumes the gradients.
pub fn adam_step<T: Scalar>(params: &mut [Parameter<T>], cfg: &AdamConfig) -> Result<(), AutodiffError> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(AutodiffError::MissingGradient(p.name.clone()));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(cfg.lr);
        let eps = T::from_f64_lossy(cfg.eps);
        let vals = p.value.data_mut();
        for i in 0..vals.len() {
            let g = grad[i];
            let m = b1 * p.adam_m[i] + (T::one() - b1) * g;
            let v = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
            p.adam_m[i] = m;
            p.adam_v[i] = v;
            vals[i] = vals[i] - lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}
