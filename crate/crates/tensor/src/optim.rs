use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    step: u32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter from its `grad` field.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(TensorError::MissingGrad(i));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!(
                "state tracks {} parameters, got {}",
                state.first.len(),
                params.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[T]>::to_vec).unwrap_or_default();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam optimizer bundling its configuration with its moment state.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        adam_step(params, &mut self.state, &self.config)
    }
}
