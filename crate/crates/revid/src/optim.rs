//! Adam with bias correction, plus the step-decay learning-rate schedule
//! used by every training stage.

use crate::tensor::Tensor;
use std::collections::BTreeMap;
use thiserror::Error;

/// Errors from optimizer steps and schedule construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    /// A parameter arrived without a gradient; nothing is updated.
    #[error("parameter '{name}' has no gradient; run backward and pull gradients before stepping")]
    MissingGrad { name: String },
    /// A named parameter's element count changed between steps.
    #[error("parameter '{name}' changed size between steps ({then} -> {now})")]
    SizeChanged {
        name: String,
        then: usize,
        now: usize,
    },
    /// Schedule hyperparameters are out of range.
    #[error("invalid learning-rate schedule: {reason}")]
    InvalidSchedule { reason: String },
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first and second moment estimates, keyed by parameter name,
/// plus the shared step counter. One `AdamState` drives one training stage.
#[derive(Debug, Clone)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    /// The standard hyperparameters: β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new() -> Self {
        Self::with_hyperparams(0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update to every `(name, tensor)` pair using the tensors'
/// accumulated gradients, then zero-fills those gradients.
///
/// The update is all-or-nothing: if any parameter is missing its gradient or
/// changed size, an error is returned before anything moves.
pub fn adam_step<N: AsRef<str>>(
    state: &mut AdamState,
    params: &mut [(N, &mut Tensor)],
    lr: f64,
) -> Result<(), OptimError> {
    for (name, tensor) in params.iter() {
        let name = name.as_ref();
        if tensor.grad().is_none() {
            return Err(OptimError::MissingGrad { name: name.into() });
        }
        if let Some(moments) = state.moments.get(name) {
            if moments.m.len() != tensor.numel() {
                return Err(OptimError::SizeChanged {
                    name: name.into(),
                    then: moments.m.len(),
                    now: tensor.numel(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let moments = state
            .moments
            .entry(name.as_ref().to_owned())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        let grad = tensor.grad().expect("checked above").to_vec();
        for (i, (&g, p)) in grad.iter().zip(tensor.data_mut()).enumerate() {
            let m = &mut moments.m[i];
            let v = &mut moments.v[i];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        tensor.zero_grad();
    }
    Ok(())
}

/// Step decay: `lr(epoch) = initial * factor^floor(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    initial: f64,
    factor: f64,
    every: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, factor: f64, every: usize) -> Result<Self, OptimError> {
        if !initial.is_finite() || initial <= 0.0 {
            return Err(OptimError::InvalidSchedule {
                reason: format!("initial lr must be finite and positive, got {initial}"),
            });
        }
        if !factor.is_finite() || factor <= 0.0 {
            return Err(OptimError::InvalidSchedule {
                reason: format!("decay factor must be finite and positive, got {factor}"),
            });
        }
        if every == 0 {
            return Err(OptimError::InvalidSchedule {
                reason: "decay interval must be at least 1 epoch".into(),
            });
        }
        Ok(Self {
            initial,
            factor,
            every,
        })
    }

    /// The reported setting: initial 1e-4, multiplied by 0.1 every `every`
    /// epochs (30 for the backbone and LSTM stages, 20 for the variational
    /// stage).
    pub fn tenth_every(every: usize) -> Result<Self, OptimError> {
        Self::new(1e-4, 0.1, every)
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn every(&self) -> usize {
        self.every
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.every) as i32)
    }
}
