//! Training losses: identification cross-entropy, the KL divergence pulling
//! the variational features toward a standard normal, and their weighted sum.
//!
//! The divergence comes in two shapes selected by [`KlForm`]:
//!
//! * [`KlForm::Paper`] — `mean_B[ -1/2 Σ_i (1 + log σ_i - μ_i² - σ_i) ]`,
//!   with the standard deviation entering linearly.
//! * [`KlForm::Standard`] — `mean_B[ 1/2 Σ_i (σ_i² + μ_i² - 1 - 2 log σ_i) ]`,
//!   the closed-form KL(N(μ, σ²) ‖ N(0, 1)).
//!
//! Both are zero at μ = 0, σ = 1 and both are composed from tape primitives,
//! so gradients flow to μ and σ without a bespoke backward rule.

use crate::layers::GaussianParams;
use crate::tensor::{Tape, Tensor, TensorError, ValueId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from loss construction and input validation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    /// Target row is not a one-hot vector of exact zeros and a single one.
    #[error("target row {row} is not one-hot: {reason}")]
    NotOneHot { row: usize, reason: String },
    /// Classification needs at least two classes.
    #[error("classification over {classes} class(es); at least 2 are required")]
    TooFewClasses { classes: usize },
    /// The loss weight must be finite and nonnegative.
    #[error("kl weight alpha must be finite and >= 0, got {alpha}")]
    InvalidAlpha { alpha: f64 },
    /// A standard deviation entry is not strictly positive.
    #[error("sigma must be strictly positive, found {value} at flat index {index}")]
    NonPositiveSigma { index: usize, value: f64 },
    /// Underlying tensor operation failed (shape or rank mismatch).
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which algebraic form of the divergence to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    #[default]
    Paper,
    Standard,
}

/// Relative weighting of the loss terms: `total = id + alpha * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    /// Validates that `alpha` is finite and nonnegative.
    pub fn new(alpha: f64) -> Result<Self, LossError> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(LossError::InvalidAlpha { alpha });
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for LossWeights {
    /// The reported weighting, `alpha = 0.1`.
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

/// Scalar snapshot of a combined loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub id_term: f64,
    pub kl_term: f64,
}

/// Mean softmax cross-entropy over the batch. `logits` and `targets` are
/// both `[B, C]`; each target row must be exactly one-hot and `C >= 2`.
/// Large logits stay finite (shifted log-sum-exp), and the gradient reaching
/// the logits is `(softmax(logits) - targets) / B`.
pub fn softmax_cross_entropy(
    tape: &mut Tape,
    logits: ValueId,
    targets: ValueId,
) -> Result<ValueId, LossError> {
    let shape = tape.shape(targets).to_vec();
    if shape.len() != 2 {
        return Err(LossError::Tensor(TensorError::WrongRank {
            op: "softmax_cross_entropy",
            expected: 2,
            shape,
        }));
    }
    let classes = shape[1];
    if classes < 2 {
        return Err(LossError::TooFewClasses { classes });
    }
    validate_one_hot(tape.data(targets), classes)?;
    Ok(tape.softmax_cross_entropy(logits, targets)?)
}

fn validate_one_hot(data: &[f64], classes: usize) -> Result<(), LossError> {
    for (row, chunk) in data.chunks(classes).enumerate() {
        let mut ones = 0usize;
        for &v in chunk {
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(LossError::NotOneHot {
                    row,
                    reason: format!("entry {v} is neither 0 nor 1"),
                });
            }
        }
        if ones != 1 {
            return Err(LossError::NotOneHot {
                row,
                reason: format!("{ones} entries equal 1, expected exactly one"),
            });
        }
    }
    Ok(())
}

/// Divergence of the predicted per-dimension Gaussians from N(0, 1),
/// averaged over the batch. `mu` and `sigma` must share a `[B, n]` shape and
/// every `sigma` entry must be strictly positive.
pub fn kl_to_standard_normal(
    tape: &mut Tape,
    params: &GaussianParams,
    form: KlForm,
) -> Result<ValueId, LossError> {
    let mu_shape = tape.shape(params.mu).to_vec();
    let sigma_shape = tape.shape(params.sigma).to_vec();
    if mu_shape.len() != 2 {
        return Err(LossError::Tensor(TensorError::WrongRank {
            op: "kl_to_standard_normal",
            expected: 2,
            shape: mu_shape,
        }));
    }
    if sigma_shape != mu_shape {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "kl_to_standard_normal",
            lhs: mu_shape,
            rhs: sigma_shape,
        }));
    }
    if let Some((index, &value)) = tape
        .data(params.sigma)
        .iter()
        .enumerate()
        .find(|(_, &v)| v <= 0.0)
    {
        return Err(LossError::NonPositiveSigma { index, value });
    }

    let one = tape.constant(Tensor::scalar(1.0));
    let log_sigma = tape.log(params.sigma)?;
    let mu_sq = tape.mul(params.mu, params.mu)?;
    // inner = 1 + c*log σ - μ² - s, with (c, s) = (1, σ) or (2, σ²).
    let (log_term, sigma_term) = match form {
        KlForm::Paper => (log_sigma, params.sigma),
        KlForm::Standard => {
            let two_log = tape.scale(log_sigma, 2.0)?;
            let sigma_sq = tape.mul(params.sigma, params.sigma)?;
            (two_log, sigma_sq)
        }
    };
    let t1 = tape.add(log_term, one)?;
    let t2 = tape.sub(t1, mu_sq)?;
    let inner = tape.sub(t2, sigma_term)?;
    let per_row = tape.sum(inner, Some(1))?;
    let neg_half = tape.scale(per_row, -0.5)?;
    Ok(tape.mean(neg_half, None)?)
}

/// Builds `total = id + alpha * kl` on the tape and returns the total's node
/// together with the scalar values of all three terms.
///
/// With `alpha = 0` the KL term is skipped entirely and the returned node is
/// the identification loss itself, so the total matches it bit for bit.
pub fn combined_loss(
    tape: &mut Tape,
    logits: ValueId,
    targets: ValueId,
    params: &GaussianParams,
    weights: LossWeights,
    form: KlForm,
) -> Result<(ValueId, LossValue), LossError> {
    let id_node = softmax_cross_entropy(tape, logits, targets)?;
    let id_term = tape.data(id_node)[0];
    if weights.alpha() == 0.0 {
        return Ok((
            id_node,
            LossValue {
                total: id_term,
                id_term,
                kl_term: 0.0,
            },
        ));
    }
    let kl_node = kl_to_standard_normal(tape, params, form)?;
    let kl_term = tape.data(kl_node)[0];
    let weighted = tape.scale(kl_node, weights.alpha())?;
    let total_node = tape.add(id_node, weighted)?;
    Ok((
        total_node,
        LossValue {
            total: tape.data(total_node)[0],
            id_term,
            kl_term,
        },
    ))
}
