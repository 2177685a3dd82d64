//! Numerical verification of analytic gradients.
//!
//! Every check runs the real forward code (layer `forward` methods, the loss
//! constructors, the full pipeline graph), pulls analytic gradients back into
//! the owned parameter tensors, then re-evaluates the loss with each
//! parameter element nudged by ±h and compares the central difference
//! `(f(x+h) - f(x-h)) / 2h` against the analytic value. The comparison is a
//! relative error with the denominator floored at 1, so tiny gradients are
//! compared absolutely:
//!
//! `|analytic - numeric| / max(1, |analytic|, |numeric|) <= tolerance`
//!
//! A parameter the loss never touches (a frozen branch, or the sigma head
//! when the divergence weight is zero) has no analytic gradient buffer; it
//! is treated as exactly zero, which the central difference confirms.

use crate::layers::{
    sequence_feature, vfl_forward, Activation, DenseLayer, LayerError, LstmLayer,
};
use crate::losses::{
    combined_loss, kl_to_standard_normal, softmax_cross_entropy, KlForm, LossError, LossWeights,
};
use crate::pipeline::{
    sequence_graph, BackboneKind, Component, ModelConfig, PipelineError, PipelineModel, Regime,
};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use thiserror::Error;

/// Step size of the central difference.
pub const FD_STEP: f64 = 1e-5;
/// Largest acceptable relative error per gradient element.
pub const REL_TOLERANCE: f64 = 1e-4;

/// Errors raised while assembling or evaluating a check graph.
#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Verdict for one parameter tensor of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub component: String,
    pub parameter: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn line(&self) -> String {
        format!(
            "component={} parameter={} max_rel_error={:e} pass={}",
            self.component, self.parameter, self.max_rel_error, self.pass
        )
    }
}

/// The full report: one row per (check, parameter tensor) pair.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn lines(&self) -> Vec<String> {
        self.rows.iter().map(CheckRow::line).collect()
    }
}

/// One differentiable scenario under test. `loss_value` must rebuild the
/// graph from the current owned parameters on every call; `compute_grads`
/// must leave analytic gradients on those parameters. `params_mut` must
/// enumerate parameters in a stable order.
trait CheckTarget {
    fn component(&self) -> &'static str;
    fn loss_value(&mut self) -> Result<f64, GradCheckError>;
    fn compute_grads(&mut self) -> Result<(), GradCheckError>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

/// Runs one target through the checker and reports per-parameter rows.
fn check_target(target: &mut dyn CheckTarget) -> Result<Vec<CheckRow>, GradCheckError> {
    target.compute_grads()?;
    let analytic: Vec<(String, Vec<f64>)> = target
        .params_mut()
        .into_iter()
        .map(|(name, tensor)| {
            let grad = tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            tensor.clear_grad();
            (name, grad)
        })
        .collect();

    let mut rows = Vec::with_capacity(analytic.len());
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut max_rel_error = 0.0f64;
        for e in 0..grad.len() {
            let original = target.params_mut()[k].1.data()[e];
            target.params_mut()[k].1.data_mut()[e] = original + FD_STEP;
            let plus = target.loss_value()?;
            target.params_mut()[k].1.data_mut()[e] = original - FD_STEP;
            let minus = target.loss_value()?;
            target.params_mut()[k].1.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let denom = 1.0f64.max(grad[e].abs()).max(numeric.abs());
            max_rel_error = max_rel_error.max((grad[e] - numeric).abs() / denom);
        }
        rows.push(CheckRow {
            component: target.component().to_owned(),
            parameter: name.clone(),
            max_rel_error,
            pass: max_rel_error <= REL_TOLERANCE,
        });
    }
    Ok(rows)
}

/// A dense layer under a smooth scalar loss (mean of tanh outputs).
struct DenseTarget {
    layer: DenseLayer,
    x: Tensor,
}

impl DenseTarget {
    fn new(rng: &mut impl Rng) -> Result<Self, GradCheckError> {
        Ok(Self {
            layer: DenseLayer::new(5, 4, Activation::Tanh, rng)?,
            x: random_tensor(vec![3, 5], rng),
        })
    }

    fn run(&mut self, backward: bool) -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let bound = self.layer.bind(&mut tape);
        let x = tape.constant(self.x.clone());
        let y = bound.forward(&mut tape, x)?;
        let loss = tape.mean(y, None)?;
        let value = tape.data(loss)[0];
        if backward {
            tape.backward(loss)?;
            self.layer.pull_grads(&tape, &bound);
        }
        Ok(value)
    }
}

impl CheckTarget for DenseTarget {
    fn component(&self) -> &'static str {
        "dense"
    }

    fn loss_value(&mut self) -> Result<f64, GradCheckError> {
        self.run(false)
    }

    fn compute_grads(&mut self) -> Result<(), GradCheckError> {
        self.run(true).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layer
            .params_mut()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t))
            .collect()
    }
}

/// An LSTM over a short sequence; weight reuse across steps means each
/// analytic gradient is a sum over time, which the difference must match.
struct LstmTarget {
    layer: LstmLayer,
    x: Tensor,
    steps: usize,
}

impl LstmTarget {
    fn new(steps: usize, rng: &mut impl Rng) -> Result<Self, GradCheckError> {
        Ok(Self {
            layer: LstmLayer::new(3, 4, rng)?,
            x: random_tensor(vec![2, steps, 3], rng),
            steps,
        })
    }

    fn run(&mut self, backward: bool) -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let bound = self.layer.bind(&mut tape);
        let x = tape.constant(self.x.clone());
        let hidden = bound.forward(&mut tape, x)?;
        let loss = tape.mean(hidden, None)?;
        let value = tape.data(loss)[0];
        if backward {
            tape.backward(loss)?;
            self.layer.pull_grads(&tape, &bound);
        }
        Ok(value)
    }
}

impl CheckTarget for LstmTarget {
    fn component(&self) -> &'static str {
        if self.steps == 2 {
            "lstm_t2"
        } else {
            "lstm_t3"
        }
    }

    fn loss_value(&mut self) -> Result<f64, GradCheckError> {
        self.run(false)
    }

    fn compute_grads(&mut self) -> Result<(), GradCheckError> {
        self.run(true).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layer
            .params_mut()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t))
            .collect()
    }
}

/// The fused cross-entropy node, differentiated with respect to raw logits.
struct SoftmaxTarget {
    logits: Tensor,
    targets: Tensor,
}

impl SoftmaxTarget {
    fn new(rng: &mut impl Rng) -> Result<Self, GradCheckError> {
        let mut targets = vec![0.0; 4 * 3];
        for row in 0..4 {
            targets[row * 3 + rng.gen_range(0..3)] = 1.0;
        }
        Ok(Self {
            logits: random_tensor(vec![4, 3], rng),
            targets: Tensor::new(vec![4, 3], targets)?,
        })
    }

    fn run(&mut self, backward: bool) -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let logits = tape.param(&self.logits);
        let targets = tape.constant(self.targets.clone());
        let loss = softmax_cross_entropy(&mut tape, logits, targets)?;
        let value = tape.data(loss)[0];
        if backward {
            tape.backward(loss)?;
            if let Some(g) = tape.grad(logits) {
                let g = g.to_vec();
                self.logits.accumulate_grad(&g);
            }
        }
        Ok(value)
    }
}

impl CheckTarget for SoftmaxTarget {
    fn component(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn loss_value(&mut self) -> Result<f64, GradCheckError> {
        self.run(false)
    }

    fn compute_grads(&mut self) -> Result<(), GradCheckError> {
        self.run(true).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("logits".to_owned(), &mut self.logits)]
    }
}

/// The divergence behind the real variational head: mean and deviation both
/// come from dense heads, with the softplus floor keeping sigma positive for
/// every perturbed evaluation.
struct KlTarget {
    mu_head: DenseLayer,
    sigma_head: DenseLayer,
    x: Tensor,
    form: KlForm,
}

impl KlTarget {
    fn new(form: KlForm, rng: &mut impl Rng) -> Result<Self, GradCheckError> {
        Ok(Self {
            mu_head: DenseLayer::new(5, 4, Activation::None, rng)?,
            sigma_head: DenseLayer::new(5, 4, Activation::None, rng)?,
            x: random_tensor(vec![3, 5], rng),
            form,
        })
    }

    fn run(&mut self, backward: bool) -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let mu = self.mu_head.bind(&mut tape);
        let sigma = self.sigma_head.bind(&mut tape);
        let x = tape.constant(self.x.clone());
        let gaussian = vfl_forward(&mut tape, &mu, &sigma, x)?;
        let loss = kl_to_standard_normal(&mut tape, &gaussian, self.form)?;
        let value = tape.data(loss)[0];
        if backward {
            tape.backward(loss)?;
            self.mu_head.pull_grads(&tape, &mu);
            self.sigma_head.pull_grads(&tape, &sigma);
        }
        Ok(value)
    }
}

impl CheckTarget for KlTarget {
    fn component(&self) -> &'static str {
        match self.form {
            KlForm::Paper => "kl_paper",
            KlForm::Standard => "kl_standard",
        }
    }

    fn loss_value(&mut self) -> Result<f64, GradCheckError> {
        self.run(false)
    }

    fn compute_grads(&mut self) -> Result<(), GradCheckError> {
        self.run(true).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in self.mu_head.params_mut() {
            out.push((format!("mu.{n}"), t));
        }
        for (n, t) in self.sigma_head.params_mut() {
            out.push((format!("sigma.{n}"), t));
        }
        out
    }
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        input_width: 8,
        backbone: BackboneKind::MlpStub,
        backbone_hidden: 8,
        feature_width: 8,
        vfl_width: 4,
        lstm_units: 4,
        num_classes: 3,
        time_steps: 3,
        alpha: 0.1,
        kl_form: KlForm::Paper,
        sample_latent: false,
        l2_normalize_parts: false,
        regime: Regime::Separate,
    }
}

fn all_components() -> BTreeSet<Component> {
    BTreeSet::from([Component::Backbone, Component::Vfl, Component::Lstm])
}

fn one_hot(rows: usize, width: usize, rng: &mut impl Rng) -> Result<Tensor, TensorError> {
    let mut data = vec![0.0; rows * width];
    for row in 0..rows {
        data[row * width + rng.gen_range(0..width)] = 1.0;
    }
    Tensor::new(vec![rows, width], data)
}

/// End to end through backbone and variational head under the combined
/// identification + divergence loss, exactly as the variational training
/// stage wires it.
struct CombinedTarget {
    model: PipelineModel,
    x: Tensor,
    targets: Tensor,
}

impl CombinedTarget {
    fn new(rng: &mut ChaCha8Rng) -> Result<Self, GradCheckError> {
        let config = small_model_config();
        let classes = config.classifier_width();
        Ok(Self {
            model: PipelineModel::new(config, rng)?,
            x: random_tensor(vec![3, 8], rng),
            targets: one_hot(3, classes, rng)?,
        })
    }

    fn components() -> BTreeSet<Component> {
        BTreeSet::from([Component::Backbone, Component::Vfl])
    }

    fn run(&mut self, backward: bool) -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape, &all_components());
        let x = tape.constant(self.x.clone());
        let targets = tape.constant(self.targets.clone());
        let features = binding.backbone.forward(&mut tape, x)?;
        let gaussian = vfl_forward(&mut tape, &binding.mu_head, &binding.sigma_head, features)?;
        let logits = binding.vfl_classifier.forward(&mut tape, gaussian.mu)?;
        let weights = LossWeights::new(self.model.config().alpha)?;
        let (loss, value) = combined_loss(
            &mut tape,
            logits,
            targets,
            &gaussian,
            weights,
            self.model.config().kl_form,
        )?;
        if backward {
            tape.backward(loss)?;
            self.model.pull_grads(&tape, &binding, &Self::components());
        }
        Ok(value.total)
    }
}

impl CheckTarget for CombinedTarget {
    fn component(&self) -> &'static str {
        "combined_loss"
    }

    fn loss_value(&mut self) -> Result<f64, GradCheckError> {
        self.run(false)
    }

    fn compute_grads(&mut self) -> Result<(), GradCheckError> {
        self.run(true).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.model.trainable_params(&Self::components())
    }
}

/// End to end through the whole pipeline under the sequence loss: backbone
/// and variational mean feed the LSTM, whose last hidden state is
/// classified. The sigma head and the per-instance classifiers sit outside
/// this loss, so their rows must come back exactly zero.
struct SequenceTarget {
    model: PipelineModel,
    x: Tensor,
    targets: Tensor,
}

impl SequenceTarget {
    fn new(rng: &mut ChaCha8Rng) -> Result<Self, GradCheckError> {
        let config = small_model_config();
        let classes = config.classifier_width();
        Ok(Self {
            model: PipelineModel::new(config, rng)?,
            x: random_tensor(vec![2, 3, 8], rng),
            targets: one_hot(2, classes, rng)?,
        })
    }

    fn run(&mut self, backward: bool) -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape, &all_components());
        let x = tape.constant(self.x.clone());
        let targets = tape.constant(self.targets.clone());
        let graph = sequence_graph(&binding, &mut tape, x, None)?;
        let h_last = sequence_feature(&mut tape, graph.hidden)?;
        let logits = binding.lstm_classifier.forward(&mut tape, h_last)?;
        let loss = softmax_cross_entropy(&mut tape, logits, targets)?;
        let value = tape.data(loss)[0];
        if backward {
            tape.backward(loss)?;
            self.model.pull_grads(&tape, &binding, &all_components());
        }
        Ok(value)
    }
}

impl CheckTarget for SequenceTarget {
    fn component(&self) -> &'static str {
        "sequence_loss"
    }

    fn loss_value(&mut self) -> Result<f64, GradCheckError> {
        self.run(false)
    }

    fn compute_grads(&mut self) -> Result<(), GradCheckError> {
        self.run(true).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.model.trainable_params(&all_components())
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape and data match by construction")
}

/// Builds and checks every scenario with parameters drawn from `seed`.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    rows.extend(check_target(&mut DenseTarget::new(&mut rng)?)?);
    rows.extend(check_target(&mut LstmTarget::new(2, &mut rng)?)?);
    rows.extend(check_target(&mut LstmTarget::new(3, &mut rng)?)?);
    rows.extend(check_target(&mut SoftmaxTarget::new(&mut rng)?)?);
    rows.extend(check_target(&mut KlTarget::new(KlForm::Paper, &mut rng)?)?);
    rows.extend(check_target(&mut KlTarget::new(KlForm::Standard, &mut rng)?)?);
    rows.extend(check_target(&mut CombinedTarget::new(&mut rng)?)?);
    rows.extend(check_target(&mut SequenceTarget::new(&mut rng)?)?);

    Ok(GradCheckReport {
        step: FD_STEP,
        tolerance: REL_TOLERANCE,
        rows,
    })
}
