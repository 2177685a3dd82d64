//! The three-component re-identification pipeline.
//!
//! Instances flow through a backbone (identity map or a small trainable MLP)
//! to per-instance features, through the variational head to per-dimension
//! Gaussians over an n-wide latent, and through an LSTM over each T-step
//! sequence of latents to a per-sequence descriptor. Each component carries
//! its own identity classifier so it can be trained in isolation while
//! earlier components stay frozen.
//!
//! Training follows a [`TrainPlan`]: the `separate` regime trains backbone,
//! then variational head, then LSTM, freezing everything already trained;
//! the `joint_vfl` regime trains backbone and variational head together and
//! skips the LSTM. Inference concatenates the final hidden state with the
//! unaugmented query's latent mean (or returns the mean alone under
//! `joint_vfl`).

use crate::data::{
    augment, build_query_sequence, build_train_sequence, AugmentParams, DataError, FeatureRecord,
    SequenceBatch, VehicleImage, ALL_OPS,
};
use crate::eval::l2_normalize;
use crate::layers::{
    sample_latent, sequence_feature, vfl_forward, Activation, BoundDense, BoundLstm, DenseLayer,
    LayerError, LstmLayer,
};
use crate::losses::{
    combined_loss, softmax_cross_entropy, KlForm, LossError, LossValue, LossWeights,
};
use crate::optim::{adam_step, AdamState, LrSchedule, OptimError};
use crate::tensor::{Tape, Tensor, TensorError, ValueId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Errors from model construction, training, and inference.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid model configuration: {reason}")]
    Config { reason: String },
    #[error("training data is empty")]
    EmptyDataset,
    #[error("dataset holds {found} identities but the model was built for {capacity}")]
    TooManyIdentities { found: usize, capacity: usize },
    #[error("instance {index} has width {got}, the model expects {expected}")]
    InputWidth {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The three trainable components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    Vfl,
    Lstm,
}

/// Which backbone stands in front of the variational head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Uses flattened inputs as features unchanged; has no parameters.
    #[default]
    Passthrough,
    /// A two-layer MLP (relu, then linear) standing in for a real CNN.
    MlpStub,
}

/// How the pipeline is trained and, consequently, what inference emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Three stages with earlier components frozen; inference concatenates
    /// the sequence feature and the query's latent mean.
    #[default]
    Separate,
    /// Backbone and variational head trained together, no recurrent stage;
    /// inference emits the latent mean alone.
    JointVfl,
}

/// Serializable architecture and loss settings. This is everything needed to
/// rebuild the model skeleton; the weights live beside it in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of one flattened input instance.
    pub input_width: usize,
    pub backbone: BackboneKind,
    /// Hidden width of the MLP backbone (ignored for passthrough).
    pub backbone_hidden: usize,
    /// Backbone output width; must equal `input_width` for passthrough.
    pub feature_width: usize,
    /// Latent width n of the variational head.
    pub vfl_width: usize,
    /// LSTM output length.
    pub lstm_units: usize,
    /// Identity count the classifiers are sized for. The classifier width is
    /// `max(2, num_classes)` so that a single-identity corpus still yields a
    /// well-formed two-class softmax.
    pub num_classes: usize,
    /// Instances per sequence.
    pub time_steps: usize,
    /// KL weight in the combined loss.
    pub alpha: f64,
    pub kl_form: KlForm,
    /// Feed sampled latents `mu + sigma*eps` (not the means) to the LSTM
    /// while training it. Inference always uses the means.
    pub sample_latent: bool,
    /// L2-normalize each embedding part before concatenation at inference.
    pub l2_normalize_parts: bool,
    pub regime: Regime,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |reason: String| Err(PipelineError::Config { reason });
        if self.input_width == 0 {
            return fail("input_width must be nonzero".into());
        }
        if self.feature_width == 0 || self.vfl_width == 0 || self.lstm_units == 0 {
            return fail("feature_width, vfl_width, and lstm_units must be nonzero".into());
        }
        if self.backbone == BackboneKind::Passthrough && self.feature_width != self.input_width {
            return fail(format!(
                "passthrough backbone requires feature_width == input_width ({} != {})",
                self.feature_width, self.input_width
            ));
        }
        if self.backbone == BackboneKind::MlpStub && self.backbone_hidden == 0 {
            return fail("backbone_hidden must be nonzero for the mlp_stub backbone".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if self.time_steps == 0 {
            return fail("time_steps must be at least 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        Ok(())
    }

    /// Width of every classifier head.
    pub fn classifier_width(&self) -> usize {
        self.num_classes.max(2)
    }

    /// Length of the embedding [`infer_feature`] produces.
    pub fn embedding_width(&self) -> usize {
        match self.regime {
            Regime::Separate => self.lstm_units + self.vfl_width,
            Regime::JointVfl => self.vfl_width,
        }
    }
}

/// The per-instance feature extractor in front of the variational head.
#[derive(Debug, Clone)]
pub struct Backbone {
    kind: BackboneKind,
    layers: Vec<DenseLayer>,
    input_width: usize,
    output_width: usize,
}

pub(crate) struct BoundBackbone {
    layers: Vec<BoundDense>,
}

impl Backbone {
    pub fn passthrough(width: usize) -> Self {
        Self {
            kind: BackboneKind::Passthrough,
            layers: Vec::new(),
            input_width: width,
            output_width: width,
        }
    }

    pub fn mlp_stub(
        input_width: usize,
        hidden: usize,
        output_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LayerError> {
        Ok(Self {
            kind: BackboneKind::MlpStub,
            layers: vec![
                DenseLayer::new(input_width, hidden, Activation::Relu, rng)?,
                DenseLayer::new(hidden, output_width, Activation::None, rng)?,
            ],
            input_width,
            output_width,
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            layers: self
                .layers
                .iter()
                .map(|l| if trainable { l.bind(tape) } else { l.bind_frozen(tape) })
                .collect(),
        }
    }
}

impl BoundBackbone {
    pub(crate) fn forward(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId, TensorError> {
        let mut out = x;
        for layer in &self.layers {
            out = layer.forward(tape, out)?;
        }
        Ok(out)
    }
}

/// The full model: backbone, variational head, LSTM, and one identity
/// classifier per component.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    config: ModelConfig,
    backbone: Backbone,
    backbone_classifier: DenseLayer,
    mu_head: DenseLayer,
    sigma_head: DenseLayer,
    vfl_classifier: DenseLayer,
    lstm: LstmLayer,
    lstm_classifier: DenseLayer,
    trained: BTreeSet<Component>,
}

/// All components bound onto one tape for a single forward/backward pass.
pub(crate) struct ModelBinding {
    pub(crate) backbone: BoundBackbone,
    pub(crate) backbone_classifier: BoundDense,
    pub(crate) mu_head: BoundDense,
    pub(crate) sigma_head: BoundDense,
    pub(crate) vfl_classifier: BoundDense,
    pub(crate) lstm: BoundLstm,
    pub(crate) lstm_classifier: BoundDense,
}

impl PipelineModel {
    /// Builds a freshly initialized model for the given configuration.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, PipelineError> {
        config.validate()?;
        let backbone = match config.backbone {
            BackboneKind::Passthrough => Backbone::passthrough(config.input_width),
            BackboneKind::MlpStub => Backbone::mlp_stub(
                config.input_width,
                config.backbone_hidden,
                config.feature_width,
                rng,
            )?,
        };
        let classes = config.classifier_width();
        Ok(Self {
            backbone,
            backbone_classifier: DenseLayer::new(
                config.feature_width,
                classes,
                Activation::None,
                rng,
            )?,
            mu_head: DenseLayer::new(config.feature_width, config.vfl_width, Activation::None, rng)?,
            sigma_head: DenseLayer::new(
                config.feature_width,
                config.vfl_width,
                Activation::None,
                rng,
            )?,
            vfl_classifier: DenseLayer::new(config.vfl_width, classes, Activation::None, rng)?,
            lstm: LstmLayer::new(config.vfl_width, config.lstm_units, rng)?,
            lstm_classifier: DenseLayer::new(config.lstm_units, classes, Activation::None, rng)?,
            config,
            trained: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Components whose training stage has completed.
    pub fn trained(&self) -> &BTreeSet<Component> {
        &self.trained
    }

    pub fn mark_trained(&mut self, component: Component) {
        self.trained.insert(component);
    }

    /// Every parameter with its stable checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            for (p, t) in layer.params() {
                out.push((format!("backbone.layer{i}.{p}"), t));
            }
        }
        for (p, t) in self.backbone_classifier.params() {
            out.push((format!("backbone.classifier.{p}"), t));
        }
        for (p, t) in self.mu_head.params() {
            out.push((format!("vfl.mu.{p}"), t));
        }
        for (p, t) in self.sigma_head.params() {
            out.push((format!("vfl.sigma.{p}"), t));
        }
        for (p, t) in self.vfl_classifier.params() {
            out.push((format!("vfl.classifier.{p}"), t));
        }
        for (p, t) in self.lstm.params() {
            out.push((format!("lstm.{p}"), t));
        }
        for (p, t) in self.lstm_classifier.params() {
            out.push((format!("lstm.classifier.{p}"), t));
        }
        out
    }

    /// The component a parameter name belongs to.
    pub fn component_of(name: &str) -> Option<Component> {
        if name.starts_with("backbone.") {
            Some(Component::Backbone)
        } else if name.starts_with("vfl.") {
            Some(Component::Vfl)
        } else if name.starts_with("lstm.") {
            Some(Component::Lstm)
        } else {
            None
        }
    }

    /// Replaces one named parameter, validating its shape. Used by the
    /// checkpoint loader.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<(), PipelineError> {
        let slot = self
            .named_params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t);
        let Some(slot) = slot else {
            return Err(PipelineError::UnknownParam { name: name.into() });
        };
        if slot.shape() != tensor.shape() {
            return Err(PipelineError::ParamShape {
                name: name.into(),
                expected: slot.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        *slot = tensor.with_grad();
        Ok(())
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.layers.iter_mut().enumerate() {
            for (p, t) in layer.params_mut() {
                out.push((format!("backbone.layer{i}.{p}"), t));
            }
        }
        for (p, t) in self.backbone_classifier.params_mut() {
            out.push((format!("backbone.classifier.{p}"), t));
        }
        for (p, t) in self.mu_head.params_mut() {
            out.push((format!("vfl.mu.{p}"), t));
        }
        for (p, t) in self.sigma_head.params_mut() {
            out.push((format!("vfl.sigma.{p}"), t));
        }
        for (p, t) in self.vfl_classifier.params_mut() {
            out.push((format!("vfl.classifier.{p}"), t));
        }
        for (p, t) in self.lstm.params_mut() {
            out.push((format!("lstm.{p}"), t));
        }
        for (p, t) in self.lstm_classifier.params_mut() {
            out.push((format!("lstm.classifier.{p}"), t));
        }
        out
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<Component>) -> ModelBinding {
        let t = |c: Component| trainable.contains(&c);
        let dense = |tape: &mut Tape, layer: &DenseLayer, on: bool| {
            if on {
                layer.bind(tape)
            } else {
                layer.bind_frozen(tape)
            }
        };
        ModelBinding {
            backbone: self.backbone.bind(tape, t(Component::Backbone)),
            backbone_classifier: dense(tape, &self.backbone_classifier, t(Component::Backbone)),
            mu_head: dense(tape, &self.mu_head, t(Component::Vfl)),
            sigma_head: dense(tape, &self.sigma_head, t(Component::Vfl)),
            vfl_classifier: dense(tape, &self.vfl_classifier, t(Component::Vfl)),
            lstm: if t(Component::Lstm) {
                self.lstm.bind(tape)
            } else {
                self.lstm.bind_frozen(tape)
            },
            lstm_classifier: dense(tape, &self.lstm_classifier, t(Component::Lstm)),
        }
    }

    /// Copies tape gradients of the given components back into the owned
    /// parameter tensors.
    pub(crate) fn pull_grads(
        &mut self,
        tape: &Tape,
        binding: &ModelBinding,
        components: &BTreeSet<Component>,
    ) {
        if components.contains(&Component::Backbone) {
            for (layer, bound) in self.backbone.layers.iter_mut().zip(&binding.backbone.layers) {
                layer.pull_grads(tape, bound);
            }
            self.backbone_classifier
                .pull_grads(tape, &binding.backbone_classifier);
        }
        if components.contains(&Component::Vfl) {
            self.mu_head.pull_grads(tape, &binding.mu_head);
            self.sigma_head.pull_grads(tape, &binding.sigma_head);
            self.vfl_classifier.pull_grads(tape, &binding.vfl_classifier);
        }
        if components.contains(&Component::Lstm) {
            self.lstm.pull_grads(tape, &binding.lstm);
            self.lstm_classifier.pull_grads(tape, &binding.lstm_classifier);
        }
    }

    /// Mutable named parameters of the given components, for the optimizer.
    pub(crate) fn trainable_params(
        &mut self,
        components: &BTreeSet<Component>,
    ) -> Vec<(String, &mut Tensor)> {
        let wanted: Vec<Component> = components.iter().copied().collect();
        self.named_params_mut()
            .into_iter()
            .filter(|(name, _)| {
                Self::component_of(name)
                    .map(|c| wanted.contains(&c))
                    .unwrap_or(false)
            })
            .collect()
    }
}

/// Per-step graph values for one sequence batch.
pub(crate) struct SequenceGraph {
    pub(crate) mu_steps: Vec<ValueId>,
    pub(crate) mu_stack: ValueId,
    pub(crate) hidden: ValueId,
}

/// Builds the shared forward graph: backbone and variational mean per step,
/// stacked into `[B, T, n]`, then the LSTM over the stack. When `sample_rng`
/// is given the LSTM consumes sampled latents instead of the means.
pub(crate) fn sequence_graph(
    binding: &ModelBinding,
    tape: &mut Tape,
    inputs: ValueId,
    sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<SequenceGraph, PipelineError> {
    let steps = tape.shape(inputs)[1];
    let mut mu_steps = Vec::with_capacity(steps);
    let mut lstm_steps = Vec::with_capacity(steps);
    let mut rng = sample_rng;
    for t in 0..steps {
        let x_t = tape.select_step(inputs, t)?;
        let f_t = binding.backbone.forward(tape, x_t)?;
        if let Some(rng) = rng.as_deref_mut() {
            let gaussian = vfl_forward(tape, &binding.mu_head, &binding.sigma_head, f_t)?;
            mu_steps.push(gaussian.mu);
            lstm_steps.push(sample_latent(tape, &gaussian, rng)?);
        } else {
            // Only the mean path is needed; sigma stays uncomputed.
            let mu = binding.mu_head.forward(tape, f_t)?;
            mu_steps.push(mu);
            lstm_steps.push(mu);
        }
    }
    let mu_stack = tape.stack_steps(&mu_steps)?;
    let lstm_input = if lstm_steps == mu_steps {
        mu_stack
    } else {
        tape.stack_steps(&lstm_steps)?
    };
    let hidden = binding.lstm.forward(tape, lstm_input)?;
    Ok(SequenceGraph {
        mu_steps,
        mu_stack,
        hidden,
    })
}

/// Runs the frozen model over a batch of sequences and returns the
/// variational means `[B, T, n]` and LSTM hidden states `[B, T, units]`.
/// Standard deviations are not computed; no loss needs them here.
pub fn forward_embed(
    model: &PipelineModel,
    batch: &SequenceBatch,
) -> Result<(Tensor, Tensor), PipelineError> {
    if batch.feature_width() != model.config.input_width {
        return Err(PipelineError::InputWidth {
            index: 0,
            expected: model.config.input_width,
            got: batch.feature_width(),
        });
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &BTreeSet::new());
    let inputs = tape.constant(batch.inputs().clone());
    let graph = sequence_graph(&binding, &mut tape, inputs, None)?;
    Ok((
        tape.value(graph.mu_stack).clone(),
        tape.value(graph.hidden).clone(),
    ))
}

/// What [`infer_feature`] accepts as a query.
#[derive(Debug, Clone, Copy)]
pub enum QueryInput<'a> {
    /// An image: the sequence is the original plus augmented copies.
    Image(&'a VehicleImage),
    /// A precomputed feature vector: it is repeated for every time step,
    /// since augmentation is an image-space operation.
    Features(&'a FeatureRecord),
}

/// Computes the retrieval embedding for one query.
///
/// Under the `separate` regime this is `[h_T, mu]`: the last hidden state of
/// the LSTM over the query sequence, concatenated with the variational mean
/// of the unaugmented query instance (sequence slot 0), total length
/// `lstm_units + vfl_width`. Under `joint_vfl` it is the mean alone. With
/// `l2_normalize_parts` each part is scaled to unit norm first. Inference
/// runs even on an untrained model, with a warning.
pub fn infer_feature(
    model: &PipelineModel,
    query: QueryInput<'_>,
    augment_params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, PipelineError> {
    let needed: &[Component] = match model.config.regime {
        Regime::Separate => &[Component::Backbone, Component::Vfl, Component::Lstm],
        Regime::JointVfl => &[Component::Backbone, Component::Vfl],
    };
    let missing: Vec<&Component> = needed
        .iter()
        .filter(|c| {
            // The passthrough backbone has no parameters, so "untrained"
            // means nothing for it.
            !(model.config.backbone == BackboneKind::Passthrough && **c == Component::Backbone)
                && !model.trained.contains(c)
        })
        .collect();
    if !missing.is_empty() {
        log::warn!("inference on untrained component(s) {missing:?}; embeddings will be arbitrary");
    }

    let t = model.config.time_steps;
    let rows: Vec<Vec<f64>> = match query {
        QueryInput::Image(image) => build_query_sequence(image, t, augment_params, rng)?
            .iter()
            .map(|img| img.flatten())
            .collect(),
        QueryInput::Features(record) => (0..t).map(|_| record.vector.clone()).collect(),
    };
    for (index, row) in rows.iter().enumerate() {
        if row.len() != model.config.input_width {
            return Err(PipelineError::InputWidth {
                index,
                expected: model.config.input_width,
                got: row.len(),
            });
        }
    }
    let flat: Vec<f64> = rows.concat();
    let inputs = Tensor::new(vec![1, t, model.config.input_width], flat)?;

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &BTreeSet::new());
    let input_id = tape.constant(inputs);
    let graph = sequence_graph(&binding, &mut tape, input_id, None)?;

    let mut mu0 = tape.data(graph.mu_steps[0]).to_vec();
    match model.config.regime {
        Regime::JointVfl => {
            if model.config.l2_normalize_parts {
                l2_normalize(&mut mu0);
            }
            Ok(mu0)
        }
        Regime::Separate => {
            let h_last = sequence_feature(&mut tape, graph.hidden)?;
            let mut h = tape.data(h_last).to_vec();
            if model.config.l2_normalize_parts {
                l2_normalize(&mut h);
                l2_normalize(&mut mu0);
            }
            h.extend_from_slice(&mu0);
            Ok(h)
        }
    }
}

/// One training stage: which components update, for how long, on what
/// schedule. Components outside `train` are bound frozen for the stage.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub name: String,
    pub train: BTreeSet<Component>,
    pub epochs: usize,
    pub schedule: LrSchedule,
}

/// An ordered list of stages.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub stages: Vec<StageSpec>,
}

impl TrainPlan {
    /// The three-stage regime: backbone, then variational head, then LSTM,
    /// each with earlier components frozen.
    pub fn separate(
        backbone: (usize, LrSchedule),
        vfl: (usize, LrSchedule),
        lstm: (usize, LrSchedule),
    ) -> Self {
        let stage = |name: &str, component, (epochs, schedule)| StageSpec {
            name: name.to_owned(),
            train: BTreeSet::from([component]),
            epochs,
            schedule,
        };
        Self {
            stages: vec![
                stage("backbone", Component::Backbone, backbone),
                stage("vfl", Component::Vfl, vfl),
                stage("lstm", Component::Lstm, lstm),
            ],
        }
    }

    /// The reported stage lengths: 70 epochs decaying every 30 for backbone
    /// and LSTM, 50 epochs decaying every 20 for the variational head.
    pub fn separate_default() -> Self {
        Self::separate(
            (70, LrSchedule::tenth_every(30).expect("static schedule")),
            (50, LrSchedule::tenth_every(20).expect("static schedule")),
            (70, LrSchedule::tenth_every(30).expect("static schedule")),
        )
    }

    /// The single-stage regime: backbone and variational head together,
    /// no recurrent component.
    pub fn joint_vfl(epochs: usize, schedule: LrSchedule) -> Self {
        Self {
            stages: vec![StageSpec {
                name: "joint_vfl".to_owned(),
                train: BTreeSet::from([Component::Backbone, Component::Vfl]),
                epochs,
                schedule,
            }],
        }
    }

    pub fn joint_vfl_default() -> Self {
        Self::joint_vfl(50, LrSchedule::tenth_every(20).expect("static schedule"))
    }
}

/// Run-level training knobs shared by every stage.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Instances (or sequences, in the LSTM stage) per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentParams,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            seed: 42,
            augment: AugmentParams::default(),
        }
    }
}

/// The training corpus: either raw images (augmented as they are drawn) or
/// precomputed per-instance features (used verbatim; augmentation is an
/// image-space operation).
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Images(&'a [VehicleImage]),
    Features(&'a [FeatureRecord]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Images(v) => v.len(),
            TrainData::Features(v) => v.len(),
        }
    }

    fn id_of(&self, index: usize) -> &str {
        match self {
            TrainData::Images(v) => v[index].id(),
            TrainData::Features(v) => &v[index].id,
        }
    }

    fn width_of(&self, index: usize) -> usize {
        match self {
            TrainData::Images(v) => {
                let img = &v[index];
                img.width() * img.height() * img.depth()
            }
            TrainData::Features(v) => v[index].vector.len(),
        }
    }
}

/// One epoch's record in the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub id: f64,
    pub kl: f64,
}

impl EpochLog {
    /// The line format the trainer emits:
    /// `epoch=<e> stage=<s> lr=<lr> total=<x> id=<x> kl=<x>`.
    pub fn line(&self, stage: &str) -> String {
        format!(
            "epoch={} stage={} lr={} total={} id={} kl={}",
            self.epoch, stage, self.lr, self.total, self.id, self.kl
        )
    }
}

/// The log of one completed stage.
#[derive(Debug, Clone)]
pub struct StageLog {
    pub stage: String,
    pub epochs: Vec<EpochLog>,
}

impl StageLog {
    pub fn lines(&self) -> Vec<String> {
        self.epochs.iter().map(|e| e.line(&self.stage)).collect()
    }
}

enum StageKind {
    /// Cross-entropy on the backbone classifier, per instance.
    BackboneClassifier,
    /// Combined identification + KL loss on the variational head, per instance.
    Variational,
    /// Cross-entropy on the sequence feature, per sequence.
    Sequence,
}

fn stage_kind(spec: &StageSpec) -> StageKind {
    if spec.train.contains(&Component::Lstm) {
        StageKind::Sequence
    } else if spec.train.contains(&Component::Vfl) {
        StageKind::Variational
    } else {
        StageKind::BackboneClassifier
    }
}

/// Sorted identities with their instance indices; the class index of an
/// identity is its position in this list.
fn group_by_identity(data: &TrainData) -> Vec<(String, Vec<usize>)> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        groups.entry(data.id_of(i).to_owned()).or_default().push(i);
    }
    groups.into_iter().collect()
}

fn one_hot_rows(classes: &[usize], width: usize) -> Result<Tensor, TensorError> {
    let mut data = vec![0.0; classes.len() * width];
    for (row, &c) in classes.iter().enumerate() {
        data[row * width + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), width], data)
}

/// Materializes one augmented training instance as a flat vector.
fn draw_instance(
    data: &TrainData,
    index: usize,
    augment_params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match data {
        TrainData::Images(images) => {
            augment(&images[index], &ALL_OPS, augment_params, rng).flatten()
        }
        TrainData::Features(records) => records[index].vector.clone(),
    }
}

/// Materializes one training sequence (length T) for an identity's pool.
fn draw_sequence(
    data: &TrainData,
    pool: &[usize],
    t: usize,
    augment_params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    match data {
        TrainData::Images(images) => {
            let records: Vec<VehicleImage> = pool.iter().map(|&i| images[i].clone()).collect();
            let seq = build_train_sequence(&records, t, augment_params, rng)?;
            Ok(seq.iter().map(|img| img.flatten()).collect())
        }
        TrainData::Features(records) => {
            // Same sampling scheme as the image path, minus augmentation:
            // without replacement when the pool is large enough.
            let picks: Vec<usize> = if pool.len() >= t {
                let mut indices = pool.to_vec();
                indices.shuffle(rng);
                indices.truncate(t);
                indices
            } else {
                (0..t).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            Ok(picks.iter().map(|&i| records[i].vector.clone()).collect())
        }
    }
}

/// Trains one stage. Components outside `spec.train` are frozen: they are
/// recorded on each step's tape as constants, receive no gradients, and are
/// never touched by the optimizer. Returns the per-epoch loss log.
pub fn train_stage(
    model: &mut PipelineModel,
    spec: &StageSpec,
    data: &TrainData,
    options: &TrainOptions,
    stage_index: usize,
) -> Result<StageLog, PipelineError> {
    if data.len() == 0 {
        return Err(PipelineError::EmptyDataset);
    }
    if options.batch_size == 0 {
        return Err(PipelineError::Config {
            reason: "batch_size must be at least 1".into(),
        });
    }
    let expected = model.config.input_width;
    for i in 0..data.len() {
        let got = data.width_of(i);
        if got != expected {
            return Err(PipelineError::InputWidth {
                index: i,
                expected,
                got,
            });
        }
    }
    let groups = group_by_identity(data);
    let classifier_width = model.config.classifier_width();
    if groups.len() > classifier_width {
        return Err(PipelineError::TooManyIdentities {
            found: groups.len(),
            capacity: classifier_width,
        });
    }
    let class_of: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .map(|(c, (id, _))| (id.as_str(), c))
        .collect();

    let kind = stage_kind(spec);
    let weights = LossWeights::new(model.config.alpha)?;
    let mut adam = AdamState::new();
    let mut epochs = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(((stage_index as u64) << 32) | epoch as u64);
        let lr = spec.schedule.lr_at(epoch);
        let mut weighted_loss = LossValue {
            total: 0.0,
            id_term: 0.0,
            kl_term: 0.0,
        };
        let mut items = 0usize;

        match kind {
            StageKind::BackboneClassifier | StageKind::Variational => {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(options.batch_size) {
                    let rows: Vec<Vec<f64>> = chunk
                        .iter()
                        .map(|&i| draw_instance(data, i, &options.augment, &mut rng))
                        .collect();
                    let classes: Vec<usize> =
                        chunk.iter().map(|&i| class_of[data.id_of(i)]).collect();
                    let value = instance_step(
                        model, spec, &kind, &rows, &classes, weights, lr, &mut adam,
                    )?;
                    accumulate(&mut weighted_loss, &value, chunk.len());
                    items += chunk.len();
                }
            }
            StageKind::Sequence => {
                let sequences = data.len().div_ceil(model.config.time_steps).max(1);
                let mut identity_order: Vec<usize> = (0..groups.len())
                    .cycle()
                    .take(sequences)
                    .collect();
                identity_order.shuffle(&mut rng);
                for chunk in identity_order.chunks(options.batch_size) {
                    let mut rows = Vec::with_capacity(chunk.len());
                    let mut classes = Vec::with_capacity(chunk.len());
                    for &g in chunk {
                        let (id, pool) = &groups[g];
                        rows.push(draw_sequence(
                            data,
                            pool,
                            model.config.time_steps,
                            &options.augment,
                            &mut rng,
                        )?);
                        classes.push(class_of[id.as_str()]);
                    }
                    let value = sequence_step(model, spec, &rows, &classes, lr, &mut adam, &mut rng)?;
                    accumulate(&mut weighted_loss, &value, chunk.len());
                    items += chunk.len();
                }
            }
        }

        let n = items.max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            lr,
            total: weighted_loss.total / n,
            id: weighted_loss.id_term / n,
            kl: weighted_loss.kl_term / n,
        });
    }

    for component in &spec.train {
        model.trained.insert(*component);
    }
    Ok(StageLog {
        stage: spec.name.clone(),
        epochs,
    })
}

fn accumulate(acc: &mut LossValue, value: &LossValue, weight: usize) {
    acc.total += value.total * weight as f64;
    acc.id_term += value.id_term * weight as f64;
    acc.kl_term += value.kl_term * weight as f64;
}

/// Materializes a zero gradient on any trainable parameter the loss never
/// reached (for example the sigma head when `alpha` is zero), so the
/// all-or-nothing optimizer step can proceed.
fn fill_missing_grads(params: &mut [(String, &mut Tensor)]) {
    for (_, tensor) in params.iter_mut() {
        if tensor.grad().is_none() {
            let zeros = vec![0.0; tensor.numel()];
            tensor.accumulate_grad(&zeros);
        }
    }
}

/// One optimizer step on a batch of individual instances.
#[allow(clippy::too_many_arguments)]
fn instance_step(
    model: &mut PipelineModel,
    spec: &StageSpec,
    kind: &StageKind,
    rows: &[Vec<f64>],
    classes: &[usize],
    weights: LossWeights,
    lr: f64,
    adam: &mut AdamState,
) -> Result<LossValue, PipelineError> {
    let width = model.config.input_width;
    let batch = rows.len();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &spec.train);
    let inputs = tape.constant(Tensor::new(vec![batch, width], rows.concat())?);
    let targets = tape.constant(one_hot_rows(classes, model.config.classifier_width())?);
    let features = binding.backbone.forward(&mut tape, inputs)?;

    let (loss_node, value) = match kind {
        StageKind::BackboneClassifier => {
            let logits = binding.backbone_classifier.forward(&mut tape, features)?;
            let node = softmax_cross_entropy(&mut tape, logits, targets)?;
            let id_term = tape.data(node)[0];
            (
                node,
                LossValue {
                    total: id_term,
                    id_term,
                    kl_term: 0.0,
                },
            )
        }
        StageKind::Variational => {
            let gaussian = vfl_forward(&mut tape, &binding.mu_head, &binding.sigma_head, features)?;
            let logits = binding.vfl_classifier.forward(&mut tape, gaussian.mu)?;
            combined_loss(
                &mut tape,
                logits,
                targets,
                &gaussian,
                weights,
                model.config.kl_form,
            )?
        }
        StageKind::Sequence => unreachable!("sequence stages use sequence_step"),
    };

    tape.backward(loss_node)?;
    model.pull_grads(&tape, &binding, &spec.train);
    let mut params = model.trainable_params(&spec.train);
    fill_missing_grads(&mut params);
    adam_step(adam, &mut params, lr)?;
    Ok(value)
}

/// One optimizer step on a batch of sequences, training the recurrent stage.
fn sequence_step(
    model: &mut PipelineModel,
    spec: &StageSpec,
    rows: &[Vec<Vec<f64>>],
    classes: &[usize],
    lr: f64,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<LossValue, PipelineError> {
    let width = model.config.input_width;
    let t = model.config.time_steps;
    let batch = rows.len();
    let flat: Vec<f64> = rows.iter().flat_map(|seq| seq.concat()).collect();

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &spec.train);
    let inputs = tape.constant(Tensor::new(vec![batch, t, width], flat)?);
    let targets = tape.constant(one_hot_rows(classes, model.config.classifier_width())?);

    let sample_rng = model.config.sample_latent.then_some(rng);
    let graph = sequence_graph(&binding, &mut tape, inputs, sample_rng)?;
    let h_last = sequence_feature(&mut tape, graph.hidden)?;
    let logits = binding.lstm_classifier.forward(&mut tape, h_last)?;
    let node = softmax_cross_entropy(&mut tape, logits, targets)?;
    let id_term = tape.data(node)[0];

    tape.backward(node)?;
    model.pull_grads(&tape, &binding, &spec.train);
    let mut params = model.trainable_params(&spec.train);
    fill_missing_grads(&mut params);
    adam_step(adam, &mut params, lr)?;
    Ok(LossValue {
        total: id_term,
        id_term,
        kl_term: 0.0,
    })
}

/// Runs every stage of the plan in order, invoking `observer` with each
/// emitted log line as training progresses.
pub fn run_train_plan(
    model: &mut PipelineModel,
    plan: &TrainPlan,
    data: &TrainData,
    options: &TrainOptions,
    mut observer: impl FnMut(&str),
) -> Result<Vec<StageLog>, PipelineError> {
    let mut logs = Vec::with_capacity(plan.stages.len());
    for (i, spec) in plan.stages.iter().enumerate() {
        let log = train_stage(model, spec, data, options, i)?;
        for line in log.lines() {
            observer(&line);
        }
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_config(num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_width: 256,
            backbone: BackboneKind::Passthrough,
            backbone_hidden: 0,
            feature_width: 256,
            vfl_width: 8,
            lstm_units: 8,
            num_classes,
            time_steps: 3,
            alpha: 0.1,
            kl_form: KlForm::Paper,
            sample_latent: false,
            l2_normalize_parts: true,
            regime: Regime::Separate,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn tiny_dataset(identities: usize, per_camera: usize) -> Vec<VehicleImage> {
        generate_synthetic(&SyntheticSpec {
            num_identities: identities,
            images_per_identity: per_camera,
            viewpoint_count: 2,
            noise_scale: 0.02,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let mut c = tiny_config(4);
        c.feature_width = 128;
        assert!(matches!(
            c.validate(),
            Err(PipelineError::Config { .. })
        ));
        let mut c = tiny_config(4);
        c.time_steps = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(4);
        c.alpha = -1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(4);
        c.backbone = BackboneKind::MlpStub;
        c.backbone_hidden = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn classifier_width_has_a_floor_of_two() {
        assert_eq!(tiny_config(1).classifier_width(), 2);
        assert_eq!(tiny_config(10).classifier_width(), 10);
    }

    #[test]
    fn named_params_cover_every_component_uniquely() {
        let model = PipelineModel::new(tiny_config(4), &mut rng()).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        assert_eq!(names.len(), unique.len());
        // Passthrough backbone: classifier only, plus 6 vfl and 10 lstm entries.
        assert_eq!(names.len(), 2 + 6 + 10);
        assert!(names.contains(&"vfl.mu.weight".to_owned()));
        assert!(names.contains(&"lstm.w_forget".to_owned()));
        for name in &names {
            assert!(PipelineModel::component_of(name).is_some());
        }
    }

    #[test]
    fn mlp_stub_backbone_adds_trainable_layers() {
        let mut c = tiny_config(4);
        c.backbone = BackboneKind::MlpStub;
        c.backbone_hidden = 32;
        c.feature_width = 16;
        let model = PipelineModel::new(c, &mut rng()).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"backbone.layer0.weight".to_owned()));
        assert!(names.contains(&"backbone.layer1.bias".to_owned()));
    }

    #[test]
    fn set_param_validates_name_and_shape() {
        let mut model = PipelineModel::new(tiny_config(4), &mut rng()).unwrap();
        assert!(matches!(
            model.set_param("vfl.mu.nope", Tensor::zeros(vec![1]).unwrap()),
            Err(PipelineError::UnknownParam { .. })
        ));
        assert!(matches!(
            model.set_param("vfl.mu.weight", Tensor::zeros(vec![3, 3]).unwrap()),
            Err(PipelineError::ParamShape { .. })
        ));
        let replacement = Tensor::filled(vec![256, 8], 0.25).unwrap();
        model.set_param("vfl.mu.weight", replacement).unwrap();
        let (_, t) = model
            .named_params()
            .into_iter()
            .find(|(n, _)| n == "vfl.mu.weight")
            .unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn forward_embed_shapes_follow_the_config() {
        let model = PipelineModel::new(tiny_config(4), &mut rng()).unwrap();
        let inputs = Tensor::filled(vec![2, 3, 256], 0.1).unwrap();
        let labels = one_hot_rows(&[0, 1], 4).unwrap();
        let batch = SequenceBatch::new(inputs, labels).unwrap();
        let (mu, hidden) = forward_embed(&model, &batch).unwrap();
        assert_eq!(mu.shape(), &[2, 3, 8]);
        assert_eq!(hidden.shape(), &[2, 3, 8]);
    }

    #[test]
    fn single_identity_single_image_overfits_quickly() {
        // The smallest possible corpus must still train: one identity, one
        // image, classifier width floored at 2.
        let image = tiny_dataset(2, 1)[0].clone();
        let mut config = tiny_config(1);
        config.alpha = 0.1;
        let mut model = PipelineModel::new(config, &mut rng()).unwrap();
        let data_vec = vec![image];
        let data = TrainData::Images(&data_vec);
        let spec = StageSpec {
            name: "backbone".into(),
            train: BTreeSet::from([Component::Backbone]),
            epochs: 60,
            schedule: LrSchedule::new(0.05, 0.1, 1000).unwrap(),
        };
        let log = train_stage(&mut model, &spec, &data, &TrainOptions::default(), 0).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(
            last.id < 0.01,
            "id loss should collapse on a single instance, got {}",
            last.id
        );
        assert!(model.trained().contains(&Component::Backbone));
    }

    #[test]
    fn frozen_components_stay_bitwise_identical() {
        let images = tiny_dataset(3, 2);
        let mut model = PipelineModel::new(tiny_config(3), &mut rng()).unwrap();
        let before: Vec<(String, Vec<u64>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let data = TrainData::Images(&images);
        let spec = StageSpec {
            name: "vfl".into(),
            train: BTreeSet::from([Component::Vfl]),
            epochs: 2,
            schedule: LrSchedule::tenth_every(30).unwrap(),
        };
        train_stage(&mut model, &spec, &data, &TrainOptions::default(), 1).unwrap();
        let after: Vec<(String, Vec<u64>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut vfl_changed = false;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            match PipelineModel::component_of(name).unwrap() {
                Component::Vfl => vfl_changed |= a != b,
                Component::Backbone | Component::Lstm => {
                    assert_eq!(a, b, "frozen parameter {name} moved");
                }
            }
        }
        assert!(vfl_changed, "trained component should have moved");
    }

    #[test]
    fn vfl_stage_logs_a_nonzero_kl_term_and_lstm_stage_does_not() {
        let images = tiny_dataset(3, 2);
        let data = TrainData::Images(&images);
        let mut model = PipelineModel::new(tiny_config(3), &mut rng()).unwrap();
        let vfl = StageSpec {
            name: "vfl".into(),
            train: BTreeSet::from([Component::Vfl]),
            epochs: 1,
            schedule: LrSchedule::tenth_every(20).unwrap(),
        };
        let log = train_stage(&mut model, &vfl, &data, &TrainOptions::default(), 0).unwrap();
        assert!(log.epochs[0].kl != 0.0);
        assert!((log.epochs[0].total - (log.epochs[0].id + 0.1 * log.epochs[0].kl)).abs() < 1e-9);
        let lstm = StageSpec {
            name: "lstm".into(),
            train: BTreeSet::from([Component::Lstm]),
            epochs: 1,
            schedule: LrSchedule::tenth_every(30).unwrap(),
        };
        let log = train_stage(&mut model, &lstm, &data, &TrainOptions::default(), 1).unwrap();
        assert_eq!(log.epochs[0].kl, 0.0);
        assert_eq!(log.epochs[0].total, log.epochs[0].id);
    }

    #[test]
    fn log_lines_follow_the_contract_format() {
        let entry = EpochLog {
            epoch: 3,
            lr: 1e-4,
            total: 1.25,
            id: 1.0,
            kl: 2.5,
        };
        assert_eq!(
            entry.line("vfl"),
            "epoch=3 stage=vfl lr=0.0001 total=1.25 id=1 kl=2.5"
        );
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let images = tiny_dataset(3, 2);
        let run = || {
            let mut model = PipelineModel::new(tiny_config(3), &mut rng()).unwrap();
            let data = TrainData::Images(&images);
            let plan = TrainPlan::separate(
                (2, LrSchedule::tenth_every(30).unwrap()),
                (2, LrSchedule::tenth_every(20).unwrap()),
                (2, LrSchedule::tenth_every(30).unwrap()),
            );
            let mut lines = Vec::new();
            run_train_plan(
                &mut model,
                &plan,
                &data,
                &TrainOptions::default(),
                |l| lines.push(l.to_owned()),
            )
            .unwrap();
            let weights: Vec<u64> = model
                .named_params()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect();
            (lines, weights)
        };
        let (lines_a, weights_a) = run();
        let (lines_b, weights_b) = run();
        assert_eq!(lines_a, lines_b);
        assert_eq!(weights_a, weights_b);
        assert_eq!(lines_a.len(), 6, "three stages, two epochs each");
        assert!(lines_a[0].starts_with("epoch=0 stage=backbone lr=0.0001 "));
    }

    #[test]
    fn too_many_identities_for_the_classifier_is_an_error() {
        let images = tiny_dataset(4, 1);
        let mut model = PipelineModel::new(tiny_config(2), &mut rng()).unwrap();
        let data = TrainData::Images(&images);
        let spec = StageSpec {
            name: "backbone".into(),
            train: BTreeSet::from([Component::Backbone]),
            epochs: 1,
            schedule: LrSchedule::tenth_every(30).unwrap(),
        };
        let err = train_stage(&mut model, &spec, &data, &TrainOptions::default(), 0).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::TooManyIdentities { found: 4, capacity: 2 }
        ));
    }

    #[test]
    fn wrong_instance_width_is_reported_with_its_index() {
        let mut model = PipelineModel::new(tiny_config(2), &mut rng()).unwrap();
        let records = vec![
            FeatureRecord::new("a", None, vec![0.0; 256]),
            FeatureRecord::new("b", None, vec![0.0; 255]),
        ];
        let data = TrainData::Features(&records);
        let spec = StageSpec {
            name: "backbone".into(),
            train: BTreeSet::from([Component::Backbone]),
            epochs: 1,
            schedule: LrSchedule::tenth_every(30).unwrap(),
        };
        let err = train_stage(&mut model, &spec, &data, &TrainOptions::default(), 0).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::InputWidth { index: 1, expected: 256, got: 255 }
        ));
    }

    #[test]
    fn feature_records_train_without_augmentation() {
        let mut model = PipelineModel::new(tiny_config(2), &mut rng()).unwrap();
        let mut records = Vec::new();
        for i in 0..6 {
            let id = if i % 2 == 0 { "a" } else { "b" };
            let value = if i % 2 == 0 { 0.2 } else { 0.8 };
            records.push(FeatureRecord::new(id, None, vec![value; 256]));
        }
        let data = TrainData::Features(&records);
        let plan = TrainPlan::separate(
            (2, LrSchedule::tenth_every(30).unwrap()),
            (2, LrSchedule::tenth_every(20).unwrap()),
            (2, LrSchedule::tenth_every(30).unwrap()),
        );
        let logs = run_train_plan(&mut model, &plan, &data, &TrainOptions::default(), |_| {})
            .unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(model.trained().len(), 3);
    }

    #[test]
    fn infer_feature_concatenates_hidden_state_and_mean() {
        let images = tiny_dataset(2, 2);
        let model = PipelineModel::new(tiny_config(2), &mut rng()).unwrap();
        let mut q_rng = ChaCha8Rng::seed_from_u64(9);
        let feature = infer_feature(
            &model,
            QueryInput::Image(&images[0]),
            &AugmentParams::default(),
            &mut q_rng,
        )
        .unwrap();
        assert_eq!(feature.len(), 8 + 8);
        // With l2_normalize_parts both halves are unit vectors.
        let h: f64 = feature[..8].iter().map(|v| v * v).sum();
        let m: f64 = feature[8..].iter().map(|v| v * v).sum();
        assert!((h - 1.0).abs() < 1e-9);
        assert!((m - 1.0).abs() < 1e-9);
    }

    #[test]
    fn joint_regime_emits_the_mean_alone() {
        let images = tiny_dataset(2, 2);
        let mut config = tiny_config(2);
        config.regime = Regime::JointVfl;
        let model = PipelineModel::new(config, &mut rng()).unwrap();
        let mut q_rng = ChaCha8Rng::seed_from_u64(9);
        let feature = infer_feature(
            &model,
            QueryInput::Image(&images[0]),
            &AugmentParams::default(),
            &mut q_rng,
        )
        .unwrap();
        assert_eq!(feature.len(), 8);
    }

    #[test]
    fn feature_record_queries_repeat_the_vector() {
        let model = PipelineModel::new(tiny_config(2), &mut rng()).unwrap();
        let record = FeatureRecord::new("q", None, vec![0.3; 256]);
        let mut q_rng = ChaCha8Rng::seed_from_u64(9);
        let feature = infer_feature(
            &model,
            QueryInput::Features(&record),
            &AugmentParams::default(),
            &mut q_rng,
        )
        .unwrap();
        assert_eq!(feature.len(), 16);
        let wrong = FeatureRecord::new("q", None, vec![0.3; 100]);
        assert!(matches!(
            infer_feature(
                &model,
                QueryInput::Features(&wrong),
                &AugmentParams::default(),
                &mut q_rng,
            ),
            Err(PipelineError::InputWidth { expected: 256, got: 100, .. })
        ));
    }

    #[test]
    fn sample_latent_training_differs_from_mean_training() {
        let images = tiny_dataset(3, 2);
        let data = TrainData::Images(&images);
        let run = |sample: bool| {
            let mut config = tiny_config(3);
            config.sample_latent = sample;
            let mut model = PipelineModel::new(config, &mut rng()).unwrap();
            let spec = StageSpec {
                name: "lstm".into(),
                train: BTreeSet::from([Component::Lstm]),
                epochs: 1,
                schedule: LrSchedule::tenth_every(30).unwrap(),
            };
            let log = train_stage(&mut model, &spec, &data, &TrainOptions::default(), 2).unwrap();
            log.epochs[0].total
        };
        // Same seeds everywhere except the latent sampling path.
        assert_ne!(run(false), run(true));
    }
}
