//! Neural network layers: dense, LSTM, and the variational feature head.
//!
//! Layers own their parameters as plain [`Tensor`]s. To run a forward pass,
//! a layer is *bound* onto a tape (`bind` for trainable, `bind_frozen` for
//! fixed weights), which records each parameter exactly once; every use of
//! the bound handle then shares those tape nodes, so a weight applied at
//! several time steps accumulates one summed gradient. After backward, the
//! caller copies gradients back into the owned tensors with `pull_grads`.

use crate::tensor::{Result as TensorResult, Tape, Tensor, TensorError, ValueId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Errors from layer construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("{layer}: {field} must be nonzero")]
    ZeroDim {
        layer: &'static str,
        field: &'static str,
    },
}

/// Additive floor applied to the variational standard deviation so the
/// divergence term never sees a zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// LSTM widths covered by the reported ablation; other values work but log
/// a warning at construction time.
pub const EVALUATED_LSTM_UNITS: [usize; 5] = [64, 128, 256, 512, 1024];

/// Elementwise nonlinearity applied after a dense layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

/// Draws a Glorot-uniform matrix: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
fn glorot_uniform(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data)
        .expect("glorot dims are validated by the caller")
        .with_grad()
}

/// Fully connected layer `y = act(x W + b)` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

/// Tape handles for one bound [`DenseLayer`].
#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: ValueId,
    pub bias: ValueId,
    activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> std::result::Result<Self, LayerError> {
        if in_dim == 0 {
            return Err(LayerError::ZeroDim { layer: "dense", field: "in_dim" });
        }
        if out_dim == 0 {
            return Err(LayerError::ZeroDim { layer: "dense", field: "out_dim" });
        }
        Ok(Self {
            weight: glorot_uniform(in_dim, out_dim, in_dim, out_dim, rng),
            bias: Tensor::zeros(vec![out_dim]).expect("out_dim is nonzero").with_grad(),
            activation,
        })
    }

    /// Builds a layer from explicit parameter tensors (checkpoint restore,
    /// tests). Shapes must be `[in, out]` and `[out]`.
    pub fn from_params(weight: Tensor, bias: Tensor, activation: Activation) -> TensorResult<Self> {
        if weight.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "dense",
                expected: 2,
                shape: weight.shape().to_vec(),
            });
        }
        if bias.rank() != 1 || bias.shape()[0] != weight.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Records the parameters on `tape` with gradient tracking.
    pub fn bind(&self, tape: &mut Tape) -> BoundDense {
        BoundDense {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
            activation: self.activation,
        }
    }

    /// Records the parameters as constants: no gradients, no updates.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundDense {
        BoundDense {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
            activation: self.activation,
        }
    }

    /// Accumulates the bound parameters' tape gradients into the owned
    /// tensors. Parameters the loss never reached are left untouched.
    pub fn pull_grads(&mut self, tape: &Tape, bound: &BoundDense) {
        if let Some(g) = tape.grad(bound.weight) {
            let g = g.to_vec();
            self.weight.accumulate_grad(&g);
        }
        if let Some(g) = tape.grad(bound.bias) {
            let g = g.to_vec();
            self.bias.accumulate_grad(&g);
        }
    }

    /// Mutable views of the parameters, named for optimizer state keys.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }
}

impl BoundDense {
    /// Applies the layer to a `[batch, in]` matrix, returning `[batch, out]`.
    pub fn forward(&self, tape: &mut Tape, x: ValueId) -> TensorResult<ValueId> {
        let affine = tape.matmul(x, self.weight)?;
        let with_bias = tape.add_bias(affine, self.bias)?;
        match self.activation {
            Activation::None => Ok(with_bias),
            Activation::Relu => tape.relu(with_bias),
            Activation::Tanh => tape.tanh(with_bias),
        }
    }
}

/// One-shot dense forward: binds the layer (trainable) and applies it.
/// Use [`DenseLayer::bind`] directly when the same layer runs more than once
/// on a tape, otherwise each call records an independent parameter copy.
pub fn dense_forward(tape: &mut Tape, layer: &DenseLayer, x: ValueId) -> TensorResult<ValueId> {
    layer.bind(tape).forward(tape, x)
}

/// Long short-term memory layer over `[B, T, input_dim]` sequences.
///
/// Gate weights act on the concatenation `[x_t, h_{t-1}]`, so each of the
/// four matrices is `[(input_dim + units), units]`. Initial hidden and cell
/// states are zero; the forget-gate bias starts at 1 so early training does
/// not erase the cell state.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    input_dim: usize,
    units: usize,
    w_input: Tensor,
    w_forget: Tensor,
    w_output: Tensor,
    w_cell: Tensor,
    b_input: Tensor,
    b_forget: Tensor,
    b_output: Tensor,
    b_cell: Tensor,
}

/// Tape handles for one bound [`LstmLayer`].
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    input_dim: usize,
    units: usize,
    w_input: ValueId,
    w_forget: ValueId,
    w_output: ValueId,
    w_cell: ValueId,
    b_input: ValueId,
    b_forget: ValueId,
    b_output: ValueId,
    b_cell: ValueId,
}

impl LstmLayer {
    /// Glorot-uniform gate weights, zero biases except the forget gate at 1.
    pub fn new(input_dim: usize, units: usize, rng: &mut impl Rng) -> std::result::Result<Self, LayerError> {
        if input_dim == 0 {
            return Err(LayerError::ZeroDim { layer: "lstm", field: "input_dim" });
        }
        if units == 0 {
            return Err(LayerError::ZeroDim { layer: "lstm", field: "units" });
        }
        if !EVALUATED_LSTM_UNITS.contains(&units) {
            log::warn!(
                "lstm output length {units} is outside the evaluated set {EVALUATED_LSTM_UNITS:?}; proceeding anyway"
            );
        }
        let rows = input_dim + units;
        let gate = |rng: &mut _| glorot_uniform(rows, units, rows, units, rng);
        Ok(Self {
            input_dim,
            units,
            w_input: gate(rng),
            w_forget: gate(rng),
            w_output: gate(rng),
            w_cell: gate(rng),
            b_input: Tensor::zeros(vec![units]).expect("units is nonzero").with_grad(),
            b_forget: Tensor::filled(vec![units], 1.0).expect("units is nonzero").with_grad(),
            b_output: Tensor::zeros(vec![units]).expect("units is nonzero").with_grad(),
            b_cell: Tensor::zeros(vec![units]).expect("units is nonzero").with_grad(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLstm {
        BoundLstm {
            input_dim: self.input_dim,
            units: self.units,
            w_input: tape.param(&self.w_input),
            w_forget: tape.param(&self.w_forget),
            w_output: tape.param(&self.w_output),
            w_cell: tape.param(&self.w_cell),
            b_input: tape.param(&self.b_input),
            b_forget: tape.param(&self.b_forget),
            b_output: tape.param(&self.b_output),
            b_cell: tape.param(&self.b_cell),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundLstm {
        BoundLstm {
            input_dim: self.input_dim,
            units: self.units,
            w_input: tape.constant(self.w_input.clone()),
            w_forget: tape.constant(self.w_forget.clone()),
            w_output: tape.constant(self.w_output.clone()),
            w_cell: tape.constant(self.w_cell.clone()),
            b_input: tape.constant(self.b_input.clone()),
            b_forget: tape.constant(self.b_forget.clone()),
            b_output: tape.constant(self.b_output.clone()),
            b_cell: tape.constant(self.b_cell.clone()),
        }
    }

    pub fn pull_grads(&mut self, tape: &Tape, bound: &BoundLstm) {
        let pairs = [
            (bound.w_input, &mut self.w_input),
            (bound.w_forget, &mut self.w_forget),
            (bound.w_output, &mut self.w_output),
            (bound.w_cell, &mut self.w_cell),
            (bound.b_input, &mut self.b_input),
            (bound.b_forget, &mut self.b_forget),
            (bound.b_output, &mut self.b_output),
            (bound.b_cell, &mut self.b_cell),
        ];
        for (id, tensor) in pairs {
            if let Some(g) = tape.grad(id) {
                let g = g.to_vec();
                tensor.accumulate_grad(&g);
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_input", &mut self.w_input),
            ("w_forget", &mut self.w_forget),
            ("w_output", &mut self.w_output),
            ("w_cell", &mut self.w_cell),
            ("b_input", &mut self.b_input),
            ("b_forget", &mut self.b_forget),
            ("b_output", &mut self.b_output),
            ("b_cell", &mut self.b_cell),
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_input", &self.w_input),
            ("w_forget", &self.w_forget),
            ("w_output", &self.w_output),
            ("w_cell", &self.w_cell),
            ("b_input", &self.b_input),
            ("b_forget", &self.b_forget),
            ("b_output", &self.b_output),
            ("b_cell", &self.b_cell),
        ]
    }
}

impl BoundLstm {
    /// Runs the recurrence over a `[B, T, input_dim]` sequence and returns
    /// the hidden states for every step as `[B, T, units]`.
    ///
    /// Per step: `i = σ(z W_i + b_i)`, `f = σ(z W_f + b_f)`,
    /// `o = σ(z W_o + b_o)`, `g = tanh(z W_g + b_g)` with
    /// `z = [x_t, h_{t-1}]`, then `c_t = f ⊙ c_{t-1} + i ⊙ g` and
    /// `h_t = o ⊙ tanh(c_t)`.
    pub fn forward(&self, tape: &mut Tape, sequence: ValueId) -> TensorResult<ValueId> {
        let shape = tape.shape(sequence).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::WrongRank {
                op: "lstm",
                expected: 3,
                shape,
            });
        }
        if shape[2] != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "lstm",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let (batch, steps) = (shape[0], shape[1]);
        let zeros = Tensor::zeros(vec![batch, self.units]).expect("batch and units are nonzero");
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        let mut hidden_steps = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = tape.select_step(sequence, t)?;
            let z = tape.concat_cols(x_t, h)?;
            let gate = |tape: &mut Tape, w, b| -> TensorResult<ValueId> {
                let a = tape.matmul(z, w)?;
                tape.add_bias(a, b)
            };
            let i_pre = gate(tape, self.w_input, self.b_input)?;
            let i = tape.sigmoid(i_pre)?;
            let f_pre = gate(tape, self.w_forget, self.b_forget)?;
            let f = tape.sigmoid(f_pre)?;
            let o_pre = gate(tape, self.w_output, self.b_output)?;
            let o = tape.sigmoid(o_pre)?;
            let g_pre = gate(tape, self.w_cell, self.b_cell)?;
            let g = tape.tanh(g_pre)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let c_act = tape.tanh(c)?;
            h = tape.mul(o, c_act)?;
            hidden_steps.push(h);
        }
        tape.stack_steps(&hidden_steps)
    }
}

/// One-shot LSTM forward: binds the layer (trainable) and runs it. Bind
/// explicitly when gradients must be pulled back afterwards.
pub fn lstm_forward(tape: &mut Tape, layer: &LstmLayer, sequence: ValueId) -> TensorResult<ValueId> {
    layer.bind(tape).forward(tape, sequence)
}

/// The per-sequence descriptor: the hidden state of the final time step,
/// extracted from a `[B, T, units]` stack as `[B, units]`.
pub fn sequence_feature(tape: &mut Tape, hidden: ValueId) -> TensorResult<ValueId> {
    let shape = tape.shape(hidden).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::WrongRank {
            op: "sequence_feature",
            expected: 3,
            shape,
        });
    }
    tape.select_step(hidden, shape[1] - 1)
}

/// Per-dimension Gaussian the variational head predicts for each input row.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams {
    pub mu: ValueId,
    pub sigma: ValueId,
}

/// Variational feature head: `mu = x W_mu + b_mu` (identity activation) and
/// `sigma = softplus(x W_s + b_s) + SIGMA_FLOOR`, both `[batch, n]`.
pub fn vfl_forward(
    tape: &mut Tape,
    mu_head: &BoundDense,
    sigma_head: &BoundDense,
    features: ValueId,
) -> TensorResult<GaussianParams> {
    let mu = mu_head.forward(tape, features)?;
    let sigma_raw = sigma_head.forward(tape, features)?;
    let sigma_sp = tape.softplus(sigma_raw)?;
    let floor = tape.constant(Tensor::scalar(SIGMA_FLOOR));
    let sigma = tape.add(sigma_sp, floor)?;
    Ok(GaussianParams { mu, sigma })
}

/// Reparameterized draw `z = mu + sigma ⊙ eps` with `eps ~ N(0, 1)`.
/// Gradients flow to `mu` and `sigma`; the noise is a tape constant.
pub fn sample_latent(
    tape: &mut Tape,
    params: &GaussianParams,
    rng: &mut impl Rng,
) -> TensorResult<ValueId> {
    let shape = tape.shape(params.mu).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(Tensor::new(shape, noise)?);
    let scaled = tape.mul(params.sigma, eps)?;
    tape.add(params.mu, scaled)
}
