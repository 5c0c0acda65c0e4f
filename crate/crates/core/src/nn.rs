//! Feed-forward encoder with hand-written forward/backward passes.
//!
//! The encoder maps a feature vector to a K-dimensional continuous code
//! through a stack of affine layers. Hidden layers use a configurable
//! activation; the final layer is always `tanh`, so every emitted code
//! entry lies in `[-1, 1]`.
//!
//! The backward pass is exact: it applies the `1 - h^2` tanh derivative at
//! the output and propagates through every layer, returning gradients for
//! all weights, biases, and the batch inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Magic bytes opening a model checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DBHM";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u8 = 1;

/// Hidden-layer activation. The output layer is always `tanh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn forward(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given both the pre-activation `z` and the activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!(
                "unknown activation '{other}' (expected relu or tanh)"
            ))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

/// The hash encoder: an MLP whose last layer is squashed by `tanh`.
///
/// Weight matrix for layer `l` has shape `(layer_dims[l+1], layer_dims[l])`,
/// row-major, so row `o` holds the incoming weights of output unit `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
}

impl EncoderModel {
    /// Creates a model with seeded Xavier-uniform weights and zero biases.
    ///
    /// Each layer draws weights uniformly from `[-s, s]` with
    /// `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn new(layer_dims: &[usize], hidden_activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config(
                "layer_dims needs at least an input and an output dimension",
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("all layer dimensions must be positive"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for l in 0..layer_dims.len() - 1 {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = rng.random_range(-s..s);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }

        Ok(EncoderModel {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation,
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Output dimension K of the code layer.
    #[inline]
    pub fn code_length(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Number of affine layers.
    #[inline]
    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    #[inline]
    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    #[inline]
    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    #[inline]
    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Mutable access to a layer's weight matrix (finite-difference probes,
    /// hand-built fixtures).
    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vec<f64> {
        &mut self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.data().len())
            .chain(self.biases.iter().map(|b| b.len()))
            .sum()
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} columns, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::data("non-finite value in batch inputs"));
        }
        Ok(())
    }

    /// Forward pass recording every intermediate needed for `backward`.
    ///
    /// Returns the continuous codes `h = tanh(final affine)` (batch `B` x K)
    /// together with the tape of pre-activations and activations.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardTape)> {
        self.check_inputs(inputs)?;
        let batch = inputs.rows();
        let last = self.layer_count() - 1;

        let mut pre_activations = Vec::with_capacity(self.layer_count());
        let mut activations = Vec::with_capacity(self.layer_count());
        let mut current = inputs.clone();
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let out_dim = w.rows();
            let mut z = Matrix::zeros(batch, out_dim);
            for i in 0..batch {
                let x = current.row(i);
                let zr = z.row_mut(i);
                for o in 0..out_dim {
                    zr[o] = b[o] + dot(w.row(o), x);
                }
            }
            let act = if l == last {
                Activation::Tanh
            } else {
                self.hidden_activation
            };
            let a = z.map(|v| act.forward(v));
            pre_activations.push(z);
            activations.push(a.clone());
            current = a;
        }

        let tape = ForwardTape {
            batch,
            inputs: inputs.clone(),
            pre_activations,
            activations,
        };
        Ok((current, tape))
    }

    /// Forward pass without a tape, for inference and evaluation.
    pub fn infer(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let batch = inputs.rows();
        let last = self.layer_count() - 1;
        let mut current = inputs.clone();
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let out_dim = w.rows();
            let act = if l == last {
                Activation::Tanh
            } else {
                self.hidden_activation
            };
            let mut z = Matrix::zeros(batch, out_dim);
            for i in 0..batch {
                let x = current.row(i);
                let zr = z.row_mut(i);
                for o in 0..out_dim {
                    zr[o] = act.forward(b[o] + dot(w.row(o), x));
                }
            }
            current = z;
        }
        Ok(current)
    }

    /// Backpropagates a gradient w.r.t. the codes through the whole stack.
    ///
    /// `grad_wrt_codes` is dL/dh for the batch recorded on `tape`. The tanh
    /// derivative `1 - h^2` is applied here, at the output layer; callers
    /// supply the loss gradient w.r.t. the post-tanh codes.
    pub fn backward(&self, tape: &ForwardTape, grad_wrt_codes: &Matrix) -> Result<Gradients> {
        self.check_tape(tape)?;
        let last = self.layer_count() - 1;
        if grad_wrt_codes.shape() != tape.activations[last].shape() {
            return Err(Error::internal(format!(
                "code gradient shape {:?} does not match tape output {:?}",
                grad_wrt_codes.shape(),
                tape.activations[last].shape()
            )));
        }

        let batch = tape.batch;
        let mut grad_weights: Vec<Matrix> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut grad_biases: Vec<Vec<f64>> =
            self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        // dL/d(activation) of the layer currently being processed.
        let mut d_act = grad_wrt_codes.clone();
        for l in (0..=last).rev() {
            let act = if l == last {
                Activation::Tanh
            } else {
                self.hidden_activation
            };
            let z = &tape.pre_activations[l];
            let a = &tape.activations[l];
            let prev: &Matrix = if l == 0 {
                &tape.inputs
            } else {
                &tape.activations[l - 1]
            };
            let w = &self.weights[l];
            let out_dim = w.rows();
            let in_dim = w.cols();

            let mut d_prev = Matrix::zeros(batch, in_dim);
            for i in 0..batch {
                let zi = z.row(i);
                let ai = a.row(i);
                let gi = d_act.row(i);
                let xi = prev.row(i);
                let dpi = d_prev.row_mut(i);
                for o in 0..out_dim {
                    let dz = gi[o] * act.derivative(zi[o], ai[o]);
                    if dz == 0.0 {
                        continue;
                    }
                    grad_biases[l][o] += dz;
                    let gw = grad_weights[l].row_mut(o);
                    let wr = w.row(o);
                    for c in 0..in_dim {
                        gw[c] += dz * xi[c];
                        dpi[c] += dz * wr[c];
                    }
                }
            }
            d_act = d_prev;
        }

        Ok(Gradients {
            weights: grad_weights,
            biases: grad_biases,
            inputs: d_act,
        })
    }

    fn check_tape(&self, tape: &ForwardTape) -> Result<()> {
        if tape.pre_activations.len() != self.layer_count()
            || tape.inputs.cols() != self.input_dim()
            || tape
                .activations
                .iter()
                .zip(self.layer_dims.iter().skip(1))
                .any(|(a, &d)| a.cols() != d || a.rows() != tape.batch)
        {
            return Err(Error::internal(
                "forward tape does not match this model's layer structure",
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
            && self
                .biases
                .iter()
                .all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Serializes the model to the checkpoint wire format.
    ///
    /// Layout: magic `DBHM`, version byte, layer count (u64 LE), layer dims
    /// ((count+1) x u64 LE), then per layer the row-major weight matrix and
    /// the bias vector as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.layer_count() as u64).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            for &v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. The hidden activation is not part of the wire
    /// format and must be supplied by the caller.
    pub fn from_bytes(bytes: &[u8], hidden_activation: Activation) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cursor, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::data("not a model checkpoint (bad magic)"));
        }
        let mut version = [0u8; 1];
        read_exact(&mut cursor, &mut version, "version")?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {}",
                version[0]
            )));
        }
        let layer_count = read_u64(&mut cursor, "layer count")? as usize;
        if layer_count == 0 || layer_count > 64 {
            return Err(Error::data(format!(
                "implausible layer count {layer_count}"
            )));
        }
        let mut layer_dims = Vec::with_capacity(layer_count + 1);
        for _ in 0..=layer_count {
            let d = read_u64(&mut cursor, "layer dim")? as usize;
            if d == 0 {
                return Err(Error::data("zero layer dimension in checkpoint"));
            }
            layer_dims.push(d);
        }
        let mut weights = Vec::with_capacity(layer_count);
        let mut biases = Vec::with_capacity(layer_count);
        for l in 0..layer_count {
            let (rows, cols) = (layer_dims[l + 1], layer_dims[l]);
            let mut data = vec![0.0; rows * cols];
            for v in &mut data {
                *v = read_f64(&mut cursor, "weight")?;
            }
            weights.push(Matrix::from_vec(rows, cols, data)?);
            let mut b = vec![0.0; rows];
            for v in &mut b {
                *v = read_f64(&mut cursor, "bias")?;
            }
            biases.push(b);
        }
        if !cursor.is_empty() {
            return Err(Error::data(format!(
                "checkpoint has {} trailing bytes",
                cursor.len()
            )));
        }
        Ok(EncoderModel {
            layer_dims,
            weights,
            biases,
            hidden_activation,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, hidden_activation: Activation) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, hidden_activation)
    }
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if cursor.len() < buf.len() {
        return Err(Error::data(format!(
            "checkpoint truncated while reading {what}"
        )));
    }
    buf.copy_from_slice(&cursor[..buf.len()]);
    *cursor = &cursor[buf.len()..];
    Ok(())
}

fn read_u64(cursor: &mut &[u8], what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cursor, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(cursor: &mut &[u8], what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(cursor, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Intermediates recorded by one `forward` call.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    batch: usize,
    inputs: Matrix,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
}

impl ForwardTape {
    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// The codes this tape recorded (the final activation).
    #[inline]
    pub fn codes(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

/// Parameter gradients plus the gradient w.r.t. the batch inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub inputs: Matrix,
}

/// SGD state with a cosine-annealed learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    base_lr: f64,
    weight_decay: f64,
    total_steps: u64,
    current_step: u64,
}

impl OptimizerState {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config("base learning rate must be positive"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if total_steps == 0 {
            return Err(Error::config("total_steps must be positive"));
        }
        Ok(OptimizerState {
            base_lr,
            weight_decay,
            total_steps,
            current_step: 0,
        })
    }

    /// `lr_t = 0.5 * base_lr * (1 + cos(pi * t / T))`.
    pub fn current_lr(&self) -> f64 {
        let progress = self.current_step as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    #[inline]
    pub fn current_step(&self) -> u64 {
        self.current_step
    }

    #[inline]
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    #[inline]
    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    #[inline]
    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }
}

/// One SGD update: `theta <- theta - lr_t * (grad + weight_decay * theta)`.
///
/// Weight decay applies to weights only, not biases. Increments the step
/// counter; fails with `ScheduleExhausted` once all scheduled steps are done.
pub fn sgd_step(
    model: &mut EncoderModel,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    if opt.current_step >= opt.total_steps {
        return Err(Error::ScheduleExhausted {
            current: opt.current_step,
            total: opt.total_steps,
        });
    }
    if grads.weights.len() != model.weights.len() {
        return Err(Error::internal("gradient/model layer count mismatch"));
    }
    let lr = opt.current_lr();
    let wd = opt.weight_decay;
    for (w, gw) in model.weights.iter_mut().zip(grads.weights.iter()) {
        if w.shape() != gw.shape() {
            return Err(Error::internal("weight gradient shape mismatch"));
        }
        for (v, &g) in w.data_mut().iter_mut().zip(gw.data().iter()) {
            *v -= lr * (g + wd * *v);
        }
    }
    for (b, gb) in model.biases.iter_mut().zip(grads.biases.iter()) {
        if b.len() != gb.len() {
            return Err(Error::internal("bias gradient shape mismatch"));
        }
        for (v, &g) in b.iter_mut().zip(gb.iter()) {
            *v -= lr * g;
        }
    }
    opt.current_step += 1;
    if !model.is_finite() {
        return Err(Error::NonFinite(format!(
            "model parameters after update at step {}",
            opt.current_step
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(weight: f64, bias: f64) -> EncoderModel {
        let mut m = EncoderModel::new(&[1, 1], Activation::Relu, 0).unwrap();
        m.weight_mut(0).set(0, 0, weight);
        m.bias_mut(0)[0] = bias;
        m
    }

    #[test]
    fn zero_model_emits_zero_codes() {
        let mut m = EncoderModel::new(&[3, 4, 2], Activation::Relu, 7).unwrap();
        for l in 0..m.layer_count() {
            m.weight_mut(l).data_mut().fill(0.0);
        }
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let (codes, _) = m.forward(&x).unwrap();
        assert!(codes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_forward_matches_direct_evaluation() {
        let m = scalar_model(1.0, 0.0);
        let x = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let (codes, _) = m.forward(&x).unwrap();
        // oracle: tanh(1.0 * 0.5 + 0.0)
        let expected = 0.5_f64.tanh();
        assert_eq!(codes.get(0, 0), expected);
        assert!((expected - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_get_identical_codes() {
        let m = EncoderModel::new(&[4, 8, 3], Activation::Relu, 11).unwrap();
        let row = vec![0.1, -0.4, 2.0, 0.9];
        let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let (codes, _) = m.forward(&x).unwrap();
        assert_eq!(codes.row(0), codes.row(1));
    }

    #[test]
    fn forward_rejects_bad_shapes_and_nan() {
        let m = EncoderModel::new(&[3, 2], Activation::Relu, 0).unwrap();
        let wrong = Matrix::zeros(1, 2);
        assert!(matches!(m.forward(&wrong), Err(Error::Config(_))));
        let mut bad = Matrix::zeros(1, 3);
        bad.set(0, 1, f64::NAN);
        assert!(matches!(m.forward(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn codes_stay_inside_unit_interval() {
        let m = EncoderModel::new(&[2, 4, 3], Activation::Tanh, 3).unwrap();
        let x = Matrix::from_rows(&[vec![1e6, -1e6], vec![3.0, -7.0]]).unwrap();
        let (codes, _) = m.forward(&x).unwrap();
        assert!(codes.data().iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let m = EncoderModel::new(&[3, 5, 2], Activation::Relu, 9).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.7, 0.2], vec![1.5, 0.0, -0.4]]).unwrap();
        let (codes, tape) = m.forward(&x).unwrap();
        let (codes2, _) = m.forward(tape.inputs()).unwrap();
        assert_eq!(codes, codes2);
        assert_eq!(tape.codes(), &codes);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let m = EncoderModel::new(&[3, 4, 2], Activation::Relu, 5).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, 0.4, -0.1]]).unwrap();
        let (_, tape) = m.forward(&x).unwrap();
        let g = m.backward(&tape, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(g.inputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_weight_gradient_matches_closed_form_and_fd() {
        // One layer, D=1, K=1: d(tanh(w*x))/dw = (1 - h^2) * x.
        let m = scalar_model(1.0, 0.0);
        let x = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let (codes, tape) = m.forward(&x).unwrap();
        let h = codes.get(0, 0);
        let upstream = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let g = m.backward(&tape, &upstream).unwrap();
        let analytic = g.weights[0].get(0, 0);
        assert!((analytic - (1.0 - h * h) * 0.5).abs() < 1e-15);

        let eps = 1e-6;
        let f = |w: f64| (w * 0.5_f64).tanh();
        let numeric = (f(1.0 + eps) - f(1.0 - eps)) / (2.0 * eps);
        assert!(
            (analytic - numeric).abs() / numeric.abs() <= 1e-5,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    // Full-model gradient check against central finite differences of a
    // surrogate scalar objective phi(theta) = sum_ik G[i][k] * h(theta)[i][k].
    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(20240817);
        for trial in 0..8 {
            let dims = [
                vec![2, 3, 2],
                vec![3, 4, 4, 2],
                vec![1, 1],
                vec![4, 8, 3],
            ][trial % 4]
                .clone();
            let act = if trial % 2 == 0 {
                Activation::Relu
            } else {
                Activation::Tanh
            };
            let model = EncoderModel::new(&dims, act, 1000 + trial as u64).unwrap();
            let batch = 3;
            let mut x = Matrix::zeros(batch, dims[0]);
            for v in x.data_mut() {
                *v = rng.random_range(-1.5..1.5);
            }
            let k = *dims.last().unwrap();
            let mut upstream = Matrix::zeros(batch, k);
            for v in upstream.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }

            let (_, tape) = model.forward(&x).unwrap();
            let grads = model.backward(&tape, &upstream).unwrap();

            let phi = |m: &EncoderModel| -> f64 {
                let (c, _) = m.forward(&x).unwrap();
                c.data()
                    .iter()
                    .zip(upstream.data().iter())
                    .map(|(&h, &g)| g * h)
                    .sum()
            };

            let eps = 1e-6;
            for l in 0..model.layer_count() {
                for idx in 0..model.weights()[l].data().len() {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    plus.weight_mut(l).data_mut()[idx] += eps;
                    minus.weight_mut(l).data_mut()[idx] -= eps;
                    let numeric = (phi(&plus) - phi(&minus)) / (2.0 * eps);
                    let analytic = grads.weights[l].data()[idx];
                    let denom = numeric.abs().max(analytic.abs());
                    if denom > 1e-8 {
                        assert!(
                            (numeric - analytic).abs() / denom <= 1e-5,
                            "layer {l} weight {idx}: analytic {analytic} numeric {numeric}"
                        );
                    } else {
                        assert!((numeric - analytic).abs() <= 1e-8);
                    }
                }
                for idx in 0..model.biases()[l].len() {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    plus.bias_mut(l)[idx] += eps;
                    minus.bias_mut(l)[idx] -= eps;
                    let numeric = (phi(&plus) - phi(&minus)) / (2.0 * eps);
                    let analytic = grads.biases[l][idx];
                    let denom = numeric.abs().max(analytic.abs());
                    if denom > 1e-8 {
                        assert!((numeric - analytic).abs() / denom <= 1e-5);
                    } else {
                        assert!((numeric - analytic).abs() <= 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = EncoderModel::new(&[3, 4, 2], Activation::Relu, 77).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.8], vec![-0.5, 0.1, 0.4]]).unwrap();
        let upstream = Matrix::from_rows(&[vec![0.7, -0.3], vec![0.2, 0.9]]).unwrap();
        let (_, tape) = model.forward(&x).unwrap();
        let grads = model.backward(&tape, &upstream).unwrap();

        let eps = 1e-6;
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.set(i, j, x.get(i, j) + eps);
                xm.set(i, j, x.get(i, j) - eps);
                let phi = |m: &Matrix| -> f64 {
                    let (c, _) = model.forward(m).unwrap();
                    c.data()
                        .iter()
                        .zip(upstream.data().iter())
                        .map(|(&h, &g)| g * h)
                        .sum()
                };
                let numeric = (phi(&xp) - phi(&xm)) / (2.0 * eps);
                let analytic = grads.inputs.get(i, j);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!((numeric - analytic).abs() / denom <= 1e-5);
            }
        }
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let a = EncoderModel::new(&[3, 2], Activation::Relu, 1).unwrap();
        let b = EncoderModel::new(&[3, 4, 2], Activation::Relu, 1).unwrap();
        let x = Matrix::zeros(1, 3);
        let (_, tape) = a.forward(&x).unwrap();
        assert!(matches!(
            b.backward(&tape, &Matrix::zeros(1, 2)),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn sgd_zero_grads_zero_decay_leaves_params() {
        let mut m = EncoderModel::new(&[2, 3], Activation::Relu, 42).unwrap();
        let before = m.clone();
        let zero = Gradients {
            weights: vec![Matrix::zeros(3, 2)],
            biases: vec![vec![0.0; 3]],
            inputs: Matrix::zeros(1, 2),
        };
        let mut opt = OptimizerState::new(0.1, 0.0, 10).unwrap();
        sgd_step(&mut m, &zero, &mut opt).unwrap();
        assert_eq!(m, before);
        assert_eq!(opt.current_step(), 1);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let mut opt = OptimizerState::new(0.02, 0.0, 100).unwrap();
        assert_eq!(opt.current_lr(), 0.02);
        opt.current_step = 50;
        let mid = opt.current_lr();
        assert!((mid - 0.01).abs() < 1e-15, "midpoint lr {mid}");
    }

    #[test]
    fn cosine_schedule_is_non_increasing() {
        let mut opt = OptimizerState::new(0.5, 0.0, 137).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=137 {
            opt.current_step = step;
            let lr = opt.current_lr();
            assert!(lr <= prev + 1e-18);
            assert!(lr >= 0.0 && lr <= 0.5);
            prev = lr;
        }
    }

    #[test]
    fn sgd_exhausts_schedule() {
        let mut m = EncoderModel::new(&[1, 1], Activation::Relu, 0).unwrap();
        let g = Gradients {
            weights: vec![Matrix::zeros(1, 1)],
            biases: vec![vec![0.0]],
            inputs: Matrix::zeros(1, 1),
        };
        let mut opt = OptimizerState::new(0.1, 0.0, 1).unwrap();
        sgd_step(&mut m, &g, &mut opt).unwrap();
        assert!(matches!(
            sgd_step(&mut m, &g, &mut opt),
            Err(Error::ScheduleExhausted { .. })
        ));
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut m = scalar_model(2.0, 1.0);
        let g = Gradients {
            weights: vec![Matrix::zeros(1, 1)],
            biases: vec![vec![0.0]],
            inputs: Matrix::zeros(1, 1),
        };
        let mut opt = OptimizerState::new(0.1, 0.5, 10).unwrap();
        sgd_step(&mut m, &g, &mut opt).unwrap();
        // weight shrinks by lr * wd * w = 0.1 * 0.5 * 2 = 0.1; bias untouched
        assert!((m.weights()[0].get(0, 0) - 1.9).abs() < 1e-15);
        assert_eq!(m.biases()[0][0], 1.0);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = EncoderModel::new(&[5, 8, 4], Activation::Relu, 99).unwrap();
        let b = EncoderModel::new(&[5, 8, 4], Activation::Relu, 99).unwrap();
        assert_eq!(a, b);
        let c = EncoderModel::new(&[5, 8, 4], Activation::Relu, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let m = EncoderModel::new(&[6, 10, 4], Activation::Relu, 12345).unwrap();
        let bytes = m.to_bytes();
        let back = EncoderModel::from_bytes(&bytes, Activation::Relu).unwrap();
        assert_eq!(m, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(EncoderModel::from_bytes(b"nope", Activation::Relu).is_err());
        let mut bytes = EncoderModel::new(&[2, 2], Activation::Relu, 0)
            .unwrap()
            .to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(EncoderModel::from_bytes(&bytes, Activation::Relu).is_err());
        bytes.extend_from_slice(&[0u8; 64]);
        assert!(EncoderModel::from_bytes(&bytes, Activation::Relu).is_err());
    }
}
