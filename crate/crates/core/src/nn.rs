//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! One type serves the power predictor, the state estimator, the actor and
//! the critic. Everything is `f64` and batched row-major: a batch is a
//! `(batch, features)` matrix.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WEIGHT_FORMAT: &str = "wheelgait-mlp";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} inputs, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("diverged: non-finite {0}")]
    Diverged(&'static str),
    #[error("weight file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Elu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Elu => {
                if pre > 0.0 {
                    1.0
                } else {
                    post + 1.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Affine input transform `(x - offset) * scale` applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden_activation: Activation,
    input_norm: Option<InputNorm>,
}

/// Intermediate values needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (the first is the normalized network input).
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            + self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// Randomly initialized network with layer widths `sizes` (input first).
    /// Hidden weights are drawn with variance `1/in`; biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden_activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (1.0 / n_in as f64).sqrt()).expect("finite std");
                Dense {
                    weights: Array2::from_shape_fn((n_out, n_in), |_| normal.sample(rng)),
                    bias: Array1::zeros(n_out),
                }
            })
            .collect();
        Self {
            layers,
            hidden_activation,
            input_norm: None,
        }
    }

    pub fn from_layers(layers: Vec<Dense>, hidden_activation: Activation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Format("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::ShapeMismatch {
                    expected: pair[1].in_dim(),
                    got: pair[0].out_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::ShapeMismatch {
                    expected: l.out_dim(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            input_norm: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_dim()];
        v.extend(self.layers.iter().map(Dense::out_dim));
        v
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<(), NnError> {
        if norm.offset.len() != self.input_dim() || norm.scale.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim(),
                got: norm.offset.len().min(norm.scale.len()),
            });
        }
        self.input_norm = Some(norm);
        Ok(())
    }

    /// Multiply the output layer's weights (not bias) by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights *= factor;
    }

    pub fn set_output_bias(&mut self, bias: &[f64]) {
        let last = self.layers.last_mut().expect("non-empty");
        last.bias.iter_mut().zip(bias).for_each(|(b, v)| *b = *v);
    }

    fn normalized(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut x = x.to_owned();
        if let Some(norm) = &self.input_norm {
            for mut row in x.rows_mut() {
                for ((v, o), s) in row.iter_mut().zip(&norm.offset).zip(&norm.scale) {
                    *v = (*v - o) * s;
                }
            }
        }
        Ok(x)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut h = self.normalized(x)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| self.hidden_activation.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape, NnError> {
        let mut h = self.normalized(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(h);
            h = if i < last {
                z.mapv(|v| self.hidden_activation.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok(Tape { inputs, pre, output: h })
    }

    /// Parameter gradients and the gradient with respect to the raw input,
    /// given `d_out = dL/d(output)`.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>), NnError> {
        if d_out.dim() != tape.output.dim() {
            return Err(NnError::ShapeMismatch {
                expected: tape.output.ncols(),
                got: d_out.ncols(),
            });
        }
        let n = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_out.to_owned();
        for i in (0..n).rev() {
            if i < n - 1 {
                // Activation output of layer i is the input of layer i + 1.
                let post = &tape.inputs[i + 1];
                ndarray::Zip::from(&mut delta)
                    .and(&tape.pre[i])
                    .and(post)
                    .for_each(|d, &z, &a| *d *= self.hidden_activation.derivative(z, a));
            }
            grads.weights[i] = delta.t().dot(&tape.inputs[i]);
            grads.biases[i] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[i].weights);
        }
        if let Some(norm) = &self.input_norm {
            for mut row in delta.rows_mut() {
                row.iter_mut().zip(&norm.scale).for_each(|(d, s)| *d *= s);
            }
        }
        Ok((grads, delta))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::ShapeMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = *it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = *it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        std::fs::write(path, serde_json::to_string(self).map_err(|e| NnError::Format(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk layout: a format tag, version and shape header, then row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpFile {
    format: String,
    version: u32,
    activation: Activation,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_norm: Option<InputNorm>,
}

impl From<Mlp> for MlpFile {
    fn from(net: Mlp) -> Self {
        MlpFile {
            format: WEIGHT_FORMAT.into(),
            version: WEIGHT_FORMAT_VERSION,
            activation: net.hidden_activation,
            layer_sizes: net.layer_sizes(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            input_norm: net.input_norm,
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = NnError;

    fn try_from(f: MlpFile) -> Result<Self, NnError> {
        if f.format != WEIGHT_FORMAT {
            return Err(NnError::Format(format!("unknown format tag {:?}", f.format)));
        }
        if f.version != WEIGHT_FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported version {}", f.version)));
        }
        if f.layer_sizes.len() != f.layers.len() + 1 {
            return Err(NnError::Format("layer_sizes does not match layer count".into()));
        }
        let layers = f
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let (n_in, n_out) = (f.layer_sizes[i], f.layer_sizes[i + 1]);
                let weights = Array2::from_shape_vec((n_out, n_in), l.weights)
                    .map_err(|e| NnError::Format(format!("layer {i}: {e}")))?;
                if l.bias.len() != n_out {
                    return Err(NnError::Format(format!("layer {i}: bias length {}", l.bias.len())));
                }
                Ok(Dense {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        let mut net = Mlp::from_layers(layers, f.activation)?;
        if let Some(norm) = f.input_norm {
            net.set_input_norm(norm)?;
        }
        if !net.is_finite() {
            return Err(NnError::Format("non-finite weights".into()));
        }
        Ok(net)
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step along `grads`. Non-finite gradients leave the
    /// network untouched and report divergence.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if !grads.is_finite() {
            return Err(NnError::Diverged("gradient"));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut self.m.weights[i])
                .and(&mut self.v.weights[i])
                .and(&grads.weights[i])
                .for_each(|w, m, v, &g| adam_update(w, m, v, g, b1, b2, c1, c2, lr, eps));
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[i])
                .and(&mut self.v.biases[i])
                .and(&grads.biases[i])
                .for_each(|w, m, v, &g| adam_update(w, m, v, g, b1, b2, c1, c2, lr, eps));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_update(w: &mut f64, m: &mut f64, v: &mut f64, g: f64, b1: f64, b2: f64, c1: f64, c2: f64, lr: f64, eps: f64) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
}

/// Adam over a plain parameter vector (used for the actor's log-std).
#[derive(Debug, Clone)]
pub struct VecAdam {
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl VecAdam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::Diverged("gradient"));
        }
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t as i32);
        let c2 = 1.0 - 0.999f64.powi(self.t as i32);
        for i in 0..params.len() {
            adam_update(&mut params[i], &mut self.m[i], &mut self.v[i], grads[i], 0.9, 0.999, c1, c2, self.learning_rate, 1e-8);
        }
        Ok(())
    }
}

/// Row-major `(rows, cols)` matrix from a list of equally long rows.
pub fn stack_rows(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d = *s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_linear_layer_is_affine() {
        let layer = Dense {
            weights: array![[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]],
            bias: array![0.1, 0.2, 0.3],
        };
        let net = Mlp::from_layers(vec![layer], Activation::Elu).unwrap();
        let y = net.forward_one(&[2.0, -1.0]).unwrap();
        assert_eq!(y, vec![0.1, -2.5 + 0.2, -3.0 + 0.3]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 4, 2], Activation::Elu, &mut rng);
        assert!(matches!(net.forward_one(&[1.0, 2.0]), Err(NnError::ShapeMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 5, 2], Activation::Tanh, &mut rng);
        let before = net.clone();
        let mut opt = Adam::new(&net, 1e-3);
        opt.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[2, 2], Activation::Elu, &mut rng);
        let mut g = Gradients::zeros_like(&net);
        g.biases[0][0] = f64::NAN;
        let mut opt = Adam::new(&net, 1e-3);
        assert!(matches!(opt.step(&mut net, &g), Err(NnError::Diverged(_))));
    }

    #[test]
    fn weight_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[4, 6, 3], Activation::Elu, &mut rng);
        net.set_input_norm(InputNorm { offset: vec![0.0, 1.0, 2.0, 3.0], scale: vec![1.0, 0.5, 0.25, 2.0] })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(back, net);
        let x = [0.3, -0.2, 0.9, 1.5];
        assert_eq!(back.forward_one(&x).unwrap(), net.forward_one(&x).unwrap());
    }

    #[test]
    fn bad_weight_file_rejected() {
        let text = r#"{"format":"wheelgait-mlp","version":1,"activation":"elu","layer_sizes":[2,3],"layers":[{"weights":[1,2,3],"bias":[0,0,0]}]}"#;
        assert!(serde_json::from_str::<Mlp>(text).is_err());
        let text = r#"{"format":"other","version":1,"activation":"elu","layer_sizes":[1,1],"layers":[{"weights":[1],"bias":[0]}]}"#;
        assert!(serde_json::from_str::<Mlp>(text).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[3, 8, 2], Activation::Elu, &mut rng);
        net.set_input_norm(InputNorm { offset: vec![0.1, -0.2, 0.3], scale: vec![2.0, 0.5, 1.5] }).unwrap();
        let x = [0.4, -0.7, 0.2];
        let tape = net.forward_tape(ArrayView2::from_shape((1, 3), &x).unwrap()).unwrap();
        let (_, dx) = net.backward(&tape, array![[1.0, -2.0]].view()).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let f = |v: &[f64]| {
                let y = net.forward_one(v).unwrap();
                y[0] - 2.0 * y[1]
            };
            assert_abs_diff_eq!(dx[[0, k]], (f(&xp) - f(&xm)) / (2.0 * h), epsilon = 1e-7);
        }
    }
}
