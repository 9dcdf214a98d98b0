//! Feed-forward network evaluation, losses, and exact gradients.
//!
//! The model family is a fixed dense MLP: affine layers with one hidden
//! activation, an affine output layer, softmax on top for prediction.
//! Gradients are computed by hand-rolled backprop and can be cross-checked
//! against [`fd_grads`], a central finite-difference oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    ReLU,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation `z` and the activation `a`.
    /// The ReLU subgradient at 0 is taken as 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::ReLU => {
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

/// Architecture of a dense classifier: `layer_sizes[0]` is the input
/// dimension, the last entry is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "layer_sizes needs at least input and output entries".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("layer sizes must be >= 1".into()));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }
}

/// Dense layer weights and biases conforming to a [`NetworkSpec`].
///
/// Layer `i` maps `layer_sizes[i] -> layer_sizes[i+1]`; its weight matrix
/// has shape `layer_sizes[i+1] x layer_sizes[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ModelParams {
    /// All-zero parameters for the given spec.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.layer_sizes.windows(2) {
            weights.push(Matrix::zeros(w[1], w[0]));
            biases.push(vec![0.0; w[1]]);
        }
        Self {
            spec: spec.clone(),
            weights,
            biases,
        }
    }

    /// Xavier-uniform initialization, biases zero. Deterministic given `rng`.
    pub fn init_xavier<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for w in &mut params.weights {
            let bound = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = bound * (2.0 * rng.gen::<f64>() - 1.0);
            }
        }
        params
    }

    /// Embed a scalar linear score `theta . x + b` as a two-class model:
    /// class 0 gets logit 0, class 1 gets the score. Class 1 plays the role
    /// of the +1 label in binary tasks, so the class-1 probability is the
    /// logistic sigmoid of the score.
    pub fn linear_binary(theta: &[f64], b: f64) -> Self {
        let d = theta.len();
        let spec = NetworkSpec {
            layer_sizes: vec![d, 2],
            hidden_activation: Activation::ReLU,
        };
        let mut data = vec![0.0; 2 * d];
        data[d..].copy_from_slice(theta);
        Self {
            spec,
            weights: vec![Matrix::new(2, d, data).expect("shape by construction")],
            biases: vec![vec![0.0, b]],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count()
    }

    /// True when every weight and bias is finite.
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

/// Gradients of the loss with respect to every parameter and to the input.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl GradBundle {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            input: vec![0.0; model.input_dim()],
        }
    }

    /// Accumulate `s * other` into the parameter gradients (input grad too).
    pub fn add_scaled(&mut self, other: &GradBundle, s: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, s);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += s * y;
        }
    }

    /// Multiply every component by `s`.
    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.scale(s);
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
        for v in &mut self.input {
            *v *= s;
        }
    }

    /// Largest absolute parameter-gradient entry.
    pub fn max_abs_param(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .flat_map(|m| m.as_slice())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        self.biases
            .iter()
            .flatten()
            .fold(w, |acc, v| acc.max(v.abs()))
    }
}

/// Probability vector over classes: entries non-negative, sum 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDist {
    probs: Vec<f64>,
}

impl LabelDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidConfig(
                "label distribution entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "label distribution sums to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Point mass on `class`.
    pub fn one_hot(class_count: usize, class: usize) -> Self {
        debug_assert!(class < class_count);
        let mut probs = vec![0.0; class_count];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const PROB_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_input_dim(model: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            context: "network input",
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

fn check_target(model: &ModelParams, target: &LabelDist) -> Result<()> {
    if target.len() != model.class_count() {
        return Err(Error::DimMismatch {
            context: "loss target",
            expected: model.class_count(),
            got: target.len(),
        });
    }
    Ok(())
}

/// Per-layer pre-activations and activations from one forward pass.
struct Trace {
    /// `preacts[i]` is the affine output of layer `i`.
    preacts: Vec<Vec<f64>>,
    /// `acts[i]` is the post-activation of layer `i`; the last entry is the
    /// raw logits (no activation on the output layer).
    acts: Vec<Vec<f64>>,
}

fn forward_trace(model: &ModelParams, x: &[f64]) -> Trace {
    let layers = model.weights.len();
    let mut preacts = Vec::with_capacity(layers);
    let mut acts = Vec::with_capacity(layers);
    let mut current: &[f64] = x;
    for (i, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        let mut z = w.matvec(current);
        for (zi, bi) in z.iter_mut().zip(b) {
            *zi += bi;
        }
        let a = if i + 1 == layers {
            z.clone()
        } else {
            z.iter().map(|&v| model.spec.hidden_activation.apply(v)).collect()
        };
        preacts.push(z);
        acts.push(a);
        current = acts.last().expect("just pushed");
    }
    Trace { preacts, acts }
}

/// Raw class scores (logits) of the model at `x`.
pub fn forward(model: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input_dim(model, x)?;
    Ok(forward_trace(model, x).acts.pop_last())
}

trait PopLast {
    fn pop_last(self) -> Vec<f64>;
}

impl PopLast for Vec<Vec<f64>> {
    fn pop_last(mut self) -> Vec<f64> {
        self.pop().expect("network has at least one layer")
    }
}

/// Predicted class and the softmax probability vector.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Softmax prediction; the argmax tie breaks to the lowest class index.
pub fn predict(model: &ModelParams, x: &[f64]) -> Result<Prediction> {
    let logits = forward(model, x)?;
    let probs = softmax(&logits);
    Ok(Prediction {
        class: argmax(&logits),
        probs,
    })
}

/// Cross-entropy between `target` and the model's softmax prediction.
/// Probabilities are clamped to `[1e-12, 1 - 1e-12]` before the log, so the
/// value stays finite even on confidently wrong predictions.
pub fn loss(model: &ModelParams, x: &[f64], target: &LabelDist) -> Result<f64> {
    check_input_dim(model, x)?;
    check_target(model, target)?;
    let logits = forward_trace(model, x).acts.pop_last();
    Ok(cross_entropy(&logits, target))
}

/// Cross-entropy of `target` against `softmax(logits)`.
pub fn cross_entropy(logits: &[f64], target: &LabelDist) -> f64 {
    let probs = softmax(logits);
    let mut acc = 0.0;
    for (&t, &p) in target.probs().iter().zip(&probs) {
        if t != 0.0 {
            acc -= t * clamp_prob(p).ln();
        }
    }
    acc
}

/// Backprop through the trace. Returns (loss, full gradient bundle) when
/// `with_params` is set, otherwise only the input gradient is populated.
fn backward(
    model: &ModelParams,
    x: &[f64],
    target: &LabelDist,
    with_params: bool,
) -> (f64, GradBundle) {
    let trace = forward_trace(model, x);
    let layers = model.weights.len();
    let logits = &trace.acts[layers - 1];
    let loss_value = cross_entropy(logits, target);

    let probs = softmax(logits);
    // d(loss)/d(logits) for softmax + cross-entropy.
    let mut delta: Vec<f64> = probs
        .iter()
        .zip(target.probs())
        .map(|(&p, &t)| p - t)
        .collect();

    let mut grads = if with_params {
        GradBundle::zeros_like(model)
    } else {
        GradBundle {
            weights: Vec::new(),
            biases: Vec::new(),
            input: Vec::new(),
        }
    };

    for i in (0..layers).rev() {
        let below: &[f64] = if i == 0 { x } else { &trace.acts[i - 1] };
        if with_params {
            grads.weights[i].add_scaled_outer(&delta, below, 1.0);
            for (g, d) in grads.biases[i].iter_mut().zip(&delta) {
                *g += d;
            }
        }
        let mut upstream = model.weights[i].tr_matvec(&delta);
        if i > 0 {
            for ((u, &z), &a) in upstream
                .iter_mut()
                .zip(&trace.preacts[i - 1])
                .zip(&trace.acts[i - 1])
            {
                *u *= model.spec.hidden_activation.derivative(z, a);
            }
        }
        delta = upstream;
    }
    grads.input = delta;
    (loss_value, grads)
}

/// Exact gradients of [`loss`] with respect to all parameters and to `x`.
pub fn grads(model: &ModelParams, x: &[f64], target: &LabelDist) -> Result<GradBundle> {
    check_input_dim(model, x)?;
    check_target(model, target)?;
    Ok(backward(model, x, target, true).1)
}

/// Loss and full gradients in one pass.
pub fn loss_and_grads(model: &ModelParams, x: &[f64], target: &LabelDist) -> Result<(f64, GradBundle)> {
    check_input_dim(model, x)?;
    check_target(model, target)?;
    Ok(backward(model, x, target, true))
}

/// Gradient of [`loss`] with respect to the input only. Cheaper than
/// [`grads`] inside attack loops, which never need parameter gradients.
pub fn input_grad(model: &ModelParams, x: &[f64], target: &LabelDist) -> Result<Vec<f64>> {
    check_input_dim(model, x)?;
    check_target(model, target)?;
    Ok(backward(model, x, target, false).1.input)
}

/// Central finite-difference approximation of [`grads`] with step `h`.
/// Test oracle: slow, but entirely independent of the backprop path.
pub fn fd_grads(model: &ModelParams, x: &[f64], target: &LabelDist, h: f64) -> Result<GradBundle> {
    check_input_dim(model, x)?;
    check_target(model, target)?;
    assert!(h > 0.0, "finite-difference step must be positive");

    let mut probe = model.clone();
    let mut out = GradBundle::zeros_like(model);

    for l in 0..model.weights.len() {
        for idx in 0..model.weights[l].as_slice().len() {
            let orig = probe.weights[l].as_slice()[idx];
            probe.weights[l].as_mut_slice()[idx] = orig + h;
            let up = loss(&probe, x, target)?;
            probe.weights[l].as_mut_slice()[idx] = orig - h;
            let down = loss(&probe, x, target)?;
            probe.weights[l].as_mut_slice()[idx] = orig;
            out.weights[l].as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
        for idx in 0..model.biases[l].len() {
            let orig = probe.biases[l][idx];
            probe.biases[l][idx] = orig + h;
            let up = loss(&probe, x, target)?;
            probe.biases[l][idx] = orig - h;
            let down = loss(&probe, x, target)?;
            probe.biases[l][idx] = orig;
            out.biases[l][idx] = (up - down) / (2.0 * h);
        }
    }

    let mut probe_x = x.to_vec();
    for i in 0..x.len() {
        let orig = probe_x[i];
        probe_x[i] = orig + h;
        let up = loss(model, &probe_x, target)?;
        probe_x[i] = orig - h;
        let down = loss(model, &probe_x, target)?;
        probe_x[i] = orig;
        out.input[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Momentum buffers for [`sgd_step`].
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity_w: Vec<Matrix>,
    velocity_b: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn zeros(model: &ModelParams) -> Self {
        Self {
            velocity_w: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            velocity_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// One SGD step with momentum and weight decay:
/// `g = grad + wd * p; v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(
    model: &mut ModelParams,
    grad: &GradBundle,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) {
    assert!(lr > 0.0, "learning rate must be positive");
    for l in 0..model.weights.len() {
        let w = model.weights[l].as_mut_slice();
        let g = grad.weights[l].as_slice();
        let v = state.velocity_w[l].as_mut_slice();
        for i in 0..w.len() {
            let gi = g[i] + weight_decay * w[i];
            v[i] = momentum * v[i] + gi;
            w[i] -= lr * v[i];
        }
        let b = &mut model.biases[l];
        let gb = &grad.biases[l];
        let vb = &mut state.velocity_b[l];
        for i in 0..b.len() {
            let gi = gb[i] + weight_decay * b[i];
            vb[i] = momentum * vb[i] + gi;
            b[i] -= lr * vb[i];
        }
    }
}

/// Relative error with an absolute floor, used by gradient checks.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of a randomized gradient check over many models.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: usize,
    pub max_rel_error: f64,
}

/// Compare [`grads`] against [`fd_grads`] on `trials` random models.
/// ReLU inputs are rejection-sampled away from activation kinks so the
/// finite-difference probe stays on one linear piece.
pub fn gradcheck_random_nets(trials: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;

    for t in 0..trials {
        let activation = if t % 2 == 0 { Activation::ReLU } else { Activation::Tanh };
        let input = rng.gen_range(2..=5);
        let classes = rng.gen_range(2..=4);
        let hidden = rng.gen_range(3..=10);
        let layer_sizes = if t % 3 == 0 {
            vec![input, hidden, rng.gen_range(3..=8), classes]
        } else {
            vec![input, hidden, classes]
        };
        let spec = NetworkSpec::new(layer_sizes, activation)?;
        let model = ModelParams::init_xavier(&spec, &mut rng);

        let x = sample_off_kink(&model, &mut rng)?;
        let class = rng.gen_range(0..classes);
        let target = LabelDist::one_hot(classes, class);

        let exact = grads(&model, &x, &target)?;
        let approx = fd_grads(&model, &x, &target, h)?;
        for (ew, aw) in exact.weights.iter().zip(&approx.weights) {
            for (&e, &a) in ew.as_slice().iter().zip(aw.as_slice()) {
                max_rel = max_rel.max(rel_error(e, a));
            }
        }
        for (eb, ab) in exact.biases.iter().zip(&approx.biases) {
            for (&e, &a) in eb.iter().zip(ab) {
                max_rel = max_rel.max(rel_error(e, a));
            }
        }
        for (&e, &a) in exact.input.iter().zip(&approx.input) {
            max_rel = max_rel.max(rel_error(e, a));
        }
    }
    Ok(GradCheckReport {
        cases: trials,
        max_rel_error: max_rel,
    })
}

/// Draw an input whose pre-activations are all at least 1e-3 from zero,
/// so ReLU derivative checks do not straddle a kink.
fn sample_off_kink<R: Rng>(model: &ModelParams, rng: &mut R) -> Result<Vec<f64>> {
    const ATTEMPTS: usize = 500;
    for _ in 0..ATTEMPTS {
        let x: Vec<f64> = (0..model.input_dim())
            .map(|_| 2.0 * rng.gen::<f64>() - 1.0)
            .collect();
        if model.spec.hidden_activation == Activation::Tanh {
            return Ok(x);
        }
        let trace = forward_trace(model, &x);
        let hidden_ok = trace.preacts[..trace.preacts.len() - 1]
            .iter()
            .flatten()
            .all(|z| z.abs() > 1e-3);
        if hidden_ok {
            return Ok(x);
        }
    }
    Err(Error::RejectionFailed {
        context: "input off ReLU kinks",
        attempts: ATTEMPTS,
    })
}
