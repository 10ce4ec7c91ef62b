//! Dense feed-forward networks over flat parameter vectors.
//!
//! Everything in the simulator moves models around as a single
//! [`ParamVector`], so aggregation is an elementwise operation and the
//! network itself is just a [`ModelArch`] describing how to slice that
//! vector into layers. Gradients are computed by hand-written
//! backpropagation; there is no autograd.
//!
//! Parameter layout, layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

/// Lower clamp applied to the second argument of [`kl_div`].
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("architecture needs at least two layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer sizes must all be at least 1")]
    ZeroWidth,
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot evaluate on an empty sample set")]
    EmptySlice,
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Shape of a fully connected network: input width, hidden widths, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelArch {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(NnError::TooFewLayers(layer_sizes.len()));
        }
        if layer_sizes.contains(&0) {
            return Err(NnError::ZeroWidth);
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|pair| pair[0] * pair[1] + pair[1])
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for pair in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector(values)
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                what: "input features",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, w: &ParamVector, x: &[f64]) -> Result<Logits> {
        self.check_params(w)?;
        self.check_input(x)?;
        let mut acts = self.forward_layers(w, x);
        Ok(Logits(acts.pop().expect("output layer")))
    }

    /// Outputs of every layer, input first and logits last.
    fn forward_layers(&self, w: &ParamVector, x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = &w.0[offset..offset + fan_in * fan_out];
            let bias = &w.0[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| {
                    let z = row.iter().zip(input).fold(*b, |acc, (wi, xi)| acc + wi * xi);
                    if hidden {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Adds the gradient of a per-sample loss to `grad`, given the layer
    /// outputs from [`Self::forward_layers`] and the loss gradient w.r.t. the logits.
    fn backward(&self, w: &ParamVector, acts: &[Vec<f64>], dlogits: &[f64], grad: &mut [f64]) {
        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for pair in self.layer_sizes.windows(2) {
            offsets.push(offset);
            offset += pair[0] * pair[1] + pair[1];
        }

        let mut delta = dlogits.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let base = offsets[l];
            let input = &acts[l];
            {
                let (gw, gb) = grad[base..base + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (o, d) in delta.iter().enumerate() {
                    gb[o] += d;
                    if *d != 0.0 {
                        for (g, x) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let weights = &w.0[base..base + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wi;
                    }
                }
            }
            for (p, y) in prev.iter_mut().zip(input) {
                *p *= self.activation.derivative_from_output(*y);
            }
            delta = prev;
        }
    }

    /// Mean loss and mean parameter gradient over a batch.
    ///
    /// `loss` maps (position in batch, logits) to (loss, dloss/dlogits).
    /// Per-sample contributions are summed in batch order.
    pub fn mean_gradient<F>(&self, w: &ParamVector, inputs: &[&[f64]], mut loss: F) -> Result<(f64, ParamVector)>
    where
        F: FnMut(usize, &Logits) -> Result<(f64, Vec<f64>)>,
    {
        self.check_params(w)?;
        if inputs.is_empty() {
            return Err(NnError::EmptySlice);
        }
        let mut grad = vec![0.0; w.len()];
        let mut total = 0.0;
        for (i, x) in inputs.iter().enumerate() {
            self.check_input(x)?;
            let mut acts = self.forward_layers(w, x);
            let logits = Logits(acts.pop().expect("output layer"));
            let (l, dz) = loss(i, &logits)?;
            total += l;
            acts.push(logits.0);
            self.backward(w, &acts, &dz, &mut grad);
        }
        let scale = 1.0 / inputs.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, ParamVector(grad)))
    }
}

/// All model parameters as one flat vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// A probability vector: entries in `[0, 1]` summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(NnError::InvalidParameter("empty distribution".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(NnError::InvalidParameter("probability outside [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NnError::InvalidParameter(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax of `z / temperature`, computed with max subtraction.
pub fn softmax_t(z: &Logits, temperature: f64) -> Result<ProbDist> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NnError::BadTemperature(temperature));
    }
    Ok(ProbDist(softmax_scaled(&z.0, temperature)))
}

pub(crate) fn softmax_scaled(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(z)[label]` and its gradient `softmax(z) - onehot(label)`.
pub fn cross_entropy(z: &Logits, label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= z.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let max = z.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.0.iter().map(|v| (v - max).exp()).sum();
    let loss = (max + sum_exp.ln() - z.0[label]).max(0.0);
    let mut grad = softmax_scaled(&z.0, 1.0);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `KL(p || q) = sum p log(p / q)`, with `q` clamped below at [`KL_CLAMP`].
pub fn kl_div(p: &ProbDist, q: &ProbDist) -> f64 {
    kl_raw(&p.0, &q.0)
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_CLAMP)).ln())
        .sum();
    kl.max(0.0)
}

/// `w - lr * grad`.
pub fn sgd_step(w: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let mut out = w.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(w: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
    if w.len() != grad.len() {
        return Err(NnError::DimensionMismatch {
            what: "gradient",
            expected: w.len(),
            got: grad.len(),
        });
    }
    for (wi, gi) in w.0.iter_mut().zip(&grad.0) {
        *wi -= lr * gi;
    }
    Ok(())
}

/// Accuracy and mean cross-entropy of `w` on the given samples.
///
/// Predictions use [`Logits::argmax`], so ties resolve to the lowest class
/// index. Samples are scored in parallel and reduced in index order, which
/// keeps the result bit-identical to a sequential pass.
pub fn evaluate(arch: &ModelArch, w: &ParamVector, ds: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(NnError::EmptySlice);
    }
    arch.check_params(w)?;
    let scored: Vec<(bool, f64)> = indices
        .par_iter()
        .map(|&i| {
            let logits = arch.forward(w, ds.sample(i))?;
            let label = ds.label(i);
            let (loss, _) = cross_entropy(&logits, label)?;
            Ok((logits.argmax() == label, loss))
        })
        .collect::<Result<_>>()?;
    let (correct, loss_sum) = scored
        .iter()
        .fold((0usize, 0.0), |(c, s), (hit, l)| (c + usize::from(*hit), s + l));
    let n = indices.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straightforward per-element forward pass, kept independent of
    /// `forward_layers`.
    fn naive_forward(arch: &ModelArch, w: &[f64], x: &[f64]) -> Vec<f64> {
        let sizes = arch.layer_sizes();
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut s = w[off + n_in * n_out + o];
                for i in 0..n_in {
                    s += w[off + o * n_in + i] * a[i];
                }
                next[o] = if l + 2 < sizes.len() {
                    match arch.activation() {
                        Activation::Relu => {
                            if s > 0.0 {
                                s
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => s.tanh(),
                    }
                } else {
                    s
                };
            }
            off += n_in * n_out + n_out;
            a = next;
        }
        a
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn arch_validation() {
        assert_eq!(ModelArch::new(vec![3], Activation::Relu), Err(NnError::TooFewLayers(1)));
        assert_eq!(ModelArch::new(vec![3, 0, 2], Activation::Relu), Err(NnError::ZeroWidth));
        let arch = ModelArch::new(vec![784, 128, 10], Activation::Relu).unwrap();
        assert_eq!(arch.param_count(), 784 * 128 + 128 + 128 * 10 + 10);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let arch = ModelArch::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let w = ParamVector::zeros(arch.param_count());
        let z = arch.forward(&w, &[0.3, -1.0, 7.0]).unwrap();
        assert_eq!(z.0, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let arch = ModelArch::new(vec![2, 2], Activation::Relu).unwrap();
        let w = ParamVector::from(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(arch.forward(&w, &[1.0, 2.0]).unwrap().0, vec![1.0, 2.0]);
    }

    #[test]
    fn forward_matches_naive_loop() {
        for act in [Activation::Relu, Activation::Tanh] {
            let arch = ModelArch::new(vec![2, 4, 3], act).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let w = arch.init_params(&mut rng);
            let mut w = w.into_inner();
            // Nonzero biases so the bias path is exercised too.
            for (i, v) in w.iter_mut().enumerate() {
                *v += 0.01 * i as f64;
            }
            let w = ParamVector::from(w);
            for x in [[0.5, -0.25], [1.0, 2.0], [-3.0, 0.1]] {
                let got = arch.forward(&w, &x).unwrap();
                let want = naive_forward(&arch, w.as_slice(), &x);
                for (g, e) in got.0.iter().zip(&want) {
                    assert!((g - e).abs() < 1e-12, "{g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let arch = ModelArch::new(vec![2, 2], Activation::Relu).unwrap();
        let w = ParamVector::zeros(6);
        assert!(matches!(arch.forward(&w, &[1.0]), Err(NnError::DimensionMismatch { .. })));
        assert!(matches!(
            arch.forward(&ParamVector::zeros(5), &[1.0, 2.0]),
            Err(NnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&Logits(vec![4.2, 4.2, 4.2]), 3.0).unwrap();
        for v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_t(&Logits(vec![2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_t(&Logits(vec![1000.0, 0.0]), 1.0).unwrap();
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert!((p.probs()[0] - 1.0).abs() < 1e-12 && p.probs()[1] < 1e-300);
        assert_eq!(softmax_t(&Logits(vec![1.0]), 0.0), Err(NnError::BadTemperature(0.0)));
        assert!(softmax_t(&Logits(vec![1.0]), -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy(&Logits(vec![0.0, 0.0]), 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = cross_entropy(&Logits(vec![50.0, 0.0, 0.0]), 0).unwrap();
        assert!(l < 1e-20);
        assert_eq!(
            cross_entropy(&Logits(vec![0.0, 0.0]), 2),
            Err(NnError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    #[test]
    fn kl_examples() {
        let half = ProbDist::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_div(&half, &half), 0.0);
        let onehot = ProbDist::new(vec![1.0, 0.0]).unwrap();
        assert!((kl_div(&onehot, &half) - 2f64.ln()).abs() < 1e-15);
        let p = ProbDist::new(vec![0.75, 0.25]).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_div(&p, &half) - want).abs() < 1e-15);
        // clamp keeps a zero in q finite
        assert!(kl_div(&half, &onehot).is_finite());
        assert!(ProbDist::new(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let w = ParamVector::from(vec![1.0, 1.0]);
        assert_eq!(sgd_step(&w, &ParamVector::zeros(2), 0.3).unwrap(), w);
        let g = ParamVector::from(vec![1.0, -1.0]);
        assert_eq!(sgd_step(&w, &g, 0.5).unwrap().as_slice(), &[0.5, 1.5]);
        // f(w) = |w|^2 / 2 has gradient w, so each step multiplies by 0.9.
        let mut w = ParamVector::from(vec![1.0]);
        for k in 1..=50 {
            let g = w.clone();
            w = sgd_step(&w, &g, 0.1).unwrap();
            assert!((w.as_slice()[0] - 0.9f64.powi(k)).abs() < 1e-14);
        }
        assert!(sgd_step(&w, &ParamVector::zeros(3), 0.1).is_err());
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [Activation::Tanh, Activation::Relu] {
            let arch = ModelArch::new(vec![3, 5, 4, 3], act).unwrap();
            for trial in 0..10 {
                // jitter so zero biases do not park pre-activations exactly on a ReLU kink
                let mut w = arch.init_params(&mut rng);
                for v in w.as_mut_slice() {
                    *v += rng.random_range(-0.1..0.1);
                }
                let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let labels: Vec<usize> = (0..4).map(|i| (i + trial) % 3).collect();
                let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                let loss_at = |w: &ParamVector| {
                    arch.mean_gradient(w, &inputs, |i, z| cross_entropy(z, labels[i])).unwrap().0
                };
                let (_, grad) = arch.mean_gradient(&w, &inputs, |i, z| cross_entropy(z, labels[i])).unwrap();
                let eps = 1e-5;
                for k in 0..w.len() {
                    let mut plus = w.clone();
                    plus.as_mut_slice()[k] += eps;
                    let mut minus = w.clone();
                    minus.as_mut_slice()[k] -= eps;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                    let an = grad.as_slice()[k];
                    // ReLU kinks make a handful of coordinates non-differentiable; skip exact-zero pairs.
                    if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                        continue;
                    }
                    assert!(rel_err(an, fd) < 1e-4 || (an - fd).abs() < 1e-8, "{act:?} k={k} {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn evaluate_ties_and_errors() {
        let ds = Dataset::new(vec![0.0, 1.0, 2.0, 3.0], vec![0, 1, 0, 1], 1, 2).unwrap();
        let arch = ModelArch::new(vec![1, 2], Activation::Relu).unwrap();
        // all-zero weights: uniform logits, argmax tie goes to class 0
        let w = ParamVector::zeros(arch.param_count());
        let (acc, loss) = evaluate(&arch, &w, &ds, &[0, 1, 2, 3]).unwrap();
        assert_eq!(acc, 0.5);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(evaluate(&arch, &w, &ds, &[]), Err(NnError::EmptySlice));
    }

    #[test]
    fn evaluate_memorized_toy_set() {
        let ds = Dataset::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], vec![0, 0, 1, 1], 2, 2).unwrap();
        // XOR-ish: hidden h1 = relu(x0 - x1), h2 = relu(x1 - x0); class 0 iff h1 + h2 > 0
        let arch = ModelArch::new(vec![2, 2, 2], Activation::Relu).unwrap();
        let w = ParamVector::from(vec![
            1.0, -1.0, -1.0, 1.0, // hidden weights
            0.0, 0.0, // hidden bias
            1.0, 1.0, -1.0, -1.0, // output weights
            0.0, 0.5, // output bias
        ]);
        let (acc, _) = evaluate(&arch, &w, &ds, &[0, 1, 2, 3]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn evaluate_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 50;
        let feats: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let ds = Dataset::new(feats, labels, 4, 3).unwrap();
        let arch = ModelArch::new(vec![4, 6, 3], Activation::Tanh).unwrap();
        let w = arch.init_params(&mut rng);
        let idx: Vec<usize> = (0..n).collect();
        let (acc, _) = evaluate(&arch, &w, &ds, &idx).unwrap();
        let mut correct = 0;
        for i in 0..n {
            let z = naive_forward(&arch, w.as_slice(), ds.sample(i));
            let mut best = 0;
            for c in 1..z.len() {
                if z[c] > z[best] {
                    best = c;
                }
            }
            correct += usize::from(best == ds.label(i));
        }
        assert_eq!(acc, correct as f64 / n as f64);
        // pure: repeated calls are bit-identical
        let again = evaluate(&arch, &w, &ds, &idx).unwrap();
        assert_eq!(again.0.to_bits(), acc.to_bits());
    }
}
