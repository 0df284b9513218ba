//! Feed-forward networks with exact batch and per-example gradients.
//!
//! Weights are stored `out × in`; a layer computes `act(x · Wᵀ + b)` on a
//! batch-first input.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul_transb(&self.weight).expect("layer dims checked by Mlp");
        let out = self.output_dim();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        debug_assert_eq!(z.cols(), out);
        z
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialized network with `dims = [input, hidden.., output]`.
    ///
    /// Weights and biases are drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let act = if i + 2 == dims.len() { output } else { hidden };
            layers.push(Dense::new(Matrix::from_parts(fan_out, fan_in, weight), bias, act)?);
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    /// Appends `other`'s layers after this network's.
    pub fn chain(&self, other: &Mlp) -> Result<Mlp> {
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Mlp::from_layers(layers)
    }

    /// Splits into `(first `at` layers, remaining layers)`.
    pub fn split_at(&self, at: usize) -> Result<(Mlp, Mlp)> {
        if at == 0 || at >= self.layers.len() {
            return Err(Error::config(format!("cannot split a {}-layer network at {at}", self.layers.len())));
        }
        Ok((Mlp::from_layers(self.layers[..at].to_vec())?, Mlp::from_layers(self.layers[at..].to_vec())?))
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Evaluates the network and keeps every layer's activations.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"));
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Outputs only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = self.layers[0].forward(batch);
        for layer in &self.layers[1..] {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    fn check_output_grad(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Result<()> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::shape("trace does not belong to this network"));
        }
        let out = trace.output();
        if output_grad.shape() != out.shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match outputs {:?}",
                output_grad.shape(),
                out.shape()
            )));
        }
        Ok(())
    }

    /// Gradients of the pre-activations of every layer, last layer last.
    fn deltas(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Vec<Matrix> {
        let n_layers = self.layers.len();
        let mut deltas: Vec<Matrix> = Vec::with_capacity(n_layers);
        let last = &self.layers[n_layers - 1];
        let mut delta = output_grad.clone();
        for (d, a) in delta.as_mut_slice().iter_mut().zip(trace.activations[n_layers].as_slice()) {
            *d *= last.activation.derivative_from_output(*a);
        }
        deltas.push(delta);
        for l in (0..n_layers - 1).rev() {
            let upstream = deltas.last().expect("non-empty");
            let mut delta = upstream.matmul(&self.layers[l + 1].weight).expect("layer dims checked");
            let act = self.layers[l].activation;
            for (d, a) in delta.as_mut_slice().iter_mut().zip(trace.activations[l + 1].as_slice()) {
                *d *= act.derivative_from_output(*a);
            }
            deltas.push(delta);
        }
        deltas.reverse();
        deltas
    }

    /// Batch gradient: `output_grad` row `i` is ∂L/∂output_i of the total
    /// loss `L`, so the result is ∂L/∂θ (no implicit averaging). Also returns
    /// ∂L/∂input.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Result<(Grads, Matrix)> {
        self.check_output_grad(trace, output_grad)?;
        let deltas = self.deltas(trace, output_grad);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, delta) in deltas.iter().enumerate() {
            let weight = delta.matmul_transa(&trace.activations[l]).expect("dims checked");
            let mut bias = vec![0.0; delta.cols()];
            for r in delta.row_iter() {
                for (b, d) in bias.iter_mut().zip(r) {
                    *b += d;
                }
            }
            layers.push(LayerGrad { weight, bias });
        }
        let input_grad = deltas[0].matmul(&self.layers[0].weight).expect("dims checked");
        Ok((Grads { layers }, input_grad))
    }

    /// ∂L/∂input only; parameter gradients are not formed.
    pub fn input_gradient(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Result<Matrix> {
        self.check_output_grad(trace, output_grad)?;
        let deltas = self.deltas(trace, output_grad);
        Ok(deltas[0].matmul(&self.layers[0].weight).expect("dims checked"))
    }

    /// Per-example gradients: entry `i` is the gradient of example `i`'s own
    /// loss term, whose output gradient is row `i` of `output_grad`.
    pub fn backward_per_example(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Result<PerExampleGrads> {
        self.check_output_grad(trace, output_grad)?;
        let deltas = self.deltas(trace, output_grad);
        let n = output_grad.rows();
        let example = |i: usize| {
            let layers = deltas
                .iter()
                .enumerate()
                .map(|(l, delta)| {
                    let d = delta.row(i);
                    let a = trace.activations[l].row(i);
                    let mut w = Vec::with_capacity(d.len() * a.len());
                    for &dv in d {
                        w.extend(a.iter().map(|&av| dv * av));
                    }
                    LayerGrad { weight: Matrix::from_parts(d.len(), a.len(), w), bias: d.to_vec() }
                })
                .collect();
            Grads { layers }
        };
        // Each example is independent; collect() keeps example order either way.
        let per_example = if rayon::current_num_threads() > 1 {
            (0..n).into_par_iter().map(example).collect()
        } else {
            (0..n).map(example).collect()
        };
        Ok(PerExampleGrads { per_example })
    }

    /// Parameter visitor in a fixed order: per layer, weights then bias.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut [f64], &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(l, layer.weight.as_mut_slice(), &mut layer.bias);
        }
    }
}

/// Activations recorded by [`Mlp::forward`]; index 0 is the input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("trace always holds the input")
    }

    pub fn into_output(mut self) -> Matrix {
        self.activations.pop().expect("trace always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// A gradient shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrad>,
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers().len()
            && self
                .layers
                .iter()
                .zip(mlp.layers())
                .all(|(g, l)| g.weight.shape() == l.weight.shape() && g.bias.len() == l.bias.len())
    }

    pub fn same_shape(&self, other: &Grads) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &Grads, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += factor * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Squared L2 norm over the layers selected by `mask` (all when `None`).
    pub fn norm_sq_masked(&self, mask: Option<&[bool]>) -> f64 {
        let mut s = 0.0;
        for (l, layer) in self.layers.iter().enumerate() {
            if mask.is_some_and(|m| !m[l]) {
                continue;
            }
            for v in layer.weight.as_slice().iter().chain(&layer.bias) {
                s += v * v;
            }
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq_masked(None).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Flattened values in parameter order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for v in layer.weight.as_mut_slice().iter_mut().chain(layer.bias.iter_mut()) {
                f(l, v);
            }
        }
    }
}

/// One gradient set per batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads {
    pub per_example: Vec<Grads>,
}

impl PerExampleGrads {
    pub fn len(&self) -> usize {
        self.per_example.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_example.is_empty()
    }

    /// Sum over examples in index order.
    pub fn sum(&self) -> Option<Grads> {
        let mut iter = self.per_example.iter();
        let mut total = iter.next()?.clone();
        for g in iter {
            total.add_scaled(g, 1.0);
        }
        Some(total)
    }
}

/// Row-wise softmax of `logits / temperature`, stabilized by subtracting
/// each row's maximum.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean over rows of `-Σ_k y_k ln p_k`, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Matrix, labels: &Matrix) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::shape(format!("probabilities {:?} vs labels {:?}", probs.shape(), labels.shape())));
    }
    if probs.rows() == 0 {
        return Err(Error::config("cross-entropy of an empty batch"));
    }
    let mut total = 0.0;
    for (p, y) in probs.row_iter().zip(labels.row_iter()) {
        let mut row = 0.0;
        for (&pk, &yk) in p.iter().zip(y) {
            if yk != 0.0 {
                row -= yk * pk.max(PROB_FLOOR).ln();
            }
        }
        total += row;
    }
    Ok(total / probs.rows() as f64)
}

/// Training objective applied to the network's logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Softmax cross-entropy against one-hot targets.
    Multiclass,
    /// Independent sigmoid binary cross-entropy per output.
    Multilabel,
}

impl Objective {
    /// Per-row losses and the per-row gradient w.r.t. the logits.
    ///
    /// Row `i` of the gradient belongs to example `i`'s own loss, unscaled by
    /// the batch size.
    pub fn row_losses(&self, logits: &Matrix, targets: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if logits.shape() != targets.shape() {
            return Err(Error::shape(format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape())));
        }
        match self {
            Objective::Multiclass => {
                let probs = softmax_rows(logits, 1.0)?;
                let mut losses = Vec::with_capacity(logits.rows());
                let mut grad = probs.clone();
                for i in 0..logits.rows() {
                    let p = probs.row(i);
                    let y = targets.row(i);
                    let mut l = 0.0;
                    for (&pk, &yk) in p.iter().zip(y) {
                        if yk != 0.0 {
                            l -= yk * pk.max(PROB_FLOOR).ln();
                        }
                    }
                    losses.push(l);
                    for (g, yk) in grad.row_mut(i).iter_mut().zip(y) {
                        *g -= yk;
                    }
                }
                Ok((losses, grad))
            }
            Objective::Multilabel => {
                let mut losses = Vec::with_capacity(logits.rows());
                let mut grad = Matrix::zeros(logits.rows(), logits.cols());
                for i in 0..logits.rows() {
                    let mut l = 0.0;
                    for (j, (&z, &y)) in logits.row(i).iter().zip(targets.row(i)).enumerate() {
                        // log(1 + e^z) - y z, evaluated stably
                        l += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                        grad[(i, j)] = sigmoid(z) - y;
                    }
                    losses.push(l);
                }
                Ok((losses, grad))
            }
        }
    }

    /// Converts logits to per-class probabilities.
    pub fn probabilities(&self, logits: &Matrix) -> Result<Matrix> {
        match self {
            Objective::Multiclass => softmax_rows(logits, 1.0),
            Objective::Multilabel => Ok(logits.map(sigmoid)),
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn identity_net(n: usize, act: Activation) -> Mlp {
        Mlp::from_layers(vec![Dense::new(Matrix::identity(n), vec![0.0; n], act).unwrap()]).unwrap()
    }

    /// Independent evaluator using explicit scalar loops.
    fn scalar_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in mlp.layers() {
            let mut next = vec![0.0; layer.output_dim()];
            for o in 0..layer.output_dim() {
                let mut z = layer.bias[o];
                for i in 0..layer.input_dim() {
                    z += layer.weight[(o, i)] * a[i];
                }
                next[o] = match layer.activation {
                    Activation::Relu => {
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => z,
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                };
            }
            a = next;
        }
        a
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = identity_net(2, Activation::Identity);
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_layer_zeroes_negative_inputs() {
        let net = identity_net(2, Activation::Relu);
        let x = Matrix::from_rows(&[[-1.0, 3.0]]).unwrap();
        let trace = net.forward(&x).unwrap();
        assert_eq!(trace.output().row(0), &[0.0, 3.0]);
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = substream(11, "test", 0);
        let net = Mlp::init(&[5, 7, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let out = net.predict(&x).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let reference = scalar_forward(&net, r);
            for (a, b) in out.row(i).iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
        // pure function
        assert_eq!(net.predict(&x).unwrap(), out);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = identity_net(2, Activation::Identity);
        assert!(matches!(net.forward(&Matrix::zeros(1, 3)), Err(Error::Shape(_))));
        let trace = net.forward(&Matrix::zeros(1, 2)).unwrap();
        assert!(net.backward(&trace, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn linear_squared_error_gradient_is_closed_form() {
        // L = |Wx + b - y|², dL/dW = 2(Wx+b-y)xᵀ
        let w = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]]).unwrap();
        let net = Mlp::from_layers(vec![Dense::new(w.clone(), vec![0.0, 0.0], Activation::Identity).unwrap()]).unwrap();
        let x = [1.0, 2.0, -1.0];
        let y = [0.3, -0.7];
        let xm = Matrix::from_rows(&[x]).unwrap();
        let trace = net.forward(&xm).unwrap();
        let out = trace.output().row(0).to_vec();
        let residual: Vec<f64> = out.iter().zip(&y).map(|(o, t)| 2.0 * (o - t)).collect();
        let og = Matrix::from_rows(std::slice::from_ref(&residual)).unwrap();
        let grads = net.backward_per_example(&trace, &og).unwrap();
        let g = &grads.per_example[0].layers[0];
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.weight[(o, i)] - residual[o] * x[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_examples_have_identical_gradients() {
        let mut rng = substream(3, "test", 0);
        let net = Mlp::init(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, -0.4, 0.9], [0.1, -0.4, 0.9]]).unwrap();
        let trace = net.forward(&x).unwrap();
        let og = Matrix::from_rows(&[[1.0, -2.0], [1.0, -2.0]]).unwrap();
        let g = net.backward_per_example(&trace, &og).unwrap();
        assert_eq!(g.per_example[0], g.per_example[1]);
    }

    #[test]
    fn softmax_edge_cases() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let hot = softmax_rows(&Matrix::from_rows(&[[1.0, 5.0]]).unwrap(), 1e6).unwrap();
        assert!((hot[(0, 0)] - 0.5).abs() < 1e-5);
        let s = softmax_rows(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(), 1.0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[(0, k)] - v.exp() / z).abs() < 1e-15);
        }
        assert!(softmax_rows(&Matrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let perfect = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy(&perfect, &perfect).unwrap(), 0.0);
        let uniform = Matrix::filled(3, 2, 0.5);
        let labels = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!((cross_entropy(&uniform, &labels).unwrap() - 2f64.ln()).abs() < 1e-15);
        // zero probability on the label is floored, not infinite
        let wrong = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let l = cross_entropy(&wrong, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut rng = substream(5, "test", 0);
        let logits = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let probs = softmax_rows(&logits, 1.0).unwrap();
        let labels = [2usize, 0, 1, 1];
        let mut onehot = Matrix::zeros(4, 3);
        let mut oracle = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            onehot[(i, c)] = 1.0;
            let row: Vec<f64> = logits.row(i).to_vec();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[c];
        }
        oracle /= 4.0;
        assert!((cross_entropy(&probs, &onehot).unwrap() - oracle).abs() < 1e-12);
        let (rows, _) = Objective::Multiclass.row_losses(&logits, &onehot).unwrap();
        assert!((rows.iter().sum::<f64>() / 4.0 - oracle).abs() < 1e-12);
    }

    #[test]
    fn split_and_chain_roundtrip() {
        let mut rng = substream(9, "test", 0);
        let net = Mlp::init(&[3, 5, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let (a, b) = net.split_at(2).unwrap();
        assert_eq!(a.output_dim(), 4);
        assert_eq!(a.chain(&b).unwrap(), net);
        assert!(net.split_at(0).is_err());
    }
}
