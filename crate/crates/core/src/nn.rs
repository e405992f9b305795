//! Small feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers use `tanh`; the output layer is linear. Weights are stored
//! row-major as `outputs x inputs`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Layer inputs recorded by [`Mlp::forward`]; `activations[l]` is the input
/// to layer `l`.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation of weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Precondition(format!("invalid layer dims {dims:?}")));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Precondition("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Data(format!("layer {i} parameter shapes do not match its dims")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Data(format!("layer {i} input dim does not match previous output")));
            }
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::Data("non-finite network parameters".into()));
        }
        Ok(net)
    }

    /// Single linear layer computing the identity map.
    pub fn identity(n: usize) -> Self {
        let mut layer = Layer::zeros(n, n);
        for i in 0..n {
            layer.weights[i * n + i] = 1.0;
        }
        Self { layers: vec![layer] }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Output only, without recording activations.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&current, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine(&current, &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(std::mem::replace(&mut current, out));
        }
        Ok((current, ForwardCache { activations }))
    }

    /// Gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, output_gradient, &mut grads)?;
        Ok(grads)
    }

    /// Accumulating variant of [`backward`](Self::backward).
    pub fn backward_into(&self, cache: &ForwardCache, output_gradient: &[f64], grads: &mut Gradients) -> Result<()> {
        if cache.activations.len() != self.layers.len() {
            return Err(Error::Dimension {
                expected: self.layers.len(),
                actual: cache.activations.len(),
            });
        }
        if output_gradient.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                actual: output_gradient.len(),
            });
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension {
                expected: self.layers.len(),
                actual: grads.layers.len(),
            });
        }
        let mut delta = output_gradient.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                    if d != 0.0 {
                        prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
                    }
                }
                // `input` is the tanh output of the previous layer.
                prev.iter_mut().zip(input).for_each(|(p, a)| *p *= 1.0 - a * a);
                delta = prev;
            }
        }
        Ok(())
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Parameter gradients with the same shapes as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGradient] {
        &self.layers
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.values_mut().zip(other.values()).for_each(|(a, b)| *a += b);
    }

    pub fn fill_zero(&mut self) {
        self.values_mut().for_each(|v| *v = 0.0);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer state. Adam uses the usual bias-corrected moments
/// with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Option<Gradients>,
    v: Option<Gradients>,
    step_count: u64,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: None,
            v: None,
            step_count: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// Descend along `grads` (gradients of a loss to minimise).
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.same_shape(net) {
            return Err(Error::Dimension {
                expected: net.num_params(),
                actual: grads.values().count(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
                    layer.weights.iter_mut().zip(&g.weights).for_each(|(w, g)| *w -= lr * g);
                    layer.biases.iter_mut().zip(&g.biases).for_each(|(w, g)| *w -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let m = self.m.get_or_insert_with(|| Gradients::zeros_like(net));
                let v = self.v.get_or_insert_with(|| Gradients::zeros_like(net));
                for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut m.layers).zip(&mut v.layers) {
                    let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
                    let gs = g.weights.iter().chain(&g.biases);
                    let ms = m.weights.iter_mut().chain(m.biases.iter_mut());
                    let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
                    for (((w, &g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::Divergence("non-finite parameters after update".into()));
        }
        Ok(())
    }
}

/// Numerically stable log-sum-exp over the masked entries.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Softmax restricted to `mask`; masked entries get probability zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    masked_log_softmax(logits, mask)
        .into_iter()
        .map(|lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() })
        .collect()
}

/// Index of the largest masked entry, ties to the lowest index.
pub fn masked_argmax(values: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_net_outputs_last_bias() {
        let mut net = Mlp::zeros(&[3, 4, 2]).unwrap();
        net.layers_mut()[1].biases = vec![0.5, -1.5];
        assert_eq!(net.predict(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_net() {
        let net = Mlp::identity(3);
        assert_eq!(net.predict(&[1.0, -2.0, 0.25]).unwrap(), vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn hand_computed_2_3_2() {
        // W1 (3x2), b1, W2 (2x3), b2; values chosen by hand.
        let net = Mlp::from_layers(vec![
            Layer {
                inputs: 2,
                outputs: 3,
                weights: vec![0.5, -0.5, 1.0, 0.0, -1.0, 2.0],
                biases: vec![0.0, 0.1, -0.1],
            },
            Layer {
                inputs: 3,
                outputs: 2,
                weights: vec![1.0, 1.0, 1.0, 0.5, -1.0, 0.0],
                biases: vec![0.2, -0.3],
            },
        ])
        .unwrap();
        let out = net.predict(&[1.0, 2.0]).unwrap();
        // Hidden pre-activations: [-0.5, 1.1, 2.9].
        let h = [(-0.5f64).tanh(), 1.1f64.tanh(), 2.9f64.tanh()];
        let expected = [0.2 + h[0] + h[1] + h[2], -0.3 + 0.5 * h[0] - h[1]];
        // Frozen from an independent evaluation in Python.
        assert!((expected[0] - 1.532345031851203).abs() < 1e-12, "{}", expected[0]);
        assert!((expected[1] - -1.3315576003906346).abs() < 1e-12, "{}", expected[1]);
        assert!((out[0] - expected[0]).abs() < 1e-15);
        assert!((out[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        let (_, cache) = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        assert!(net.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn squared_loss_at_target_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 3], &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        let (out, cache) = net.forward(&x).unwrap();
        let target = out.clone();
        let g: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
        let grads = net.backward(&cache, &g).unwrap();
        assert!(grads.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_outputs_bias_gradient_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[5, 7, 3], &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.3; 5]).unwrap();
        let grads = net.backward(&cache, &[1.0; 3]).unwrap();
        assert_eq!(grads.layers().last().unwrap().biases, vec![1.0; 3]);
    }

    #[test]
    fn sgd_step() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        net.layers_mut()[0].weights[0] = 1.0;
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 1.0;
        Optimizer::sgd(0.1).step(&mut net, &g).unwrap();
        assert!((net.layers()[0].weights[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = Mlp::zeros(&[2, 2]).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.values_mut().for_each(|v| *v = 1.0);
        Optimizer::adam(0.01).step(&mut net, &g).unwrap();
        for p in net.params_flat() {
            assert!((p + 0.01).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].biases[0] = f64::NAN;
        assert!(matches!(Optimizer::adam(0.1).step(&mut net, &g), Err(Error::Divergence(_))));
    }

    #[test]
    fn sgd_solves_convex_quadratic() {
        // Least squares on a linear net: minimise sum_i (w.x_i + b - y_i)^2 / n
        // with closed-form optimum w = (2, -1), b = 0.5 (noise-free data).
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 2.0], [0.5, -0.5]];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] - x[1] + 0.5).collect();
        let mut net = Mlp::zeros(&[2, 1]).unwrap();
        let mut opt = Optimizer::sgd(0.3);
        for _ in 0..200 {
            let mut grads = Gradients::zeros_like(&net);
            for (x, y) in xs.iter().zip(&ys) {
                let (out, cache) = net.forward(x).unwrap();
                net.backward_into(&cache, &[2.0 * (out[0] - y) / xs.len() as f64], &mut grads).unwrap();
            }
            opt.step(&mut net, &grads).unwrap();
        }
        let p = net.params_flat();
        assert!((p[0] - 2.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3 && (p[2] - 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[6, 8, 3], &mut rng).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        let x = [0.1, -0.7, 0.3, 0.9, -0.2, 0.05];
        let a = net.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn masked_softmax_normalizes() {
        let p = masked_softmax(&[1.0, 50.0, -3.0, 2.0], &[true, false, true, true]);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(masked_argmax(&[0.1, 0.9, 0.3], &[true, false, true]), Some(2));
        assert_eq!(masked_argmax(&[0.5, 0.5], &[true, true]), Some(0));
    }
}
