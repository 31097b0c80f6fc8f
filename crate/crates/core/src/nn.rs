//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Weights are stored row-major per layer (`out_dim` rows, `in_dim` columns).
//! A network value is an immutable snapshot: updates produce a new network
//! with a fresh identity, so a [`ForwardCache`] taken from an older snapshot
//! is rejected by [`DenseNet::backward`].

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<Layer>,
    id: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Per-layer parameter gradients, shape-congruent with a [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Intermediate values recorded by [`DenseNet::forward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    net_id: u64,
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache always holds the input")
    }
}

impl DenseNet {
    /// Builds a network from explicit layers, validating shapes and finiteness.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim == 0 || layer.out_dim == 0 {
                return Err(Error::InvalidParameter(format!("layer {i} has a zero dimension")));
            }
            if layer.weights.len() != layer.in_dim * layer.out_dim {
                return Err(Error::DimensionMismatch {
                    expected: layer.in_dim * layer.out_dim,
                    actual: layer.weights.len(),
                });
            }
            if layer.biases.len() != layer.out_dim {
                return Err(Error::DimensionMismatch {
                    expected: layer.out_dim,
                    actual: layer.biases.len(),
                });
            }
            if i > 0 && layers[i - 1].out_dim != layer.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].out_dim,
                    actual: layer.in_dim,
                });
            }
            if !layer.weights.iter().chain(&layer.biases).all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers, id: fresh_id() })
    }

    /// Xavier-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new_seeded(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidParameter("layer_dims needs input and output".into()));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(Error::DimensionMismatch {
                expected: layer_dims.len() - 1,
                actual: activations.len(),
            });
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidParameter("layer dimensions must be positive".into()));
        }
        let mut rng = rng::seeded(seed);
        let layers = layer_dims
            .windows(2)
            .zip(activations)
            .map(|(dims, &activation)| {
                let (fan_in, fan_out) = (dims[0], dims[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect(),
                    biases: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Hidden layers use relu, the output layer is linear.
    pub fn mlp(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let n = layer_dims.len().saturating_sub(1);
        let activations: Vec<Activation> = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                }
            })
            .collect();
        Self::new_seeded(layer_dims, &activations, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Returns a copy with `edit` applied to the layers; the copy gets a new identity.
    pub fn map_layers(&self, edit: impl FnOnce(&mut [Layer])) -> Result<Self> {
        let mut layers = self.layers.clone();
        edit(&mut layers);
        Self::from_layers(layers)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.affine(&x);
            x.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let z = layer.affine(activations.last().unwrap());
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            net_id: self.id,
            activations,
            pre_activations,
        })
    }

    /// Parameter gradients of a scalar loss whose gradient w.r.t. the network
    /// output is `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Like [`DenseNet::backward`] but accumulates into `grads` and returns the
    /// gradient w.r.t. the network input.
    pub fn backward_into(&self, cache: &ForwardCache, output_grad: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        if cache.net_id != self.id || cache.pre_activations.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if !grads.matches(self) {
            return Err(Error::InvalidParameter("gradient buffer shape mismatch".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: output_grad.len(),
            });
        }
        let mut upstream = output_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&cache.pre_activations[l])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let input = &cache.activations[l];
            let gw = &mut grads.weights[l];
            for (row, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let base = row * layer.in_dim;
                for (col, &x) in input.iter().enumerate() {
                    gw[base + col] += d * x;
                }
            }
            for (gb, &d) in grads.biases[l].iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut next = vec![0.0; layer.in_dim];
            for (row, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let w = &layer.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
                for (n, &wv) in next.iter_mut().zip(w) {
                    *n += d * wv;
                }
            }
            upstream = next;
        }
        Ok(upstream)
    }

    /// Plain gradient step `w <- w - lr * g`.
    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {lr} must be finite and >= 0"
            )));
        }
        if !grads.matches(self) {
            return Err(Error::InvalidParameter("gradient shape mismatch".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                reason: "non-finite gradient".into(),
            });
        }
        let mut layers = self.layers.clone();
        for (l, layer) in layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grads.weights[l]) {
                *w -= lr * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(&grads.biases[l]) {
                *b -= lr * g;
            }
        }
        Self::from_layers(layers).map_err(|_| Error::Diverged {
            epoch: 0,
            reason: "parameters became non-finite".into(),
        })
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: self.layer_dims(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        let n = ckpt.layer_dims.len().saturating_sub(1);
        if n == 0 || ckpt.activations.len() != n || ckpt.weights.len() != n || ckpt.biases.len() != n {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        let layers = (0..n)
            .map(|i| Layer {
                in_dim: ckpt.layer_dims[i],
                out_dim: ckpt.layer_dims[i + 1],
                weights: ckpt.weights[i].clone(),
                biases: ckpt.biases[i].clone(),
                activation: ckpt.activations[i],
            })
            .collect();
        Self::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: NetCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized network: weights row-major per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn matches(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && net
                .layers
                .iter()
                .enumerate()
                .all(|(i, l)| self.weights[i].len() == l.weights.len() && self.biases[i].len() == l.biases.len())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|v| v == 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }

    /// Flat view in layer order, weights before biases within each layer.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }
}

/// SGD with optional classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum {momentum} must be in [0, 1)"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn step(&mut self, net: &DenseNet, grads: &Gradients) -> Result<DenseNet> {
        if self.momentum == 0.0 {
            return net.sgd_step(grads, self.lr);
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                reason: "non-finite gradient".into(),
            });
        }
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        velocity.scale(self.momentum);
        velocity.add_scaled(grads, 1.0);
        net.sgd_step(velocity, self.lr)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn single_layer(weights: Vec<f64>, biases: Vec<f64>, in_dim: usize, act: Activation) -> DenseNet {
        let out_dim = biases.len();
        DenseNet::from_layers(vec![Layer {
            in_dim,
            out_dim,
            weights,
            biases,
            activation: act,
        }])
        .unwrap()
    }

    /// Straight-line evaluation written independently of `Layer::affine`.
    fn reference_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for layer in net.layers() {
            let mut y = vec![0.0; layer.out_dim];
            for r in 0..layer.out_dim {
                let mut acc = layer.biases[r];
                for c in 0..layer.in_dim {
                    acc += layer.weight(r, c) * x[c];
                }
                y[r] = match layer.activation {
                    Activation::Relu if acc < 0.0 => 0.0,
                    _ => acc,
                };
            }
            x = y;
        }
        x
    }

    #[test]
    fn identity_net_is_identity() {
        let net = single_layer(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0; 3],
            3,
            Activation::Identity,
        );
        let x = [0.5, -2.0, 7.25];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_computed_relu_layer() {
        let net = single_layer(vec![2.0, 0.0, 0.0, 3.0], vec![1.0, -1.0], 2, Activation::Relu);
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        for seed in 0..20 {
            let net = DenseNet::mlp(&[5, 7, 6, 3], seed).unwrap();
            let mut r = rng::seeded(seed + 100);
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let a = net.forward(&x).unwrap();
            let b = reference_forward(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_length_rejected() {
        let net = DenseNet::mlp(&[3, 2], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let net = DenseNet::mlp(&[4, 5, 2], 3).unwrap();
        let cache = net.forward_cached(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        assert!(net.backward(&cache, &[0.0, 0.0]).unwrap().is_zero());
    }

    #[test]
    fn stale_cache_rejected() {
        let net = DenseNet::mlp(&[2, 2], 3).unwrap();
        let cache = net.forward_cached(&[1.0, 1.0]).unwrap();
        let g = net.backward(&cache, &[1.0, 1.0]).unwrap();
        let updated = net.sgd_step(&g, 0.1).unwrap();
        assert!(matches!(updated.backward(&cache, &[1.0, 1.0]), Err(Error::StaleCache)));
    }

    #[test]
    fn linear_squared_norm_closed_form() {
        // L = ||W x||^2  =>  dL/dW = 2 (W x) x^T
        let net = DenseNet::new_seeded(&[3, 2], &[Activation::Identity], 9).unwrap();
        let x = [0.3, -1.2, 0.7];
        let cache = net.forward_cached(&x).unwrap();
        let y = cache.output().to_vec();
        let out_grad: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let g = net.backward(&cache, &out_grad).unwrap();
        let layer = &net.layers()[0];
        for r in 0..2 {
            let wx: f64 = (0..3).map(|c| layer.weight(r, c) * x[c]).sum();
            for c in 0..3 {
                let expected = 2.0 * wx * x[c];
                assert!((g.weights[0][r * 3 + c] - expected).abs() < 1e-12);
            }
            assert!((g.biases[0][r] - 2.0 * wx).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_lr_is_noop_and_single_weight_step() {
        let net = DenseNet::mlp(&[3, 4, 2], 1).unwrap();
        let cache = net.forward_cached(&[1.0, 2.0, 3.0]).unwrap();
        let g = net.backward(&cache, &[1.0, -1.0]).unwrap();
        assert_eq!(net.sgd_step(&g, 0.0).unwrap(), net);

        let one = single_layer(vec![1.0], vec![0.0], 1, Activation::Identity);
        let grads = Gradients {
            weights: vec![vec![0.5]],
            biases: vec![vec![0.0]],
        };
        let stepped = one.sgd_step(&grads, 0.1).unwrap();
        assert!((stepped.layers()[0].weights[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let net = DenseNet::mlp(&[1, 1], 1).unwrap();
        let grads = Gradients {
            weights: vec![vec![f64::NAN]],
            biases: vec![vec![0.0]],
        };
        assert!(matches!(net.sgd_step(&grads, 0.1), Err(Error::Diverged { .. })));
    }

    #[test]
    fn sgd_converges_on_convex_quadratic() {
        // Fit a linear map to a target linear map: loss = mean ||W x - A x||^2.
        let mut net = DenseNet::new_seeded(&[2, 2], &[Activation::Identity], 4).unwrap();
        let target = [[1.5, -0.5], [0.25, 2.0]];
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]];
        let mut opt = Sgd::new(0.1, 0.5).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let mut grads = Gradients::zeros_like(&net);
            loss = 0.0;
            for x in &xs {
                let cache = net.forward_cached(x).unwrap();
                let y = cache.output();
                let t: Vec<f64> = target.iter().map(|row| row[0] * x[0] + row[1] * x[1]).collect();
                let diff: Vec<f64> = y.iter().zip(&t).map(|(a, b)| a - b).collect();
                loss += diff.iter().map(|d| d * d).sum::<f64>() / xs.len() as f64;
                let og: Vec<f64> = diff.iter().map(|d| 2.0 * d / xs.len() as f64).collect();
                net.backward_into(&cache, &og, &mut grads).unwrap();
            }
            net = opt.step(&net, &grads).unwrap();
        }
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = DenseNet::mlp(&[6, 5, 4, 2], 77).unwrap();
        let text = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = DenseNet::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        for (a, b) in net.layers().iter().zip(back.layers()) {
            assert!(a
                .weights
                .iter()
                .zip(&b.weights)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(net, back);
    }

    #[test]
    fn relu_net_last_layer_scale_covariance() {
        let net = DenseNet::mlp(&[4, 6, 3], 12).unwrap();
        let s = 2.5;
        let scaled = net
            .map_layers(|layers| {
                let last = layers.last_mut().unwrap();
                last.weights.iter_mut().for_each(|w| *w *= s);
                last.biases.iter_mut().for_each(|b| *b *= s);
            })
            .unwrap();
        let x = [0.3, -0.1, 0.8, 1.1];
        let a = net.forward(&x).unwrap();
        let b = scaled.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((s * u - v).abs() < 1e-12);
        }
    }
}
