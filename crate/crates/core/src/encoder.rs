//! The trainable feature encoder: a small fully connected network followed
//! by an l2 normalization layer, with hand-derived reverse-mode gradients and
//! SGD with momentum.

use rand::Rng;

use crate::error::{PcsError, Result};
use crate::geometry::{dot, norm, NORM_EPS};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// A dense layer. `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Multiplier applied to the optimizer learning rate for this layer.
    pub lr_scale: f64,
}

impl Layer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(PcsError::ShapeMismatch(format!(
                "layer {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self {
            weights,
            biases,
            activation,
            in_dim,
            out_dim,
            lr_scale: 1.0,
        })
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Layer>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    raw_norm: f64,
    feature: Vec<f64>,
}

impl ForwardCache {
    pub fn feature(&self) -> &[f64] {
        &self.feature
    }

    pub fn raw_norm(&self) -> f64 {
        self.raw_norm
    }
}

impl Encoder {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(PcsError::ShapeMismatch("encoder needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(PcsError::ShapeMismatch(format!(
                    "layer output {} does not feed layer input {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        if layers
            .iter()
            .any(|l| l.weights.iter().chain(&l.biases).any(|x| !x.is_finite()))
        {
            return Err(PcsError::InvalidConfig("encoder parameters must be finite".into()));
        }
        Ok(Self { layers })
    }

    /// `input_dim -> hidden... (relu) -> feature_dim`, parameters drawn
    /// uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(input_dim: usize, hidden: &[usize], feature_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || hidden.contains(&0) {
            return Err(PcsError::InvalidConfig("layer widths must be >= 1".into()));
        }
        let mut rng = seed::rng(seed, &[seed::ENCODER_INIT]);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * out).map(|_| rng.random_range(-bound..bound)).collect();
                let biases = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                Layer::new(fan_in, out, weights, biases, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// A single linear identity layer; the encoder then only normalizes.
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            layers: vec![Layer::new(dim, dim, weights, vec![0.0; dim], Activation::Identity)
                .expect("square identity layer")],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters in layer order, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(PcsError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for layer in &self.layers {
            let z: Vec<f64> = (0..layer.out_dim)
                .map(|o| {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    dot(row, &a) + layer.biases[o]
                })
                .collect();
            let out = match layer.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            inputs.push(std::mem::replace(&mut a, out));
            pre.push(z);
        }
        let raw_norm = norm(&a);
        if !(raw_norm > NORM_EPS) {
            return Err(PcsError::DegenerateVector { norm: raw_norm });
        }
        let feature = a.iter().map(|v| v / raw_norm).collect();
        Ok(ForwardCache {
            inputs,
            pre,
            raw_norm,
            feature,
        })
    }

    /// Unit feature for one input.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|c| c.feature)
    }

    /// Gradients of `upstream . f` with respect to every parameter, plus the
    /// input gradient. The normalization layer contributes
    /// `(I - f f^T) / |raw|`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// As [`Encoder::backward`], accumulating parameter gradients into `acc`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        acc: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let matches = cache.inputs.len() == self.layers.len()
            && cache
                .inputs
                .iter()
                .zip(&cache.pre)
                .zip(&self.layers)
                .all(|((i, p), l)| i.len() == l.in_dim && p.len() == l.out_dim)
            && acc.layers.len() == self.layers.len()
            && upstream.len() == self.feature_dim();
        if !matches {
            return Err(PcsError::CacheMismatch);
        }
        let f = &cache.feature;
        let radial = dot(upstream, f);
        let mut grad: Vec<f64> = upstream
            .iter()
            .zip(f)
            .map(|(g, fi)| (g - radial * fi) / cache.raw_norm)
            .collect();

        for (li, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (g, z) in grad.iter_mut().zip(&cache.pre[li]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &cache.inputs[li];
            let lg = &mut acc.layers[li];
            let mut next = vec![0.0; layer.in_dim];
            for (o, &delta) in grad.iter().enumerate() {
                if delta == 0.0 {
                    continue;
                }
                lg.biases[o] += delta;
                let row = o * layer.in_dim;
                for (i, &x) in input.iter().enumerate() {
                    lg.weights[row + i] += delta * x;
                    next[i] += layer.weights[row + i] * delta;
                }
            }
            grad = next;
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Parameter gradients shaped like an [`Encoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(encoder: &Encoder) -> Self {
        Self {
            layers: encoder
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|g| *g *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(PcsError::ShapeMismatch("gradient layouts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += s * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += s * y;
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Gradients) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.biases.len() == b.biases.len()
            })
    }

    fn matches(&self, encoder: &Encoder) -> bool {
        self.layers.len() == encoder.layers.len()
            && self.layers.iter().zip(&encoder.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len()
            })
    }
}

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

/// SGD hyperparameters plus one velocity buffer per encoder parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(encoder: &Encoder, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: Gradients::zeros_like(encoder),
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn with_defaults(encoder: &Encoder) -> Self {
        Self::new(encoder, DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }
}

/// One momentum step on a flat parameter slice:
/// `v <- momentum * v + g + wd * p; p <- p - lr * v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(PcsError::ShapeMismatch(format!(
            "{} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

pub fn sgd_step(encoder: &mut Encoder, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if !grads.matches(encoder) || !state.velocity.matches(encoder) {
        return Err(PcsError::ShapeMismatch(
            "gradients or velocity do not mirror the encoder".into(),
        ));
    }
    for ((layer, g), v) in encoder
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        let lr = state.lr * layer.lr_scale;
        sgd_update(&mut layer.weights, &g.weights, &mut v.weights, lr, state.momentum, state.weight_decay)?;
        sgd_update(&mut layer.biases, &g.biases, &mut v.biases, lr, state.momentum, state.weight_decay)?;
    }
    Ok(())
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-8)` between the
/// analytic gradient returned by `loss_fn` and central differences of its
/// value, over every encoder parameter.
pub fn finite_diff_check<F>(encoder: &Encoder, loss_fn: F, eps: f64) -> Result<f64>
where
    F: Fn(&Encoder) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(PcsError::InvalidStep(eps));
    }
    let (_, analytic) = loss_fn(encoder)?;
    if !analytic.matches(encoder) {
        return Err(PcsError::ShapeMismatch("analytic gradient shape".into()));
    }
    let analytic = analytic.flat();
    let mut probe = encoder.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = central_difference(&mut probe, i, eps, &loss_fn)?;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Fourth-order central difference in parameter `index`.
fn central_difference<F>(probe: &mut Encoder, index: usize, eps: f64, loss_fn: &F) -> Result<f64>
where
    F: Fn(&Encoder) -> Result<(f64, Gradients)>,
{
    let original = *probe.param_mut(index);
    let mut at = |offset: f64| -> Result<f64> {
        *probe.param_mut(index) = original + offset;
        loss_fn(probe).map(|(v, _)| v)
    };
    let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
    *probe.param_mut(index) = original;
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
}
