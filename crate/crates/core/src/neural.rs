//! Small differentiable networks with hand-written reverse mode.
//!
//! Two architectures are provided: a fully connected [`DenseNet`] and a
//! chain message-passing [`ChainGnn`]. Both expose their parameters as named
//! tensors through [`Parameters`], which is what [`Adam`], the checkpoint
//! format and the finite-difference checker operate on.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewD,
    ArrayViewMutD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;

static GENERATION: AtomicU64 = AtomicU64::new(1);

/// Fresh parameter-set identifier. Caches remember the identifier of the
/// parameters they were computed with so stale ones can be rejected.
fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Multiplies `grad` by the activation derivative, given the
    /// pre-activation `z` and output `a`.
    fn backprop(self, grad: &Array2<f64>, z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => grad * &a.mapv(|v| 1.0 - v * v),
            Activation::Relu => {
                let mut g = grad.clone();
                g.zip_mut_with(z, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                g
            }
            Activation::Identity => grad.clone(),
        }
    }
}

/// Affine layer `a = act(x W + b)` acting on row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut seed::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound));
        Self { weight, bias, activation }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out), activation }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn pre_activation(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `(dz, dW, db)` for upstream gradient `grad` on the output.
    fn backward(&self, x: &ArrayView2<f64>, z: &Array2<f64>, a: &Array2<f64>, grad: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dz = self.activation.backprop(grad, z, a);
        let dw = x.t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        (dz, dw, db)
    }

    fn check(&self) -> Result<()> {
        if self.bias.len() != self.fan_out() {
            return Err(invalid("bias length does not match layer width"));
        }
        if !(self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())) {
            return Err(invalid("layer parameters must be finite"));
        }
        Ok(())
    }
}

/// Parameter gradients, one tensor per entry of [`Parameters::named_tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<ArrayD<f64>>);

impl Gradients {
    pub fn zeros_like(model: &impl Parameters) -> Self {
        Self(model.named_tensors().into_iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.0 {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.iter().copied()).collect()
    }
}

/// Models whose trainable state is a list of named tensors.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;

    /// Mutable views in the same order. Implementations invalidate any
    /// outstanding forward caches.
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flat_parameters(&self) -> Vec<f64> {
        self.named_tensors().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
    }
}

fn dense_named<'a>(prefix: &str, layer: &'a Dense, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    out.push((format!("{prefix}.weight"), layer.weight.view().into_dyn()));
    out.push((format!("{prefix}.bias"), layer.bias.view().into_dyn()));
}

fn dense_mut<'a>(layer: &'a mut Dense, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
    out.push(layer.weight.view_mut().into_dyn());
    out.push(layer.bias.view_mut().into_dyn());
}

/// Multi-layer perceptron.
#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<Dense>,
    generation: u64,
}

// Equality ignores the cache generation.
impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations retained by [`DenseNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct DenseCache {
    generation: u64,
    /// `activations[k]` feeds layer `k`; the last entry is the network output.
    activations: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl DenseCache {
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

impl DenseNet {
    /// Builds a network with layer widths `widths` (input first) and one
    /// activation per layer.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut seed::Rng) -> Result<Self> {
        if widths.len() < 2 || activations.len() + 1 != widths.len() || widths.contains(&0) {
            return Err(invalid("dense net needs ≥ 2 positive widths and one activation per layer"));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Dense::init(w[0], w[1], a, rng))
            .collect();
        Ok(Self { layers, generation: next_generation() })
    }

    /// Hidden layers use `hidden`; the output layer is linear.
    pub fn mlp(widths: &[usize], hidden: Activation, rng: &mut seed::Rng) -> Result<Self> {
        let mut acts = vec![hidden; widths.len().saturating_sub(2)];
        acts.push(Activation::Identity);
        Self::new(widths, &acts, rng)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("dense net needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(invalid("consecutive layer shapes are incompatible"));
            }
        }
        for l in &layers {
            l.check()?;
        }
        Ok(Self { layers, generation: next_generation() })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::fan_out));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if x.ncols() != self.input_dim() {
            return Err(invalid(format!("input width {} does not match network input {}", x.ncols(), self.input_dim())));
        }
        let mut activations = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = layer.pre_activation(&activations[activations.len() - 1].view());
            activations.push(layer.activation.apply(&z));
            pre.push(z);
        }
        let out = activations[activations.len() - 1].clone();
        Ok((out, DenseCache { generation: self.generation, activations, pre }))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(invalid("input width does not match network"));
        }
        let mut a = x.to_owned();
        for layer in &self.layers {
            a = layer.activation.apply(&layer.pre_activation(&a.view()));
        }
        Ok(a)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| invalid(e.to_string()))?;
        let (out, cache) = self.forward(view)?;
        Ok((out.row(0).to_vec(), cache))
    }

    /// Reverse pass: parameter gradients and the gradient with respect to
    /// the input batch.
    pub fn backward(&self, cache: &DenseCache, grad_out: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(invalid("stale forward cache: parameters changed since the forward pass"));
        }
        let last = &cache.activations[cache.activations.len() - 1];
        if grad_out.dim() != last.dim() {
            return Err(invalid("output gradient shape does not match the forward output"));
        }
        let mut grads = vec![ArrayD::zeros(IxDyn(&[0])); 2 * self.layers.len()];
        let mut g = grad_out.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (dz, dw, db) = layer.backward(&cache.activations[k].view(), &cache.pre[k], &cache.activations[k + 1], &g);
            g = dz.dot(&layer.weight.t());
            grads[2 * k] = dw.into_dyn();
            grads[2 * k + 1] = db.into_dyn();
        }
        Ok((Gradients(grads), g))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let activations: Vec<Activation> = self.layers.iter().map(|l| l.activation).collect();
        Checkpoint::new(
            "dense",
            serde_json::json!({ "widths": self.widths(), "activations": activations }),
            self,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("dense")?;
        let widths: Vec<usize> = ckpt.config_field("widths")?;
        let activations: Vec<Activation> = ckpt.config_field("activations")?;
        if activations.len() + 1 != widths.len() {
            return Err(invalid("checkpoint activations do not match widths"));
        }
        let layers = widths.windows(2).zip(activations).map(|(w, a)| Dense::zeros(w[0], w[1], a)).collect();
        let mut net = Self::from_layers(layers)?;
        ckpt.load_into(&mut net)?;
        Ok(net)
    }
}

impl Parameters for DenseNet {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            dense_named(&format!("layer{k}"), l, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.generation = next_generation();
        let mut out = Vec::new();
        for l in &mut self.layers {
            dense_mut(l, &mut out);
        }
        out
    }
}

pub const GNN_LAYERS: usize = 4;

/// Chain-graph message passing network with a scalar readout.
///
/// Each node is embedded, then updated four times from its own state and
/// the mean of its one or two chain neighbours. Final node states are
/// mean-pooled and mapped to a scalar.
#[derive(Clone, Debug)]
pub struct ChainGnn {
    embed: Dense,
    layers: Vec<Dense>,
    readout: Dense,
    generation: u64,
}

impl PartialEq for ChainGnn {
    fn eq(&self, other: &Self) -> bool {
        self.embed == other.embed && self.layers == other.layers && self.readout == other.readout
    }
}

#[derive(Clone, Debug)]
pub struct GnnCache {
    generation: u64,
    batch: usize,
    nodes: usize,
    input: Array2<f64>,
    embedded: Array2<f64>,
    /// `concat[l]` is the input of message-passing layer `l`.
    concat: Vec<Array2<f64>>,
    states: Vec<Array2<f64>>,
    pooled: Array2<f64>,
}

/// Mean of each node's chain neighbours, for `batch` graphs of `nodes`
/// nodes stacked row-wise.
fn chain_mean(h: &Array2<f64>, batch: usize, nodes: usize) -> Array2<f64> {
    let width = h.ncols();
    let h3 = h.view().into_shape_with_order((batch, nodes, width)).expect("row-major node stack");
    let mut out = Array3::zeros((batch, nodes, width));
    {
        let mut from_prev = out.slice_mut(s![.., 1.., ..]);
        from_prev += &h3.slice(s![.., ..nodes - 1, ..]);
    }
    {
        let mut from_next = out.slice_mut(s![.., ..nodes - 1, ..]);
        from_next += &h3.slice(s![.., 1.., ..]);
    }
    out.slice_mut(s![.., 1..nodes - 1, ..]).mapv_inplace(|v| v * 0.5);
    out.into_shape_with_order((batch * nodes, width)).expect("same size")
}

/// Transpose of [`chain_mean`].
fn chain_mean_backward(g: &ArrayView2<f64>, batch: usize, nodes: usize) -> Array2<f64> {
    let width = g.ncols();
    let mut share = g.to_owned().into_shape_with_order((batch, nodes, width)).expect("row-major node stack");
    share.slice_mut(s![.., 1..nodes - 1, ..]).mapv_inplace(|v| v * 0.5);
    let mut out = Array3::zeros((batch, nodes, width));
    {
        let mut to_prev = out.slice_mut(s![.., ..nodes - 1, ..]);
        to_prev += &share.slice(s![.., 1.., ..]);
    }
    {
        let mut to_next = out.slice_mut(s![.., 1.., ..]);
        to_next += &share.slice(s![.., ..nodes - 1, ..]);
    }
    out.into_shape_with_order((batch * nodes, width)).expect("same size")
}

impl ChainGnn {
    pub fn new(node_features: usize, hidden: usize, rng: &mut seed::Rng) -> Result<Self> {
        if node_features == 0 || hidden == 0 {
            return Err(invalid("gnn widths must be positive"));
        }
        let embed = Dense::init(node_features, hidden, Activation::Tanh, rng);
        let layers = (0..GNN_LAYERS).map(|_| Dense::init(2 * hidden, hidden, Activation::Tanh, rng)).collect();
        let readout = Dense::init(hidden, 1, Activation::Identity, rng);
        Ok(Self { embed, layers, readout, generation: next_generation() })
    }

    pub fn node_features(&self) -> usize {
        self.embed.fan_in()
    }

    pub fn hidden(&self) -> usize {
        self.embed.fan_out()
    }

    pub fn readout(&self) -> &Dense {
        &self.readout
    }

    pub fn readout_mut(&mut self) -> &mut Dense {
        self.generation = next_generation();
        &mut self.readout
    }

    /// Forward pass over a batch of equally sized chains `(batch, nodes,
    /// features)`; returns one scalar per chain.
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array1<f64>, GnnCache)> {
        let (batch, nodes, feat) = x.dim();
        if nodes == 0 {
            return Err(invalid("gnn input has no nodes"));
        }
        if feat != self.node_features() {
            return Err(invalid(format!("node feature width {feat} does not match gnn input {}", self.node_features())));
        }
        let input = x.to_shape((batch * nodes, feat)).map_err(|e| invalid(e.to_string()))?.to_owned();
        let embedded = self.embed.activation.apply(&self.embed.pre_activation(&input.view()));
        let mut h = embedded.clone();
        let mut concat = Vec::with_capacity(GNN_LAYERS);
        let mut states = Vec::with_capacity(GNN_LAYERS);
        for layer in &self.layers {
            let agg = if nodes > 1 { chain_mean(&h, batch, nodes) } else { Array2::zeros(h.raw_dim()) };
            let c = concatenate![Axis(1), h, agg];
            h = layer.activation.apply(&layer.pre_activation(&c.view()));
            concat.push(c);
            states.push(h.clone());
        }
        let pooled = h
            .to_shape((batch, nodes, self.hidden()))
            .map_err(|e| invalid(e.to_string()))?
            .mean_axis(Axis(1))
            .expect("nodes > 0");
        let out = self.readout.pre_activation(&pooled.view()).column(0).to_owned();
        let cache = GnnCache { generation: self.generation, batch, nodes, input, embedded, concat, states, pooled };
        Ok((out, cache))
    }

    pub fn predict(&self, x: ArrayView3<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse pass for upstream gradient `grad_out` (one entry per chain).
    /// Returns parameter gradients and the gradient on the node inputs.
    pub fn backward(&self, cache: &GnnCache, grad_out: ArrayView1<f64>) -> Result<(Gradients, Array3<f64>)> {
        if cache.generation != self.generation {
            return Err(invalid("stale forward cache: parameters changed since the forward pass"));
        }
        if grad_out.len() != cache.batch {
            return Err(invalid("output gradient length does not match the batch"));
        }
        let hidden = self.hidden();
        let (batch, nodes) = (cache.batch, cache.nodes);
        let dout = grad_out.to_owned().insert_axis(Axis(1));
        let d_readout_w = cache.pooled.t().dot(&dout);
        let d_readout_b = dout.sum_axis(Axis(0));
        let dpool = dout.dot(&self.readout.weight.t());

        let mut dh = Array2::zeros((batch * nodes, hidden));
        for b in 0..batch {
            for i in 0..nodes {
                dh.row_mut(b * nodes + i).assign(&(&dpool.row(b) / nodes as f64));
            }
        }

        let mut layer_grads = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); GNN_LAYERS];
        for l in (0..GNN_LAYERS).rev() {
            let layer = &self.layers[l];
            let dz = &dh * &cache.states[l].mapv(|v| 1.0 - v * v);
            let dw = cache.concat[l].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let dc = dz.dot(&layer.weight.t());
            let mut prev = dc.slice(s![.., ..hidden]).to_owned();
            if nodes > 1 {
                prev += &chain_mean_backward(&dc.slice(s![.., hidden..]), batch, nodes);
            }
            dh = prev;
            layer_grads[l] = (dw, db);
        }

        let dz = &dh * &cache.embedded.mapv(|v| 1.0 - v * v);
        let dwe = cache.input.t().dot(&dz);
        let dbe = dz.sum_axis(Axis(0));
        let dx = dz.dot(&self.embed.weight.t());
        let mut grads = vec![dwe.into_dyn(), dbe.into_dyn()];
        for (dw, db) in layer_grads {
            grads.push(dw.into_dyn());
            grads.push(db.into_dyn());
        }
        grads.push(d_readout_w.into_dyn());
        grads.push(d_readout_b.into_dyn());
        let dx = dx
            .into_shape_with_order((batch, nodes, self.node_features()))
            .map_err(|e| invalid(e.to_string()))?;
        Ok((Gradients(grads), dx))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "chain_gnn",
            serde_json::json!({ "node_features": self.node_features(), "hidden": self.hidden(), "layers": GNN_LAYERS }),
            self,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("chain_gnn")?;
        let feat: usize = ckpt.config_field("node_features")?;
        let hidden: usize = ckpt.config_field("hidden")?;
        let layers: usize = ckpt.config_field("layers")?;
        if layers != GNN_LAYERS {
            return Err(invalid(format!("gnn checkpoint has {layers} layers, expected {GNN_LAYERS}")));
        }
        let mut gnn = Self {
            embed: Dense::zeros(feat, hidden, Activation::Tanh),
            layers: (0..GNN_LAYERS).map(|_| Dense::zeros(2 * hidden, hidden, Activation::Tanh)).collect(),
            readout: Dense::zeros(hidden, 1, Activation::Identity),
            generation: next_generation(),
        };
        ckpt.load_into(&mut gnn)?;
        Ok(gnn)
    }
}

impl Parameters for ChainGnn {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        dense_named("embed", &self.embed, &mut out);
        for (k, l) in self.layers.iter().enumerate() {
            dense_named(&format!("mp{k}"), l, &mut out);
        }
        dense_named("readout", &self.readout, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.generation = next_generation();
        let mut out = Vec::new();
        dense_mut(&mut self.embed, &mut out);
        for l in &mut self.layers {
            dense_mut(l, &mut out);
        }
        dense_mut(&mut self.readout, &mut out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &impl Parameters) -> Self {
        let zeros: Vec<ArrayD<f64>> = model.named_tensors().into_iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut impl Parameters, grads: &Gradients) -> Result<()> {
        if grads.0.len() != self.m.len() || grads.0.iter().zip(&self.m).any(|(g, m)| g.shape() != m.shape()) {
            return Err(invalid("gradient shapes do not match optimizer state"));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in model.tensors_mut().into_iter().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Serialized parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: architecture description plus named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, model: &impl Parameters) -> Self {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.iter().copied().collect() })
            .collect();
        Self { kind: kind.to_string(), config, tensors }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(invalid(format!("checkpoint kind is {:?}, expected {kind:?}", self.kind)));
        }
        Ok(())
    }

    pub fn config_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.config.get(key).ok_or_else(|| invalid(format!("checkpoint config lacks {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Copies tensors into `model`, checking names and shapes.
    pub fn load_into(&self, model: &mut impl Parameters) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> =
            model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != self.tensors.len() {
            return Err(invalid("checkpoint tensor count does not match the model"));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(invalid(format!("checkpoint tensor {:?} does not match model tensor {name:?}", t.name)));
            }
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("checkpoint tensor {name:?} has non-finite values")));
            }
        }
        for (mut dst, t) in model.tensors_mut().into_iter().zip(&self.tensors) {
            for (d, s) in dst.iter_mut().zip(&t.data) {
                *d = *s;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Largest relative error between `analytic` and central differences of
/// `loss` with step `h`. Relative error is `|a − n| / max(|a| + |n|, floor)`.
pub fn gradient_check<M: Parameters + Clone>(
    model: &M,
    analytic: &Gradients,
    h: f64,
    floor: f64,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let flat = analytic.flat();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let mut k = 0;
    let shapes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
    for (ti, len) in shapes.into_iter().enumerate() {
        for j in 0..len {
            let orig = probe.tensors_mut()[ti].as_slice_mut().expect("contiguous")[j];
            probe.tensors_mut()[ti].as_slice_mut().expect("contiguous")[j] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti].as_slice_mut().expect("contiguous")[j] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti].as_slice_mut().expect("contiguous")[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = flat[k];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(floor));
            k += 1;
        }
    }
    worst
}

/// Scalar regressors over chains of 2-D points, batched as
/// `(batch, nodes, features)`.
pub trait Regressor: Parameters + Clone {
    fn predict_batch(&self, x: ArrayView3<f64>) -> Result<Array1<f64>>;

    /// Mean squared error over the batch and its parameter gradient.
    fn mse_grad(&self, x: ArrayView3<f64>, y: ArrayView1<f64>) -> Result<(f64, Gradients)>;
}

fn flatten_chains(x: ArrayView3<f64>) -> Result<Array2<f64>> {
    let (b, n, f) = x.dim();
    Ok(x.to_shape((b, n * f)).map_err(|e| invalid(e.to_string()))?.to_owned())
}

impl Regressor for DenseNet {
    fn predict_batch(&self, x: ArrayView3<f64>) -> Result<Array1<f64>> {
        Ok(self.predict(flatten_chains(x)?.view())?.column(0).to_owned())
    }

    fn mse_grad(&self, x: ArrayView3<f64>, y: ArrayView1<f64>) -> Result<(f64, Gradients)> {
        let flat = flatten_chains(x)?;
        let (out, cache) = self.forward(flat.view())?;
        let err = &out.column(0) - &y;
        let n = y.len() as f64;
        let mse = err.mapv(|e| e * e).sum() / n;
        let g = (err * (2.0 / n)).insert_axis(Axis(1));
        Ok((mse, self.backward(&cache, g.view())?.0))
    }
}

impl Regressor for ChainGnn {
    fn predict_batch(&self, x: ArrayView3<f64>) -> Result<Array1<f64>> {
        self.predict(x)
    }

    fn mse_grad(&self, x: ArrayView3<f64>, y: ArrayView1<f64>) -> Result<(f64, Gradients)> {
        let (out, cache) = self.forward(x)?;
        let err = &out - &y;
        let n = y.len() as f64;
        let mse = err.mapv(|e| e * e).sum() / n;
        Ok((mse, self.backward(&cache, (err * (2.0 / n)).view())?.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch: 64, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

/// Regression targets stacked as `(batch, nodes, features)` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSet {
    pub x: Array3<f64>,
    pub y: Array1<f64>,
}

impl RegressionSet {
    pub fn new(x: Array3<f64>, y: Array1<f64>) -> Result<Self> {
        if x.dim().0 != y.len() {
            return Err(invalid("input and target counts differ"));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn select(&self, idx: &[usize]) -> (Array3<f64>, Array1<f64>) {
        (self.x.select(Axis(0), idx), self.y.select(Axis(0), idx))
    }
}

pub fn mse<R: Regressor>(model: &R, set: &RegressionSet) -> Result<f64> {
    let pred = model.predict_batch(set.x.view())?;
    Ok((&pred - &set.y).mapv(|e| e * e).mean().unwrap_or(0.0))
}

/// Mini-batch Adam on mean squared error. Returns one loss row per epoch,
/// measured on the full sets after the epoch.
pub fn train_regressor<R: Regressor>(
    model: &mut R,
    train: &RegressionSet,
    val: Option<&RegressionSet>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(cfg.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = train.select(chunk);
            let (loss, grads) = model.mse_grad(x.view(), y.view())?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { stage: "epoch", index: epoch });
            }
            opt.step(model, &grads)?;
        }
        let train_mse = mse(model, train)?;
        if !train_mse.is_finite() {
            return Err(Error::TrainingDiverged { stage: "epoch", index: epoch });
        }
        let val_mse = val.map(|v| mse(model, v)).transpose()?;
        log::debug!("epoch {epoch}: train {train_mse:.3e} val {val_mse:?}");
        curve.push(EpochLoss { epoch, train_mse, val_mse });
    }
    Ok(curve)
}

pub fn write_loss_csv<W: std::io::Write>(curve: &[EpochLoss], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for row in curve {
        w.write_record([
            row.epoch.to_string(),
            row.train_mse.to_string(),
            row.val_mse.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
