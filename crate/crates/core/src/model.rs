//! The feature projector: a dense network from image features to the
//! word-vector space, plus the optimizers that update it and the table.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::losses::SparseGrad;
use crate::{par, seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ProjectorConfig {
    /// Full-scale layout: features -> 4096 -> 8192 -> 2048 -> 300.
    pub fn canonical(input_dim: usize) -> Self {
        ProjectorConfig {
            input_dim,
            hidden_dims: vec![4096, 8192, 2048],
            output_dim: 300,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::invalid("all projector dimensions must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorNet {
    layers: Vec<Dense>,
    config: ProjectorConfig,
}

/// Activations kept by [`ProjectorNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

/// Per-layer `(weight, bias)` gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ProjectorNet {
    /// Seeded uniform fan-in initialization (He range for relu, LeCun range
    /// for tanh); zero biases.
    pub fn new(config: ProjectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.init_seed, &[0x4e7]);
        let gain = match config.activation {
            Activation::Relu => 6.0,
            Activation::Tanh => 3.0,
        };
        let layers = config
            .dims()
            .windows(2)
            .map(|w| {
                let limit = (gain / w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..=limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(ProjectorNet { layers, config })
    }

    pub fn from_layers(config: ProjectorConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        if layers.len() != dims.len() - 1 {
            return Err(Error::dimension("layer count", dims.len() - 1, layers.len()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.dim() != (dims[i], dims[i + 1]) || l.bias.len() != dims[i + 1] {
                return Err(Error::dimension(format!("layer {i} shape"), dims[i + 1], l.bias.len()));
            }
            if !l.weight.iter().chain(&l.bias).all(|x| x.is_finite()) {
                return Err(Error::Numerical(format!("layer {i} parameters")));
            }
        }
        Ok(ProjectorNet { layers, config })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::dimension("projector input", self.config.input_dim, x.ncols()));
        }
        if let Some(r) = x.rows().into_iter().position(|r| !r.iter().all(|v| v.is_finite())) {
            return Err(Error::Numerical(format!("projector input row {r}")));
        }
        Ok(())
    }

    /// Affine layers with the hidden activation between them; the last
    /// layer is affine only.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            inputs.push(h);
            if i == last {
                return Ok((z, ForwardCache { inputs, pre }));
            }
            h = z.mapv(|v| self.config.activation.apply(v));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Inference-only forward pass, parallel over row blocks.
    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        const BLOCK: usize = 256;
        let n = x.nrows();
        if n <= BLOCK {
            return Ok(self.forward_nocache(x));
        }
        let blocks = par::map_indexed(n.div_ceil(BLOCK), |b| {
            let lo = b * BLOCK;
            self.forward_nocache(x.slice(s![lo..(lo + BLOCK).min(n), ..]))
        });
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("blocks share column count"))
    }

    fn forward_nocache(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i != last {
                h.mapv_inplace(|v| self.config.activation.apply(v));
            }
        }
        h
    }

    /// Parameter gradients of a scalar objective whose gradient with
    /// respect to the outputs is `grad_f`.
    pub fn backward(&self, cache: &ForwardCache, grad_f: ArrayView2<f64>) -> Result<NetGrads> {
        let b = cache.inputs[0].nrows();
        if grad_f.dim() != (b, self.config.output_dim) || cache.inputs.len() != self.layers.len() {
            return Err(Error::dimension("output gradient rows", b, grad_f.nrows()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_f.to_owned();
        for i in (0..self.layers.len()).rev() {
            let gw = cache.inputs[i].t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            if i > 0 {
                let mut gin = g.dot(&self.layers[i].weight.t());
                let act = self.config.activation;
                Zip::from(&mut gin)
                    .and(&cache.pre[i - 1])
                    .for_each(|gv, &z| *gv *= act.derivative(z));
                g = gin;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }
}

impl NetGrads {
    pub fn zeros_like(net: &ProjectorNet) -> Self {
        NetGrads {
            layers: net
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "sgd-momentum" | "momentum" => Some(OptimizerKind::SgdMomentum),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_net: f64,
    pub lr_table: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Inverse decay: the rate at epoch `e` is `lr / (1 + lr_decay * e)`.
    pub lr_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_net: 0.005,
            lr_table: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, base: f64, epoch: u64) -> f64 {
        base / (1.0 + self.lr_decay * epoch as f64)
    }
}

/// Auxiliary buffers for one parameter tensor, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    fn new(kind: OptimizerKind, len: usize) -> Self {
        Moments {
            first: if kind == OptimizerKind::Sgd { Vec::new() } else { vec![0.0; len] },
            second: if kind == OptimizerKind::Adam { vec![0.0; len] } else { Vec::new() },
        }
    }
}

/// One ascent step `p <- p + lr * dir(g)` on a flat parameter slice.
/// `step` is the 1-based update count used for Adam's bias correction.
pub fn ascent_step(
    cfg: &OptimizerConfig,
    lr: f64,
    step: u64,
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
) {
    match cfg.kind {
        OptimizerKind::Sgd => {
            params.iter_mut().zip(grads).for_each(|(p, g)| *p += lr * g);
        }
        OptimizerKind::SgdMomentum => {
            for ((p, g), m) in params.iter_mut().zip(grads).zip(first.iter_mut()) {
                *m = cfg.momentum * *m + g;
                *p += lr * *m;
            }
        }
        OptimizerKind::Adam => {
            let c1 = 1.0 - cfg.beta1.powi(step as i32);
            let c2 = 1.0 - cfg.beta2.powi(step as i32);
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p += lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Optimizer buffers for the network (dense) and the table (per row, with
/// per-row step counts so untouched rows are never moved).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub net_steps: u64,
    pub net: Vec<(Moments, Moments)>,
    pub table: Moments,
    pub table_steps: Vec<u64>,
    pub table_dim: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, net: &ProjectorNet, table: &EmbeddingTable) -> Self {
        let kind = config.kind;
        OptimizerState {
            net: net
                .layers()
                .iter()
                .map(|l| (Moments::new(kind, l.weight.len()), Moments::new(kind, l.bias.len())))
                .collect(),
            table: Moments::new(kind, table.len() * table.dim()),
            table_steps: vec![0; table.len()],
            table_dim: table.dim(),
            net_steps: 0,
            config,
        }
    }

    pub fn apply_net(&mut self, net: &mut ProjectorNet, grads: &NetGrads, epoch: u64) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(Error::dimension("gradient layers", net.layers().len(), grads.layers.len()));
        }
        if !grads.all_finite() {
            return Err(Error::Numerical("network gradient".into()));
        }
        self.net_steps += 1;
        let lr = self.config.lr_at(self.config.lr_net, epoch);
        for ((layer, (gw, gb)), (mw, mb)) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.net) {
            if layer.weight.dim() != gw.dim() || layer.bias.len() != gb.len() {
                return Err(Error::dimension("gradient shape", layer.bias.len(), gb.len()));
            }
            let w = layer.weight.as_slice_mut().expect("standard layout");
            ascent_step(&self.config, lr, self.net_steps, w, gw.as_slice().expect("standard layout"), &mut mw.first, &mut mw.second);
            let b = layer.bias.as_slice_mut().expect("standard layout");
            ascent_step(&self.config, lr, self.net_steps, b, gb.as_slice().expect("standard layout"), &mut mb.first, &mut mb.second);
        }
        if !net.layers().iter().all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite())) {
            return Err(Error::Numerical("network parameters after update".into()));
        }
        Ok(())
    }

    /// Updates only the rows present in `grads`, marking them seen.
    pub fn apply_table(&mut self, table: &mut EmbeddingTable, grads: &SparseGrad, epoch: u64) -> Result<()> {
        if grads.is_empty() {
            return Ok(());
        }
        if grads.values().ncols() != table.dim() || self.table_dim != table.dim() {
            return Err(Error::dimension("table gradient", table.dim(), grads.values().ncols()));
        }
        if !grads.values().iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("word-vector gradient".into()));
        }
        let lr = self.config.lr_at(self.config.lr_table, epoch);
        let d = table.dim();
        let kind = self.config.kind;
        for (id, g) in grads.iter() {
            let r = id as usize;
            self.table_steps[r] += 1;
            let span = r * d..(r + 1) * d;
            let first = if kind == OptimizerKind::Sgd { &mut [][..] } else { &mut self.table.first[span.clone()] };
            let second = if kind == OptimizerKind::Adam { &mut self.table.second[span] } else { &mut [][..] };
            let mut row = table.vectors_mut().row_mut(r);
            let p = row.as_slice_mut().expect("standard layout");
            ascent_step(&self.config, lr, self.table_steps[r], p, g.as_slice().expect("contiguous row"), first, second);
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::Numerical(format!("word vector {r} after update")));
            }
            table.mark_seen(id);
        }
        Ok(())
    }
}
