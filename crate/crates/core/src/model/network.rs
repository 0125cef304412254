//! Dense network with hand-derived gradients.
//!
//! Layer `l` computes
//!
//! ```text
//! z = h W_eff^T + b            W_eff = W + s * B A   (low-rank, optional)
//! a = act(z)
//! h' = a + act(a D^T + d) U^T + u   (serial adapter, optional)
//! ```
//!
//! and the head maps the final `h` to logits `h H^T + c`. Matrices are
//! row-major `(rows = items)`. Weights are stored `(out, in)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = act(x)`.
    pub fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// LeCun-normal weights, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| std * rng.sample::<f64, _>(StandardNormal));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Low-rank update `scale * B A` added to a dense weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    /// `(rank, in)`, small Gaussian at init.
    pub a: Array2<f64>,
    /// `(out, rank)`, zero at init.
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LowRank {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, rank: usize, alpha: f64) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            a: Array2::from_shape_fn((rank, fan_in), |_| std * rng.sample::<f64, _>(StandardNormal)),
            b: Array2::zeros((fan_out, rank)),
            scale: alpha / rank as f64,
        }
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }
}

/// Residual bottleneck applied after a layer's nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `(bottleneck, width)`
    pub down: Array2<f64>,
    pub down_bias: Array1<f64>,
    /// `(width, bottleneck)`, zero at init.
    pub up: Array2<f64>,
    pub up_bias: Array1<f64>,
}

impl Adapter {
    pub fn init(rng: &mut impl Rng, width: usize, bottleneck: usize) -> Self {
        let std = (1.0 / width as f64).sqrt();
        Self {
            down: Array2::from_shape_fn((bottleneck, width), |_| std * rng.sample::<f64, _>(StandardNormal)),
            down_bias: Array1::zeros(bottleneck),
            up: Array2::zeros((width, bottleneck)),
            up_bias: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `(classes, features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Head {
    pub fn zeros(n_classes: usize, feature_dim: usize) -> Self {
        Self { weight: Array2::zeros((n_classes, feature_dim)), bias: Array1::zeros(n_classes) }
    }

    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.weight.t()) + &self.bias
    }
}

/// What a parameter tensor is, for optimizer grouping and masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    LayerWeight,
    LayerBias,
    LowRankA,
    LowRankB,
    AdapterDown,
    AdapterDownBias,
    AdapterUp,
    AdapterUpBias,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    pub fn is_bias(self) -> bool {
        matches!(self, ParamKind::LayerBias | ParamKind::AdapterDownBias | ParamKind::AdapterUpBias | ParamKind::HeadBias)
    }

    pub fn is_head(self) -> bool {
        matches!(self, ParamKind::HeadWeight | ParamKind::HeadBias)
    }
}

/// All parameters of backbone, augmentations and head. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Dense>,
    /// Empty, or one entry per layer.
    pub low_rank: Vec<LowRank>,
    /// Empty, or one entry per layer.
    pub adapters: Vec<Adapter>,
    pub head: Head,
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

impl NetworkParams {
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Self {
            layers: self.layers.iter().map(|l| Dense { weight: z2(&l.weight), bias: z1(&l.bias) }).collect(),
            low_rank: self.low_rank.iter().map(|r| LowRank { a: z2(&r.a), b: z2(&r.b), scale: r.scale }).collect(),
            adapters: self
                .adapters
                .iter()
                .map(|d| Adapter { down: z2(&d.down), down_bias: z1(&d.down_bias), up: z2(&d.up), up_bias: z1(&d.up_bias) })
                .collect(),
            head: Head { weight: z2(&self.head.weight), bias: z1(&self.head.bias) },
        }
    }

    pub fn feature_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, Dense::fan_out)
    }

    /// `(name, kind, shape, values)` in canonical order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.weight"), ParamKind::LayerWeight, layer.weight.shape().to_vec(), flat(&layer.weight)));
            out.push((format!("layer{l}.bias"), ParamKind::LayerBias, vec![layer.bias.len()], layer.bias.as_slice().unwrap()));
        }
        for (l, r) in self.low_rank.iter().enumerate() {
            out.push((format!("layer{l}.lora_a"), ParamKind::LowRankA, r.a.shape().to_vec(), flat(&r.a)));
            out.push((format!("layer{l}.lora_b"), ParamKind::LowRankB, r.b.shape().to_vec(), flat(&r.b)));
        }
        for (l, d) in self.adapters.iter().enumerate() {
            out.push((format!("layer{l}.adapter.down"), ParamKind::AdapterDown, d.down.shape().to_vec(), flat(&d.down)));
            out.push((format!("layer{l}.adapter.down_bias"), ParamKind::AdapterDownBias, vec![d.down_bias.len()], d.down_bias.as_slice().unwrap()));
            out.push((format!("layer{l}.adapter.up"), ParamKind::AdapterUp, d.up.shape().to_vec(), flat(&d.up)));
            out.push((format!("layer{l}.adapter.up_bias"), ParamKind::AdapterUpBias, vec![d.up_bias.len()], d.up_bias.as_slice().unwrap()));
        }
        out.push(("head.weight".into(), ParamKind::HeadWeight, self.head.weight.shape().to_vec(), flat(&self.head.weight)));
        out.push(("head.bias".into(), ParamKind::HeadBias, vec![self.head.bias.len()], self.head.bias.as_slice().unwrap()));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
        for layer in &mut self.layers {
            out.push((ParamKind::LayerWeight, flat_mut(&mut layer.weight)));
            out.push((ParamKind::LayerBias, layer.bias.as_slice_mut().unwrap()));
        }
        for r in &mut self.low_rank {
            out.push((ParamKind::LowRankA, flat_mut(&mut r.a)));
            out.push((ParamKind::LowRankB, flat_mut(&mut r.b)));
        }
        for d in &mut self.adapters {
            out.push((ParamKind::AdapterDown, flat_mut(&mut d.down)));
            out.push((ParamKind::AdapterDownBias, d.down_bias.as_slice_mut().unwrap()));
            out.push((ParamKind::AdapterUp, flat_mut(&mut d.up)));
            out.push((ParamKind::AdapterUpBias, d.up_bias.as_slice_mut().unwrap()));
        }
        out.push((ParamKind::HeadWeight, flat_mut(&mut self.head.weight)));
        out.push((ParamKind::HeadBias, self.head.bias.as_slice_mut().unwrap()));
        out
    }

    fn effective_weight(&self, l: usize) -> Array2<f64> {
        match self.low_rank.get(l) {
            Some(r) => &self.layers[l].weight + &r.delta(),
            None => self.layers[l].weight.clone(),
        }
    }

    /// Layer weights with low-rank updates folded in.
    pub fn merged_layers(&self) -> Vec<Dense> {
        (0..self.layers.len())
            .map(|l| Dense { weight: self.effective_weight(l), bias: self.layers[l].bias.clone() })
            .collect()
    }

    /// Runs the backbone part, keeping what backward needs.
    pub fn forward(&self, act: Nonlinearity, x: Array2<f64>) -> Trace {
        let mut trace = Trace { inputs: Vec::with_capacity(self.layers.len() + 1), acts: Vec::new(), adapter_hidden: Vec::new() };
        let mut h = x;
        for l in 0..self.layers.len() {
            let w = self.effective_weight(l);
            let a = (h.dot(&w.t()) + &self.layers[l].bias).mapv_into(|v| act.apply(v));
            let next = match self.adapters.get(l) {
                Some(ad) => {
                    let u = (a.dot(&ad.down.t()) + &ad.down_bias).mapv_into(|v| act.apply(v));
                    let out = &a + &(u.dot(&ad.up.t()) + &ad.up_bias);
                    trace.adapter_hidden.push(Some(u));
                    out
                }
                None => {
                    trace.adapter_hidden.push(None);
                    a.clone()
                }
            };
            trace.inputs.push(h);
            trace.acts.push(a);
            h = next;
        }
        trace.inputs.push(h);
        trace
    }

    /// Gradients of all parameters given `d_logits` from the loss.
    pub fn backward(&self, act: Nonlinearity, trace: &Trace, d_logits: &Array2<f64>) -> NetworkParams {
        let mut g = self.zeros_like();
        let features = trace.features();
        g.head.weight = d_logits.t().dot(features);
        g.head.bias = d_logits.sum_axis(Axis(0));
        let mut dh = d_logits.dot(&self.head.weight);
        for l in (0..self.layers.len()).rev() {
            let a = &trace.acts[l];
            let da = match (self.adapters.get(l), &trace.adapter_hidden[l]) {
                (Some(ad), Some(u)) => {
                    let ga = &mut g.adapters[l];
                    ga.up = dh.t().dot(u);
                    ga.up_bias = dh.sum_axis(Axis(0));
                    let mut dz_u = dh.dot(&ad.up);
                    dz_u.zip_mut_with(u, |d, &y| *d *= act.derivative_at_output(y));
                    ga.down = dz_u.t().dot(a);
                    ga.down_bias = dz_u.sum_axis(Axis(0));
                    &dh + &dz_u.dot(&ad.down)
                }
                _ => dh,
            };
            let mut dz = da;
            dz.zip_mut_with(a, |d, &y| *d *= act.derivative_at_output(y));
            let h_in = &trace.inputs[l];
            let dw_eff = dz.t().dot(h_in);
            if let Some(r) = self.low_rank.get(l) {
                g.low_rank[l].a = r.b.t().dot(&dw_eff) * r.scale;
                g.low_rank[l].b = dw_eff.dot(&r.a.t()) * r.scale;
            }
            g.layers[l].bias = dz.sum_axis(Axis(0));
            dh = dz.dot(&self.effective_weight(l));
            g.layers[l].weight = dw_eff;
        }
        g
    }

    /// Mean softmax cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(&self, act: Nonlinearity, x: Array2<f64>, labels: &[usize]) -> (f64, NetworkParams) {
        let trace = self.forward(act, x);
        let logits = self.head.logits(trace.features());
        let (loss, d_logits) = softmax_cross_entropy(&logits, labels);
        (loss, self.backward(act, &trace, &d_logits))
    }

    pub fn logits(&self, act: Nonlinearity, x: Array2<f64>) -> Array2<f64> {
        self.head.logits(self.forward(act, x).features())
    }

    pub fn check_shapes(&self, input_dim: usize) -> Result<()> {
        let mut width = input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.fan_in() != width || layer.bias.len() != layer.fan_out() {
                return Err(Error::ShapeMismatch(format!("layer {l} does not chain from width {width}")));
            }
            width = layer.fan_out();
        }
        if self.head.weight.ncols() != width || self.head.bias.len() != self.head.weight.nrows() {
            return Err(Error::ShapeMismatch(format!("head expects {} features, backbone gives {width}", self.head.weight.ncols())));
        }
        Ok(())
    }
}

/// Forward-pass intermediates for one batch.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer, plus the final features as the last entry.
    pub inputs: Vec<Array2<f64>>,
    /// Post-nonlinearity output of each layer, before any adapter.
    pub acts: Vec<Array2<f64>>,
    pub adapter_hidden: Vec<Option<Array2<f64>>>,
}

impl Trace {
    pub fn features(&self) -> &Array2<f64> {
        self.inputs.last().expect("trace always holds the input")
    }

    /// Per-layer outputs (after adapters), or the raw input when there are no layers.
    pub fn layer_outputs(&self) -> Vec<Array2<f64>> {
        if self.inputs.len() == 1 {
            vec![self.inputs[0].clone()]
        } else {
            self.inputs[1..].to_vec()
        }
    }
}

/// Mean cross-entropy of `logits` against `labels`, and `d loss / d logits`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = ((v - log_z).exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Row index of the maximum per row, lowest index on ties.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
