//! Adaptation procedures: linear probe, full fine-tuning with split learning
//! rates, and parameter-efficient variants (bias-only, low-rank, serial
//! adapter).
//!
//! Every procedure starts from a copy of the given backbone, trains a
//! zero-initialized linear head plus the method's trainable tensors with
//! full-batch Adam on softmax cross-entropy, and never touches the caller's
//! backbone. Backbone-side tensors (layer weights, biases, low-rank factors,
//! adapters) use `lr_backbone`; the head uses `lr_head`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, train, Adapter, Backbone, Head, LowRank, NetworkParams, Nonlinearity, ParamKind, Snapshot, TrainPlan};
use crate::rng::keyed_rng;
use crate::sampler::LabeledItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LinearProbe,
    FullFinetune,
    BiasOnly,
    LowRank,
    Adapter,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::LinearProbe, Method::FullFinetune, Method::BiasOnly, Method::LowRank, Method::Adapter];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::LinearProbe => "linear-probe",
            Method::FullFinetune => "full-finetune",
            Method::BiasOnly => "bias-only",
            Method::LowRank => "low-rank",
            Method::Adapter => "adapter",
        }
    }

    /// Whether `kind` is updated by this method.
    pub fn trains(self, kind: ParamKind) -> bool {
        if kind.is_head() {
            return true;
        }
        match self {
            Method::LinearProbe => false,
            Method::FullFinetune => matches!(kind, ParamKind::LayerWeight | ParamKind::LayerBias),
            Method::BiasOnly => kind == ParamKind::LayerBias,
            Method::LowRank => matches!(kind, ParamKind::LowRankA | ParamKind::LowRankB),
            Method::Adapter => matches!(
                kind,
                ParamKind::AdapterDown | ParamKind::AdapterDownBias | ParamKind::AdapterUp | ParamKind::AdapterUpBias
            ),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// One adaptation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub epochs: usize,
    pub method: Method,
}

impl HyperConfig {
    pub fn new(method: Method, lr_backbone: f64, lr_head: f64, epochs: usize) -> Self {
        Self { lr_backbone, lr_head, epochs, method }
    }

    /// Learning rates must be finite and non-negative. Zero rates and zero
    /// epochs are accepted as degenerate configurations.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Knobs shared by all methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub seed: u64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    /// Defaults to the rank, i.e. unit scale.
    #[serde(default)]
    pub lora_alpha: Option<f64>,
    /// Defaults to `max(2, feature_dim / 4)`.
    #[serde(default)]
    pub adapter_width: Option<usize>,
}

fn default_rank() -> usize {
    4
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self { seed: 0, batch_size: None, lora_rank: default_rank(), lora_alpha: None, adapter_width: None }
    }
}

impl AdaptOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// Adapted parameters plus everything needed to produce logits.
#[derive(Debug, Clone)]
pub struct AdaptedClassifier {
    method: Method,
    class_ids: Vec<String>,
    params: NetworkParams,
    nonlinearity: Nonlinearity,
    input_dim: usize,
    inputs: Option<Arc<EmbeddingTable>>,
    initial: Snapshot,
    loss_history: Vec<f64>,
}

impl AdaptedClassifier {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn head(&self) -> &Head {
        &self.params.head
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// Raw affine scores, shape `(items, classes)`.
    pub fn predict_logits<S: AsRef<str>>(&self, items: &[S]) -> Result<Array2<f64>> {
        Ok(self.params.logits(self.nonlinearity, self.inputs(items)?))
    }

    pub fn predict<S: AsRef<str>>(&self, items: &[S]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_logits(items)?))
    }

    fn inputs<S: AsRef<str>>(&self, items: &[S]) -> Result<Array2<f64>> {
        self.adapted_backbone().inputs(items)
    }

    /// Per-layer activations of the adapted network (adapters included).
    pub fn activations<S: AsRef<str>>(&self, items: &[S]) -> Result<Vec<Array2<f64>>> {
        Ok(self.params.forward(self.nonlinearity, self.inputs(items)?).layer_outputs())
    }

    /// Backbone weights before adaptation.
    pub fn initial_snapshot(&self) -> &Snapshot {
        &self.initial
    }

    /// Backbone weights after adaptation, low-rank updates merged in.
    pub fn backbone_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        for (l, layer) in self.params.merged_layers().into_iter().enumerate() {
            s.push(format!("layer{l}.weight"), layer.weight.shape().to_vec(), layer.weight.iter().copied().collect()).unwrap();
            s.push(format!("layer{l}.bias"), vec![layer.bias.len()], layer.bias.to_vec()).unwrap();
        }
        s
    }

    /// Backbone with merged weights. Adapter modules are not part of it.
    pub fn adapted_backbone(&self) -> Backbone {
        let merged = NetworkParams {
            layers: self.params.merged_layers(),
            low_rank: vec![],
            adapters: vec![],
            head: Head::zeros(0, 0),
        };
        Backbone::from_params(&merged, self.nonlinearity, self.input_dim, self.inputs.clone())
    }

    /// Backbone tensor names this method may change: every layer tensor for
    /// full fine-tuning and low-rank (through the merged update), biases only
    /// for bias-only, none otherwise.
    pub fn trainable_backbone_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.params.layers.len() {
            match self.method {
                Method::FullFinetune => {
                    out.push(format!("layer{l}.weight"));
                    out.push(format!("layer{l}.bias"));
                }
                Method::LowRank => out.push(format!("layer{l}.weight")),
                Method::BiasOnly => out.push(format!("layer{l}.bias")),
                Method::LinearProbe | Method::Adapter => {}
            }
        }
        out
    }

    /// Every tensor (backbone, augmentations, head), in canonical order.
    pub fn full_snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        for (name, _, shape, values) in self.params.tensors() {
            s.push(name, shape, values.to_vec()).unwrap();
        }
        s
    }

    /// `FTSNAP1` tensors followed by an `FTMETA` JSON trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.full_snapshot().to_bytes();
        let meta = serde_json::json!({
            "method": self.method,
            "nonlinearity": self.nonlinearity,
            "input_dim": self.input_dim,
            "class_ids": self.class_ids,
            "lora_scale": self.params.low_rank.first().map(|r| r.scale),
        })
        .to_string();
        out.extend_from_slice(b"FTMETA");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }
}

/// Adapts `backbone` to the support set with `cfg.method`.
pub fn fit(backbone: &Backbone, support: &[LabeledItem], class_ids: &[String], cfg: &HyperConfig, opts: &AdaptOptions) -> Result<AdaptedClassifier> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    let n_classes = class_ids.len();
    if let Some(bad) = support.iter().find(|s| s.1 >= n_classes) {
        return Err(Error::invalid(format!("label {} outside 0..{n_classes}", bad.1)));
    }
    let method = cfg.method;
    if backbone.is_frozen() && matches!(method, Method::BiasOnly | Method::LowRank | Method::Adapter) {
        return Err(Error::UnsupportedMethod {
            method: method.to_string(),
            reason: "backbone has no dense layers to augment".into(),
        });
    }
    let mut params = backbone.params().clone();
    params.head = Head::zeros(n_classes, backbone.feature_dim());
    match method {
        Method::LowRank => {
            if opts.lora_rank == 0 {
                return Err(Error::invalid("low-rank rank must be >= 1"));
            }
            let alpha = opts.lora_alpha.unwrap_or(opts.lora_rank as f64);
            let mut rng = keyed_rng(opts.seed, 0, "low-rank-init");
            params.low_rank = params
                .layers
                .iter()
                .map(|l| LowRank::init(&mut rng, l.fan_in(), l.fan_out(), opts.lora_rank, alpha))
                .collect();
        }
        Method::Adapter => {
            let width = opts.adapter_width.unwrap_or_else(|| (backbone.feature_dim() / 4).max(2));
            let mut rng = keyed_rng(opts.seed, 0, "adapter-init");
            params.adapters = params.layers.iter().map(|l| Adapter::init(&mut rng, l.fan_out(), width)).collect();
        }
        _ => {}
    }
    let items: Vec<&str> = support.iter().map(LabeledItem::item).collect();
    let labels: Vec<usize> = support.iter().map(LabeledItem::label).collect();
    let x = backbone.inputs(&items)?;
    let lr_for = |kind: ParamKind| {
        method.trains(kind).then_some(if kind.is_head() { cfg.lr_head } else { cfg.lr_backbone })
    };
    let plan = TrainPlan { epochs: cfg.epochs, batch_size: opts.batch_size, seed: opts.seed, lr_for: &lr_for };
    let loss_history = train(&mut params, backbone.nonlinearity(), &x, &labels, &plan)?;
    Ok(AdaptedClassifier {
        method,
        class_ids: class_ids.to_vec(),
        params,
        nonlinearity: backbone.nonlinearity(),
        input_dim: backbone.input_dim(),
        inputs: backbone.input_table().cloned(),
        initial: backbone.snapshot(),
        loss_history,
    })
}

pub fn fit_linear_probe(backbone: &Backbone, support: &[LabeledItem], class_ids: &[String], cfg: &HyperConfig, opts: &AdaptOptions) -> Result<AdaptedClassifier> {
    fit(backbone, support, class_ids, &HyperConfig { method: Method::LinearProbe, ..*cfg }, opts)
}

pub fn fit_full_finetune(backbone: &Backbone, support: &[LabeledItem], class_ids: &[String], cfg: &HyperConfig, opts: &AdaptOptions) -> Result<AdaptedClassifier> {
    fit(backbone, support, class_ids, &HyperConfig { method: Method::FullFinetune, ..*cfg }, opts)
}

/// Bias-only, low-rank or adapter tuning.
pub fn fit_peft(backbone: &Backbone, support: &[LabeledItem], class_ids: &[String], method: Method, cfg: &HyperConfig, opts: &AdaptOptions) -> Result<AdaptedClassifier> {
    if !matches!(method, Method::BiasOnly | Method::LowRank | Method::Adapter) {
        return Err(Error::UnsupportedMethod { method: method.to_string(), reason: "not a parameter-efficient method".into() });
    }
    fit(backbone, support, class_ids, &HyperConfig { method, ..*cfg }, opts)
}

pub fn predict_logits<S: AsRef<str>>(classifier: &AdaptedClassifier, items: &[S]) -> Result<Array2<f64>> {
    classifier.predict_logits(items)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(logits);
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Nearest-class-mean scores on frozen backbone features: the negative
/// squared distance to each class centroid of the support set.
pub fn nearest_centroid_logits(backbone: &Backbone, support: &[LabeledItem], n_classes: usize, query: &[LabeledItem]) -> Result<Array2<f64>> {
    let s_items: Vec<&str> = support.iter().map(LabeledItem::item).collect();
    let feats = backbone.forward(&s_items)?;
    let mut centroids = Array2::<f64>::zeros((n_classes, feats.ncols()));
    let mut counts = vec![0usize; n_classes];
    for (row, s) in feats.outer_iter().zip(support) {
        let mut c = centroids.row_mut(s.1);
        c += &row;
        counts[s.1] += 1;
    }
    for (mut c, &n) in centroids.outer_iter_mut().zip(&counts) {
        if n > 0 {
            c /= n as f64;
        }
    }
    let q_items: Vec<&str> = query.iter().map(LabeledItem::item).collect();
    let q = backbone.forward(&q_items)?;
    Ok(Array2::from_shape_fn((q.nrows(), n_classes), |(i, k)| {
        if counts[k] == 0 {
            return f64::NEG_INFINITY;
        }
        -q.row(i).iter().zip(centroids.row(k)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticSpec};
    use crate::model::{frozen_embedding_backbone, reference_backbone, ReferenceSpec};
    use crate::model::Dense;
    use crate::sampler::{sample_task, Task, TaskStreamSpec};

    fn setup(separation: f64, fixed_shots: usize, ways: usize) -> (Backbone, Task) {
        let ds = generate_synthetic_dataset(&SyntheticSpec::new("t", 6, 30, 8, separation), 1).unwrap();
        let b = reference_backbone(&ReferenceSpec::new(8, vec![16], 8), 2)
            .unwrap()
            .with_inputs(ds.embeddings().unwrap().clone())
            .unwrap();
        let mut spec = TaskStreamSpec::new("t", 0);
        spec.way_range = (ways, ways);
        spec.fixed_shots = Some(fixed_shots);
        (b, sample_task(&ds, None, &spec, 0).unwrap())
    }

    fn support_acc(c: &AdaptedClassifier, t: &Task) -> f64 {
        let items: Vec<&str> = t.support.iter().map(LabeledItem::item).collect();
        accuracy(&c.predict_logits(&items).unwrap(), &t.support_labels())
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("vpt".parse::<Method>().is_err());
    }

    #[test]
    fn linear_probe_separates_two_way_five_shot() {
        let (b, t) = setup(6.0, 5, 2);
        let cfg = HyperConfig::new(Method::LinearProbe, 0.0, 0.05, 100);
        let c = fit_linear_probe(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        assert_eq!(support_acc(&c, &t), 1.0);
        assert_eq!(c.backbone_snapshot(), b.snapshot());
    }

    #[test]
    fn zero_epochs_gives_zero_logits() {
        let (b, t) = setup(3.0, 3, 4);
        let cfg = HyperConfig::new(Method::LinearProbe, 0.0, 0.05, 0);
        let c = fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        let items: Vec<&str> = t.query.iter().map(LabeledItem::item).collect();
        let logits = c.predict_logits(&items).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(logits.shape(), &[items.len(), 4]);
        assert_eq!(logits, c.predict_logits(&items).unwrap());
    }

    #[test]
    fn zero_backbone_lr_equals_linear_probe() {
        let (b, t) = setup(3.0, 3, 4);
        let cfg = HyperConfig::new(Method::FullFinetune, 0.0, 0.02, 25);
        let ft = fit_full_finetune(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        let lp = fit_linear_probe(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        assert_eq!(ft.backbone_snapshot(), b.snapshot());
        assert_eq!(ft.head(), lp.head());
    }

    #[test]
    fn finetune_is_deterministic() {
        let (b, t) = setup(3.0, 3, 4);
        let cfg = HyperConfig::new(Method::FullFinetune, 1e-3, 0.02, 10);
        let a = fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::with_seed(4)).unwrap();
        let c = fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::with_seed(4)).unwrap();
        assert_eq!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn bias_only_leaves_weights_alone() {
        let (b, t) = setup(3.0, 3, 4);
        let cfg = HyperConfig::new(Method::BiasOnly, 1e-2, 0.02, 10);
        let c = fit_peft(&b, &t.support, &t.class_ids, Method::BiasOnly, &cfg, &AdaptOptions::default()).unwrap();
        let after = c.backbone_snapshot();
        for e in b.snapshot().entries() {
            let a = after.get(&e.name).unwrap();
            if e.name.ends_with(".weight") {
                assert_eq!(a.values, e.values);
            } else {
                assert_ne!(a.values, e.values);
            }
        }
    }

    #[test]
    fn low_rank_starts_at_linear_probe() {
        let (b, t) = setup(3.0, 3, 4);
        let cfg = HyperConfig::new(Method::LowRank, 1e-2, 0.02, 0);
        let lr = fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        assert_eq!(lr.backbone_snapshot(), b.snapshot());
        let lp = fit(&b, &t.support, &t.class_ids, &HyperConfig { method: Method::LinearProbe, ..cfg }, &AdaptOptions::default()).unwrap();
        let items: Vec<&str> = t.query.iter().map(LabeledItem::item).collect();
        assert_eq!(lr.predict_logits(&items).unwrap(), lp.predict_logits(&items).unwrap());
    }

    #[test]
    fn peft_needs_dense_layers() {
        let ds = generate_synthetic_dataset(&SyntheticSpec::new("f", 3, 6, 4, 3.0), 0).unwrap();
        let b = frozen_embedding_backbone(ds.embeddings().unwrap().clone()).unwrap();
        let t = sample_task(&ds, None, &TaskStreamSpec::new("f", 0), 0).unwrap();
        for m in [Method::BiasOnly, Method::LowRank, Method::Adapter] {
            let cfg = HyperConfig::new(m, 1e-2, 1e-2, 3);
            assert!(matches!(fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()), Err(Error::UnsupportedMethod { .. })));
        }
        let cfg = HyperConfig::new(Method::LinearProbe, 1e-2, 1e-2, 3);
        assert!(fit_peft(&b, &t.support, &t.class_ids, Method::LinearProbe, &cfg, &AdaptOptions::default()).is_err());
    }

    #[test]
    fn adapter_trains_and_keeps_backbone() {
        let (b, t) = setup(3.0, 3, 4);
        let cfg = HyperConfig::new(Method::Adapter, 1e-2, 0.02, 20);
        let c = fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        assert_eq!(c.backbone_snapshot(), b.snapshot());
        assert!(c.params().adapters.iter().any(|a| a.up.iter().any(|&v| v != 0.0)));
        assert_eq!(c.params().adapters[0].down.nrows(), 2);
    }

    #[test]
    fn single_item_is_memorized() {
        let (b, t) = setup(3.0, 1, 2);
        let support = vec![t.support[1].clone()];
        let cfg = HyperConfig::new(Method::FullFinetune, 1e-3, 0.05, 50);
        let c = fit(&b, &support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap();
        assert_eq!(c.predict(&[support[0].item()]).unwrap(), vec![support[0].label()]);
    }

    #[test]
    fn centroid_baseline_classifies_separable_task() {
        let (b, t) = setup(8.0, 5, 3);
        let logits = nearest_centroid_logits(&b, &t.support, 3, &t.query).unwrap();
        assert!(accuracy(&logits, &t.query_labels()) > 0.9);
    }

    fn delta_norms(c: &AdaptedClassifier) -> Vec<f64> {
        c.initial_snapshot()
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(".weight"))
            .map(|e| {
                let after = c.backbone_snapshot();
                let a = after.get(&e.name).unwrap();
                a.values.iter().zip(&e.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .collect()
    }

    #[test]
    fn delta_w_grows_with_backbone_lr() {
        let (b, t) = setup(3.0, 5, 4);
        let small = HyperConfig::new(Method::FullFinetune, 1e-5, 1e-2, 30);
        let large = HyperConfig { lr_backbone: 1e-2, ..small };
        let ns = delta_norms(&fit(&b, &t.support, &t.class_ids, &small, &AdaptOptions::default()).unwrap());
        let nl = delta_norms(&fit(&b, &t.support, &t.class_ids, &large, &AdaptOptions::default()).unwrap());
        assert_eq!(ns.len(), 2);
        for (s, l) in ns.iter().zip(&nl) {
            assert!(*s > 0.0 && s < l, "{s} vs {l}");
        }
    }

    #[test]
    fn support_accuracy_trends_up_with_epochs() {
        let (b, t) = setup(8.0, 5, 5);
        let accs: Vec<f64> = [10, 50, 200]
            .iter()
            .map(|&e| {
                let cfg = HyperConfig::new(Method::LinearProbe, 0.0, 5e-2, e);
                support_acc(&fit(&b, &t.support, &t.class_ids, &cfg, &AdaptOptions::default()).unwrap(), &t)
            })
            .collect();
        assert!(accs.windows(2).all(|w| w[1] >= w[0] - 0.02), "{accs:?}");
        assert_eq!(*accs.last().unwrap(), 1.0);
    }

    /// With a zero head, step one leaves A and B at their initial values and
    /// moves the head by the hand-computed Adam step. On step two B gets a
    /// gradient but A does not, since its gradient is scaled by B = 0.
    #[test]
    fn low_rank_single_step_matches_hand_oracle() {
        let ds = generate_synthetic_dataset(&SyntheticSpec::new("h", 3, 4, 3, 3.0), 5).unwrap();
        let spec = ReferenceSpec { nonlinearity: Nonlinearity::Identity, ..ReferenceSpec::new(3, vec![], 3) };
        let b = reference_backbone(&spec, 1).unwrap().with_inputs(ds.embeddings().unwrap().clone()).unwrap();
        assert_eq!(b.layers().len(), 1);
        let t = sample_task(&ds, None, &TaskStreamSpec { fixed_shots: Some(2), way_range: (3, 3), ..TaskStreamSpec::new("h", 0) }, 0).unwrap();
        let opts = AdaptOptions { lora_rank: 3, ..AdaptOptions::default() };
        let (lr_b, lr_h) = (0.01, 0.1);
        let init = fit(&b, &t.support, &t.class_ids, &HyperConfig::new(Method::LowRank, lr_b, lr_h, 0), &opts).unwrap();
        let one = fit(&b, &t.support, &t.class_ids, &HyperConfig::new(Method::LowRank, lr_b, lr_h, 1), &opts).unwrap();
        assert_eq!(one.params().low_rank, init.params().low_rank);
        assert_eq!(one.backbone_snapshot(), b.snapshot());

        let items: Vec<&str> = t.support.iter().map(LabeledItem::item).collect();
        let feats = b.forward(&items).unwrap();
        let n = items.len() as f64;
        let labels = t.support_labels();
        for k in 0..3 {
            for j in 0..3 {
                let g: f64 = (0..items.len())
                    .map(|i| (1.0 / 3.0 - if labels[i] == k { 1.0 } else { 0.0 }) * feats[[i, j]] / n)
                    .sum();
                let expected = -lr_h * g / (g.abs() + crate::model::EPSILON);
                assert!((one.head().weight[[k, j]] - expected).abs() < 1e-12);
            }
        }

        let two = fit(&b, &t.support, &t.class_ids, &HyperConfig::new(Method::LowRank, lr_b, lr_h, 2), &opts).unwrap();
        assert_eq!(two.params().low_rank[0].a, init.params().low_rank[0].a);
        assert!(two.params().low_rank[0].b.iter().any(|&v| v != 0.0));
    }

    fn finite_difference_check(act: Nonlinearity) {
        use rand::Rng;
        let mut rng = keyed_rng(9, 0, "grad-check");
        let layers = vec![Dense::init(&mut rng, 4, 5), Dense::init(&mut rng, 5, 3)];
        let mut low_rank: Vec<LowRank> = layers.iter().map(|l| LowRank::init(&mut rng, l.fan_in(), l.fan_out(), 2, 3.0)).collect();
        let mut adapters: Vec<Adapter> = layers.iter().map(|l| Adapter::init(&mut rng, l.fan_out(), 2)).collect();
        for r in &mut low_rank {
            r.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        for a in &mut adapters {
            a.up.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            a.up_bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let mut head = Head::zeros(3, 3);
        head.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        head.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        let params = NetworkParams { layers, low_rank, adapters, head };
        let x = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 1, 2, 0, 1, 2];
        let (_, grads) = params.loss_and_grads(act, x.clone(), &labels);
        let grad_flat: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, _, v)| v.to_vec()).collect();
        let n_tensors = grad_flat.len();
        let h = 1e-6;
        for t in 0..n_tensors {
            for i in 0..grad_flat[t].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[t].1[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t].1[i] -= h;
                let fd = (plus.loss_and_grads(act, x.clone(), &labels).0 - minus.loss_and_grads(act, x.clone(), &labels).0) / (2.0 * h);
                let name = &params.tensors()[t].0;
                assert!((fd - grad_flat[t][i]).abs() < 1e-6, "{act:?} {name}[{i}]: fd {fd} vs analytic {}", grad_flat[t][i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(Nonlinearity::Tanh);
        finite_difference_check(Nonlinearity::Identity);
    }
}
