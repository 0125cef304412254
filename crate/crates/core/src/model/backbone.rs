use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::network::{argmax_rows, Dense, Head, Nonlinearity, NetworkParams, ParamKind};
use super::snapshot::Snapshot;
use super::train::{train, TrainPlan};
use crate::dataset::{Dataset, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Shape of the reference multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub dim_in: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl ReferenceSpec {
    pub fn new(dim_in: usize, hidden: Vec<usize>, feature_dim: usize) -> Self {
        Self { dim_in, hidden, feature_dim, nonlinearity: Nonlinearity::Tanh }
    }
}

/// Feature extractor: a stack of dense layers over item inputs looked up in
/// an embedding table. With zero layers it is a frozen embedding lookup.
#[derive(Debug, Clone)]
pub struct Backbone {
    params: NetworkParams,
    nonlinearity: Nonlinearity,
    input_dim: usize,
    inputs: Option<Arc<EmbeddingTable>>,
}

impl Backbone {
    fn from_layers(layers: Vec<Dense>, nonlinearity: Nonlinearity, input_dim: usize) -> Self {
        let feature_dim = layers.last().map_or(input_dim, Dense::fan_out);
        Self {
            params: NetworkParams { layers, low_rank: vec![], adapters: vec![], head: Head::zeros(0, feature_dim) },
            nonlinearity,
            input_dim,
            inputs: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim(self.input_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn layers(&self) -> &[Dense] {
        &self.params.layers
    }

    /// True when there are no trainable backbone parameters.
    pub fn is_frozen(&self) -> bool {
        self.params.layers.is_empty()
    }

    /// Entries returned by [`activations`](Self::activations).
    pub fn layer_count(&self) -> usize {
        self.params.layers.len().max(1)
    }

    /// Copy of this backbone reading item inputs from `table`.
    pub fn with_inputs(&self, table: Arc<EmbeddingTable>) -> Result<Backbone> {
        if table.dim() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects {}-dim inputs, table has dim {}",
                self.input_dim,
                table.dim()
            )));
        }
        Ok(Backbone { inputs: Some(table), ..self.clone() })
    }

    pub fn input_table(&self) -> Option<&Arc<EmbeddingTable>> {
        self.inputs.as_ref()
    }

    /// Input matrix for `items`, one row each.
    pub fn inputs<S: AsRef<str>>(&self, items: &[S]) -> Result<Array2<f64>> {
        let table = self
            .inputs
            .as_ref()
            .ok_or_else(|| Error::invalid("backbone has no input table bound"))?;
        let mut x = Array2::zeros((items.len(), self.input_dim));
        for (i, id) in items.iter().enumerate() {
            let row = table.row(id.as_ref())?;
            for (dst, &v) in x.row_mut(i).iter_mut().zip(row) {
                *dst = v as f64;
            }
        }
        Ok(x)
    }

    pub fn forward_matrix(&self, x: Array2<f64>) -> Array2<f64> {
        self.params.forward(self.nonlinearity, x).features().clone()
    }

    /// Features for `items`, shape `(items, feature_dim)`.
    pub fn forward<S: AsRef<str>>(&self, items: &[S]) -> Result<Array2<f64>> {
        Ok(self.forward_matrix(self.inputs(items)?))
    }

    /// Output of every layer, or the embedding itself for a frozen backbone.
    pub fn activations<S: AsRef<str>>(&self, items: &[S]) -> Result<Vec<Array2<f64>>> {
        Ok(self.params.forward(self.nonlinearity, self.inputs(items)?).layer_outputs())
    }

    /// `(name, shape, values)` of every backbone tensor, in layer order.
    pub fn named_weights(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.params
            .tensors()
            .into_iter()
            .filter(|(_, kind, _, _)| matches!(kind, ParamKind::LayerWeight | ParamKind::LayerBias))
            .map(|(n, _, s, v)| (n, s, v))
            .collect()
    }

    /// Names of the tensors in the backbone parameter group.
    pub fn backbone_group(&self) -> Vec<String> {
        self.named_weights().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut s = Snapshot::new();
        for (name, shape, values) in self.named_weights() {
            s.push(name, shape, values.to_vec()).expect("backbone names are unique");
        }
        s
    }

    /// Restores weights taken by [`snapshot`](Self::snapshot). Names and shapes must match.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        let names: Vec<String> = self.backbone_group();
        if snapshot.len() != names.len() {
            return Err(Error::ShapeMismatch(format!("snapshot has {} tensors, backbone {}", snapshot.len(), names.len())));
        }
        for (l, layer) in self.params.layers.iter_mut().enumerate() {
            let w = snapshot
                .get(&format!("layer{l}.weight"))
                .ok_or_else(|| Error::ShapeMismatch(format!("snapshot lacks layer{l}.weight")))?;
            let b = snapshot
                .get(&format!("layer{l}.bias"))
                .ok_or_else(|| Error::ShapeMismatch(format!("snapshot lacks layer{l}.bias")))?;
            if w.shape != layer.weight.shape() || b.shape != [layer.bias.len()] {
                return Err(Error::ShapeMismatch(format!("layer {l} shape differs from snapshot")));
            }
            layer.weight.as_slice_mut().unwrap().copy_from_slice(&w.values);
            layer.bias.as_slice_mut().unwrap().copy_from_slice(&b.values);
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub(crate) fn from_params(params: &NetworkParams, nonlinearity: Nonlinearity, input_dim: usize, inputs: Option<Arc<EmbeddingTable>>) -> Self {
        let mut b = Backbone::from_layers(params.layers.clone(), nonlinearity, input_dim);
        b.inputs = inputs;
        b
    }
}

/// Randomly initialized MLP `dim_in -> hidden.. -> feature_dim`.
pub fn reference_backbone(spec: &ReferenceSpec, seed: u64) -> Result<Backbone> {
    let widths: Vec<usize> = std::iter::once(spec.dim_in).chain(spec.hidden.iter().copied()).chain([spec.feature_dim]).collect();
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::invalid(format!("layer widths must be >= 1, got {widths:?}")));
    }
    let mut rng = keyed_rng(seed, 0, "reference-backbone");
    let layers = widths.windows(2).map(|w| Dense::init(&mut rng, w[0], w[1])).collect();
    Ok(Backbone::from_layers(layers, spec.nonlinearity, spec.dim_in))
}

/// Zero-layer backbone whose features are the stored embeddings.
pub fn frozen_embedding_backbone(table: Arc<EmbeddingTable>) -> Result<Backbone> {
    if table.is_empty() {
        return Err(Error::invalid("embedding table is empty"));
    }
    Backbone::from_layers(vec![], Nonlinearity::Identity, table.dim()).with_inputs(table)
}

/// Trains every backbone layer with a throwaway linear head on all items of
/// `source`, full-batch Adam at `lr`. The head is discarded.
pub fn pretrain_reference(backbone: &Backbone, source: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<Backbone> {
    let table = source
        .embeddings()
        .ok_or_else(|| Error::invalid(format!("source dataset `{}` has no embeddings", source.name())))?;
    let bound = backbone.with_inputs(table.clone())?;
    let (items, labels) = labelled_items(source);
    let x = bound.inputs(&items)?;
    let mut params = bound.params.clone();
    params.head = Head::zeros(source.classes().len(), bound.feature_dim());
    let lr_for = |_k: ParamKind| Some(lr);
    train(&mut params, bound.nonlinearity, &x, &labels, &TrainPlan { epochs, batch_size: None, seed, lr_for: &lr_for })?;
    let mut out = Backbone::from_layers(params.layers, backbone.nonlinearity, backbone.input_dim);
    out.inputs = backbone.inputs.clone();
    Ok(out)
}

/// Training accuracy of a fresh head fit for `epochs` on top of `backbone`;
/// used to check pretraining.
pub fn source_accuracy(backbone: &Backbone, source: &Dataset, head_epochs: usize, lr: f64) -> Result<f64> {
    let table = source.embeddings().ok_or_else(|| Error::invalid("source has no embeddings"))?;
    let bound = backbone.with_inputs(table.clone())?;
    let (items, labels) = labelled_items(source);
    let feats = bound.forward(&items)?;
    let mut params = NetworkParams { layers: vec![], low_rank: vec![], adapters: vec![], head: Head::zeros(source.classes().len(), feats.ncols()) };
    let lr_for = |_k: ParamKind| Some(lr);
    train(&mut params, Nonlinearity::Identity, &feats, &labels, &TrainPlan { epochs: head_epochs, batch_size: None, seed: 0, lr_for: &lr_for })?;
    let pred = argmax_rows(&params.head.logits(&feats));
    Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

fn labelled_items(source: &Dataset) -> (Vec<String>, Vec<usize>) {
    source
        .classes()
        .iter()
        .enumerate()
        .flat_map(|(c, entry)| entry.items.iter().map(move |i| (i.id.clone(), c)))
        .unzip()
}
