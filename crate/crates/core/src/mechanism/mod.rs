//! Instruments for looking inside an adaptation: weight-update norms,
//! representation similarity (linear CKA) and class-name rarity.

mod zipf;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use zipf::{tokenize, zipf_rarity, FrequencyTable, RarityScore, OOV_FLOOR};

use crate::error::{Error, Result};
use crate::model::{Backbone, Snapshot};
use crate::transfer::AdaptedClassifier;

/// How per-tensor norms combine into a block value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    SumOfNorms,
    L2OfConcatenation,
}

/// Assigns every tensor name to a block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockMap {
    pairs: Vec<(String, String)>,
}

impl BlockMap {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Self { pairs }
    }

    /// `layer{l}.*` goes to block `layer{l}`; anything else is its own block.
    pub fn per_layer(snapshot: &Snapshot) -> Self {
        let pairs = snapshot
            .names()
            .into_iter()
            .map(|n| (n.to_string(), n.split('.').next().unwrap_or(n).to_string()))
            .collect();
        Self { pairs }
    }

    pub fn block_of(&self, name: &str) -> Option<&str> {
        self.pairs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaWEntry {
    pub name: String,
    pub l2_norm: f64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaWReport {
    pub entries: Vec<DeltaWEntry>,
    /// Block id and aggregated norm, in order of first appearance.
    pub blocks: Vec<(String, f64)>,
    pub mode: Aggregation,
}

impl DeltaWReport {
    pub fn norm(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.l2_norm)
    }
}

/// `‖after − before‖₂` per tensor, then aggregated per block. `trainable`
/// lists the tensors the method may change; `None` means all of them. A
/// frozen tensor whose values moved is reported as an error.
pub fn delta_w_norms(before: &Snapshot, after: &Snapshot, block_map: &BlockMap, trainable: Option<&[String]>, mode: Aggregation) -> Result<DeltaWReport> {
    if before.names() != after.names() {
        return Err(Error::ShapeMismatch(format!("snapshot names differ: {:?} vs {:?}", before.names(), after.names())));
    }
    let mut entries = Vec::with_capacity(before.len());
    let mut blocks: Vec<(String, f64)> = Vec::new();
    for (b, a) in before.entries().iter().zip(after.entries()) {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch(format!("`{}`: {:?} vs {:?}", b.name, b.shape, a.shape)));
        }
        let block = block_map
            .block_of(&b.name)
            .ok_or_else(|| Error::invalid(format!("block map does not cover `{}`", b.name)))?;
        let sq: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum();
        let is_trainable = trainable.is_none_or(|t| t.iter().any(|n| n == &b.name));
        if !is_trainable && sq != 0.0 {
            return Err(Error::invalid(format!("frozen tensor `{}` changed", b.name)));
        }
        entries.push(DeltaWEntry { name: b.name.clone(), l2_norm: sq.sqrt(), trainable: is_trainable });
        let contribution = match mode {
            Aggregation::SumOfNorms => sq.sqrt(),
            Aggregation::L2OfConcatenation => sq,
        };
        match blocks.iter_mut().find(|(id, _)| id == block) {
            Some((_, v)) => *v += contribution,
            None => blocks.push((block.to_string(), contribution)),
        }
    }
    if mode == Aggregation::L2OfConcatenation {
        blocks.iter_mut().for_each(|(_, v)| *v = v.sqrt());
    }
    Ok(DeltaWReport { entries, blocks, mode })
}

/// Backbone update of an adapted classifier, one block per layer.
pub fn classifier_delta_w(classifier: &AdaptedClassifier, mode: Aggregation) -> Result<DeltaWReport> {
    let before = classifier.initial_snapshot();
    let trainable = classifier.trainable_backbone_names();
    delta_w_norms(before, &classifier.backbone_snapshot(), &BlockMap::per_layer(before), Some(&trainable), mode)
}

fn centered(m: &Array2<f64>) -> Array2<f64> {
    let mean = m.mean_axis(Axis(0)).expect("at least one row");
    m - &mean
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two activation matrices with
/// the same rows: `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)`.
pub fn linear_cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!("{} rows vs {}", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::invalid("CKA needs at least 2 rows"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("activations must be finite"));
    }
    let (xc, yc) = (centered(x), centered(y));
    if frobenius_sq(&xc) == 0.0 || frobenius_sq(&yc) == 0.0 {
        return Err(Error::Degenerate("activations are constant across rows".into()));
    }
    let cross = frobenius_sq(&yc.t().dot(&xc));
    let xx = frobenius_sq(&xc.t().dot(&xc)).sqrt();
    let yy = frobenius_sq(&yc.t().dot(&yc)).sqrt();
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

/// Anything that yields one activation matrix per layer.
pub trait ActivationSource {
    fn layer_activations(&self, items: &[&str]) -> Result<Vec<Array2<f64>>>;
}

impl ActivationSource for Backbone {
    fn layer_activations(&self, items: &[&str]) -> Result<Vec<Array2<f64>>> {
        self.activations(items)
    }
}

impl ActivationSource for AdaptedClassifier {
    fn layer_activations(&self, items: &[&str]) -> Result<Vec<Array2<f64>>> {
        self.activations(items)
    }
}

/// Minimum probe batch for a CKA profile.
pub const MIN_PROBE: usize = 20;

/// Layer-by-layer CKA between two structurally identical networks.
pub fn cka_profile(before: &dyn ActivationSource, after: &dyn ActivationSource, probe_items: &[&str]) -> Result<Vec<f64>> {
    if probe_items.len() < MIN_PROBE {
        return Err(Error::invalid(format!("probe batch needs at least {MIN_PROBE} items, got {}", probe_items.len())));
    }
    let a = before.layer_activations(probe_items)?;
    let b = after.layer_activations(probe_items)?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} layers vs {}", a.len(), b.len())));
    }
    a.iter().zip(&b).map(|(x, y)| linear_cka(x, y)).collect()
}
