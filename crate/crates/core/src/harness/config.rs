//! Run configuration files (TOML).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic_dataset, load_embeddings, split_base_novel, ClassSplit, register_dataset, register_with_embeddings, DatasetHandle, DatasetManifest, EmbeddingTable, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hpe::{build_grid, ConfigGrid, Fusion, GridShape};
use crate::model::{frozen_embedding_backbone, pretrain_reference, reference_backbone, Backbone, Nonlinearity, ReferenceSpec};
use crate::sampler::{SplitTag, TaskStreamSpec};
use crate::transfer::{AdaptOptions, HyperConfig, Method};

fn default_n_tasks() -> u64 {
    600
}
fn default_ratio() -> f64 {
    0.8
}
fn default_chunk() -> usize {
    16
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default)]
    pub run_seed: u64,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: u64,
    /// JSONL store; relative paths resolve against the config file.
    pub output: PathBuf,
    #[serde(default)]
    pub split_tag: SplitTag,
    /// Base share for datasets without a declared split.
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub datasets: Vec<DatasetConfig>,
    pub backbone: BackboneConfig,
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub record: RecordOptions,
    #[serde(default)]
    pub fusion: Fusion,
    /// Tasks evaluated between store flushes.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub way_min: usize,
    pub way_max: usize,
    pub shot_cap: usize,
    #[serde(default)]
    pub fixed_shots: Option<usize>,
    pub query_per_class: usize,
    #[serde(default)]
    pub hierarchical: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { way_min: 2, way_max: 15, shot_cap: 10, fixed_shots: None, query_per_class: 15, hierarchical: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub items_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub groups_per_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// `false` for datasets used only for pretraining.
    #[serde(default = "default_true")]
    pub evaluate: bool,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// Display names used for rarity scoring, in class order.
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Trainable MLP over the dataset embeddings.
    Reference,
    /// Embeddings used as features directly; linear probe only.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pretrain_on: Option<String>,
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub method: Method,
    #[serde(default)]
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub epochs: usize,
    pub grid: String,
    pub spacing: f64,
}

impl AlgorithmConfig {
    pub fn center(&self) -> HyperConfig {
        HyperConfig::new(self.method, self.lr_backbone, self.lr_head, self.epochs)
    }

    pub fn build_grid(&self) -> Result<ConfigGrid> {
        build_grid(&self.center(), self.grid.parse::<GridShape>()?, self.spacing)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default)]
    pub lora_alpha: Option<f64>,
    #[serde(default)]
    pub adapter_width: Option<usize>,
}

impl AdaptConfig {
    pub fn options(&self, seed: u64) -> AdaptOptions {
        let d = AdaptOptions::default();
        AdaptOptions {
            seed,
            batch_size: self.batch_size,
            lora_rank: self.lora_rank.unwrap_or(d.lora_rank),
            lora_alpha: self.lora_alpha,
            adapter_width: self.adapter_width,
        }
    }
}

/// Optional extras persisted in each task record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordOptions {
    /// Nearest-class-mean accuracy on frozen features.
    #[serde(default = "default_true")]
    pub baseline: bool,
    /// Adjusted Zipf score of the dataset's class names.
    #[serde(default = "default_true")]
    pub rarity: bool,
    /// CKA profile and ΔW of a fit at the grid center.
    #[serde(default)]
    pub mechanism: bool,
    /// Full per-config and fused query logits.
    #[serde(default)]
    pub save_logits: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self { baseline: true, rarity: true, mechanism: false, save_logits: false }
    }
}

/// A dataset ready for sampling plus the backbone bound to its inputs.
pub struct PreparedDataset {
    pub handle: DatasetHandle,
    pub split: Option<ClassSplit>,
    pub backbone: Backbone,
    pub display_names: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output);
        for d in &mut cfg.datasets {
            if let Some(p) = d.manifest.as_mut() {
                resolve(p);
            }
            if let Some(p) = d.embeddings.as_mut() {
                resolve(p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run_id.is_empty() {
            return bad("run_id must not be empty".into());
        }
        if self.n_tasks < 1 {
            return bad("n_tasks must be >= 1".into());
        }
        if self.chunk_size < 1 {
            return bad("chunk_size must be >= 1".into());
        }
        if self.datasets.is_empty() || !self.datasets.iter().any(|d| d.evaluate) {
            return bad("at least one dataset must be evaluated".into());
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return bad(format!("dataset `{}` listed twice", d.name));
            }
            match (&d.synthetic, &d.manifest) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => return bad(format!("dataset `{}` needs exactly one of `synthetic` or `manifest`", d.name)),
            }
        }
        if self.algorithms.is_empty() {
            return bad("at least one algorithm is required".into());
        }
        let mut methods = HashSet::new();
        for a in &self.algorithms {
            if !methods.insert(a.method) {
                return bad(format!("algorithm `{}` listed twice", a.method));
            }
            a.build_grid().map_err(|e| Error::Config(format!("algorithm `{}`: {e}", a.method)))?;
        }
        if let Some(src) = &self.backbone.pretrain_on {
            if !names.contains(src.as_str()) {
                return bad(format!("pretrain_on names unknown dataset `{src}`"));
            }
            if self.backbone.kind == BackboneKind::Frozen {
                return bad("a frozen backbone cannot be pretrained".into());
            }
        }
        self.stream_spec("x").validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn stream_spec(&self, dataset: &str) -> TaskStreamSpec {
        TaskStreamSpec {
            dataset: dataset.to_string(),
            split_tag: self.split_tag,
            n_tasks: self.n_tasks,
            run_seed: self.run_seed,
            way_range: (self.sampling.way_min, self.sampling.way_max),
            shot_cap: self.sampling.shot_cap,
            fixed_shots: self.sampling.fixed_shots,
            query_per_class: self.sampling.query_per_class,
            hierarchical: self.sampling.hierarchical,
        }
    }

    fn load_dataset(&self, d: &DatasetConfig) -> Result<DatasetHandle> {
        let handle = if let Some(s) = &d.synthetic {
            let spec = SyntheticSpec {
                noise_std: s.noise_std.unwrap_or(1.0),
                groups_per_class: s.groups_per_class,
                ..SyntheticSpec::new(d.name.clone(), s.n_classes, s.items_per_class, s.dim, s.separation)
            };
            generate_synthetic_dataset(&spec, s.seed)?
        } else {
            let path = d.manifest.as_ref().expect("validated");
            let mut manifest = DatasetManifest::load(path)?;
            manifest.name = d.name.clone();
            match &d.embeddings {
                Some(e) => register_with_embeddings(manifest, load_embeddings(e)?)?,
                None => register_dataset(manifest)?,
            }
        };
        let Some(names) = &d.class_names else {
            return Ok(handle);
        };
        if names.len() != handle.classes().len() {
            return Err(Error::Config(format!("dataset `{}`: {} class_names for {} classes", d.name, names.len(), handle.classes().len())));
        }
        let mut manifest = handle.manifest().clone();
        for (c, n) in manifest.classes.iter_mut().zip(names) {
            c.display_name = n.clone();
        }
        match handle.embeddings() {
            Some(t) => register_with_embeddings(manifest, EmbeddingTable::clone(t)),
            None => register_dataset(manifest),
        }
    }

    /// The class split used for `handle` under this config's split tag.
    pub fn split_for(&self, handle: &DatasetHandle) -> Result<Option<ClassSplit>> {
        Ok(match handle.declared_split() {
            Some(s) => Some(s.clone()),
            None if self.split_tag == SplitTag::Base => None,
            None => Some(split_base_novel(handle, self.split_ratio, self.split_seed)?),
        })
    }

    /// Loads one configured dataset and its split, without building a backbone.
    pub fn load_for_sampling(&self, name: &str) -> Result<(DatasetHandle, Option<ClassSplit>)> {
        let d = self.datasets.iter().find(|d| d.name == name).ok_or_else(|| Error::UnknownDataset(name.to_string()))?;
        let handle = self.load_dataset(d)?;
        let split = self.split_for(&handle)?;
        Ok((handle, split))
    }

    /// Builds every evaluated dataset and a backbone bound to each.
    pub fn prepare(&self) -> Result<Vec<PreparedDataset>> {
        let loaded: Vec<(DatasetConfig, DatasetHandle)> =
            self.datasets.iter().map(|d| Ok((d.clone(), self.load_dataset(d)?))).collect::<Result<_>>()?;
        let base = self.base_backbone(&loaded)?;
        let mut out = Vec::new();
        for (d, handle) in loaded.into_iter().filter(|(d, _)| d.evaluate) {
            let table = handle
                .embeddings()
                .ok_or_else(|| Error::Config(format!("dataset `{}` has no embeddings to feed the backbone", d.name)))?
                .clone();
            let backbone = match &base {
                Some(b) => b.with_inputs(table)?,
                None => frozen_embedding_backbone(table)?,
            };
            let split = self.split_for(&handle)?;
            let display_names = handle.classes().iter().map(|c| c.display_name.clone()).collect();
            out.push(PreparedDataset { handle, split, backbone, display_names });
        }
        Ok(out)
    }

    fn base_backbone(&self, loaded: &[(DatasetConfig, DatasetHandle)]) -> Result<Option<Backbone>> {
        let b = &self.backbone;
        if b.kind == BackboneKind::Frozen {
            return Ok(None);
        }
        let dims: HashSet<usize> = loaded.iter().filter_map(|(_, h)| h.embeddings().map(|t| t.dim())).collect();
        if dims.len() != 1 {
            return Err(Error::Config(format!("all datasets must share one embedding dimension, found {dims:?}")));
        }
        let dim_in = *dims.iter().next().expect("one dim");
        let spec = ReferenceSpec {
            dim_in,
            hidden: b.hidden.clone(),
            feature_dim: b.feature_dim.unwrap_or(dim_in),
            nonlinearity: b.nonlinearity,
        };
        let mut backbone = reference_backbone(&spec, b.seed)?;
        if let Some(src) = &b.pretrain_on {
            let (_, source) = loaded.iter().find(|(d, _)| &d.name == src).expect("validated");
            backbone = pretrain_reference(&backbone, source, b.pretrain_epochs, b.pretrain_lr.unwrap_or(1e-2), b.seed)?;
        }
        Ok(Some(backbone))
    }
}
