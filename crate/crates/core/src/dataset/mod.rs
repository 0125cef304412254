//! Dataset declarations: manifests, class rosters, base/novel splits and
//! item sources.
//!
//! A manifest is a TOML document. Classes appear in `[[classes]]` tables
//! with their items inline; large datasets may instead list items in a flat
//! `[[items]]` table keyed by class id. Both forms may be mixed. Parent to
//! child class edges go in `[[hierarchy]]`.
//!
//! ```toml
//! name = "toy"
//! notes = "two classes"
//!
//! [item_source]
//! kind = "embedding-file"
//! path = "toy.fteb"
//!
//! [[classes]]
//! id = "cat"
//! display_name = "tabby cat"
//! items = [{ id = "cat/0" }, { id = "cat/1", group = "clip-7" }]
//!
//! [[items]]
//! id = "dog/0"
//! class = "dog"
//! ```

mod bundled;
mod embedding;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use bundled::{bundled_manifest, bundled_manifests, BUNDLED_SPLITS};
pub use embedding::{load_embeddings, EmbeddingTable};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// One item of a class, optionally tagged with a group (e.g. its source clip).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRef {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl ItemRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), group: None }
    }

    pub fn grouped(id: impl Into<String>, group: impl Into<String>) -> Self {
        Self { id: id.into(), group: Some(group.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<ItemRef>,
}

/// Flat item row, attached to `class` at registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAssignment {
    pub id: String,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyEdge {
    pub parent: String,
    pub child: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ItemSource {
    EmbeddingFile { path: PathBuf },
    ImageFolder { root: PathBuf },
    Synthetic { spec: SyntheticSpec, seed: u64 },
    /// Roster only; items are supplied later by the user.
    MetadataOnly,
}

/// Disjoint partition of a dataset's classes, each side in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

impl ClassSplit {
    pub fn sizes(&self) -> (usize, usize) {
        (self.base.len(), self.novel.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub item_source: ItemSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<ClassSplit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<ItemAssignment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hierarchy: Vec<HierarchyEdge>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidManifest {
            name: self.name.clone(),
            reason: e.to_string(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidManifest {
            name: "<unparsed>".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Validated parent/child forest over class ids.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    children: BTreeMap<String, Vec<String>>,
    leaves_below: BTreeMap<String, Vec<String>>,
}

impl Hierarchy {
    fn build(name: &str, edges: &[HierarchyEdge], classes: &HashMap<String, usize>) -> Result<Self> {
        let bad = |reason: String| Error::InvalidManifest { name: name.to_string(), reason };
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        for e in edges {
            if e.parent == e.child {
                return Err(bad(format!("hierarchy cycle at `{}`", e.parent)));
            }
            if let Some(prev) = parent_of.insert(&e.child, &e.parent) {
                return Err(bad(format!("`{}` has two parents (`{prev}`, `{}`)", e.child, e.parent)));
            }
            if classes.contains_key(&e.parent) {
                return Err(bad(format!("class `{}` cannot have children", e.parent)));
            }
            children.entry(e.parent.clone()).or_default().push(e.child.clone());
        }
        // Every node must reach a root without revisiting.
        for start in parent_of.keys() {
            let mut seen = HashSet::new();
            let mut cur: &str = start;
            while let Some(&p) = parent_of.get(cur) {
                if !seen.insert(cur) {
                    return Err(bad(format!("hierarchy cycle through `{start}`")));
                }
                cur = p;
            }
        }
        for node in parent_of.keys() {
            if !children.contains_key(*node) && !classes.contains_key(*node) {
                return Err(bad(format!("hierarchy leaf `{node}` is not a class")));
            }
        }
        let mut leaves_below = BTreeMap::new();
        for node in children.keys() {
            let mut leaves = Vec::new();
            let mut stack = vec![node.as_str()];
            while let Some(n) = stack.pop() {
                match children.get(n) {
                    Some(kids) => stack.extend(kids.iter().rev().map(String::as_str)),
                    None => leaves.push(n.to_string()),
                }
            }
            // Manifest order keeps sampling stable.
            leaves.sort_by_key(|c| classes[c]);
            leaves_below.insert(node.clone(), leaves);
        }
        Ok(Self { children, leaves_below })
    }

    /// Internal nodes in lexicographic order.
    pub fn internal_nodes(&self) -> impl Iterator<Item = &str> {
        self.children.keys().map(String::as_str)
    }

    pub fn children(&self, node: &str) -> &[String] {
        self.children.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Class leaves below `node`, in manifest order.
    pub fn leaves_below(&self, node: &str) -> &[String] {
        self.leaves_below.get(node).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    classes: Vec<ClassEntry>,
    class_index: HashMap<String, usize>,
    hierarchy: Option<Hierarchy>,
    embeddings: Option<Arc<EmbeddingTable>>,
}

/// Shared, immutable view of a registered dataset.
pub type DatasetHandle = Arc<Dataset>;

impl Dataset {
    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Classes in manifest order, with flat item rows merged in.
    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.id.clone()).collect()
    }

    pub fn class(&self, id: &str) -> Option<&ClassEntry> {
        self.class_index.get(id).map(|&i| &self.classes[i])
    }

    pub fn class_position(&self, id: &str) -> Option<usize> {
        self.class_index.get(id).copied()
    }

    pub fn n_items(&self) -> usize {
        self.classes.iter().map(|c| c.items.len()).sum()
    }

    pub fn hierarchy(&self) -> Option<&Hierarchy> {
        self.hierarchy.as_ref()
    }

    pub fn embeddings(&self) -> Option<&Arc<EmbeddingTable>> {
        self.embeddings.as_ref()
    }

    pub fn has_groups(&self) -> bool {
        self.classes.iter().flat_map(|c| &c.items).any(|i| i.group.is_some())
    }

    /// Split declared in the manifest, if any.
    pub fn declared_split(&self) -> Option<&ClassSplit> {
        self.manifest.split.as_ref()
    }
}

/// Validates a manifest and resolves it into a dataset handle.
pub fn register_dataset(manifest: DatasetManifest) -> Result<DatasetHandle> {
    build_dataset(manifest, None)
}

/// As [`register_dataset`], attaching an embedding table that must cover every item.
pub fn register_with_embeddings(manifest: DatasetManifest, table: EmbeddingTable) -> Result<DatasetHandle> {
    build_dataset(manifest, Some(Arc::new(table)))
}

fn build_dataset(manifest: DatasetManifest, embeddings: Option<Arc<EmbeddingTable>>) -> Result<DatasetHandle> {
    let name = manifest.name.clone();
    let bad = |reason: String| Error::InvalidManifest { name: name.clone(), reason };
    if name.trim().is_empty() {
        return Err(bad("empty dataset name".into()));
    }
    let mut classes = manifest.classes.clone();
    let mut class_index = HashMap::new();
    for (i, c) in classes.iter().enumerate() {
        if c.display_name.trim().is_empty() {
            return Err(bad(format!("class `{}` has an empty display name", c.id)));
        }
        if class_index.insert(c.id.clone(), i).is_some() {
            return Err(bad(format!("duplicate class id `{}`", c.id)));
        }
    }
    for item in &manifest.items {
        let &pos = class_index
            .get(&item.class)
            .ok_or_else(|| bad(format!("item `{}` references unknown class `{}`", item.id, item.class)))?;
        classes[pos].items.push(ItemRef { id: item.id.clone(), group: item.group.clone() });
    }
    let mut seen_items = HashSet::new();
    for item in classes.iter().flat_map(|c| &c.items) {
        if !seen_items.insert(item.id.as_str()) {
            return Err(bad(format!("duplicate item id `{}`", item.id)));
        }
    }
    if let Some(split) = &manifest.split {
        check_split(split, &class_index).map_err(bad)?;
    }
    let hierarchy = if manifest.hierarchy.is_empty() {
        None
    } else {
        Some(Hierarchy::build(&name, &manifest.hierarchy, &class_index)?)
    };
    if let Some(table) = &embeddings {
        if let Some(missing) = classes.iter().flat_map(|c| &c.items).find(|i| !table.contains(&i.id)) {
            return Err(bad(format!("item `{}` has no embedding row", missing.id)));
        }
    }
    Ok(Arc::new(Dataset { manifest, classes, class_index, hierarchy, embeddings }))
}

fn check_split(split: &ClassSplit, classes: &HashMap<String, usize>) -> std::result::Result<(), String> {
    let base: BTreeSet<&str> = split.base.iter().map(String::as_str).collect();
    let novel: BTreeSet<&str> = split.novel.iter().map(String::as_str).collect();
    if base.len() != split.base.len() || novel.len() != split.novel.len() {
        return Err("split lists a class twice".into());
    }
    if let Some(c) = base.intersection(&novel).next() {
        return Err(format!("class `{c}` is both base and novel"));
    }
    if let Some(c) = base.iter().chain(&novel).find(|c| !classes.contains_key(**c)) {
        return Err(format!("split references unknown class `{c}`"));
    }
    if base.len() + novel.len() != classes.len() {
        return Err("split does not cover every class".into());
    }
    Ok(())
}

/// Name-keyed collection of registered datasets.
#[derive(Debug, Default, Clone)]
pub struct DatasetRegistry {
    datasets: BTreeMap<String, DatasetHandle>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, manifest: DatasetManifest) -> Result<DatasetHandle> {
        if self.datasets.contains_key(&manifest.name) {
            return Err(Error::DuplicateDataset(manifest.name));
        }
        let handle = register_dataset(manifest)?;
        self.datasets.insert(handle.name().to_string(), handle.clone());
        Ok(handle)
    }

    /// Adds an already-built handle (e.g. a generated synthetic dataset).
    pub fn insert(&mut self, handle: DatasetHandle) -> Result<DatasetHandle> {
        if self.datasets.contains_key(handle.name()) {
            return Err(Error::DuplicateDataset(handle.name().to_string()));
        }
        self.datasets.insert(handle.name().to_string(), handle.clone());
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Result<&DatasetHandle> {
        self.datasets.get(name).ok_or_else(|| Error::UnknownDataset(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }
}

/// Random base/novel partition with `round(ratio * n)` base classes, clamped
/// so both sides are nonempty. Each side is returned in manifest order.
pub fn split_base_novel(handle: &Dataset, ratio: f64, seed: u64) -> Result<ClassSplit> {
    let n = handle.classes.len();
    if n < 2 {
        return Err(Error::SplitTooSmall(format!("`{}` has {n} class(es); need 2 to split", handle.name())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n_base = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, 0, &format!("split/{}", handle.name())));
    let mut is_base = vec![false; n];
    for &i in &order[..n_base] {
        is_base[i] = true;
    }
    let (mut base, mut novel) = (Vec::with_capacity(n_base), Vec::with_capacity(n - n_base));
    for (c, b) in handle.classes.iter().zip(is_base) {
        if b { base.push(c.id.clone()) } else { novel.push(c.id.clone()) }
    }
    Ok(ClassSplit { base, novel })
}
