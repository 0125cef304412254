//! Episodic task sampling.
//!
//! A task is a pure function of `(dataset, split, spec, task_index)`. Each
//! random decision draws from its own counter-keyed stream (see
//! [`crate::rng`]), so task `i` never depends on whether tasks `< i` were
//! sampled, and parallel enumeration equals serial enumeration bit for bit.
//!
//! Per task:
//! 1. ways uniform on `[lo, min(hi, pool size)]`
//! 2. classes uniformly without replacement from the pool
//! 3. shots per class uniform on `1..=min(shot_cap, eligible - 1)`, drawn
//!    independently per class (or a fixed count in balanced mode)
//! 4. up to `query_per_class` query items from what remains
//!
//! When items carry group ids, at most one item per group enters a task.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassSplit, Dataset};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    #[default]
    Base,
    Novel,
    BaseToNovel,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitTag::Base),
            "novel" => Ok(SplitTag::Novel),
            "base-to-novel" => Ok(SplitTag::BaseToNovel),
            other => Err(Error::invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

/// `(item id, label)` pair; serializes as a two-element array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem(pub String, pub usize);

impl LabeledItem {
    pub fn item(&self) -> &str {
        &self.0
    }

    pub fn label(&self) -> usize {
        self.1
    }
}

/// One few-shot episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_index: u64,
    pub dataset: String,
    pub split_tag: SplitTag,
    pub run_seed: u64,
    /// Hierarchy node the classes were drawn under, for hierarchical sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    /// Support classes; label `k` is `class_ids[k]`.
    pub class_ids: Vec<String>,
    /// Query classes when they differ from the support classes (base-to-novel).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_class_ids: Option<Vec<String>>,
    pub support: Vec<LabeledItem>,
    pub query: Vec<LabeledItem>,
}

impl Task {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    /// Support count per label.
    pub fn shots(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_way()];
        for s in &self.support {
            counts[s.1] += 1;
        }
        counts
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.1).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.1).collect()
    }

    /// Canonical one-line JSON form.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("task serialization cannot fail")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Parameters of a task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStreamSpec {
    pub dataset: String,
    #[serde(default)]
    pub split_tag: SplitTag,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: u64,
    #[serde(default)]
    pub run_seed: u64,
    #[serde(default = "default_way_range")]
    pub way_range: (usize, usize),
    #[serde(default = "default_shot_cap")]
    pub shot_cap: usize,
    /// Class-balanced mode: every class gets exactly this many shots.
    #[serde(default)]
    pub fixed_shots: Option<usize>,
    #[serde(default = "default_query")]
    pub query_per_class: usize,
    #[serde(default)]
    pub hierarchical: bool,
}

fn default_n_tasks() -> u64 {
    600
}
fn default_way_range() -> (usize, usize) {
    (2, 15)
}
fn default_shot_cap() -> usize {
    10
}
fn default_query() -> usize {
    15
}

impl TaskStreamSpec {
    pub fn new(dataset: impl Into<String>, run_seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            split_tag: SplitTag::Base,
            n_tasks: default_n_tasks(),
            run_seed,
            way_range: default_way_range(),
            shot_cap: default_shot_cap(),
            fixed_shots: None,
            query_per_class: default_query(),
            hierarchical: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.way_range;
        if lo < 2 || hi < lo {
            return Err(Error::invalid(format!("way range [{lo}, {hi}] must satisfy 2 <= lo <= hi")));
        }
        if self.shot_cap < 1 {
            return Err(Error::invalid("shot_cap must be >= 1"));
        }
        if self.fixed_shots == Some(0) {
            return Err(Error::invalid("fixed_shots must be >= 1"));
        }
        if self.n_tasks < 1 {
            return Err(Error::invalid("n_tasks must be >= 1"));
        }
        if self.query_per_class < 1 {
            return Err(Error::invalid("query_per_class must be >= 1"));
        }
        Ok(())
    }
}

/// Class pools for support and query sides of a split tag.
fn pools(handle: &Dataset, split: Option<&ClassSplit>, tag: SplitTag) -> Result<(Vec<String>, Option<Vec<String>>)> {
    let all = || handle.class_ids();
    Ok(match (tag, split) {
        (SplitTag::Base, None) => (all(), None),
        (SplitTag::Base, Some(s)) => (s.base.clone(), None),
        (SplitTag::Novel, Some(s)) => (s.novel.clone(), None),
        (SplitTag::BaseToNovel, Some(s)) => (s.base.clone(), Some(s.novel.clone())),
        (t, None) => {
            return Err(Error::invalid(format!("split tag {t:?} needs a base/novel split")));
        }
    })
}

/// Items of `class` usable in a task: one per group, in manifest order.
fn eligible_count(handle: &Dataset, class: &str) -> Result<usize> {
    let entry = handle
        .class(class)
        .ok_or_else(|| Error::invalid(format!("split references unknown class `{class}`")))?;
    let mut groups = HashSet::new();
    Ok(entry
        .items
        .iter()
        .filter(|i| match &i.group {
            Some(g) => groups.insert(g.as_str()),
            None => true,
        })
        .count())
}

struct Draw<'a> {
    handle: &'a Dataset,
    spec: &'a TaskStreamSpec,
    index: u64,
    used_groups: HashSet<String>,
}

impl<'a> Draw<'a> {
    fn tag(&self, purpose: &str) -> String {
        format!("{}/{}", self.spec.dataset, purpose)
    }

    fn draw_ways(&self, pool_size: usize) -> Result<usize> {
        let (lo, hi) = self.spec.way_range;
        if pool_size < lo {
            return Err(Error::SplitTooSmall(format!(
                "{pool_size} classes available, way range needs at least {lo}"
            )));
        }
        let hi = hi.min(pool_size);
        Ok(keyed_rng(self.spec.run_seed, self.index, &self.tag("ways")).random_range(lo..=hi))
    }

    fn draw_classes(&self, pool: &[String], n: usize, purpose: &str) -> Vec<String> {
        let mut rng = keyed_rng(self.spec.run_seed, self.index, &self.tag(purpose));
        index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect()
    }

    /// Shuffled items of `class` with at most one per group, skipping groups
    /// already used by this task.
    fn take_items(&mut self, class: &str, n: usize) -> Vec<String> {
        let entry = self.handle.class(class).expect("pool classes are validated");
        let mut order: Vec<usize> = (0..entry.items.len()).collect();
        order.shuffle(&mut keyed_rng(self.spec.run_seed, self.index, &self.tag(&format!("items/{class}"))));
        let mut out = Vec::with_capacity(n);
        for i in order {
            if out.len() == n {
                break;
            }
            let item = &entry.items[i];
            if let Some(g) = &item.group {
                if !self.used_groups.insert(g.clone()) {
                    continue;
                }
            }
            out.push(item.id.clone());
        }
        out
    }
}

fn sample_with_pool(
    handle: &Dataset,
    spec: &TaskStreamSpec,
    task_index: u64,
    support_pool: &[String],
    query_pool: Option<&[String]>,
    node: Option<String>,
) -> Result<Task> {
    let mut draw = Draw { handle, spec, index: task_index, used_groups: HashSet::new() };
    let pool_size = query_pool.map_or(support_pool.len(), |q| q.len().min(support_pool.len()));
    let n_way = draw.draw_ways(pool_size)?;
    let class_ids = draw.draw_classes(support_pool, n_way, "classes");
    let query_class_ids = query_pool.map(|q| draw.draw_classes(q, n_way, "query-classes"));

    let mut shot_rng = keyed_rng(spec.run_seed, task_index, &draw.tag("shots"));
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (label, class) in class_ids.iter().enumerate() {
        let available = eligible_count(handle, class)?;
        let needed = if query_pool.is_some() { 1 } else { 2 };
        if available < needed {
            return Err(Error::ClassTooSmall { class: class.clone(), available });
        }
        let max_shots = if query_pool.is_some() { available } else { available - 1 };
        let shots = match spec.fixed_shots {
            Some(k) if k > max_shots => {
                return Err(Error::ClassTooSmall { class: class.clone(), available });
            }
            Some(k) => k,
            None => shot_rng.random_range(1..=spec.shot_cap.min(max_shots)),
        };
        let q = if query_pool.is_some() { 0 } else { spec.query_per_class.min(available - shots) };
        let items = draw.take_items(class, shots + q);
        if items.len() < shots + 1.min(q) {
            return Err(Error::ClassTooSmall { class: class.clone(), available: items.len() });
        }
        let (s_items, q_items) = items.split_at(shots.min(items.len()));
        support.extend(s_items.iter().map(|id| LabeledItem(id.clone(), label)));
        query.extend(q_items.iter().map(|id| LabeledItem(id.clone(), label)));
    }
    if let Some(qc) = &query_class_ids {
        for (label, class) in qc.iter().enumerate() {
            let available = eligible_count(handle, class)?;
            if available < 1 {
                return Err(Error::ClassTooSmall { class: class.clone(), available });
            }
            let items = draw.take_items(class, spec.query_per_class.min(available));
            if items.is_empty() {
                return Err(Error::ClassTooSmall { class: class.clone(), available: 0 });
            }
            query.extend(items.into_iter().map(|id| LabeledItem(id, label)));
        }
    }
    Ok(Task {
        task_index,
        dataset: spec.dataset.clone(),
        split_tag: spec.split_tag,
        run_seed: spec.run_seed,
        node,
        class_ids,
        query_class_ids,
        support,
        query,
    })
}

/// Samples task `task_index` of the stream described by `spec`.
pub fn sample_task(handle: &Dataset, split: Option<&ClassSplit>, spec: &TaskStreamSpec, task_index: u64) -> Result<Task> {
    spec.validate()?;
    let (support_pool, query_pool) = pools(handle, split, spec.split_tag)?;
    sample_with_pool(handle, spec, task_index, &support_pool, query_pool.as_deref(), None)
}

/// Samples a task whose classes all descend from one internal hierarchy node.
///
/// Nodes with at least `way_range.0` leaf classes inside the support pool
/// are eligible; one is drawn uniformly, then the task is sampled from its
/// leaves.
pub fn sample_task_hierarchical(
    handle: &Dataset,
    split: Option<&ClassSplit>,
    spec: &TaskStreamSpec,
    task_index: u64,
) -> Result<Task> {
    spec.validate()?;
    let hierarchy = handle
        .hierarchy()
        .ok_or_else(|| Error::invalid(format!("dataset `{}` has no hierarchy", handle.name())))?;
    let (support_pool, query_pool) = pools(handle, split, spec.split_tag)?;
    let in_pool: HashSet<&str> = support_pool.iter().map(String::as_str).collect();
    let lo = spec.way_range.0;
    let eligible: Vec<(&str, Vec<String>)> = hierarchy
        .internal_nodes()
        .map(|n| {
            let leaves: Vec<String> =
                hierarchy.leaves_below(n).iter().filter(|c| in_pool.contains(c.as_str())).cloned().collect();
            (n, leaves)
        })
        .filter(|(_, leaves)| leaves.len() >= lo)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleNode { min_leaves: lo });
    }
    let mut rng = keyed_rng(spec.run_seed, task_index, &format!("{}/node", spec.dataset));
    let (node, leaves) = &eligible[rng.random_range(0..eligible.len())];
    sample_with_pool(handle, spec, task_index, leaves, query_pool.as_deref(), Some(node.to_string()))
}

fn sample_indexed(handle: &Dataset, split: Option<&ClassSplit>, spec: &TaskStreamSpec, i: u64) -> Result<Task> {
    let r = if spec.hierarchical {
        sample_task_hierarchical(handle, split, spec, i)
    } else {
        sample_task(handle, split, spec, i)
    };
    r.map_err(|e| Error::TaskSampling { index: i, source: Box::new(e) })
}

/// Lazy iterator over tasks `0..n_tasks`.
pub struct TaskStream<'a> {
    handle: &'a Dataset,
    split: Option<&'a ClassSplit>,
    spec: &'a TaskStreamSpec,
    next: u64,
}

impl<'a> TaskStream<'a> {
    /// Task `i` of this stream, independent of iteration state.
    pub fn task_at(&self, i: u64) -> Result<Task> {
        sample_indexed(self.handle, self.split, self.spec, i)
    }
}

impl Iterator for TaskStream<'_> {
    type Item = Result<Task>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.spec.n_tasks {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.task_at(i))
    }
}

pub fn task_stream<'a>(handle: &'a Dataset, split: Option<&'a ClassSplit>, spec: &'a TaskStreamSpec) -> TaskStream<'a> {
    TaskStream { handle, split, spec, next: 0 }
}

/// Materializes the whole stream, optionally in parallel.
pub fn sample_tasks(handle: &Dataset, split: Option<&ClassSplit>, spec: &TaskStreamSpec, exec: Execution) -> Result<Vec<Task>> {
    spec.validate()?;
    map_range(spec.n_tasks as usize, exec, |i| sample_indexed(handle, split, spec, i as u64))
        .into_iter()
        .collect()
}
