//! The benchmark loop: every evaluated dataset × algorithm × task, appended
//! to the store in canonical order and resumable after interruption.

use std::collections::HashSet;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::harness::config::{AlgorithmConfig, PreparedDataset, RunConfig};
use crate::harness::store::{GridProvenance, MechanismRecord, Record, SavedLogits, StoreWriter, SweepRecord, TaskRecord, SCHEMA_VERSION};
use crate::hpe::{run_hpe, sweep_hyper_surface, ConfigGrid, HpeOptions, HyperParam};
use crate::mechanism::{cka_profile, classifier_delta_w, zipf_rarity, Aggregation, FrequencyTable, MIN_PROBE};
use crate::model::Backbone;
use crate::rng::derive_seed;
use crate::sampler::{sample_task, LabeledItem, SplitTag, Task};
use crate::transfer::{accuracy, fit, nearest_centroid_logits};

/// What a call to [`run_benchmark`] did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub written: usize,
    pub skipped: usize,
    /// A corrupted trailing line was dropped from the store before resuming.
    pub repaired: bool,
}

fn hpe_options(cfg: &RunConfig, dataset: &str, alg: &AlgorithmConfig, exec: Execution) -> HpeOptions {
    let seed = derive_seed(cfg.run_seed, 0, &format!("adapt/{dataset}/{}", alg.method));
    HpeOptions { adapt: cfg.adapt.options(seed), exec, fusion: cfg.fusion }
}

fn to_rows(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

struct TaskJob<'a> {
    cfg: &'a RunConfig,
    prepared: &'a PreparedDataset,
    alg: &'a AlgorithmConfig,
    grid: &'a ConfigGrid,
    opts: HpeOptions,
    rarity: Option<f64>,
}

impl TaskJob<'_> {
    fn run(&self, task: &Task) -> Result<TaskRecord> {
        let start = Instant::now();
        let backbone = &self.prepared.backbone;
        let res = run_hpe(backbone, task, self.grid, &self.opts).map_err(|e| Error::TaskSampling { index: task.task_index, source: Box::new(e) })?;
        let baseline_accuracy = if self.cfg.record.baseline {
            let logits = nearest_centroid_logits(backbone, &task.support, task.n_way(), &task.query)?;
            Some(accuracy(&logits, &task.query_labels()))
        } else {
            None
        };
        let mechanism = if self.cfg.record.mechanism { self.mechanism(backbone, task)? } else { None };
        let logits = self.cfg.record.save_logits.then(|| SavedLogits {
            per_config: res.per_config_logits.iter().map(|l| l.as_ref().map(to_rows).unwrap_or_default()).collect(),
            fused: to_rows(&res.fused_logits),
            labels: res.labels.clone(),
        });
        Ok(TaskRecord {
            schema_version: SCHEMA_VERSION,
            run_id: self.cfg.run_id.clone(),
            run_seed: self.cfg.run_seed,
            dataset: task.dataset.clone(),
            split_tag: task.split_tag,
            task_index: task.task_index,
            algorithm: self.alg.method.to_string(),
            n_way: task.n_way(),
            shots: task.shots(),
            n_query: task.query.len(),
            grid: GridProvenance {
                center: self.grid.center,
                shape: self.grid.shape.to_string(),
                spacing: self.grid.spacing,
                configs: self.grid.configs.clone(),
            },
            per_config_accuracy: res.per_config_accuracy,
            failed_configs: res.failed,
            hpe_accuracy: res.hpe_accuracy,
            baseline_accuracy,
            dataset_rarity: self.rarity,
            mechanism,
            logits,
            wall_time_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// CKA and ΔW of one fit at the grid center, probing on the query set
    /// (or support plus query when the query alone is too small).
    fn mechanism(&self, backbone: &Backbone, task: &Task) -> Result<Option<MechanismRecord>> {
        let mut probe: Vec<&str> = task.query.iter().map(LabeledItem::item).collect();
        if probe.len() < MIN_PROBE {
            probe = task.support.iter().chain(&task.query).map(LabeledItem::item).collect();
        }
        if probe.len() < MIN_PROBE {
            log::debug!("task {}: probe of {} items is too small for CKA", task.task_index, probe.len());
            return Ok(None);
        }
        let adapt = crate::transfer::AdaptOptions {
            seed: derive_seed(self.opts.adapt.seed, task.task_index, "adapt"),
            ..self.opts.adapt.clone()
        };
        let clf = match fit(backbone, &task.support, &task.class_ids, &self.grid.center, &adapt) {
            Ok(c) => c,
            Err(Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let cka = match cka_profile(backbone, &clf, &probe) {
            Ok(p) => p,
            Err(Error::Degenerate(why)) => {
                log::warn!("task {}: CKA undefined ({why})", task.task_index);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let dw = classifier_delta_w(&clf, Aggregation::default())?;
        Ok(Some(MechanismRecord { cka_profile: cka, delta_w: dw.blocks }))
    }
}

fn check_supported(cfg: &RunConfig) -> Result<()> {
    if cfg.split_tag == SplitTag::BaseToNovel {
        return Err(Error::Config(
            "base-to-novel evaluation needs a classifier for unseen classes; the reference backbone has none".into(),
        ));
    }
    Ok(())
}

/// Runs (or resumes) the benchmark described by `cfg`, appending one record
/// per dataset × algorithm × task to `cfg.output`. Records already present
/// for this `run_id` are skipped. Output order and values do not depend on
/// `exec`.
pub fn run_benchmark(cfg: &RunConfig, exec: Execution) -> Result<RunSummary> {
    check_supported(cfg)?;
    let prepared = cfg.prepare()?;
    let (mut writer, existing) = StoreWriter::open(&cfg.output)?;
    if let Some(other) = existing.tasks().find(|t| t.run_id == cfg.run_id && t.run_seed != cfg.run_seed) {
        return Err(Error::Config(format!(
            "store already holds run `{}` with seed {}; use a new run_id or output for seed {}",
            cfg.run_id, other.run_seed, cfg.run_seed
        )));
    }
    let done: HashSet<_> = existing.records.iter().map(Record::key).collect();
    let mut summary = RunSummary { repaired: existing.corrupted_tail.is_some(), ..Default::default() };
    for p in &prepared {
        let name = p.handle.name().to_string();
        let spec = cfg.stream_spec(&name);
        let rarity = if cfg.record.rarity {
            Some(zipf_rarity(&p.display_names, FrequencyTable::bundled())?.dataset_score)
        } else {
            None
        };
        for alg in &cfg.algorithms {
            let grid = alg.build_grid()?;
            let job = TaskJob { cfg, prepared: p, alg, grid: &grid, opts: hpe_options(cfg, &name, alg, exec), rarity };
            let algo = alg.method.to_string();
            let pending: Vec<u64> = (0..cfg.n_tasks)
                .filter(|&i| !done.contains(&(cfg.run_id.clone(), name.clone(), i, algo.clone())))
                .collect();
            summary.skipped += cfg.n_tasks as usize - pending.len();
            for chunk in pending.chunks(cfg.chunk_size) {
                let records = map_slice(chunk, exec, |&i| -> Result<Record> {
                    let task = sample_task(&p.handle, p.split.as_ref(), &spec, i)?;
                    Ok(Record::Task(job.run(&task)?))
                });
                let records = records.into_iter().collect::<Result<Vec<_>>>()?;
                writer.append(&records)?;
                summary.written += records.len();
                log::info!("{name}/{algo}: {} of {} tasks stored", chunk.last().map_or(0, |i| i + 1), cfg.n_tasks);
            }
        }
    }
    Ok(summary)
}

/// A two-axis hyperparameter sweep on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRequest {
    pub dataset: String,
    pub task_index: u64,
    pub rows: (HyperParam, Vec<f64>),
    pub cols: (HyperParam, Vec<f64>),
}

/// Runs a sweep for every configured algorithm around its center config
/// and appends one sweep record each.
pub fn run_sweep(cfg: &RunConfig, req: &SweepRequest, exec: Execution) -> Result<Vec<SweepRecord>> {
    check_supported(cfg)?;
    let prepared = cfg.prepare()?;
    let p = prepared
        .iter()
        .find(|p| p.handle.name() == req.dataset)
        .ok_or_else(|| Error::UnknownDataset(req.dataset.clone()))?;
    let spec = cfg.stream_spec(&req.dataset);
    let task = sample_task(&p.handle, p.split.as_ref(), &spec, req.task_index)?;
    let mut out = Vec::new();
    for alg in &cfg.algorithms {
        let start = Instant::now();
        let opts = hpe_options(cfg, &req.dataset, alg, exec);
        let surface = sweep_hyper_surface(&p.backbone, &task, req.rows.clone(), req.cols.clone(), &alg.center(), &opts)?;
        out.push(SweepRecord {
            schema_version: SCHEMA_VERSION,
            run_id: cfg.run_id.clone(),
            run_seed: cfg.run_seed,
            dataset: req.dataset.clone(),
            task_index: req.task_index,
            algorithm: alg.method.to_string(),
            fixed: alg.center(),
            row_param: surface.rows.0.as_str().into(),
            row_values: surface.rows.1,
            col_param: surface.cols.0.as_str().into(),
            col_values: surface.cols.1,
            cells: surface.cells,
            wall_time_ms: start.elapsed().as_millis() as u64,
        });
    }
    let (mut writer, _) = StoreWriter::open(&cfg.output)?;
    writer.append(&out.iter().cloned().map(Record::Sweep).collect::<Vec<_>>())?;
    Ok(out)
}
