//! The hyperparameter ensemble: adapt once per grid configuration, average
//! the query logits, and score the average.

mod cv;
mod grid;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use cv::{cross_validate_select, stratified_folds};
pub use grid::{build_grid, canonical, epoch_axis, ConfigGrid, GridShape, LrAxis};

use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::model::Backbone;
use crate::rng::derive_seed;
use crate::sampler::{LabeledItem, Task};
use crate::transfer::{accuracy, fit, AdaptOptions, HyperConfig};

/// What gets averaged across configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Raw logits, as the ensemble is defined.
    #[default]
    Logits,
    /// Per-config softmax probabilities. Off unless requested.
    Probabilities,
}

#[derive(Debug, Clone, Default)]
pub struct HpeOptions {
    pub adapt: AdaptOptions,
    pub exec: Execution,
    pub fusion: Fusion,
}

/// Outcome of one task under one grid.
#[derive(Debug, Clone)]
pub struct HpeResult {
    pub task_index: u64,
    pub configs: Vec<HyperConfig>,
    /// `None` for configurations that diverged.
    pub per_config_logits: Vec<Option<Array2<f64>>>,
    pub per_config_accuracy: Vec<Option<f64>>,
    pub failed: Vec<usize>,
    pub fused_logits: Array2<f64>,
    pub hpe_accuracy: f64,
    pub labels: Vec<usize>,
}

impl HpeResult {
    /// Number of configurations that entered the fused mean.
    pub fn n_fused(&self) -> usize {
        self.configs.len() - self.failed.len()
    }
}

/// Element-wise arithmetic mean of equally shaped matrices.
pub fn fuse_logits(logits: &[Array2<f64>]) -> Result<Array2<f64>> {
    let Some(first) = logits.first() else {
        return Err(Error::invalid("cannot fuse an empty list of logit matrices"));
    };
    let mut sum = Array2::<f64>::zeros(first.raw_dim());
    for m in logits {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!("logits {:?} vs {:?}", m.shape(), first.shape())));
        }
        sum += m;
    }
    Ok(sum / logits.len() as f64)
}

/// Mean of row-wise softmax probabilities.
pub fn fuse_probabilities(logits: &[Array2<f64>]) -> Result<Array2<f64>> {
    let probs: Vec<Array2<f64>> = logits
        .iter()
        .map(|m| {
            let mut p = m.clone();
            for mut row in p.outer_iter_mut() {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - max).exp());
                let z = row.sum();
                row /= z;
            }
            p
        })
        .collect();
    fuse_logits(&probs)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_))
}

/// Adapts `backbone` once per grid configuration on the task's support set
/// and fuses the query logits. Diverged configurations are dropped from the
/// mean and listed in `failed`; if all diverge the task fails.
pub fn run_hpe(backbone: &Backbone, task: &Task, grid: &ConfigGrid, opts: &HpeOptions) -> Result<HpeResult> {
    if grid.is_empty() {
        return Err(Error::invalid("grid is empty"));
    }
    let adapt = AdaptOptions { seed: derive_seed(opts.adapt.seed, task.task_index, "adapt"), ..opts.adapt.clone() };
    let query: Vec<&str> = task.query.iter().map(LabeledItem::item).collect();
    let labels = task.query_labels();
    let outcomes = map_slice(&grid.configs, opts.exec, |cfg| -> Result<Option<Array2<f64>>> {
        match fit(backbone, &task.support, &task.class_ids, cfg, &adapt) {
            Ok(c) => {
                let logits = c.predict_logits(&query)?;
                Ok(logits.iter().all(|v| v.is_finite()).then_some(logits))
            }
            Err(e) if is_divergence(&e) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut per_config_logits = Vec::with_capacity(grid.len());
    for o in outcomes {
        per_config_logits.push(o?);
    }
    let failed: Vec<usize> = per_config_logits.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(i, _)| i).collect();
    if !failed.is_empty() {
        log::warn!("task {}: {} of {} configurations diverged", task.task_index, failed.len(), grid.len());
    }
    let ok: Vec<Array2<f64>> = per_config_logits.iter().flatten().cloned().collect();
    if ok.is_empty() {
        return Err(Error::AllConfigsFailed);
    }
    let fused_logits = match opts.fusion {
        Fusion::Logits => fuse_logits(&ok)?,
        Fusion::Probabilities => fuse_probabilities(&ok)?,
    };
    let per_config_accuracy = per_config_logits.iter().map(|l| l.as_ref().map(|l| accuracy(l, &labels))).collect();
    Ok(HpeResult {
        task_index: task.task_index,
        configs: grid.configs.clone(),
        per_config_logits,
        per_config_accuracy,
        failed,
        hpe_accuracy: accuracy(&fused_logits, &labels),
        fused_logits,
        labels,
    })
}

/// Aggregates over a task set run with one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    pub n_tasks: usize,
    /// Mean accuracy of each configuration; a diverged run counts as 0.
    pub per_config_mean: Vec<f64>,
    /// Index of the dataset-level oracle configuration (first on ties).
    pub oracle_best_index: usize,
    pub oracle_best_mean: f64,
    /// Mean of the per-task best configuration accuracy.
    pub per_task_oracle_mean: f64,
    pub grid_average_mean: f64,
    pub hpe_mean: f64,
    pub penalty: f64,
    /// Mean over tasks of the within-task standard deviation (population
    /// form) of per-config accuracies, diverged runs excluded.
    pub sensitivity: f64,
}

fn population_std(v: &[f64]) -> f64 {
    if v.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn grid_metrics(results: &[HpeResult]) -> Result<GridMetrics> {
    let Some(first) = results.first() else {
        return Err(Error::invalid("no results to aggregate"));
    };
    if results.iter().any(|r| r.configs != first.configs) {
        return Err(Error::invalid("results come from different grids"));
    }
    let rows: Vec<(&[Option<f64>], f64)> = results.iter().map(|r| (r.per_config_accuracy.as_slice(), r.hpe_accuracy)).collect();
    grid_metrics_from_accuracies(&rows)
}

/// [`grid_metrics`] over bare `(per-config accuracy, HPE accuracy)` rows, as
/// read back from a result store.
pub fn grid_metrics_from_accuracies(rows: &[(&[Option<f64>], f64)]) -> Result<GridMetrics> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("no results to aggregate"));
    };
    let n_cfg = first.0.len();
    if n_cfg == 0 || rows.iter().any(|r| r.0.len() != n_cfg) {
        return Err(Error::invalid("rows have differing or empty grids"));
    }
    let n = rows.len() as f64;
    let mut per_config_mean = vec![0.0; n_cfg];
    let mut per_task_oracle = 0.0;
    let mut sensitivity = 0.0;
    for (per_config, _) in rows {
        let accs: Vec<f64> = per_config.iter().flatten().copied().collect();
        if accs.is_empty() {
            return Err(Error::AllConfigsFailed);
        }
        for (m, a) in per_config_mean.iter_mut().zip(per_config.iter()) {
            *m += a.unwrap_or(0.0);
        }
        per_task_oracle += accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        sensitivity += population_std(&accs);
    }
    per_config_mean.iter_mut().for_each(|m| *m /= n);
    let (oracle_best_index, oracle_best_mean) = per_config_mean
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, m)| if m > best.1 { (i, m) } else { best });
    let hpe_mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(GridMetrics {
        n_tasks: rows.len(),
        grid_average_mean: per_config_mean.iter().sum::<f64>() / n_cfg as f64,
        per_config_mean,
        oracle_best_index,
        oracle_best_mean,
        per_task_oracle_mean: per_task_oracle / n,
        hpe_mean,
        penalty: oracle_best_mean - hpe_mean,
        sensitivity: sensitivity / n,
    })
}

/// A hyperparameter that a sweep axis can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    LrBackbone,
    LrHead,
    Epochs,
}

impl HyperParam {
    pub fn as_str(self) -> &'static str {
        match self {
            HyperParam::LrBackbone => "lr_backbone",
            HyperParam::LrHead => "lr_head",
            HyperParam::Epochs => "epochs",
        }
    }

    fn set(self, cfg: &mut HyperConfig, v: f64) {
        match self {
            HyperParam::LrBackbone => cfg.lr_backbone = v,
            HyperParam::LrHead => cfg.lr_head = v,
            HyperParam::Epochs => cfg.epochs = v as usize,
        }
    }
}

impl std::str::FromStr for HyperParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [HyperParam::LrBackbone, HyperParam::LrHead, HyperParam::Epochs]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown hyperparameter `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "value")]
pub enum SweepCell {
    Accuracy(f64),
    Failed(String),
}

impl SweepCell {
    pub fn accuracy(&self) -> Option<f64> {
        match self {
            SweepCell::Accuracy(a) => Some(*a),
            SweepCell::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSurface {
    pub rows: (HyperParam, Vec<f64>),
    pub cols: (HyperParam, Vec<f64>),
    pub cells: Vec<Vec<SweepCell>>,
}

impl SweepSurface {
    pub fn max(&self) -> Option<f64> {
        self.cells.iter().flatten().filter_map(SweepCell::accuracy).reduce(f64::max)
    }
}

/// Query accuracy on a two-dimensional slice of hyperparameter space with
/// everything else held at `fixed`. Diverged fits are recorded as failed cells.
pub fn sweep_hyper_surface(
    backbone: &Backbone,
    task: &Task,
    rows: (HyperParam, Vec<f64>),
    cols: (HyperParam, Vec<f64>),
    fixed: &HyperConfig,
    opts: &HpeOptions,
) -> Result<SweepSurface> {
    if rows.0 == cols.0 {
        return Err(Error::invalid("sweep axes must name different hyperparameters"));
    }
    for (p, values) in [&rows, &cols] {
        if values.is_empty() {
            return Err(Error::invalid(format!("axis {} is empty", p.as_str())));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("axis {} has non-positive value {v}", p.as_str())));
        }
        if *p == HyperParam::Epochs && values.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::invalid("epoch axis values must be integers"));
        }
    }
    let mut points = Vec::with_capacity(rows.1.len() * cols.1.len());
    for &r in &rows.1 {
        for &c in &cols.1 {
            let mut cfg = *fixed;
            rows.0.set(&mut cfg, r);
            cols.0.set(&mut cfg, c);
            points.push(cfg);
        }
    }
    let adapt = AdaptOptions { seed: derive_seed(opts.adapt.seed, task.task_index, "adapt"), ..opts.adapt.clone() };
    let query: Vec<&str> = task.query.iter().map(LabeledItem::item).collect();
    let labels = task.query_labels();
    let flat = map_slice(&points, opts.exec, |cfg| -> Result<SweepCell> {
        match fit(backbone, &task.support, &task.class_ids, cfg, &adapt) {
            Ok(c) => {
                let logits = c.predict_logits(&query)?;
                if logits.iter().all(|v| v.is_finite()) {
                    Ok(SweepCell::Accuracy(accuracy(&logits, &labels)))
                } else {
                    Ok(SweepCell::Failed("non-finite logits".into()))
                }
            }
            Err(e) if is_divergence(&e) => Ok(SweepCell::Failed(e.to_string())),
            Err(e) => Err(e),
        }
    });
    let mut flat = flat.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let cells = (0..rows.1.len()).map(|_| flat.by_ref().take(cols.1.len()).collect()).collect();
    Ok(SweepSurface { rows, cols, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticSpec};
    use crate::model::{reference_backbone, ReferenceSpec};
    use crate::rng::keyed_rng;
    use crate::sampler::{sample_task, TaskStreamSpec};
    use crate::transfer::Method;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn setup() -> (Backbone, Task) {
        let ds = generate_synthetic_dataset(&SyntheticSpec::new("h", 6, 30, 8, 3.0), 1).unwrap();
        let b = reference_backbone(&ReferenceSpec::new(8, vec![16], 8), 2)
            .unwrap()
            .with_inputs(ds.embeddings().unwrap().clone())
            .unwrap();
        let spec = TaskStreamSpec { way_range: (4, 4), fixed_shots: Some(3), ..TaskStreamSpec::new("h", 0) };
        (b, sample_task(&ds, None, &spec, 0).unwrap())
    }

    fn result_with(accs: Vec<Option<f64>>, hpe: f64) -> HpeResult {
        let n = accs.len();
        HpeResult {
            task_index: 0,
            configs: (0..n).map(|i| HyperConfig::new(Method::LinearProbe, 0.0, 1e-2, i + 1)).collect(),
            per_config_logits: vec![None; n],
            failed: accs.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect(),
            per_config_accuracy: accs,
            fused_logits: Array2::zeros((0, 0)),
            hpe_accuracy: hpe,
            labels: vec![],
        }
    }

    #[test]
    fn fusion_arithmetic() {
        let fused = fuse_logits(&[array![[2.0, 0.0]], array![[0.0, 1.0]]]).unwrap();
        assert_eq!(fused, array![[1.0, 0.5]]);
        assert_eq!(crate::model::argmax_rows(&fused), vec![0]);
        let m = array![[1.5, -2.0], [0.25, 3.0]];
        assert_eq!(fuse_logits(std::slice::from_ref(&m)).unwrap(), m);
        assert_eq!(fuse_logits(&[m.clone(), -m.clone()]).unwrap(), Array2::<f64>::zeros((2, 2)));
        assert!(fuse_logits(&[]).is_err());
        assert!(fuse_logits(&[m, array![[1.0]]]).is_err());
    }

    proptest! {
        #[test]
        fn fusion_matches_direct_sum(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, n in 1usize..6) {
            let mut rng = keyed_rng(seed, 0, "fuse");
            let ms: Vec<Array2<f64>> = (0..n).map(|_| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0..5.0))).collect();
            let fused = fuse_logits(&ms).unwrap();
            for i in 0..rows {
                for j in 0..cols {
                    let direct: f64 = ms.iter().map(|m| m[[i, j]]).sum::<f64>() / n as f64;
                    prop_assert!((fused[[i, j]] - direct).abs() < 1e-12);
                }
            }
            let mut rev = ms.clone();
            rev.reverse();
            let back = fuse_logits(&rev).unwrap();
            prop_assert!(fused.iter().zip(back.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn probability_fusion_rows_sum_to_one() {
        let p = fuse_probabilities(&[array![[2.0, 0.0, -1.0]], array![[0.0, 10.0, 0.0]]]).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_config_hpe_equals_that_config() {
        let (b, t) = setup();
        let grid = ConfigGrid::from_configs(vec![HyperConfig::new(Method::LinearProbe, 0.0, 2e-2, 30)]).unwrap();
        let r = run_hpe(&b, &t, &grid, &HpeOptions::default()).unwrap();
        assert_eq!(Some(r.hpe_accuracy), r.per_config_accuracy[0]);
        assert_eq!(r.fused_logits, *r.per_config_logits[0].as_ref().unwrap());
    }

    #[test]
    fn fused_is_mean_and_execution_independent() {
        let (b, t) = setup();
        let grid = build_grid(&HyperConfig::new(Method::FullFinetune, 1e-3, 1e-2, 5), GridShape::Cube, 3.0).unwrap();
        let par = run_hpe(&b, &t, &grid, &HpeOptions::default()).unwrap();
        let seq = run_hpe(&b, &t, &grid, &HpeOptions { exec: Execution::Sequential, ..HpeOptions::default() }).unwrap();
        assert_eq!(par.fused_logits, seq.fused_logits);
        let all: Vec<Array2<f64>> = par.per_config_logits.iter().flatten().cloned().collect();
        let direct = fuse_logits(&all).unwrap();
        assert!(par.fused_logits.iter().zip(direct.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(par.n_fused(), 27);
    }

    #[test]
    fn diverged_configs_are_dropped() {
        let (b, t) = setup();
        let grid = ConfigGrid::from_configs(vec![
            HyperConfig::new(Method::FullFinetune, 1e-3, 1e-2, 10),
            HyperConfig::new(Method::FullFinetune, 1e300, 1e300, 10),
        ])
        .unwrap();
        let r = run_hpe(&b, &t, &grid, &HpeOptions::default()).unwrap();
        assert_eq!(r.failed, vec![1]);
        assert_eq!(r.per_config_accuracy[1], None);
        assert_eq!(r.fused_logits, *r.per_config_logits[0].as_ref().unwrap());
        let bad = ConfigGrid::from_configs(vec![HyperConfig::new(Method::FullFinetune, 1e300, 1e300, 10)]).unwrap();
        assert!(matches!(run_hpe(&b, &t, &bad, &HpeOptions::default()), Err(Error::AllConfigsFailed)));
    }

    #[test]
    fn metrics_of_a_flat_grid() {
        let rs = vec![result_with(vec![Some(0.5); 3], 0.5), result_with(vec![Some(0.7); 3], 0.7)];
        let m = grid_metrics(&rs).unwrap();
        assert_eq!(m.sensitivity, 0.0);
        assert!(m.penalty.abs() < 1e-15);
        assert!((m.oracle_best_mean - 0.6).abs() < 1e-15);
    }

    #[test]
    fn metrics_with_a_dominant_config() {
        let rs = vec![result_with(vec![Some(0.9), Some(0.2)], 0.8), result_with(vec![Some(0.7), Some(0.2)], 0.6)];
        let m = grid_metrics(&rs).unwrap();
        assert_eq!(m.oracle_best_index, 0);
        assert!((m.oracle_best_mean - 0.8).abs() < 1e-12);
        assert!((m.penalty - 0.1).abs() < 1e-12);
        assert!((m.grid_average_mean - 0.5).abs() < 1e-12);
        assert!((m.sensitivity - 0.3).abs() < 1e-12);
        assert!(grid_metrics(&[]).is_err());
    }

    #[test]
    fn metrics_ignore_config_order_of_tasks() {
        let a = vec![result_with(vec![Some(0.9), Some(0.2), None], 0.8), result_with(vec![Some(0.4), Some(0.6), Some(0.1)], 0.5)];
        let mut b = a.clone();
        b.reverse();
        let (ma, mb) = (grid_metrics(&a).unwrap(), grid_metrics(&b).unwrap());
        assert!((ma.hpe_mean - mb.hpe_mean).abs() < 1e-12 && (ma.sensitivity - mb.sensitivity).abs() < 1e-12);
        assert!((ma.per_config_mean[2] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sweep_is_consistent_and_transposes() {
        let (b, t) = setup();
        let fixed = HyperConfig::new(Method::FullFinetune, 1e-3, 1e-2, 10);
        let one = sweep_hyper_surface(&b, &t, (HyperParam::LrBackbone, vec![1e-3]), (HyperParam::LrHead, vec![1e-2]), &fixed, &HpeOptions::default()).unwrap();
        let grid = ConfigGrid::from_configs(vec![fixed]).unwrap();
        let direct = run_hpe(&b, &t, &grid, &HpeOptions::default()).unwrap();
        assert_eq!(one.cells[0][0], SweepCell::Accuracy(direct.hpe_accuracy));

        let lb = vec![1e-4, 1e-2];
        let ep = vec![5.0, 10.0, 20.0];
        let s1 = sweep_hyper_surface(&b, &t, (HyperParam::LrBackbone, lb.clone()), (HyperParam::Epochs, ep.clone()), &fixed, &HpeOptions::default()).unwrap();
        let s2 = sweep_hyper_surface(&b, &t, (HyperParam::Epochs, ep), (HyperParam::LrBackbone, lb), &fixed, &HpeOptions::default()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(s1.cells[i][j], s2.cells[j][i]);
            }
        }
        assert!(sweep_hyper_surface(&b, &t, (HyperParam::Epochs, vec![1.5]), (HyperParam::LrHead, vec![1.0]), &fixed, &HpeOptions::default()).is_err());
        assert!(sweep_hyper_surface(&b, &t, (HyperParam::LrHead, vec![1.0]), (HyperParam::LrHead, vec![1.0]), &fixed, &HpeOptions::default()).is_err());
    }

    #[test]
    fn sweep_marks_diverged_cells() {
        let (b, t) = setup();
        let fixed = HyperConfig::new(Method::FullFinetune, 1e-3, 1e-2, 10);
        let s = sweep_hyper_surface(&b, &t, (HyperParam::LrBackbone, vec![1e-3, 1e300]), (HyperParam::LrHead, vec![1e300]), &fixed, &HpeOptions::default()).unwrap();
        assert!(matches!(s.cells[1][0], SweepCell::Failed(_)));
    }
}
