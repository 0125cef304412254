//! CSV reports computed from a result store.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::store::{Record, SweepRecord, TaskRecord};
use crate::hpe::{grid_metrics_from_accuracies, SweepCell};
use crate::stats::{cohens_d_paired, effect_label, mean_ci95, paired_t_test, round_half_even, spearman};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    CiTable,
    GridMetrics,
    Significance,
    Heatmap,
    CkaProfile,
    RarityCorrelation,
}

impl ReportMode {
    pub const ALL: [ReportMode; 6] = [
        ReportMode::CiTable,
        ReportMode::GridMetrics,
        ReportMode::Significance,
        ReportMode::Heatmap,
        ReportMode::CkaProfile,
        ReportMode::RarityCorrelation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportMode::CiTable => "ci-table",
            ReportMode::GridMetrics => "grid-metrics",
            ReportMode::Significance => "significance",
            ReportMode::Heatmap => "heatmap",
            ReportMode::CkaProfile => "cka-profile",
            ReportMode::RarityCorrelation => "rarity-correlation",
        }
    }
}

impl fmt::Display for ReportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReportMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown report mode `{s}`")))
    }
}

/// Renders `mode` over `records` as CSV with a header row.
pub fn emit_report(records: &[Record], mode: ReportMode) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Report("store is empty".into()));
    }
    let tasks: Vec<&TaskRecord> = records.iter().filter_map(Record::as_task).collect();
    let mut out = csv::Writer::from_writer(Vec::new());
    let rows = match mode {
        ReportMode::CiTable => ci_table(&tasks)?,
        ReportMode::GridMetrics => grid_table(&tasks)?,
        ReportMode::Significance => significance(&tasks)?,
        ReportMode::Heatmap => heatmap(records)?,
        ReportMode::CkaProfile => cka_table(&tasks)?,
        ReportMode::RarityCorrelation => rarity_table(&tasks)?,
    };
    for row in rows {
        out.write_record(&row).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = out.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

type Rows = Vec<Vec<String>>;

fn num(x: f64) -> String {
    format!("{x}")
}

fn pct(x: f64) -> String {
    format!("{:.1}", round_half_even(100.0 * x, 1))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn need_tasks(tasks: &[&TaskRecord], mode: ReportMode) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Report(format!("{mode} needs task records")));
    }
    Ok(())
}

/// Distinct values in order of first appearance.
fn ordered<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Records grouped by algorithm then dataset, in first-appearance order.
fn groups<'a>(tasks: &[&'a TaskRecord]) -> Vec<(&'a str, &'a str, Vec<&'a TaskRecord>)> {
    let algos = ordered(tasks.iter().map(|t| t.algorithm.as_str()));
    let datasets = ordered(tasks.iter().map(|t| t.dataset.as_str()));
    let mut out = Vec::new();
    for a in &algos {
        for d in &datasets {
            let g: Vec<&TaskRecord> = tasks.iter().copied().filter(|t| t.algorithm == *a && t.dataset == *d).collect();
            if !g.is_empty() {
                out.push((*a, *d, g));
            }
        }
    }
    out
}

fn ci_cells(values: &[f64]) -> Vec<String> {
    let n = values.len();
    match mean_ci95(values) {
        Ok((m, h)) => vec![n.to_string(), pct(m), pct(h), num(m), num(h)],
        // A single task has no interval.
        Err(_) => {
            let m = values[0];
            vec![n.to_string(), pct(m), String::new(), num(m), String::new()]
        }
    }
}

/// Mean HPE accuracy and 95% interval per algorithm × dataset, then an
/// `Average` row per algorithm pooling all of its tasks.
fn ci_table(tasks: &[&TaskRecord]) -> Result<Rows> {
    need_tasks(tasks, ReportMode::CiTable)?;
    let mut rows = vec![header(&["algorithm", "dataset", "n", "mean_pct", "ci95_pct", "mean", "ci95_halfwidth"])];
    let groups = groups(tasks);
    for (a, d, g) in &groups {
        let acc: Vec<f64> = g.iter().map(|t| t.hpe_accuracy).collect();
        rows.push([vec![a.to_string(), d.to_string()], ci_cells(&acc)].concat());
    }
    for a in ordered(groups.iter().map(|g| g.0)) {
        let acc: Vec<f64> = tasks.iter().filter(|t| t.algorithm == a).map(|t| t.hpe_accuracy).collect();
        rows.push([vec![a.to_string(), "Average".to_string()], ci_cells(&acc)].concat());
    }
    Ok(rows)
}

fn grid_table(tasks: &[&TaskRecord]) -> Result<Rows> {
    need_tasks(tasks, ReportMode::GridMetrics)?;
    let mut rows = vec![header(&[
        "algorithm",
        "dataset",
        "n_tasks",
        "n_configs",
        "oracle_best_index",
        "oracle_best_mean",
        "per_task_oracle_mean",
        "grid_average_mean",
        "hpe_mean",
        "penalty",
        "sensitivity",
    ])];
    for (a, d, g) in groups(tasks) {
        if g.iter().any(|t| t.grid.configs != g[0].grid.configs) {
            return Err(Error::Report(format!("{a}/{d}: records come from different grids")));
        }
        let acc: Vec<(&[Option<f64>], f64)> = g.iter().map(|t| (t.per_config_accuracy.as_slice(), t.hpe_accuracy)).collect();
        let m = grid_metrics_from_accuracies(&acc)?;
        rows.push(vec![
            a.into(),
            d.into(),
            m.n_tasks.to_string(),
            m.per_config_mean.len().to_string(),
            m.oracle_best_index.to_string(),
            num(m.oracle_best_mean),
            num(m.per_task_oracle_mean),
            num(m.grid_average_mean),
            num(m.hpe_mean),
            num(m.penalty),
            num(m.sensitivity),
        ]);
    }
    Ok(rows)
}

/// HPE accuracies of `a` and `b` matched on `(dataset, task_index)`.
fn paired(tasks: &[&TaskRecord], a: &str, b: &str, dataset: Option<&str>) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |algo: &str| -> Result<Vec<(usize, u64, u64, f64)>> {
        let datasets = ordered(tasks.iter().map(|t| t.dataset.as_str()));
        let mut v: Vec<(usize, u64, u64, f64)> = tasks
            .iter()
            .filter(|t| t.algorithm == algo && dataset.is_none_or(|d| t.dataset == d))
            .map(|t| (datasets.iter().position(|d| *d == t.dataset).unwrap_or(0), t.task_index, t.run_seed, t.hpe_accuracy))
            .collect();
        v.sort_by_key(|x| (x.0, x.1));
        if v.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::UnpairedRecords(format!("`{algo}` has duplicate records for one task")));
        }
        Ok(v)
    };
    let (va, vb) = (pick(a)?, pick(b)?);
    let keys = |v: &[(usize, u64, u64, f64)]| v.iter().map(|x| (x.0, x.1, x.2)).collect::<Vec<_>>();
    if keys(&va) != keys(&vb) {
        let where_ = dataset.map(|d| format!(" on `{d}`")).unwrap_or_default();
        return Err(Error::UnpairedRecords(format!("`{a}` and `{b}` were not run on the same tasks{where_}")));
    }
    Ok((va.iter().map(|x| x.3).collect(), vb.iter().map(|x| x.3).collect()))
}

/// Paired comparison of every algorithm pair, per dataset and overall.
fn significance(tasks: &[&TaskRecord]) -> Result<Rows> {
    need_tasks(tasks, ReportMode::Significance)?;
    let algos = ordered(tasks.iter().map(|t| t.algorithm.as_str()));
    if algos.len() < 2 {
        return Err(Error::UnpairedRecords(format!("significance needs two algorithms, store has {}", algos.len())));
    }
    let datasets = ordered(tasks.iter().map(|t| t.dataset.as_str()));
    let mut rows = vec![header(&[
        "algorithm_a",
        "algorithm_b",
        "dataset",
        "n",
        "mean_a",
        "mean_b",
        "diff",
        "t",
        "df",
        "p",
        "cohens_d",
        "effect",
    ])];
    for (i, a) in algos.iter().enumerate() {
        for b in &algos[i + 1..] {
            let scopes = datasets.iter().map(|d| Some(*d)).chain([None]);
            for scope in scopes {
                let (xa, xb) = paired(tasks, a, b, scope)?;
                let t = paired_t_test(&xa, &xb)?;
                let d = cohens_d_paired(&xa, &xb)?;
                let (ma, mb) = (xa.iter().sum::<f64>() / xa.len() as f64, xb.iter().sum::<f64>() / xb.len() as f64);
                rows.push(vec![
                    a.to_string(),
                    b.to_string(),
                    scope.unwrap_or("Overall").to_string(),
                    xa.len().to_string(),
                    num(ma),
                    num(mb),
                    num(ma - mb),
                    num(t.t),
                    t.df.to_string(),
                    num(t.p),
                    num(d),
                    effect_label(d).to_string(),
                ]);
            }
        }
    }
    Ok(rows)
}

/// Long-format surfaces from sweep records.
fn heatmap(records: &[Record]) -> Result<Rows> {
    let sweeps: Vec<&SweepRecord> = records
        .iter()
        .filter_map(|r| match r {
            Record::Sweep(s) => Some(s),
            Record::Task(_) => None,
        })
        .collect();
    if sweeps.is_empty() {
        return Err(Error::Report("heatmap needs sweep records".into()));
    }
    let mut rows = vec![header(&[
        "algorithm",
        "dataset",
        "task_index",
        "row_param",
        "row_value",
        "col_param",
        "col_value",
        "accuracy",
        "status",
    ])];
    for s in sweeps {
        for (r, line) in s.row_values.iter().zip(&s.cells) {
            for (c, cell) in s.col_values.iter().zip(line) {
                let (acc, status) = match cell {
                    SweepCell::Accuracy(a) => (num(*a), "ok".to_string()),
                    SweepCell::Failed(why) => (String::new(), format!("failed: {why}")),
                };
                rows.push(vec![
                    s.algorithm.clone(),
                    s.dataset.clone(),
                    s.task_index.to_string(),
                    s.row_param.clone(),
                    num(*r),
                    s.col_param.clone(),
                    num(*c),
                    acc,
                    status,
                ]);
            }
        }
    }
    Ok(rows)
}

/// Mean layer CKA and block ΔW norms over tasks with mechanism data.
fn cka_table(tasks: &[&TaskRecord]) -> Result<Rows> {
    need_tasks(tasks, ReportMode::CkaProfile)?;
    let mut rows = vec![header(&["algorithm", "dataset", "measure", "position", "n", "mean", "ci95_halfwidth"])];
    for (a, d, g) in groups(tasks) {
        let mech: Vec<_> = g.iter().filter_map(|t| t.mechanism.as_ref()).collect();
        if mech.is_empty() {
            continue;
        }
        let layers = mech[0].cka_profile.len();
        for l in 0..layers {
            let v: Vec<f64> = mech.iter().filter_map(|m| m.cka_profile.get(l).copied()).collect();
            rows.push(summary_row(a, d, "cka", &format!("layer{l}"), &v));
        }
        for b in ordered(mech.iter().flat_map(|m| m.delta_w.iter().map(|(b, _)| b.as_str()))) {
            let v: Vec<f64> = mech.iter().filter_map(|m| m.delta_w.iter().find(|(n, _)| n == b).map(|x| x.1)).collect();
            rows.push(summary_row(a, d, "delta_w", b, &v));
        }
    }
    if rows.len() == 1 {
        return Err(Error::Report("no records carry mechanism data; run with record.mechanism = true".into()));
    }
    Ok(rows)
}

fn summary_row(a: &str, d: &str, measure: &str, position: &str, v: &[f64]) -> Vec<String> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let h = mean_ci95(v).map(|x| num(x.1)).unwrap_or_default();
    vec![a.into(), d.into(), measure.into(), position.into(), v.len().to_string(), num(m), h]
}

/// Per algorithm: each dataset's rarity score and mean adaptation gain
/// (HPE minus nearest-class-mean baseline), with Spearman ρ across datasets.
fn rarity_table(tasks: &[&TaskRecord]) -> Result<Rows> {
    need_tasks(tasks, ReportMode::RarityCorrelation)?;
    let mut rows = vec![header(&["algorithm", "dataset", "rarity", "gain", "n_tasks", "spearman_rho", "p"])];
    let groups = groups(tasks);
    for a in ordered(groups.iter().map(|g| g.0)) {
        let mut points = Vec::new();
        for (_, d, g) in groups.iter().filter(|g| g.0 == a) {
            let rarity = g[0]
                .dataset_rarity
                .ok_or_else(|| Error::Report(format!("{a}/{d}: records carry no rarity score")))?;
            let gains: Vec<f64> = g
                .iter()
                .map(|t| {
                    t.baseline_accuracy
                        .map(|b| t.hpe_accuracy - b)
                        .ok_or_else(|| Error::Report(format!("{a}/{d}: records carry no baseline accuracy")))
                })
                .collect::<Result<_>>()?;
            points.push((*d, rarity, gains.iter().sum::<f64>() / gains.len() as f64, gains.len()));
        }
        if points.len() < 3 {
            return Err(Error::Report(format!("{a}: rarity correlation needs at least 3 datasets, got {}", points.len())));
        }
        let x: Vec<f64> = points.iter().map(|p| p.1).collect();
        let y: Vec<f64> = points.iter().map(|p| p.2).collect();
        let c = spearman(&x, &y)?;
        for (d, r, g, n) in points {
            rows.push(vec![a.into(), d.into(), num(r), num(g), n.to_string(), num(c.r), num(c.p)]);
        }
    }
    Ok(rows)
}
