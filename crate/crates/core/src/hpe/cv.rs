use rand::seq::SliceRandom;

use super::{is_divergence, ConfigGrid, HpeOptions};
use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::model::Backbone;
use crate::rng::keyed_rng;
use crate::sampler::LabeledItem;
use crate::transfer::{accuracy, fit, HyperConfig};

/// Stratified fold assignment: within each class, items are shuffled and
/// dealt round-robin over `l = min(folds, smallest class count)` folds, so a
/// class with exactly `l` items contributes one item to every fold.
pub fn stratified_folds(support: &[LabeledItem], class_ids: &[String], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_ids.len()];
    for (i, s) in support.iter().enumerate() {
        by_class
            .get_mut(s.1)
            .ok_or_else(|| Error::invalid(format!("label {} outside 0..{}", s.1, class_ids.len())))?
            .push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::CvInfeasible { class: class_ids[c].clone() });
        }
    }
    let l = by_class.iter().map(Vec::len).min().unwrap_or(0).min(folds);
    let mut out = vec![Vec::new(); l];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut keyed_rng(seed, c as u64, "cv-folds"));
        for (j, &i) in members.iter().enumerate() {
            out[j % l].push(i);
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Picks the configuration with the best mean validation accuracy over
/// stratified folds of the support set. Ties go to the earlier config in
/// canonical order (fewer epochs, then smaller lrs).
pub fn cross_validate_select(
    backbone: &Backbone,
    support: &[LabeledItem],
    class_ids: &[String],
    grid: &ConfigGrid,
    folds: usize,
    opts: &HpeOptions,
) -> Result<HyperConfig> {
    if grid.is_empty() {
        return Err(Error::invalid("grid is empty"));
    }
    let fold_sets = stratified_folds(support, class_ids, folds, opts.adapt.seed)?;
    if grid.len() == 1 {
        return Ok(grid.configs[0]);
    }
    let splits: Vec<(Vec<LabeledItem>, Vec<LabeledItem>)> = fold_sets
        .iter()
        .map(|held| {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (i, s) in support.iter().enumerate() {
                if held.binary_search(&i).is_ok() { &mut val } else { &mut train }.push(s.clone());
            }
            (train, val)
        })
        .collect();
    let n_folds = splits.len();
    let scores = map_range(grid.len() * n_folds, opts.exec, |k| -> Result<f64> {
        let (cfg, (train, val)) = (&grid.configs[k / n_folds], &splits[k % n_folds]);
        let val_items: Vec<&str> = val.iter().map(LabeledItem::item).collect();
        let val_labels: Vec<usize> = val.iter().map(LabeledItem::label).collect();
        match fit(backbone, train, class_ids, cfg, &opts.adapt) {
            Ok(c) => {
                let logits = c.predict_logits(&val_items)?;
                Ok(if logits.iter().all(|v| v.is_finite()) { accuracy(&logits, &val_labels) } else { f64::NEG_INFINITY })
            }
            Err(e) if is_divergence(&e) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, chunk) in scores.chunks(n_folds).enumerate() {
        let mean = chunk.iter().sum::<f64>() / n_folds as f64;
        if mean.is_finite() && best.is_none_or(|(_, b)| mean > b) {
            best = Some((i, mean));
        }
    }
    best.map(|(i, _)| grid.configs[i]).ok_or(Error::AllConfigsFailed)
}
