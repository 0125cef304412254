use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::adam::AdamState;
use super::network::{softmax_cross_entropy, Nonlinearity, NetworkParams, ParamKind};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Optimization schedule for [`train`]. `lr_for` returns `None` for frozen tensors.
pub struct TrainPlan<'a> {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub lr_for: &'a dyn Fn(ParamKind) -> Option<f64>,
}

fn batches(n: usize, batch_size: Option<usize>, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    match batch_size {
        Some(b) if b < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut keyed_rng(seed, epoch as u64, "batches"));
            order.chunks(b.max(1)).map(<[usize]>::to_vec).collect()
        }
        _ => vec![(0..n).collect()],
    }
}

/// Trains `params` on `(x, labels)` with Adam and softmax cross-entropy.
/// Returns the mean loss of each epoch.
pub fn train(params: &mut NetworkParams, act: Nonlinearity, x: &Array2<f64>, labels: &[usize], plan: &TrainPlan) -> Result<Vec<f64>> {
    let kinds: Vec<ParamKind> = params.tensors_mut().into_iter().map(|(k, _)| k).collect();
    let mut states: Vec<Option<AdamState>> = params
        .tensors_mut()
        .into_iter()
        .map(|(k, t)| (plan.lr_for)(k).map(|_| AdamState::new(t.len())))
        .collect();
    let head_only = kinds.iter().all(|k| k.is_head() || (plan.lr_for)(*k).is_none());
    // Frozen backbone: features never change, compute them once.
    let frozen_features = head_only.then(|| params.forward(act, x.clone()).features().clone());

    let mut history = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let mut epoch_loss = 0.0;
        let batch_list = batches(x.nrows(), plan.batch_size, plan.seed, epoch);
        for batch in &batch_list {
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = match &frozen_features {
                Some(f) => {
                    let feats = f.select(Axis(0), batch);
                    let (loss, d_logits) = softmax_cross_entropy(&params.head.logits(&feats), &batch_labels);
                    let mut g = params.zeros_like();
                    g.head.weight = d_logits.t().dot(&feats);
                    g.head.bias = d_logits.sum_axis(Axis(0));
                    (loss, g)
                }
                None => params.loss_and_grads(act, x.select(Axis(0), batch), &batch_labels),
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            let mut grads = grads;
            let grad_tensors = grads.tensors_mut();
            for (((kind, p), (_, g)), state) in params.tensors_mut().into_iter().zip(grad_tensors).zip(&mut states) {
                if let (Some(state), Some(lr)) = (state.as_mut(), (plan.lr_for)(kind)) {
                    state.step(p, g, lr).map_err(|e| match e {
                        Error::NonFiniteGradient(_) => Error::NonFiniteLoss { epoch },
                        other => other,
                    })?;
                }
            }
        }
        history.push(epoch_loss / x.nrows() as f64);
    }
    Ok(history)
}
