//! Backbones, hand-differentiated layers, Adam and snapshots.

mod adam;
mod backbone;
mod network;
mod snapshot;
mod train;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use backbone::{frozen_embedding_backbone, pretrain_reference, reference_backbone, source_accuracy, Backbone, ReferenceSpec};
pub use network::{argmax_rows, softmax_cross_entropy, Adapter, Dense, Head, LowRank, NetworkParams, Nonlinearity, ParamKind, Trace};
pub use snapshot::{Snapshot, SnapshotEntry};
pub use train::{train, TrainPlan};
