//! Normalization, augmentation, splitting, two-stage training and
//! checkpoint persistence.

pub mod checkpoint;
pub mod data;
pub mod norm;
pub mod predict;
pub mod train;

pub use checkpoint::{Checkpoint, Stage, TrainMeta};
pub use data::{augment, split_patients, AugmentedExample, TargetSeries, CUTS};
pub use norm::{compute_norm, NormStats};
pub use predict::{Case, Prediction};
pub use train::{evaluate_loss, train_pd, train_pk, TrainConfig, TrainReport};
