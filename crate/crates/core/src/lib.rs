//! Desk-scale lab for multi-view adversarial data augmentation in grid-based
//! trajectory forecasting.
//!
//! The crate provides five subsystems:
//!
//! - [`tensor`]: a minimal dense tensor engine with reverse-mode autodiff,
//!   sufficient to train the backbone and compute input-space gradients.
//! - [`world`]: a synthetic multi-camera ground-plane world that renders
//!   segmentation-feature frames and pixel trajectories of the same agent
//!   path under several calibrated views.
//! - [`model`]: the forecasting backbone — convolutional-GRU history encoder,
//!   coarse grid-cell decoder, fine offset decoder, losses, and Adadelta.
//! - [`aug`]: the SimAug augmentation (hardest-view selection, targeted FGSM,
//!   mixup) plus standard-augmentation, FGSM, and PGD training baselines.
//! - [`metrics`]: minADE_K / minFDE_K / grid accuracy and model evaluation.

pub mod aug;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod world;
