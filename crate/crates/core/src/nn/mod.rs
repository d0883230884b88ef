//! Layers, the backbone/neck/head detector, its loss and checkpoints.

pub mod checkpoint;
mod detector;
mod layer;
mod loss;

pub use detector::{ArchConfig, Detector, PredictionGrid};
pub use layer::{Group, Layer, LayerId, LayerSpec, Parameter};
pub use loss::{decode_detections, detection_loss, loss_terms, GridTargets, LossTerms};

#[cfg(test)]
mod tests;
