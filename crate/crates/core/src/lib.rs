//! Fuzzy categorical cross-entropy (FCCE) for image segmentation, with the
//! pieces needed to train and compare it at desk scale: fuzzy c-means, a
//! small reverse-mode autodiff engine, U-Net and U-Net++ builders, a
//! synthetic phantom generator, segmentation metrics and a training
//! harness.

pub mod data;
pub mod error;
pub mod fcm;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
pub use fcm::{Centroids, FcmConfig, FcmResult, MembershipMatrix};
pub use loss::{LabelField, LossConfig, LossKind, MembershipSource, ProbabilityField};
pub use matrix::ClassMatrix;
pub use data::{DatasetSplit, LabeledImage, PhantomConfig};
pub use metrics::MetricsRecord;
pub use models::{build_unet, build_unetpp, forward_segment, Model, ModelKind, NestedNodeId, UNetSpec};
pub use harness::{RunConfig, TrainOutcome};
