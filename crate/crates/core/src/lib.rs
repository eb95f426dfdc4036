//! Driving-task-aware salient object detection.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`dataset`]: fixation density maps, per-object saliency scores, salient
//!   object selection and ground-truth masks, dataset statistics;
//! * [`encoder`], [`transfer`], [`decoder`], [`model`]: the dual-subnetwork
//!   model with attention-based knowledge transfer and boundary-aware
//!   decoding;
//! * [`supervision`], [`training`]: the staged objective and the two-stage
//!   optimisation protocol, with finite-difference gradient checks;
//! * [`metrics`]: MAE, F-measure, weighted F-measure, S-measure and a registry
//!   of published reference numbers.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod supervision;
pub mod synthetic;
pub mod training;
pub mod transfer;

pub use decoder::{ConfidenceMap, PredictionBundle};
pub use encoder::{EncoderScale, EncoderStageSpec, FeaturePyramid, ImageBatch};
pub use error::{Error, Result};
pub use metrics::{BenchmarkRegistry, MetricReport};
pub use model::{build_model, forward, infer, Model, ModelConfig, ModelParams, SaliencyMap};
pub use params::ParamSet;
pub use supervision::BinaryMask;
pub use transfer::FeatureMap;
