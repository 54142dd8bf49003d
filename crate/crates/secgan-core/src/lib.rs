//! SeCGAN: parallel RGB and semantic-mask conditional GANs coupled by a
//! semantic consistency loss, with training, evaluation, and a procedural toy
//! dataset for desk-scale verification.

pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod parsing;
pub mod training;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use domain::{AttributeLabel, DiffLabel, ImageBatch, OneHotMask, SegmentTaxonomy, SoftMask};
pub use config::ExperimentConfig;
pub use error::SecganError;
pub use losses::LossWeights;
pub use networks::{Backbone, Modality, NetOpts, NetworkHandle, Role};
pub use tensor::{ConvGeom, Graph, Var};
