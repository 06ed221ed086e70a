//! Self-supervised image-quality features at desk scale.
//!
//! The pipeline: synthesize a degraded image corpus, pretrain a twin
//! parameter-shared ViT encoder/decoder on a cross class-token reconstruction
//! task, freeze the encoder, fit a linear score head on a labeled set, and
//! evaluate rank agreement with SROCC/PLCC.

pub mod checkpoint;
pub mod degrade;
pub mod eval;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthimg;
pub mod tensor;
pub mod train;
