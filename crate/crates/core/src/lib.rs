//! Domain-generalization segmentation lab.
//!
//! Trains a micro U-Net on multiple synthetic "scanner" domains with
//! adversarial feature invariance (a domain discriminator behind a gradient
//! reversal layer) and cross-domain mixup, then measures how well the model
//! segments an unseen target domain. Ships its own f64 autodiff tape, the
//! five standard lesion-segmentation metrics, a linear domain probe for
//! feature invariance, and a CLI for leave-one-domain-out experiments.

pub mod augment;
pub mod config;
pub mod experiment;
pub mod io;
pub mod layers;
pub mod manifest;
pub mod metrics;
pub mod mixup;
pub mod models;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;
