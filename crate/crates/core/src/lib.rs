//! Source-free domain adaptation through intermediate-sample filtering,
//! mixup-based gap transition and cross-view consistency learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense matrices and a reverse-mode tape;
//! * [`data`]: shifted synthetic domains and their file formats;
//! * [`network`]: encoder, bias-free classifier, projector, momentum encoder;
//! * [`pretrain`]: label-smoothed source training;
//! * [`cidf`], [`idgt`], [`cvcl`]: the three adaptation components;
//! * [`train`]: the adaptation loop, metrics and evaluation;
//! * [`experiment`]: multi-seed benchmark runs.

pub mod autodiff;
pub mod checks;
pub mod cidf;
pub mod cvcl;
pub mod data;
pub mod error;
pub mod experiment;
pub mod idgt;
pub mod network;
pub mod par;
pub mod pretrain;
pub mod rng;
pub mod train;

pub use autodiff::{Matrix, Tape, Var};
pub use error::{Error, Result};
