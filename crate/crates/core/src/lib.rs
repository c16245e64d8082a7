//! Deterioration prognosis from chest radiographs and routine clinical
//! variables.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! image pipeline ([`imaging`]), the globally-aware multiple-instance
//! classifier ([`gmic`]), the discrete-time risk-curve head ([`drc`]),
//! boosted trees and a logistic baseline for tabular data ([`gbm`]),
//! ensembling and model selection ([`ensemble`]), evaluation metrics
//! ([`metrics`]), and dataset/CLI plumbing ([`data`], [`config`], [`cli`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod drc;
pub mod ensemble;
pub mod error;
pub mod gbm;
pub mod gmic;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
