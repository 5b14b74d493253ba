//! Temporal-correlation graph pretraining for cross-sectional time-series
//! forecasting.
//!
//! The pipeline: build a correlation graph over the series ([`graphs`]),
//! window the panel ([`data`]), augment with node sampling and masking
//! ([`augment`]), encode with a GAT + Gaussian-masked causal transformer
//! ([`model`]), pretrain on masked reconstruction of series and graph
//! ([`losses`], [`train`]), fine-tune a small head, and evaluate the
//! resulting scores with a top-k backtest ([`backtest`]).

pub mod augment;
pub mod backtest;
pub mod config;
pub mod data;
pub mod error;
pub mod graphs;
pub mod losses;
pub mod model;
pub mod tensorcore;
pub mod train;

pub use error::{Error, Result};
