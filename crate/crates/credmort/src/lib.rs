//! Mortality forecasting for small sub-populations.
//!
//! The library fits a stochastic mortality model to a large reference
//! population, estimates per-age relative risk levels for each sub-population,
//! and blends the two through a linear credibility weight. Closed-form mean
//! squared errors of prediction, a synthetic population simulator, and a
//! rolling-window evaluation harness round out the pipeline.

pub mod cart;
pub mod credibility;
pub mod evaluate;
pub mod forecast;
pub mod gapc;
pub mod grid;
pub mod laws;
pub mod msep;
pub mod pipeline;
pub mod popsim;
pub mod streams;
pub mod table;
