//! Batch driver for dichotomy verification: scenario configs in, reports
//! and plot-ready tables out. The `ned` binary is a thin wrapper over
//! [`pipeline::run`] and [`report::emit`].

pub mod config;
pub mod pipeline;
pub mod report;
