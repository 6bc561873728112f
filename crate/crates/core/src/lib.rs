//! Goodness-of-fit tests for parametric covariance structures in sparse
//! functional and longitudinal data.
//!
//! The crate is `no_std` (with `alloc`). Execution of independent bootstrap
//! replicates is abstracted behind [`exec::Executor`] so that a host crate can
//! supply a thread pool.

#![no_std]
// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod estimation;
pub mod exec;
pub mod gof;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod spline;

pub use dataset::{LongDataset, Observation, Panel, Record, TimeMap};
pub use error::{Error, ErrorKind, Result, Stage};
pub use exec::{Executor, Sequential};
pub use spline::{BSplineBasis, CoefSurface, GramMatrix, KnotPlacement};
pub use gof::{
    run_mgfc_test, run_univariate_test, FollowUp, Mode, MultivariateTestResult, Statistic, StatisticChoice, TestConfig,
    UnivariateTestResult,
};
pub use sim::{Deviation, ScenarioSpec, VisitModel};
