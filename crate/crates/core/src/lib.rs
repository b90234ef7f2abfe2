//! Two-stage power system state estimation: random-matrix cleaning of a
//! window of SCADA measurements followed by weighted least squares.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod grid;
pub mod powerflow;
pub mod util;
pub mod noise;
pub mod rmt;
pub mod estimator;
pub mod harness;
