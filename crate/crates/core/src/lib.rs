#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod bloch;
pub mod cli;
pub mod classical;
pub mod error;
pub mod lattice;
pub mod observability;
pub mod par;
pub mod quantization;
pub mod quantum;
pub mod region;
pub mod states;
pub mod transport;
