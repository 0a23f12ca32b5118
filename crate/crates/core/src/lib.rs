//! Derivative-free prompt search: CMA-ES in random subspaces, one prompt
//! per layer, against a toy transformer reachable only through its logits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cma_es;
pub mod model;
pub mod optimizer;
pub mod projection;
pub mod service;
