//! Differentiable-computation core: a reverse-mode tape over a fixed set of
//! primitives, and an AdamW-style parameter update with decoupled weight
//! decay.
//!
//! The tape is deliberately not a general autodiff system. Every loss in
//! this crate decomposes into affine maps, elementwise tanh/relu,
//! L2-normalization, dot products, exp/log, powers with constant exponent,
//! sums, and max over a finite set; those are the only primitives offered,
//! which keeps every gradient path auditable against finite differences.

mod optimizer;
mod tape;

pub use optimizer::{adamw_step, lr_schedule, OptimizerState};
pub use tape::{evaluate_with_grad, Tape, Var};

use crate::{Error, Result};

/// Flattened trainable parameters (model weights plus proxy coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All entries must be finite.
    pub fn validate_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "param vector" })
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}
