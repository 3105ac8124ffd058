use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A control sequence of `horizon` blocks, each `control_dim` wide, stored
/// flattened block-major: `[u_1, u_2, ..., u_H]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    values: Vec<f64>,
    control_dim: usize,
    horizon: usize,
}

impl ControlSequence {
    pub fn new(values: Vec<f64>, control_dim: usize, horizon: usize) -> Result<Self> {
        if values.len() != control_dim * horizon {
            return Err(Error::DimensionMismatch {
                expected: control_dim * horizon,
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            control_dim,
            horizon,
        })
    }

    /// Repeats one control block `horizon` times.
    pub fn constant(block: &[f64], horizon: usize) -> Self {
        let values = block
            .iter()
            .copied()
            .cycle()
            .take(block.len() * horizon)
            .collect();
        Self {
            values,
            control_dim: block.len(),
            horizon,
        }
    }

    pub fn zeros(control_dim: usize, horizon: usize) -> Self {
        Self {
            values: vec![0.0; control_dim * horizon],
            control_dim,
            horizon,
        }
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Flattened dimension `m * H`.
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// The `h`-th control block (zero-based).
    pub fn block(&self, h: usize) -> &[f64] {
        &self.values[h * self.control_dim..(h + 1) * self.control_dim]
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// Same shape, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.control_dim, self.horizon)
    }
}
