//! Named parameter storage shared by the sampler and the hashing network.
//!
//! Parameters live outside any tape; each forward pass registers the slots
//! it touches as leaves. The optimizer updates `values` in place.

use crate::tape::{Mat, NodeId, Tape};
use rand::Rng;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    pub values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: usize) -> &Mat {
        &self.values[slot]
    }

    /// Register slot as a tape leaf.
    pub fn node(&self, tape: &mut Tape, slot: usize) -> NodeId {
        tape.param(slot, self.values[slot].clone())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }
}

/// Xavier-uniform init for a fan_in×fan_out linear weight.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Mat {
    Mat::from_elem((rows, cols), 1.0)
}
