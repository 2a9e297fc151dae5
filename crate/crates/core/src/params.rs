//! Named parameter storage shared by every model component.
//!
//! Parameters are held in double precision but training keeps them on the
//! single-precision grid (see [`ParamStore::round_to_f32`]), so checkpoints that
//! store 32-bit floats are lossless.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter block '{name}'")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Registers a block initialised uniformly in `[-bound, bound]`, rounded to f32.
    pub(crate) fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let m = Mat::uniform(rows, cols, bound, rng).map(|v| v as f32 as f64);
        self.insert(name, m)
    }

    pub(crate) fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.insert(name, Mat::filled(rows, cols, value))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars across the given blocks.
    pub fn scalar_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Gradient accumulator with one buffer per parameter block.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Mat>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            grads: store
                .values
                .iter()
                .map(|v| Mat::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        self.grads[id.0].add_assign(g);
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Mat::zeros(1, 1)).unwrap();
        assert!(matches!(s.insert("a", Mat::zeros(1, 1)), Err(Error::Config(_))));
        assert_eq!(s.id("a"), Some(ParamId(0)));
        assert_eq!(s.name(ParamId(0)), "a");
    }
}
