//! Named, ordered parameter storage shared by the model and the grounder.
//!
//! Values live behind `Arc` so a forward pass can register tape leaves
//! without copying; the optimizer mutates in place via `Arc::make_mut`
//! (it is the only owner between passes).

use crate::blob;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::Fnv64;
use ndarray::ArrayD;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<F>>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate param {name}");
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn arc(&self, id: ParamId) -> Arc<ArrayD<F>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Mutable access to every tensor, in declaration order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<F>> {
        self.values.iter_mut().map(Arc::make_mut)
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "param shape change");
        self.values[id.0] = Arc::new(value);
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Checksum over names and little-endian payloads; checkpoint identity.
    pub fn checksum(&self) -> String {
        let mut h = Fnv64::default();
        for (name, value) in self.iter() {
            h.update(name.as_bytes());
            let mut buf = Vec::new();
            blob::write_tensor(&mut buf, value).expect("in-memory write");
            h.update(&buf);
        }
        h.finish()
    }

    /// One blob per parameter under `dir`, named by sanitized parameter name.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, value) in self.iter() {
            blob::save_tensor(&dir.join(format!("{}.bin", sanitize(name))), value)?;
        }
        Ok(())
    }

    /// Loads values for an existing layout (names and shapes must match).
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.values.len() {
            let path = dir.join(format!("{}.bin", sanitize(&self.names[i])));
            let value: ArrayD<F> = blob::load_tensor(&path)?;
            if value.shape() != self.values[i].shape() {
                return Err(Error::Blob(format!(
                    "parameter {} shape {:?} does not match expected {:?}",
                    self.names[i],
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(value);
        }
        Ok(())
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sanitize(name: &str) -> String {
    name.replace(['/', '.'], "_")
}
