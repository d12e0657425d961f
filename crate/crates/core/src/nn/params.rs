//! Named parameter tensors stored in one flat buffer.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// The parameter table θ. Values are kept exactly representable in `f32`
/// so checkpoints round-trip bit-identically.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> ParamId {
        let name = name.into();
        debug_assert_eq!(values.len(), shape.iter().product::<usize>(), "{name}");
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate {name}");
        let offset = self.data.len();
        self.data.extend(values.into_iter().map(round_f32));
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            offset,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[self.specs[id.0].range()]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.id_of(name).map(|id| self.get(id))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat buffer. Callers are responsible for
    /// calling [`ParamStore::round_to_f32`] afterwards if they need the
    /// checkpoint round-trip guarantee.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = round_f32(*v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            specs: params.specs.clone(),
            data: vec![0.0; params.count()],
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[self.specs[id.0].range()]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.specs[id.0].range();
        &mut self.data[r]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Name of the first parameter holding a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.specs
            .iter()
            .find(|s| self.data[s.range()].iter().any(|g| !g.is_finite()))
            .map(|s| s.name.as_str())
    }
}
