use crate::error::{Error, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    decay: bool,
}

/// Flat registry of named parameter tensors, each with a gradient buffer of
/// identical shape.
///
/// `version` advances whenever values change, so tapes recorded against an
/// older version are rejected by `Mlp::backward`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` controls whether weight decay applies.
    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>, decay: bool) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "shape/value mismatch for {name}");
        assert!(self.id(name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name: name.to_owned(),
            shape: shape.to_vec(),
            grad: vec![0.0; value.len()],
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    /// Mutable access to values; invalidates outstanding tapes.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    /// Simultaneous access for the optimizer: (value, grad, decay).
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &mut [f64], bool) {
        self.version += 1;
        let p = &mut self.params[id.0];
        (&mut p.value, &mut p.grad, p.decay)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Multiplies every gradient by `factor` (mini-batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Overwrites values from `(name, shape, values)` triples. Every stored
    /// tensor must be present with an identical shape.
    pub fn assign_from<'a, I>(&mut self, tensors: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    {
        let mut seen = vec![false; self.params.len()];
        for (name, shape, values) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unexpected tensor {name}")))?;
            if self.params[id.0].shape != shape {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    shape, self.params[id.0].shape
                )));
            }
            self.value_mut(id).copy_from_slice(values);
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "missing tensor {}",
                self.params[i].name
            )));
        }
        Ok(())
    }
}
