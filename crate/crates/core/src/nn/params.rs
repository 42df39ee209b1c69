use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Modules hold [`ParamId`]s into a store so several
/// modules can be optimized jointly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with std `1/sqrt(fan_in)`.
    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::randn(shape.to_vec(), std, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.tensors.len()).map(ParamId).collect()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces every tensor by the one with the same name in `other`.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> crate::Result<()> {
        for (name, t) in named {
            let id = self
                .find(name)
                .ok_or_else(|| crate::Error::data(format!("checkpoint has unknown tensor {name}")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(crate::Error::Shape(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        if named.len() != self.tensors.len() {
            return Err(crate::Error::data(format!(
                "checkpoint holds {} tensors, model has {}",
                named.len(),
                self.tensors.len()
            )));
        }
        Ok(())
    }
}
