use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    group: String,
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with one gradient accumulator each, kept in
/// registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            self.find(name).is_none(),
            "parameter {name} registered twice"
        );
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            group: group.to_string(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    /// Distinct group names in first-registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    /// Simultaneous access to a parameter and its own gradient.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        let e = &mut self.entries[id.0];
        (&e.value, &mut e.grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn group_param_count(&self, group: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies all gradients out, in registration order.
    pub fn grads_snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.grad.clone()).collect()
    }

    pub fn values_snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Overwrites every value; shapes must match registration.
    pub fn load_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::StateMismatch(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, v) in self.entries.iter().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(Error::StateMismatch(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value.clone_from(v);
        }
        Ok(())
    }

    /// Multiplies every value by `factor`.
    pub fn scale_values(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.value.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let mut s = ParamStore::new();
        assert_eq!(s.param_count(), 0);
        s.register("a", "w", Tensor::zeros(&[3, 4]));
        s.register("a", "b", Tensor::zeros(&[4]));
        assert_eq!(s.param_count(), 16);
        assert_eq!(s.group_param_count("a"), 16);
        assert_eq!(s.group_param_count("b"), 0);
    }

    #[test]
    fn gradient_shapes_follow_values() {
        let mut s = ParamStore::new();
        let id = s.register("g", "m", Tensor::zeros(&[2, 5]));
        assert_eq!(s.grad(id).shape(), &[2, 5]);
        s.grad_mut(id).fill(1.0);
        s.zero_grads();
        assert!(s.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut s = ParamStore::new();
        s.register("g", "m", Tensor::zeros(&[2, 2]));
        assert!(s.load_values(&[Tensor::zeros(&[4])]).is_err());
        assert!(s.load_values(&[Tensor::zeros(&[2, 2])]).is_ok());
    }
}
