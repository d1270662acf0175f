//! Named trainable parameters and batch-norm running statistics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Biases and batch-norm affine terms skip weight decay.
    pub decay_exempt: bool,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnState<T> {
    pub name: String,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Number of training batches folded into the running statistics.
    pub updates: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    bn: Vec<BnState<T>>,
    by_name: HashMap<String, usize>,
    bn_by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            bn: Vec::new(),
            by_name: HashMap::new(),
            bn_by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        decay_exempt: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: value.zeros_like(),
            value,
            trainable: true,
            decay_exempt,
        });
        Ok(ParamId(id))
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> Result<BnId> {
        let name = name.into();
        if self.bn_by_name.contains_key(&name) {
            return Err(Error::invalid(format!(
                "duplicate batch-norm name `{name}`"
            )));
        }
        let id = self.bn.len();
        self.bn_by_name.insert(name.clone(), id);
        self.bn.push(BnState {
            name,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            updates: 0,
        });
        Ok(BnId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    pub fn bn(&self, id: BnId) -> &BnState<T> {
        &self.bn[id.0]
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BnState<T> {
        &mut self.bn[id.0]
    }

    pub fn bn_by_name_mut(&mut self, name: &str) -> Option<&mut BnState<T>> {
        self.bn_by_name.get(name).map(|&i| &mut self.bn[i])
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn bn_states(&self) -> impl Iterator<Item = &BnState<T>> {
        self.bn.iter()
    }

    pub fn bn_states_mut(&mut self) -> impl Iterator<Item = &mut BnState<T>> {
        self.bn.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.params[id.0].grad.add_assign(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2]).unwrap(), false).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]).unwrap(), false).is_err());
        s.add_bn("bn", 3).unwrap();
        assert!(s.add_bn("bn", 3).is_err());
        assert_eq!(s.num_trainable(), 2);
    }
}
