use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sub-network a parameter belongs to. Optimizer phases and freeze
/// contracts are expressed over groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Hierarchical encoder: embeddings, special vectors, encoders, compressors.
    Encoder,
    /// Decompressors and decoders.
    Decoder,
    /// MLM heads and output biases.
    Heads,
    /// Coherence checkers.
    Checker,
    /// PNDB question matrix, projections and gates.
    Pndb,
    Generator,
    Discriminator,
    /// Answer-matrix generator.
    PndbGenerator,
}

impl Group {
    pub const MAIN: [Group; 5] = [
        Group::Encoder,
        Group::Decoder,
        Group::Heads,
        Group::Checker,
        Group::Pndb,
    ];
}

#[derive(Clone, Debug)]
pub(crate) struct Slot<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub steps: u64,
}

/// Named trainable tensors with gradient buffers and Adam moments, in
/// insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    pub(crate) slots: Vec<Slot<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.slots.len());
        let zeros = Tensor::zeros(value.shape());
        self.slots.push(Slot {
            name: name.to_string(),
            group,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            steps: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Xavier-uniform initialised matrix.
    pub fn insert_xavier(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(name, group, &[rows, cols], a, rng)
    }

    pub fn insert_uniform(
        &mut self,
        name: &str,
        group: Group,
        shape: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-scale..=scale)))
            .collect();
        self.insert(name, group, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_filled(
        &mut self,
        name: &str,
        group: Group,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.insert(name, group, Tensor::filled(shape, T::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| groups.contains(&s.group))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.slots[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].grad
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>, u64) {
        let s = &self.slots[id.0];
        (&s.m, &s.v, s.steps)
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self, ids: &[ParamId]) -> T {
        ids.iter()
            .flat_map(|id| self.slots[id.0].grad.data().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!(
                    "{}: {:?} vs {:?}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                ),
            ));
        }
        slot.value = value;
        Ok(())
    }

    /// Zero every value of the given groups (test fixtures and ablations).
    pub fn zero_values(&mut self, groups: &[Group]) {
        for s in self.slots.iter_mut().filter(|s| groups.contains(&s.group)) {
            s.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Bit patterns of all values of the given groups, keyed by name.
    pub fn fingerprint(&self, groups: &[Group]) -> Vec<(String, Vec<u64>)> {
        self.slots
            .iter()
            .filter(|s| groups.contains(&s.group))
            .map(|s| (s.name.clone(), s.value.to_bits()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub(crate) fn restore_moments(
        &mut self,
        id: ParamId,
        m: Tensor<T>,
        v: Tensor<T>,
        steps: u64,
    ) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if m.shape() != slot.value.shape() || v.shape() != slot.value.shape() {
            return Err(Error::Checkpoint(format!(
                "moment shape mismatch for {}",
                slot.name
            )));
        }
        slot.m = m;
        slot.v = v;
        slot.steps = steps;
        Ok(())
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId) -> &mut Slot<T> {
        &mut self.slots[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::<f64>::new();
        s.insert_filled("w", Group::Encoder, &[2], 0.0).unwrap();
        assert!(s.insert_filled("w", Group::Decoder, &[2], 0.0).is_err());
    }

    #[test]
    fn group_selection_keeps_order() {
        let mut s = ParameterStore::<f64>::new();
        let a = s.insert_filled("a", Group::Encoder, &[1], 0.0).unwrap();
        s.insert_filled("b", Group::Decoder, &[1], 0.0).unwrap();
        let c = s.insert_filled("c", Group::Encoder, &[1], 0.0).unwrap();
        assert_eq!(s.ids_in(&[Group::Encoder]), vec![a, c]);
    }
}
