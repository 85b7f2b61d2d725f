//! Flat store of named parameter tensors with trainable/frozen flags.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>, trainable: bool) -> ParamId {
        self.tensors.push(Tensor { name: name.into(), value, trainable });
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id].value
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id].trainable
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.tensors.len()).filter(|&i| self.tensors[i].trainable).collect()
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.tensors.iter().filter(|t| !t.trainable).map(|t| t.value.len()).sum()
    }
}

/// Gradients aligned with a [`ParamStore`]; frozen slots hold nothing and
/// silently drop contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let slots = store
            .tensors()
            .iter()
            .map(|t| t.trainable.then(|| Array2::zeros(t.value.dim())))
            .collect();
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.slots[id].as_ref()
    }

    pub fn wants(&self, id: ParamId) -> bool {
        self.slots[id].is_some()
    }

    pub fn add(&mut self, id: ParamId, g: &Array2<f64>) {
        if let Some(slot) = &mut self.slots[id] {
            *slot += g;
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: ndarray::ArrayView1<f64>) {
        if let Some(slot) = &mut self.slots[id] {
            let mut r = slot.row_mut(row);
            r += &g;
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a, b) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_slots_drop_contributions() {
        let mut store = ParamStore::default();
        let a = store.push("a", Array2::ones((2, 2)), true);
        let b = store.push("b", Array2::ones((3, 1)), false);
        assert_eq!(store.trainable_count(), 4);
        assert_eq!(store.frozen_count(), 3);
        let mut g = Gradients::zeros_like(&store);
        g.add(a, &Array2::ones((2, 2)));
        g.add(b, &Array2::ones((3, 1)));
        assert_eq!(g.get(a).unwrap().sum(), 4.0);
        assert!(g.get(b).is_none());
        assert_eq!(store.find("b"), Some(b));
    }
}
