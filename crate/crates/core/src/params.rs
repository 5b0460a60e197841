//! Flattened parameter vectors and their layout tables.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous, non-overlapping slots covering `[0, P)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slot and returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let slot = ParamSlot {
            name: name.into(),
            offset: self.total,
            shape,
        };
        self.total += slot.len();
        self.slots.push(slot);
        self.slots.len() - 1
    }

    /// Rebuilds a layout from stored slots, checking that they tile `[0, P)`.
    pub fn from_slots(slots: Vec<ParamSlot>) -> Result<Self> {
        let mut total = 0;
        for slot in &slots {
            if slot.offset != total {
                return Err(Error::Format {
                    what: "parameter layout",
                    detail: format!("slot {} starts at {} not {total}", slot.name, slot.offset),
                });
            }
            total += slot.len();
        }
        Ok(ParamLayout { slots, total })
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> &ParamSlot {
        &self.slots[index]
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Model parameters θ flattened into one vector of length P.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: ParamLayout,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let data = vec![0.0; layout.total()];
        ParamVector { layout, data }
    }

    pub fn from_data(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::shape(
                "param vector",
                format!("layout expects {} values, got {}", layout.total(), data.len()),
            ));
        }
        Ok(ParamVector { layout, data })
    }

    /// Concatenates per-slot tensors in layout order.
    pub fn flatten(layout: ParamLayout, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.slots().len() {
            return Err(Error::shape(
                "flatten",
                format!("{} slots, {} tensors", layout.slots().len(), tensors.len()),
            ));
        }
        let mut data = Vec::with_capacity(layout.total());
        for (slot, t) in layout.slots().iter().zip(tensors) {
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::shape(
                    "flatten",
                    format!("slot {} wants {:?}, got {:?}", slot.name, slot.shape, t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        Ok(ParamVector { layout, data })
    }

    /// Splits the vector back into one tensor per slot.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .slots()
            .iter()
            .map(|slot| {
                Tensor::new(slot.shape.clone(), self.data[slot.range()].to_vec())
                    .expect("slot shape matches its range")
            })
            .collect()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slot_data(&self, index: usize) -> &[f64] {
        &self.data[self.layout.slot(index).range()]
    }

    pub fn slot_data_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.slot(index).range();
        &mut self.data[range]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
