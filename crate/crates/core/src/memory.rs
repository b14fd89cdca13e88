//! Per-domain memory banks with momentum updates.
//!
//! Bank contents are plain data: nothing read from a bank participates in
//! gradient computation. [`MemoryBank::snapshot`] hands out detached copies.

use std::collections::HashMap;

use crate::dataset::{Domain, UnlabeledView};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    domain: Domain,
    momentum: f64,
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    slots: Matrix,
}

impl MemoryBank {
    /// Fills one slot per sample with the encoder's feature.
    pub fn init(view: &UnlabeledView, encoder: &Encoder, momentum: f64) -> Result<Self> {
        let rows = view
            .inputs()
            .iter()
            .map(|x| encoder.encode(x))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(view.domain(), view.ids().to_vec(), Matrix::from_rows(&rows)?, momentum)
    }

    pub fn from_rows(domain: Domain, ids: Vec<u64>, slots: Matrix, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
        }
        if ids.len() != slots.rows() || ids.is_empty() {
            return Err(Error::invalid(format!(
                "memory bank needs one row per id ({} ids, {} rows)",
                ids.len(),
                slots.rows()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::invalid(format!("duplicate memory id {id}")));
            }
        }
        for (row, r) in slots.row_iter().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!("memory row {row} is not unit-norm")));
            }
        }
        Ok(MemoryBank {
            domain,
            momentum,
            ids,
            index,
            slots,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// All slots, in id order of [`Self::ids`].
    pub fn rows(&self) -> &Matrix {
        &self.slots
    }

    fn row_of(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("id {id} not in domain {} memory", self.domain)))
    }

    pub fn read(&self, id: u64) -> Result<&[f64]> {
        Ok(self.slots.row(self.row_of(id)?))
    }

    /// `m ← normalize(η·m + (1−η)·v)`.
    pub fn momentum_update(&mut self, id: u64, v: &[f64]) -> Result<()> {
        let row = self.row_of(id)?;
        if v.len() != self.dim() {
            return Err(Error::invalid(format!("feature has {} dims, bank has {}", v.len(), self.dim())));
        }
        if (norm(v) - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("memory update feature is not unit-norm"));
        }
        let eta = self.momentum;
        let slot = self.slots.row_mut(row);
        let mixed: Vec<f64> = slot.iter().zip(v).map(|(m, x)| eta * m + (1.0 - eta) * x).collect();
        slot.copy_from_slice(&l2_normalize(&mixed)?);
        Ok(())
    }

    /// Detached copy of the rows for `ids`, in the given order.
    pub fn snapshot(&self, ids: &[u64]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.dim());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.read(id)?);
        }
        Ok(out)
    }
}
