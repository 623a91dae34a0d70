//! Per-domain memory banks of unit feature vectors.

use std::fmt;

use crate::error::{PcsError, Result};
use crate::geometry::{l2_normalize, norm};

/// Inputs whose norm deviates from 1 by more than this are rejected.
pub const UNIT_INPUT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fixed-size store of one unit vector per sample, blended toward fresh
/// features with momentum `m` after each batch:
/// `v <- unit(m * v + (1 - m) * f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    vectors: Vec<Vec<f64>>,
    momentum: f64,
    domain: Domain,
    renormalize: bool,
}

impl MemoryBank {
    pub fn new(features: Vec<Vec<f64>>, momentum: f64, domain: Domain) -> Result<Self> {
        if features.is_empty() {
            return Err(PcsError::EmptyBank);
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(PcsError::InvalidConfig(format!(
                "bank momentum must lie in [0, 1], got {momentum}"
            )));
        }
        let dim = features[0].len();
        for (index, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(PcsError::ShapeMismatch(format!(
                    "bank vector {index} has dimension {}, expected {dim}",
                    f.len()
                )));
            }
            let n = norm(f);
            if !((n - 1.0).abs() <= UNIT_INPUT_TOL) {
                return Err(PcsError::NonUnitInput { index, norm: n });
            }
        }
        Ok(Self {
            vectors: features,
            momentum,
            domain,
            renormalize: true,
        })
    }

    /// Rebuilds a bank from stored vectors without re-validating norms.
    pub(crate) fn restore(vectors: Vec<Vec<f64>>, momentum: f64, domain: Domain, renormalize: bool) -> Self {
        Self {
            vectors,
            momentum,
            domain,
            renormalize,
        }
    }

    /// Disables renormalization after the momentum blend. Stored vectors are
    /// then no longer guaranteed to be unit-norm.
    pub fn with_renormalize(mut self, renormalize: bool) -> Self {
        self.renormalize = renormalize;
        self
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn renormalizes(&self) -> bool {
        self.renormalize
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, index: usize) -> Result<&[f64]> {
        self.vectors
            .get(index)
            .map(Vec::as_slice)
            .ok_or(PcsError::IndexOutOfRange {
                index,
                len: self.vectors.len(),
            })
    }

    /// Returns copies of the stored vectors in the requested order.
    pub fn lookup(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        indices.iter().map(|&i| self.get(i).map(<[f64]>::to_vec)).collect()
    }

    /// Applies one momentum blend and returns the new stored value.
    ///
    /// An exactly antipodal blend has no direction; the fresh feature is
    /// stored in that case.
    pub fn momentum_update(&mut self, index: usize, f: &[f64]) -> Result<&[f64]> {
        let len = self.vectors.len();
        let m = self.momentum;
        let slot = self
            .vectors
            .get_mut(index)
            .ok_or(PcsError::IndexOutOfRange { index, len })?;
        if f.len() != slot.len() {
            return Err(PcsError::ShapeMismatch(format!(
                "feature has dimension {}, bank stores {}",
                f.len(),
                slot.len()
            )));
        }
        let blended: Vec<f64> = slot
            .iter()
            .zip(f)
            .map(|(v, x)| m * v + (1.0 - m) * x)
            .collect();
        *slot = if self.renormalize {
            l2_normalize(&blended).unwrap_or_else(|_| f.to_vec())
        } else {
            blended
        };
        Ok(slot)
    }

    /// Overwrites a slot with a fresh feature (full refresh).
    pub fn set(&mut self, index: usize, f: Vec<f64>) -> Result<()> {
        let len = self.vectors.len();
        let slot = self
            .vectors
            .get_mut(index)
            .ok_or(PcsError::IndexOutOfRange { index, len })?;
        if f.len() != slot.len() {
            return Err(PcsError::ShapeMismatch(format!(
                "feature has dimension {}, bank stores {}",
                f.len(),
                slot.len()
            )));
        }
        *slot = f;
        Ok(())
    }
}
