//! Per-class feature memories.
//!
//! [`DynamicMemory`] is filled online from the test stream and keeps, per
//! class, the lowest-entropy features seen so far. [`StaticMemory`] holds the
//! labeled few-shot features and is immutable after construction.

use crate::error::{Error, Result};
use crate::linalg::{is_unit, UNIT_NORM_TOL};
use crate::scalar::Scalar;

/// Payload bytes for `classes * slots` rows of `dim` 32-bit floats.
pub fn footprint_bytes(classes: u64, slots: u64, dim: u64) -> u64 {
    classes * slots * dim * 4
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot<T> {
    pub feature: Vec<T>,
    pub entropy: T,
}

/// Result of a single dynamic memory write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// Stored in a previously empty slot.
    Inserted(usize),
    /// Evicted the highest-entropy slot.
    Replaced(usize),
    /// Entropy not strictly lower than the current maximum; memory unchanged.
    Rejected,
}

impl WriteOutcome {
    pub fn slot(self) -> Option<usize> {
        match self {
            WriteOutcome::Inserted(i) | WriteOutcome::Replaced(i) => Some(i),
            WriteOutcome::Rejected => None,
        }
    }
}

/// C classes, each with `capacity` slots. Empty slots are absent rather than
/// zero-filled and never take part in reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMemory<T> {
    dim: usize,
    capacity: usize,
    slots: Vec<Vec<Option<MemorySlot<T>>>>,
}

impl<T: Scalar> DynamicMemory<T> {
    pub fn new(num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || capacity == 0 || dim == 0 {
            return Err(Error::Config(
                "dynamic memory needs positive class count, length and dimension".into(),
            ));
        }
        Ok(Self {
            dim,
            capacity,
            slots: vec![vec![None; capacity]; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.slots.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.slots.len() {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.slots.len(),
            });
        }
        Ok(())
    }

    /// Writes `feature` under `class`: fill the lowest empty slot, otherwise
    /// evict the (lowest-indexed) maximum-entropy slot if `entropy` is strictly
    /// smaller than it.
    pub fn write(&mut self, class: usize, feature: &[T], entropy: T) -> Result<WriteOutcome> {
        self.check_class(class)?;
        if !entropy.is_finite() {
            return Err(Error::NonFiniteEntropy(entropy.as_f64()));
        }
        if feature.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: feature.len(),
            });
        }
        if !is_unit(feature, UNIT_NORM_TOL) {
            return Err(Error::NotNormalized {
                row: 0,
                norm: crate::linalg::norm(feature).as_f64(),
            });
        }
        let slots = &mut self.slots[class];
        let new_slot = || MemorySlot {
            feature: feature.to_vec(),
            entropy,
        };
        if let Some(i) = slots.iter().position(Option::is_none) {
            slots[i] = Some(new_slot());
            return Ok(WriteOutcome::Inserted(i));
        }
        let mut worst = 0;
        for (i, s) in slots.iter().enumerate().skip(1) {
            if s.as_ref().unwrap().entropy > slots[worst].as_ref().unwrap().entropy {
                worst = i;
            }
        }
        if entropy < slots[worst].as_ref().unwrap().entropy {
            slots[worst] = Some(new_slot());
            Ok(WriteOutcome::Replaced(worst))
        } else {
            Ok(WriteOutcome::Rejected)
        }
    }

    /// Features of the occupied slots of `class`, in slot order.
    pub fn occupied_features(&self, class: usize) -> Result<Vec<&[T]>> {
        self.check_class(class)?;
        Ok(self.slots[class]
            .iter()
            .flatten()
            .map(|s| s.feature.as_slice())
            .collect())
    }

    pub fn occupied_entropies(&self, class: usize) -> Result<Vec<T>> {
        self.check_class(class)?;
        Ok(self.slots[class].iter().flatten().map(|s| s.entropy).collect())
    }

    pub fn slot(&self, class: usize, index: usize) -> Option<&MemorySlot<T>> {
        self.slots.get(class)?.get(index)?.as_ref()
    }

    pub fn occupancy(&self, class: usize) -> usize {
        self.slots.get(class).map_or(0, |s| s.iter().flatten().count())
    }

    /// Number of classes holding exactly `k` features, for `k` in `0..=capacity`.
    pub fn occupancy_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.capacity + 1];
        for c in 0..self.num_classes() {
            hist[self.occupancy(c)] += 1;
        }
        hist
    }

    pub fn footprint_bytes(&self) -> u64 {
        footprint_bytes(self.num_classes() as u64, self.capacity as u64, self.dim as u64)
    }

    pub(crate) fn from_slots(dim: usize, capacity: usize, slots: Vec<Vec<Option<MemorySlot<T>>>>) -> Self {
        Self {
            dim,
            capacity,
            slots,
        }
    }
}

/// Frozen C x K bank of labeled shot features.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticMemory<T> {
    dim: usize,
    shots: usize,
    features: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> StaticMemory<T> {
    /// Builds the memory from per-class shot lists; every class must supply the
    /// same number K >= 1 of unit-norm vectors.
    pub fn build(per_class: Vec<Vec<Vec<T>>>) -> Result<Self> {
        let shots = per_class.first().map_or(0, Vec::len);
        if per_class.is_empty() || shots == 0 {
            return Err(Error::ShotCountMismatch {
                class: 0,
                expected: 1,
                found: 0,
            });
        }
        let dim = per_class[0][0].len();
        for (class, list) in per_class.iter().enumerate() {
            if list.len() != shots {
                return Err(Error::ShotCountMismatch {
                    class,
                    expected: shots,
                    found: list.len(),
                });
            }
            for (row, v) in list.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        found: v.len(),
                    });
                }
                if !is_unit(v, UNIT_NORM_TOL) {
                    return Err(Error::NotNormalized {
                        row: class * shots + row,
                        norm: crate::linalg::norm(v).as_f64(),
                    });
                }
            }
        }
        Ok(Self {
            dim,
            shots,
            features: per_class,
        })
    }

    /// Groups a labeled feature set by class.
    pub fn from_feature_set(set: &crate::io::FeatureSet, num_classes: usize) -> Result<Self> {
        let labels = set.labels().ok_or(Error::Unlabeled)?;
        let mut per_class: Vec<Vec<Vec<T>>> = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            let class = l as usize;
            if l < 0 || class >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: i64::from(l),
                    num_classes,
                });
            }
            per_class[class].push(crate::scalar::cast_slice(set.row(i)));
        }
        Self::build(per_class)
    }

    pub fn num_classes(&self) -> usize {
        self.features.len()
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Always true: there is no mutating API after [`StaticMemory::build`].
    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn class_bank(&self, class: usize) -> &[Vec<T>] {
        &self.features[class]
    }

    pub fn footprint_bytes(&self) -> u64 {
        footprint_bytes(self.num_classes() as u64, self.shots as u64, self.dim as u64)
    }

    pub fn cast<U: Scalar>(&self) -> StaticMemory<U> {
        StaticMemory {
            dim: self.dim,
            shots: self.shots,
            features: self
                .features
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|v| v.iter().map(|&x| U::lit(x.as_f64())).collect())
                        .collect()
                })
                .collect(),
        }
    }
}
