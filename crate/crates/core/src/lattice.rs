//! Combinatorics over modality subsets.
//!
//! A [`ModalityCombo`] is a non-empty bitmask over 0-based modality indices.
//! Reports and CSV files use 1-based labels ("134" = modalities 1, 3 and 4),
//! matching the usual table layout for four MRI sequences.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CcsdError, Result};

/// Largest modality count the lattice accepts. 2^16 - 1 combos is already
/// far beyond anything a forward pass can cache.
pub const MAX_MODALITIES: usize = 16;

const DEFAULT_NAMES_4: [&str; 4] = ["FLAIR", "T1", "T1c", "T2"];

/// One input modality.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModalityId {
    pub index: usize,
    pub name: String,
}

impl ModalityId {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        Self {
            index,
            name: name.into(),
        }
    }

    /// 1-based label used in reports.
    pub fn label(&self) -> usize {
        self.index + 1
    }
}

/// Default modality names: the four MRI sequences for `n == 4`, `M1..Mn` otherwise.
pub fn default_modalities(n: usize) -> Vec<ModalityId> {
    (0..n)
        .map(|i| {
            let name = if n == 4 {
                DEFAULT_NAMES_4[i].to_string()
            } else {
                format!("M{}", i + 1)
            };
            ModalityId::new(i, name)
        })
        .collect()
}

/// A non-empty subset of modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ModalityCombo {
    bits: u32,
}

impl ModalityCombo {
    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits == 0 {
            return Err(CcsdError::invalid("modality combination must be non-empty"));
        }
        if bits >> MAX_MODALITIES != 0 {
            return Err(CcsdError::invalid(format!(
                "bitmask {bits:#x} exceeds {MAX_MODALITIES} modalities"
            )));
        }
        Ok(Self { bits })
    }

    /// Builds a combo from 0-based indices.
    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Result<Self> {
        let mut bits = 0u32;
        for i in indices {
            if i >= MAX_MODALITIES {
                return Err(CcsdError::invalid(format!("modality index {i} out of range")));
            }
            bits |= 1 << i;
        }
        Self::from_bits(bits)
    }

    /// The combo holding every one of `n` modalities.
    pub fn full(n: usize) -> Result<Self> {
        check_n(n)?;
        Self::from_bits(((1u64 << n) - 1) as u32)
    }

    pub fn singleton(index: usize) -> Result<Self> {
        Self::from_indices([index])
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn size(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn contains(self, index: usize) -> bool {
        index < 32 && self.bits & (1 << index) != 0
    }

    pub fn is_subset_of(self, other: ModalityCombo) -> bool {
        self.bits & !other.bits == 0
    }

    /// Highest member index + 1; the smallest `n` this combo fits into.
    pub fn min_modalities(self) -> usize {
        32 - self.bits.leading_zeros() as usize
    }

    /// Members in ascending index order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let bits = self.bits;
        (0..32usize).filter(move |i| bits & (1 << i) != 0)
    }

    /// Indices in `0..n` that are not members.
    pub fn complement(self, n: usize) -> Vec<usize> {
        (0..n).filter(|&i| !self.contains(i)).collect()
    }

    /// Set difference `self \ {index}`.
    pub fn remove(self, index: usize) -> Result<Self> {
        if !self.contains(index) {
            return Err(CcsdError::invalid(format!(
                "modality {} is not a member of {}",
                index + 1,
                self
            )));
        }
        if self.size() == 1 {
            return Err(CcsdError::WouldBeEmpty { modality: index });
        }
        Ok(Self {
            bits: self.bits & !(1 << index),
        })
    }

    /// Set union `self ∪ {index}`.
    pub fn insert(self, index: usize) -> Result<Self> {
        Self::from_bits(self.bits | (1 << index))
    }
}

/// Label form: ascending 1-based labels concatenated. With ten or more
/// modalities the labels are separated by `.` to stay unambiguous.
impl fmt::Display for ModalityCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wide = self.min_modalities() > 9;
        for (pos, i) in self.members().enumerate() {
            if wide && pos > 0 {
                f.write_str(".")?;
            }
            write!(f, "{}", i + 1)?;
        }
        Ok(())
    }
}

impl From<ModalityCombo> for String {
    fn from(c: ModalityCombo) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ModalityCombo {
    type Error = CcsdError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for ModalityCombo {
    type Err = CcsdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(CcsdError::invalid("empty combination label"));
        }
        let labels: Vec<usize> = if s.contains('.') {
            s.split('.')
                .map(|p| p.parse::<usize>().map_err(|_| bad_label(s)))
                .collect::<Result<_>>()?
        } else {
            s.chars()
                .map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(|| bad_label(s)))
                .collect::<Result<_>>()?
        };
        let mut bits = 0u32;
        for label in labels {
            if label == 0 || label > MAX_MODALITIES {
                return Err(bad_label(s));
            }
            if bits & (1 << (label - 1)) != 0 {
                return Err(CcsdError::invalid(format!("duplicate label in combination {s:?}")));
            }
            bits |= 1 << (label - 1);
        }
        Self::from_bits(bits)
    }
}

fn bad_label(s: &str) -> CcsdError {
    CcsdError::invalid(format!("malformed combination label {s:?}"))
}

fn check_n(n: usize) -> Result<()> {
    if !(1..=MAX_MODALITIES).contains(&n) {
        return Err(CcsdError::invalid(format!(
            "modality count must be in [1, {MAX_MODALITIES}], got {n}"
        )));
    }
    Ok(())
}

/// Every non-empty combo of `n` modalities in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComboLattice {
    n_modalities: usize,
    combos: Vec<ModalityCombo>,
}

impl ComboLattice {
    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn combos(&self) -> &[ModalityCombo] {
        &self.combos
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    pub fn full(&self) -> ModalityCombo {
        *self.combos.last().expect("lattice is never empty")
    }

    /// Position of `combo` in canonical order.
    pub fn index_of(&self, combo: ModalityCombo) -> Option<usize> {
        self.combos.binary_search_by(|c| canonical_key(*c).cmp(&canonical_key(combo))).ok()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ModalityCombo> {
        self.combos.iter()
    }
}

impl<'a> IntoIterator for &'a ComboLattice {
    type Item = &'a ModalityCombo;
    type IntoIter = std::slice::Iter<'a, ModalityCombo>;

    fn into_iter(self) -> Self::IntoIter {
        self.combos.iter()
    }
}

fn canonical_key(c: ModalityCombo) -> (usize, u32) {
    (c.size(), c.bits)
}

/// All `2^n - 1` non-empty combos, ordered by size then bitmask.
pub fn enumerate_combos(n: usize) -> Result<ComboLattice> {
    check_n(n)?;
    let mut combos: Vec<ModalityCombo> = (1..(1u32 << n)).map(|bits| ModalityCombo { bits }).collect();
    combos.sort_by_key(|c| canonical_key(*c));
    Ok(ComboLattice {
        n_modalities: n,
        combos,
    })
}

/// All combos of exactly `k` out of `n` modalities, ascending bitmask order.
pub fn level_set(n: usize, k: usize) -> Result<Vec<ModalityCombo>> {
    check_n(n)?;
    if k < 1 || k > n {
        return Err(CcsdError::invalid(format!("level k={k} outside [1, {n}]")));
    }
    Ok((1..(1u32 << n))
        .filter(|b| b.count_ones() as usize == k)
        .map(|bits| ModalityCombo { bits })
        .collect())
}

/// Removes modality `m` from `combo`.
pub fn remove_modality(combo: ModalityCombo, m: &ModalityId) -> Result<ModalityCombo> {
    combo.remove(m.index)
}
