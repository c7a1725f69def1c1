//! Budgets, access units and masks, and the four-channel cost decomposition.
//!
//! The unit of cost everywhere is the stored byte length of a block. Only the
//! expert-read channel is controllable; base reads, output writes and
//! metadata are reported but never budgeted.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::container::BlockKey;
use crate::digest::Digest;
use crate::error::{Error, Result};

/// Zero-based index of an expert within a catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertId(pub u32);

impl ExpertId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One `(expert, tensor, block)` read unit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccessUnit {
    pub expert: ExpertId,
    #[serde(flatten)]
    pub key: BlockKey,
}

impl AccessUnit {
    pub fn new(expert: ExpertId, key: BlockKey) -> Self {
        AccessUnit { expert, key }
    }
}

impl fmt::Display for AccessUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}:{}", self.expert, self.key)
    }
}

/// The set of units with `A = 1`. Everything outside it is omitted, and an
/// omission is represented by absence from this set and nothing else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessMask {
    selected: BTreeSet<AccessUnit>,
    universe: Digest,
}

impl AccessMask {
    pub fn new(catalog: &Catalog, selected: impl IntoIterator<Item = AccessUnit>) -> Result<Self> {
        let selected: BTreeSet<AccessUnit> = selected.into_iter().collect();
        for unit in &selected {
            if catalog.entry(unit).is_none() {
                return Err(Error::UnitNotInCatalog {
                    expert: unit.expert.0,
                    key: unit.key.clone(),
                });
            }
        }
        Ok(AccessMask {
            selected,
            universe: catalog.universe_digest(),
        })
    }

    pub fn empty(catalog: &Catalog) -> Self {
        AccessMask {
            selected: BTreeSet::new(),
            universe: catalog.universe_digest(),
        }
    }

    pub fn full(catalog: &Catalog) -> Self {
        AccessMask {
            selected: catalog.units().collect(),
            universe: catalog.universe_digest(),
        }
    }

    pub fn contains(&self, unit: &AccessUnit) -> bool {
        self.selected.contains(unit)
    }

    pub fn selected(&self) -> &BTreeSet<AccessUnit> {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn universe_digest(&self) -> Digest {
        self.universe
    }
}

/// Expert-read budget `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    Bytes(u64),
    /// At least the cost of reading the whole universe.
    Full,
}

impl Budget {
    /// Concrete byte cap given the full-universe cost.
    pub fn resolve(self, universe_cost: u64) -> u64 {
        match self {
            Budget::Bytes(b) => b,
            Budget::Full => universe_cost,
        }
    }

    /// Fraction of the full-read endpoint, rounded down to whole bytes.
    pub fn fraction(fraction: f64, universe_cost: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "budget fraction must lie in [0, 1], got {fraction}"
            )));
        }
        if fraction == 1.0 {
            return Ok(Budget::Full);
        }
        Ok(Budget::Bytes((fraction * universe_cost as f64).floor() as u64))
    }
}

/// Realized run cost split into the four channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub base_bytes: u64,
    pub expert_bytes: u64,
    pub output_bytes: u64,
    pub metadata_bytes: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.base_bytes + self.expert_bytes + self.output_bytes + self.metadata_bytes
    }
}

/// `C_expert(A)`: the summed byte cost of the selected units.
pub fn mask_cost(mask: &AccessMask, catalog: &Catalog) -> Result<u64> {
    units_cost(mask.selected.iter(), catalog)
}

pub(crate) fn units_cost<'a>(units: impl IntoIterator<Item = &'a AccessUnit>, catalog: &Catalog) -> Result<u64> {
    units.into_iter().try_fold(0u64, |acc, unit| {
        catalog
            .entry(unit)
            .map(|e| acc + e.stats.byte_cost)
            .ok_or_else(|| Error::UnitNotInCatalog {
                expert: unit.expert.0,
                key: unit.key.clone(),
            })
    })
}

/// Realized expert bytes over the full-read cost `K · C̄`.
pub fn expert_read_fraction(run_expert_bytes: u64, experts: usize, mean_expert_cost: f64) -> Result<f64> {
    let denom = experts as f64 * mean_expert_cost;
    if experts == 0 || denom.is_nan() || denom <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "expert-read fraction needs K >= 1 and a positive mean cost (K={experts}, C={mean_expert_cost})"
        )));
    }
    Ok(run_expert_bytes as f64 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_matches_reported_operator_table_row() {
        // 3.46 GB realized against K=20 experts averaging 171.0/20 GB.
        let mean = 171.0e9 / 20.0;
        let f = expert_read_fraction(3_460_000_000, 20, mean).unwrap();
        assert!((f - 0.020233918).abs() < 1e-6, "{f}");
        assert!((f - 0.0202).abs() < 5e-5);
    }

    #[test]
    fn fraction_endpoints() {
        assert_eq!(expert_read_fraction(0, 4, 10.0).unwrap(), 0.0);
        assert_eq!(expert_read_fraction(40, 4, 10.0).unwrap(), 1.0);
        assert!(expert_read_fraction(1, 0, 10.0).is_err());
        assert!(expert_read_fraction(1, 2, 0.0).is_err());
    }

    #[test]
    fn budget_fraction_resolution() {
        assert_eq!(Budget::fraction(1.0, 999).unwrap(), Budget::Full);
        assert_eq!(Budget::fraction(0.5, 999).unwrap(), Budget::Bytes(499));
        assert_eq!(Budget::fraction(0.0, 999).unwrap(), Budget::Bytes(0));
        assert!(Budget::fraction(1.5, 999).is_err());
        assert_eq!(Budget::Full.resolve(123), 123);
    }
}
