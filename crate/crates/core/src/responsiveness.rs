//! Per-generator responsiveness: the observed mean change each generator
//! induces on every score dimension, and the proposal-budget allocation that
//! follows from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DimensionScores;

#[derive(Debug, Error, PartialEq)]
pub enum ResponsivenessError {
    #[error("responsiveness needs at least one candidate")]
    EmptyCandidates,
    #[error("total budget {total} cannot cover floor {floor} for {generators} generators")]
    InfeasibleFloor {
        total: u32,
        floor: u32,
        generators: u32,
    },
    #[error("budget allocation needs at least one generator")]
    NoGenerators,
}

/// Mean per-dimension deltas (validity bit, then the three soft dimensions).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DimensionDeltas {
    pub fv: f64,
    pub lp: f64,
    pub mc: f64,
    pub fq: f64,
}

impl DimensionDeltas {
    pub fn as_array(&self) -> [f64; 4] {
        [self.fv, self.lp, self.mc, self.fq]
    }
}

/// Mean score change of `candidates` relative to `base`, one entry per
/// dimension. Validity deltas are taken on the raw prover bits.
pub fn estimate_responsiveness(
    base: &DimensionScores,
    candidates: &[DimensionScores],
) -> Result<DimensionDeltas, ResponsivenessError> {
    if candidates.is_empty() {
        return Err(ResponsivenessError::EmptyCandidates);
    }
    let count = candidates.len() as f64;
    let mut sums = [0.0f64; 4];
    for candidate in candidates {
        sums[0] += candidate.fv_bit() - base.fv_bit();
        sums[1] += candidate.lp() - base.lp();
        sums[2] += candidate.mc() - base.mc();
        sums[3] += candidate.fq() - base.fq();
    }
    Ok(DimensionDeltas {
        fv: sums[0] / count,
        lp: sums[1] / count,
        mc: sums[2] / count,
        fq: sums[3] / count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsivenessEntry {
    pub generator: String,
    sum: [f64; 4],
    count: u64,
}

impl ResponsivenessEntry {
    /// Running mean of observed per-candidate deltas; absent until at least
    /// one observation exists.
    pub fn mean(&self) -> Option<DimensionDeltas> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(DimensionDeltas {
            fv: self.sum[0] / n,
            lp: self.sum[1] / n,
            mc: self.sum[2] / n,
            fq: self.sum[3] / n,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Running per-generator responsiveness, in generator registry order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponsivenessMap {
    entries: Vec<ResponsivenessEntry>,
}

impl ResponsivenessMap {
    pub fn with_generators<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            entries: names
                .into_iter()
                .map(|name| ResponsivenessEntry {
                    generator: name.as_ref().to_string(),
                    sum: [0.0; 4],
                    count: 0,
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[ResponsivenessEntry] {
        &self.entries
    }

    pub fn add_observation(&mut self, generator: &str, deltas: DimensionDeltas) {
        let entry = match self.entries.iter_mut().find(|e| e.generator == generator) {
            Some(entry) => entry,
            None => {
                self.entries.push(ResponsivenessEntry {
                    generator: generator.to_string(),
                    sum: [0.0; 4],
                    count: 0,
                });
                self.entries.last_mut().expect("just pushed")
            }
        };
        let array = deltas.as_array();
        for (slot, value) in entry.sum.iter_mut().zip(array) {
            *slot += value;
        }
        entry.count += 1;
    }

    pub fn mean_for(&self, generator: &str) -> Option<DimensionDeltas> {
        self.entries
            .iter()
            .find(|e| e.generator == generator)
            .and_then(ResponsivenessEntry::mean)
    }

    /// Merit of one generator under the given dimension weights: the weighted
    /// delta sum, floored at zero so poor responsiveness never punishes a
    /// generator below its budget floor.
    pub fn merit(&self, generator: &str, dimension_weights: [f64; 4]) -> f64 {
        let Some(mean) = self.mean_for(generator) else {
            return 0.0;
        };
        let weighted: f64 = mean
            .as_array()
            .iter()
            .zip(dimension_weights)
            .map(|(d, w)| d * w)
            .sum();
        weighted.max(0.0)
    }
}

/// Splits `total_budget` across the named generators: every generator gets
/// `floor`, and the remainder is apportioned proportionally to merit by
/// largest remainder, which conserves the total exactly. All-zero merits
/// split evenly. Ties go to the earlier generator in registry order.
pub fn allocate_budgets(
    map: &ResponsivenessMap,
    generators: &[&str],
    dimension_weights: [f64; 4],
    total_budget: u32,
    floor: u32,
) -> Result<Vec<(String, u32)>, ResponsivenessError> {
    let merits: Vec<f64> = generators
        .iter()
        .map(|name| map.merit(name, dimension_weights))
        .collect();
    let budgets = largest_remainder(&merits, total_budget, floor)?;
    Ok(generators
        .iter()
        .map(|name| name.to_string())
        .zip(budgets)
        .collect())
}

/// Largest-remainder apportionment of `total − n·floor` proportionally to
/// `merits`, with `floor` added back per slot.
pub fn largest_remainder(
    merits: &[f64],
    total_budget: u32,
    floor: u32,
) -> Result<Vec<u32>, ResponsivenessError> {
    if merits.is_empty() {
        return Err(ResponsivenessError::NoGenerators);
    }
    let n = merits.len() as u32;
    let floors_total = floor.saturating_mul(n);
    if floors_total > total_budget {
        return Err(ResponsivenessError::InfeasibleFloor {
            total: total_budget,
            floor,
            generators: n,
        });
    }
    let remaining = total_budget - floors_total;
    let merit_sum: f64 = merits.iter().map(|m| m.max(0.0)).sum();
    let shares: Vec<f64> = if merit_sum > 0.0 {
        merits
            .iter()
            .map(|m| f64::from(remaining) * m.max(0.0) / merit_sum)
            .collect()
    } else {
        vec![f64::from(remaining) / merits.len() as f64; merits.len()]
    };

    let mut budgets: Vec<u32> = shares.iter().map(|s| s.floor() as u32).collect();
    let assigned: u32 = budgets.iter().sum();
    let mut leftover = remaining - assigned;

    let mut order: Vec<usize> = (0..merits.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for index in order {
        if leftover == 0 {
            break;
        }
        budgets[index] += 1;
        leftover -= 1;
    }

    for budget in &mut budgets {
        *budget += floor;
    }
    Ok(budgets)
}
