//! Scalar objective arithmetic: the masked composite objective, its plug-in
//! estimate from judge scores, the composed uncertainty level, the one-sided
//! lower confidence bound, and the strict-improvement comparison used by the
//! acceptance rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DimensionScores, MarginConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("score {name}={value} lies outside [0, 1]")]
    ScoreOutOfRange { name: &'static str, value: f64 },
    #[error("uncertainty level {name}={value} must lie strictly inside (0, 1)")]
    DeltaOutOfRange { name: &'static str, value: f64 },
    #[error("epsilon must be a nonnegative finite number, got {0}")]
    InvalidEpsilon(f64),
    #[error("comparison requires finite values, got {0}")]
    NonFiniteValue(f64),
}

/// A value of the composite objective, its plug-in estimate, or a lower
/// confidence bound. Composite and plug-in values lie in [0, 1]; bounds may
/// go negative because per-dimension margins are subtracted without clamping.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveValue(f64);

impl ObjectiveValue {
    /// Initial incumbent estimate, below every reachable objective value.
    pub const SENTINEL: ObjectiveValue = ObjectiveValue(-1.0);

    /// Wraps a value produced by one of this module's operations or read
    /// back from a trace. No range check; producers establish the range.
    pub fn new_unchecked(value: f64) -> Self {
        Self(value)
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn is_sentinel(&self) -> bool {
        self.0 == Self::SENTINEL.0
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), ObjectiveError> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ObjectiveError::ScoreOutOfRange { name, value })
    }
}

/// Masked composite objective: one third of the soft-score sum, annihilated
/// when the validity bit is off.
pub fn composite_objective(
    fv: bool,
    lp: f64,
    mc: f64,
    fq: f64,
) -> Result<ObjectiveValue, ObjectiveError> {
    check_unit("lp", lp)?;
    check_unit("mc", mc)?;
    check_unit("fq", fq)?;
    if !fv {
        return Ok(ObjectiveValue(0.0));
    }
    Ok(ObjectiveValue((lp + mc + fq) / 3.0))
}

/// The composite objective evaluated on judge estimates. Total on any valid
/// score vector: unjudged candidates carry zeros, and the mask keeps them at
/// zero anyway.
pub fn plugin_estimator(scores: &DimensionScores) -> ObjectiveValue {
    if !scores.fv() {
        return ObjectiveValue(0.0);
    }
    ObjectiveValue((scores.lp() + scores.mc() + scores.fq()) / 3.0)
}

/// Combined uncertainty level when the three soft dimensions are judged
/// independently at levels `delta_lp`, `delta_mc`, `delta_fq`.
pub fn aggregate_uncertainty(
    delta_lp: f64,
    delta_mc: f64,
    delta_fq: f64,
) -> Result<f64, ObjectiveError> {
    let names = ["lp", "mc", "fq"];
    for (name, delta) in names.iter().zip([delta_lp, delta_mc, delta_fq]) {
        if !(delta.is_finite() && delta > 0.0 && delta < 1.0) {
            return Err(ObjectiveError::DeltaOutOfRange { name, value: delta });
        }
    }
    Ok(1.0 - (1.0 - delta_lp) * (1.0 - delta_mc) * (1.0 - delta_fq))
}

/// One-sided lower confidence bound on the composite objective: each soft
/// estimate is deflated by its margin before summing. Per-dimension terms are
/// deliberately not clamped at zero, so the bound can be negative.
pub fn lower_confidence_bound(scores: &DimensionScores, margins: &MarginConfig) -> ObjectiveValue {
    if !scores.fv() {
        return ObjectiveValue(0.0);
    }
    let [m_lp, m_mc, m_fq] = margins.margins();
    ObjectiveValue(((scores.lp() - m_lp) + (scores.mc() - m_mc) + (scores.fq() - m_fq)) / 3.0)
}

/// Strict-improvement test behind the acceptance rule. `epsilon` guards
/// against judge-score jitter; zero realizes the pure strict inequality.
pub fn strictly_improves(
    candidate: ObjectiveValue,
    incumbent: ObjectiveValue,
    epsilon: f64,
) -> Result<bool, ObjectiveError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(ObjectiveError::InvalidEpsilon(epsilon));
    }
    for value in [candidate.value(), incumbent.value()] {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFiniteValue(value));
        }
    }
    Ok(candidate.value() > incumbent.value() + epsilon)
}
