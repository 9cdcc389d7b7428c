//! Shared domain types: theorems, candidate formalizations, score vectors,
//! step records, and per-theorem run traces.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

use crate::objective::{self, ObjectiveValue};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("theorem id must be nonempty")]
    EmptyTheoremId,
    #[error("theorem `{0}` has an empty statement")]
    EmptyStatement(String),
    #[error("theorem `{0}` has an empty proof and empty proofs were not admitted")]
    EmptyProof(String),
    #[error("score {name}={value} lies outside [0, 1]")]
    ScoreOutOfRange { name: &'static str, value: f64 },
    #[error("unscored candidates must carry zero soft scores")]
    NonZeroUnscored,
    #[error("uncertainty level {name}={value} must lie strictly inside (0, 1)")]
    DeltaOutOfRange { name: &'static str, value: f64 },
    #[error("margin {name}={value} must be >= 0")]
    NegativeMargin { name: &'static str, value: f64 },
    #[error("candidate produced by {role} must reference a parent")]
    MissingParent { role: Role },
    #[error("one-off candidates must not reference a parent")]
    UnexpectedParent,
    #[error("candidate step {step} precedes its parent step {parent_step}")]
    StepBeforeParent { step: usize, parent_step: usize },
}

/// A natural-language statement/proof pair, the unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NLTheorem {
    pub id: String,
    pub nl_statement: String,
    pub nl_proof: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

impl NLTheorem {
    pub fn new(
        id: impl Into<String>,
        nl_statement: impl Into<String>,
        nl_proof: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let theorem = Self {
            id: id.into(),
            nl_statement: nl_statement.into(),
            nl_proof: nl_proof.into(),
            source_tag: None,
        };
        theorem.validate(false)?;
        Ok(theorem)
    }

    /// Empty proofs are degenerate inputs and must be admitted explicitly.
    pub fn validate(&self, allow_empty_proof: bool) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyTheoremId);
        }
        if self.nl_statement.is_empty() {
            return Err(ModelError::EmptyStatement(self.id.clone()));
        }
        if self.nl_proof.is_empty() && !allow_empty_proof {
            return Err(ModelError::EmptyProof(self.id.clone()));
        }
        Ok(())
    }
}

/// Generator role within the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    /// One-off generator: formalizes from scratch.
    #[serde(rename = "OOG")]
    Oog,
    /// Validity repairer: fixes candidates the prover rejected.
    #[serde(rename = "FVR")]
    Fvr,
    /// Recurrent generator: refines the incumbent using judge feedback.
    #[serde(rename = "REG")]
    Reg,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Oog => write!(f, "OOG"),
            Role::Fvr => write!(f, "FVR"),
            Role::Reg => write!(f, "REG"),
        }
    }
}

/// Which generator produced a candidate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub generator: String,
    pub role: Role,
}

/// Candidate identity within one theorem run: duplicates of the same body are
/// permitted, so identity is positional, not content-addressed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateId {
    pub step_index: usize,
    pub generator: String,
    pub role: Role,
    pub ordinal: u32,
}

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s{}/{}/{}/{}",
            self.step_index, self.generator, self.role, self.ordinal
        )
    }
}

/// A candidate formal statement+proof with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formalization {
    /// Complete formal code, statement and proof together.
    pub body: String,
    pub origin: Origin,
    pub step_index: usize,
    pub ordinal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<CandidateId>,
}

impl Formalization {
    /// The empty seed incumbent. Never scored; its estimate is the sentinel.
    pub fn initial() -> Self {
        Self {
            body: String::new(),
            origin: Origin {
                generator: String::new(),
                role: Role::Oog,
            },
            step_index: 0,
            ordinal: 0,
            parent_id: None,
        }
    }

    pub fn is_initial(&self) -> bool {
        self.body.is_empty() && self.origin.generator.is_empty()
    }

    pub fn id(&self) -> CandidateId {
        CandidateId {
            step_index: self.step_index,
            generator: self.origin.generator.clone(),
            role: self.origin.role,
            ordinal: self.ordinal,
        }
    }

    pub fn fingerprint(&self) -> String {
        body_fingerprint(&self.body)
    }

    /// Repair/refinement candidates must descend from a parent no later than
    /// themselves; one-off candidates must not claim a parent.
    pub fn check_lineage(&self) -> Result<(), ModelError> {
        match (self.origin.role, &self.parent_id) {
            (Role::Oog, Some(_)) => Err(ModelError::UnexpectedParent),
            (Role::Oog, None) => Ok(()),
            (role, None) => Err(ModelError::MissingParent { role }),
            (_, Some(parent)) => {
                if self.step_index < parent.step_index {
                    Err(ModelError::StepBeforeParent {
                        step: self.step_index,
                        parent_step: parent.step_index,
                    })
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Stable short identifier for a candidate body.
pub fn body_fingerprint(body: &str) -> String {
    let digest = Sha256::digest(body.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn check_unit(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::ScoreOutOfRange { name, value })
    }
}

/// The four-dimension score vector: hard validity bit plus soft estimates.
///
/// `soft_scored` is false for candidates the judges never saw (validity
/// failures); those carry zero soft scores so downstream arithmetic stays
/// total, and the validity mask keeps the zeros inert in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDimensionScores")]
pub struct DimensionScores {
    fv: bool,
    lp: f64,
    mc: f64,
    fq: f64,
    soft_scored: bool,
}

#[derive(Deserialize)]
struct RawDimensionScores {
    fv: bool,
    lp: f64,
    mc: f64,
    fq: f64,
    soft_scored: bool,
}

impl TryFrom<RawDimensionScores> for DimensionScores {
    type Error = ModelError;

    fn try_from(raw: RawDimensionScores) -> Result<Self, ModelError> {
        DimensionScores::new(raw.fv, raw.lp, raw.mc, raw.fq, raw.soft_scored)
    }
}

impl DimensionScores {
    pub fn new(
        fv: bool,
        lp: f64,
        mc: f64,
        fq: f64,
        soft_scored: bool,
    ) -> Result<Self, ModelError> {
        check_unit("lp", lp)?;
        check_unit("mc", mc)?;
        check_unit("fq", fq)?;
        if !soft_scored && (lp != 0.0 || mc != 0.0 || fq != 0.0) {
            return Err(ModelError::NonZeroUnscored);
        }
        Ok(Self {
            fv,
            lp,
            mc,
            fq,
            soft_scored,
        })
    }

    /// Scores for a candidate that passed the gate and was judged.
    pub fn judged(lp: f64, mc: f64, fq: f64) -> Result<Self, ModelError> {
        Self::new(true, lp, mc, fq, true)
    }

    /// Scores for a candidate the judges never saw.
    pub fn unscored(fv: bool) -> Self {
        Self {
            fv,
            lp: 0.0,
            mc: 0.0,
            fq: 0.0,
            soft_scored: false,
        }
    }

    pub fn fv(&self) -> bool {
        self.fv
    }

    pub fn fv_bit(&self) -> f64 {
        if self.fv {
            1.0
        } else {
            0.0
        }
    }

    pub fn lp(&self) -> f64 {
        self.lp
    }

    pub fn mc(&self) -> f64 {
        self.mc
    }

    pub fn fq(&self) -> f64 {
        self.fq
    }

    pub fn soft_scored(&self) -> bool {
        self.soft_scored
    }
}

/// Uncertainty levels and margin deflations for the soft dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMarginConfig")]
pub struct MarginConfig {
    delta_lp: f64,
    delta_mc: f64,
    delta_fq: f64,
    margin_lp: f64,
    margin_mc: f64,
    margin_fq: f64,
}

#[derive(Deserialize)]
struct RawMarginConfig {
    delta_lp: f64,
    delta_mc: f64,
    delta_fq: f64,
    margin_lp: f64,
    margin_mc: f64,
    margin_fq: f64,
}

impl TryFrom<RawMarginConfig> for MarginConfig {
    type Error = ModelError;

    fn try_from(raw: RawMarginConfig) -> Result<Self, ModelError> {
        MarginConfig::new(
            [raw.delta_lp, raw.delta_mc, raw.delta_fq],
            [raw.margin_lp, raw.margin_mc, raw.margin_fq],
        )
    }
}

impl MarginConfig {
    pub fn new(deltas: [f64; 3], margins: [f64; 3]) -> Result<Self, ModelError> {
        let names = ["lp", "mc", "fq"];
        for (name, delta) in names.iter().zip(deltas) {
            if !(delta.is_finite() && delta > 0.0 && delta < 1.0) {
                return Err(ModelError::DeltaOutOfRange { name, value: delta });
            }
        }
        for (name, margin) in names.iter().zip(margins) {
            if !(margin.is_finite() && margin >= 0.0) {
                return Err(ModelError::NegativeMargin { name, value: margin });
            }
        }
        Ok(Self {
            delta_lp: deltas[0],
            delta_mc: deltas[1],
            delta_fq: deltas[2],
            margin_lp: margins[0],
            margin_mc: margins[1],
            margin_fq: margins[2],
        })
    }

    pub fn deltas(&self) -> [f64; 3] {
        [self.delta_lp, self.delta_mc, self.delta_fq]
    }

    pub fn margins(&self) -> [f64; 3] {
        [self.margin_lp, self.margin_mc, self.margin_fq]
    }
}

impl Default for MarginConfig {
    /// Margins default to zero so the confidence bound coincides with the
    /// plug-in estimate; uncertainty levels default to 0.05 per dimension.
    fn default() -> Self {
        Self::new([0.05; 3], [0.0; 3]).expect("default margins are valid")
    }
}

/// One scored candidate inside a step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub formalization: Formalization,
    pub scores: DimensionScores,
    pub estimate: ObjectiveValue,
}

/// Incumbent reference as stored on both sides of a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncumbentSnapshot {
    pub formalization: Formalization,
    pub estimate: ObjectiveValue,
}

/// One iteration: the candidate set in scan order, the acceptance decision,
/// and everything needed to resume the loop from this point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// Candidates in the exact order the selection scanned them.
    pub candidates: Vec<CandidateRecord>,
    pub incumbent_before: IncumbentSnapshot,
    pub incumbent_after: IncumbentSnapshot,
    pub accepted: bool,
    /// Acceptance slack the step was evaluated with; kept so traces replay.
    pub epsilon: f64,
    /// Scores of the incumbent after this step (zeroed sentinel before any
    /// acceptance).
    pub incumbent_scores: DimensionScores,
    /// Judge verdicts stored for the incumbent at acceptance time; recurrent
    /// generators feed on these instead of re-judging.
    pub incumbent_verdicts: Vec<crate::judge::JudgeVerdict>,
    /// Running responsiveness estimate after this step.
    pub responsiveness: crate::responsiveness::ResponsivenessMap,
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    MaxSteps,
    PerfectScore,
    /// The run gave up on this theorem (backend outage past the retry
    /// budget); the trace is truncated and may be continued by a resume.
    ExternalStop,
}

impl TerminalReason {
    /// Terminal traces are complete; external stops may be resumed.
    pub fn is_complete(&self) -> bool {
        !matches!(self, TerminalReason::ExternalStop)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace {theorem}: step indices must increase by 1 from 0, found {found} at position {position}")]
    NonContiguousSteps {
        theorem: String,
        position: usize,
        found: usize,
    },
    #[error("trace {theorem}: incumbent estimate decreased at step {step} ({before} -> {after})")]
    EstimateDecreased {
        theorem: String,
        step: usize,
        before: f64,
        after: f64,
    },
    #[error("trace {theorem}: acceptance flag disagrees with incumbent change at step {step}")]
    AcceptanceFlagMismatch { theorem: String, step: usize },
    #[error("trace {theorem}: incumbent chain broken entering step {step}")]
    BrokenIncumbentChain { theorem: String, step: usize },
    #[error("trace {theorem}: replay selected a different incumbent at step {step}")]
    ReplayDiverged { theorem: String, step: usize },
    #[error("trace {theorem}: candidate lineage corrupt at step {step}: {source}")]
    Lineage {
        theorem: String,
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("trace {theorem}: validity regressed on the incumbent at step {step}")]
    ValidityRegressed { theorem: String, step: usize },
    #[error("trace {theorem}: seed incumbent survived although a valid candidate was scored")]
    SeedSurvivedValidCandidate { theorem: String },
}

/// Full per-theorem history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub theorem_id: String,
    pub records: Vec<StepRecord>,
    pub terminal_reason: TerminalReason,
}

impl RunTrace {
    /// Verifies every stored invariant, including an acceptance replay:
    /// re-running the selection rule over the stored candidates must
    /// reproduce the stored incumbent sequence exactly.
    pub fn check_invariants(&self) -> Result<(), TraceError> {
        let theorem = &self.theorem_id;
        let mut prev_after: Option<&IncumbentSnapshot> = None;
        let mut incumbent_was_valid = false;
        let mut any_valid_scored = false;

        for (position, record) in self.records.iter().enumerate() {
            if record.step_index != position {
                return Err(TraceError::NonContiguousSteps {
                    theorem: theorem.clone(),
                    position,
                    found: record.step_index,
                });
            }
            if let Some(prev) = prev_after {
                if *prev != record.incumbent_before {
                    return Err(TraceError::BrokenIncumbentChain {
                        theorem: theorem.clone(),
                        step: record.step_index,
                    });
                }
            }
            let before = record.incumbent_before.estimate.value();
            let after = record.incumbent_after.estimate.value();
            if after < before {
                return Err(TraceError::EstimateDecreased {
                    theorem: theorem.clone(),
                    step: record.step_index,
                    before,
                    after,
                });
            }
            let changed = record.incumbent_after.formalization != record.incumbent_before.formalization;
            if changed != record.accepted {
                return Err(TraceError::AcceptanceFlagMismatch {
                    theorem: theorem.clone(),
                    step: record.step_index,
                });
            }
            self.replay_step(record)?;
            for candidate in &record.candidates {
                candidate
                    .formalization
                    .check_lineage()
                    .map_err(|source| TraceError::Lineage {
                        theorem: theorem.clone(),
                        step: record.step_index,
                        source,
                    })?;
            }

            any_valid_scored |= record.candidates.iter().any(|c| c.scores.fv());
            if record.accepted {
                let now_valid = record.incumbent_scores.fv();
                if incumbent_was_valid && !now_valid {
                    return Err(TraceError::ValidityRegressed {
                        theorem: theorem.clone(),
                        step: record.step_index,
                    });
                }
                incumbent_was_valid = now_valid;
            }
            prev_after = Some(&record.incumbent_after);
        }

        if any_valid_scored {
            if let Some(last) = self.records.last() {
                if last.incumbent_after.formalization.is_initial() {
                    return Err(TraceError::SeedSurvivedValidCandidate {
                        theorem: theorem.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Re-derives one step's acceptance decision from its stored candidates.
    fn replay_step(&self, record: &StepRecord) -> Result<(), TraceError> {
        let mut best: Option<&CandidateRecord> = None;
        let mut best_value = 0.0;
        for candidate in &record.candidates {
            if candidate.estimate.value() >= best_value {
                best_value = candidate.estimate.value();
                best = Some(candidate);
            }
        }
        let incumbent_estimate = record.incumbent_before.estimate;
        let accept = match best {
            Some(_) => objective::strictly_improves(
                ObjectiveValue::new_unchecked(best_value),
                incumbent_estimate,
                record.epsilon,
            )
            .unwrap_or(false),
            None => false,
        };
        let expected_after = if accept {
            let best = best.expect("accept implies a best candidate");
            IncumbentSnapshot {
                formalization: best.formalization.clone(),
                estimate: best.estimate,
            }
        } else {
            record.incumbent_before.clone()
        };
        if expected_after != record.incumbent_after || accept != record.accepted {
            return Err(TraceError::ReplayDiverged {
                theorem: self.theorem_id.clone(),
                step: record.step_index,
            });
        }
        Ok(())
    }

    /// Incumbent plug-in estimates after each step.
    pub fn estimate_sequence(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.incumbent_after.estimate.value())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::responsiveness::ResponsivenessMap;

    fn formalization(generator: &str, role: Role, step: usize, ordinal: u32) -> Formalization {
        Formalization {
            body: format!("theorem t{step}_{ordinal} : True := trivial"),
            origin: Origin {
                generator: generator.to_string(),
                role,
            },
            step_index: step,
            ordinal,
            parent_id: None,
        }
    }

    #[test]
    fn theorem_validation() {
        assert!(NLTheorem::new("t1", "stmt", "proof").is_ok());
        assert_eq!(
            NLTheorem::new("", "stmt", "proof").unwrap_err(),
            ModelError::EmptyTheoremId
        );
        assert!(matches!(
            NLTheorem::new("t1", "", "proof").unwrap_err(),
            ModelError::EmptyStatement(_)
        ));
        let degenerate = NLTheorem {
            id: "t1".into(),
            nl_statement: "stmt".into(),
            nl_proof: String::new(),
            source_tag: None,
        };
        assert!(degenerate.validate(true).is_ok());
        assert!(matches!(
            degenerate.validate(false).unwrap_err(),
            ModelError::EmptyProof(_)
        ));
    }

    #[test]
    fn scores_reject_out_of_range() {
        assert!(DimensionScores::judged(0.5, 0.5, 0.5).is_ok());
        assert!(matches!(
            DimensionScores::judged(1.5, 0.5, 0.5).unwrap_err(),
            ModelError::ScoreOutOfRange { name: "lp", .. }
        ));
        assert!(matches!(
            DimensionScores::judged(0.5, -0.1, 0.5).unwrap_err(),
            ModelError::ScoreOutOfRange { name: "mc", .. }
        ));
        assert!(matches!(
            DimensionScores::judged(0.5, 0.5, f64::NAN).unwrap_err(),
            ModelError::ScoreOutOfRange { name: "fq", .. }
        ));
        assert_eq!(
            DimensionScores::new(false, 0.2, 0.0, 0.0, false).unwrap_err(),
            ModelError::NonZeroUnscored
        );
    }

    #[test]
    fn margin_validation() {
        assert!(MarginConfig::new([0.05; 3], [0.0; 3]).is_ok());
        assert!(matches!(
            MarginConfig::new([0.0, 0.05, 0.05], [0.0; 3]).unwrap_err(),
            ModelError::DeltaOutOfRange { name: "lp", .. }
        ));
        assert!(matches!(
            MarginConfig::new([0.05; 3], [0.0, -0.1, 0.0]).unwrap_err(),
            ModelError::NegativeMargin { name: "mc", .. }
        ));
    }

    #[test]
    fn lineage_checks() {
        let oog = formalization("g", Role::Oog, 0, 0);
        assert!(oog.check_lineage().is_ok());

        let mut fvr = formalization("f", Role::Fvr, 0, 0);
        assert_eq!(
            fvr.check_lineage().unwrap_err(),
            ModelError::MissingParent { role: Role::Fvr }
        );
        fvr.parent_id = Some(oog.id());
        assert!(fvr.check_lineage().is_ok());

        let mut reg = formalization("r", Role::Reg, 0, 0);
        reg.parent_id = Some(CandidateId {
            step_index: 3,
            generator: "g".into(),
            role: Role::Oog,
            ordinal: 0,
        });
        assert_eq!(
            reg.check_lineage().unwrap_err(),
            ModelError::StepBeforeParent {
                step: 0,
                parent_step: 3
            }
        );
    }

    fn simple_record(
        step: usize,
        before: (Formalization, f64),
        candidates: Vec<(Formalization, DimensionScores, f64)>,
        after: (Formalization, f64, DimensionScores),
        accepted: bool,
    ) -> StepRecord {
        StepRecord {
            step_index: step,
            candidates: candidates
                .into_iter()
                .map(|(f, s, e)| CandidateRecord {
                    formalization: f,
                    scores: s,
                    estimate: ObjectiveValue::new_unchecked(e),
                })
                .collect(),
            incumbent_before: IncumbentSnapshot {
                formalization: before.0,
                estimate: ObjectiveValue::new_unchecked(before.1),
            },
            incumbent_after: IncumbentSnapshot {
                formalization: after.0,
                estimate: ObjectiveValue::new_unchecked(after.1),
            },
            accepted,
            epsilon: 0.0,
            incumbent_scores: after.2,
            incumbent_verdicts: Vec::new(),
            responsiveness: ResponsivenessMap::default(),
        }
    }

    #[test]
    fn trace_replay_accepts_consistent_history() {
        let seed = Formalization::initial();
        let cand = formalization("g", Role::Oog, 0, 0);
        let scores = DimensionScores::judged(0.6, 0.6, 0.6).unwrap();
        let record = simple_record(
            0,
            (seed, -1.0),
            vec![(cand.clone(), scores, 0.6)],
            (cand, 0.6, scores),
            true,
        );
        let trace = RunTrace {
            theorem_id: "t".into(),
            records: vec![record],
            terminal_reason: TerminalReason::MaxSteps,
        };
        assert!(trace.check_invariants().is_ok());
    }

    #[test]
    fn trace_replay_detects_wrong_incumbent() {
        let seed = Formalization::initial();
        let good = formalization("g", Role::Oog, 0, 0);
        let bad = formalization("g", Role::Oog, 0, 1);
        let scores_good = DimensionScores::judged(0.9, 0.9, 0.9).unwrap();
        let scores_bad = DimensionScores::judged(0.3, 0.3, 0.3).unwrap();
        // Claims the 0.3 candidate won although 0.9 was available.
        let record = simple_record(
            0,
            (seed, -1.0),
            vec![
                (good, scores_good, 0.9),
                (bad.clone(), scores_bad, 0.3),
            ],
            (bad, 0.3, scores_bad),
            true,
        );
        let trace = RunTrace {
            theorem_id: "t".into(),
            records: vec![record],
            terminal_reason: TerminalReason::MaxSteps,
        };
        assert!(matches!(
            trace.check_invariants().unwrap_err(),
            TraceError::ReplayDiverged { step: 0, .. }
        ));
    }

    #[test]
    fn trace_detects_estimate_regression() {
        let seed = Formalization::initial();
        let first = formalization("g", Role::Oog, 0, 0);
        let second = formalization("g", Role::Oog, 1, 0);
        let s1 = DimensionScores::judged(0.6, 0.6, 0.6).unwrap();
        let s2 = DimensionScores::judged(0.3, 0.3, 0.3).unwrap();
        let r0 = simple_record(
            0,
            (seed, -1.0),
            vec![(first.clone(), s1, 0.6)],
            (first.clone(), 0.6, s1),
            true,
        );
        let r1 = simple_record(
            1,
            (first, 0.6),
            vec![(second.clone(), s2, 0.3)],
            (second, 0.3, s2),
            true,
        );
        let trace = RunTrace {
            theorem_id: "t".into(),
            records: vec![r0, r1],
            terminal_reason: TerminalReason::MaxSteps,
        };
        assert!(matches!(
            trace.check_invariants().unwrap_err(),
            TraceError::EstimateDecreased { step: 1, .. }
        ));
    }

    #[test]
    fn seed_incumbent_must_not_survive_a_valid_candidate() {
        // A valid candidate was scored at estimate 0 with the incumbent
        // estimate forged to 0, so replay agrees nothing improved, yet the
        // seed surviving is still flagged as corrupt.
        let seed = Formalization::initial();
        let valid = formalization("g", Role::Oog, 0, 0);
        let scores = DimensionScores::judged(0.0, 0.0, 0.0).unwrap();
        let record = simple_record(
            0,
            (seed.clone(), 0.0),
            vec![(valid, scores, 0.0)],
            (seed, 0.0, DimensionScores::unscored(false)),
            false,
        );
        let trace = RunTrace {
            theorem_id: "t".into(),
            records: vec![record],
            terminal_reason: TerminalReason::MaxSteps,
        };
        assert!(matches!(
            trace.check_invariants().unwrap_err(),
            TraceError::SeedSurvivedValidCandidate { .. }
        ));
    }

    #[test]
    fn serde_round_trip_preserves_scores() {
        let scores = DimensionScores::judged(0.25, 0.5, 1.0).unwrap();
        let json = serde_json::to_string(&scores).unwrap();
        let back: DimensionScores = serde_json::from_str(&json).unwrap();
        assert_eq!(scores, back);

        let invalid = r#"{"fv":true,"lp":1.5,"mc":0.0,"fq":0.0,"soft_scored":true}"#;
        assert!(serde_json::from_str::<DimensionScores>(invalid).is_err());
    }
}
