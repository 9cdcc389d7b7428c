//! Judge ensemble for the three soft dimensions.
//!
//! Each dimension decomposes into operable atomic aspects. A judge answers
//! one aspect per call with a binary verdict wrapped in the percent-delimited
//! frame; per-aspect vote fractions are fused into a dimension estimate with
//! configurable weights (equal by default). Verdicts are also digested into
//! feedback text for recurrent generators.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

use crate::backend::{
    BackendError, CallPath, CallPurpose, ChatBackend, ChatRequest, DecodingParams,
};
use crate::model::{Formalization, NLTheorem};
use crate::wire;

/// A soft quality dimension.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Dimension {
    /// Logical preservation: the formal statement keeps the logical content
    /// and inferential structure of the informal one.
    #[serde(rename = "LP")]
    Lp,
    /// Mathematical consistency: objects and operations are represented
    /// coherently and accurately.
    #[serde(rename = "MC")]
    Mc,
    /// Formal quality: structural clarity and conciseness.
    #[serde(rename = "FQ")]
    Fq,
}

impl Dimension {
    pub fn all() -> [Dimension; 3] {
        [Dimension::Lp, Dimension::Mc, Dimension::Fq]
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dimension::Lp => write!(f, "LP"),
            Dimension::Mc => write!(f, "MC"),
            Dimension::Fq => write!(f, "FQ"),
        }
    }
}

/// One operable atomic aspect: a single yes/no question about the candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeAspect {
    pub dimension: Dimension,
    pub aspect_id: String,
    pub description: String,
}

fn aspect(dimension: Dimension, aspect_id: &str, description: &str) -> JudgeAspect {
    JudgeAspect {
        dimension,
        aspect_id: aspect_id.to_string(),
        description: description.to_string(),
    }
}

/// The built-in aspect registry: four for logical preservation, three for
/// mathematical consistency, two for formal quality.
pub fn registry() -> &'static [JudgeAspect] {
    static REGISTRY: OnceLock<Vec<JudgeAspect>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        vec![
            aspect(
                Dimension::Lp,
                "pre_arg_structure",
                "Does the formalized code reflect the inherent predicate-argument structure of the natural language statement?",
            ),
            aspect(
                Dimension::Lp,
                "quantification",
                "Does the formalized code accurately formalize all quantifiers, such as universal and existential, present in the natural language statement?",
            ),
            aspect(
                Dimension::Lp,
                "formula",
                "Are all mathematical formulas and expressions in the natural language statement, such as equations and inequalities, correctly and completely represented in the formalized code?",
            ),
            aspect(
                Dimension::Lp,
                "relation",
                "Are the logical and mathematical relationships between propositions in the natural language statement preserved in the formalized code?",
            ),
            aspect(
                Dimension::Mc,
                "concept",
                "Are all mathematical concepts mentioned in the natural language statement, such as integers, fractions, real numbers, complex numbers, derivatives, integrals, vectors, matrices, probabilities, expectations, and variances, are correctly formalized in the formalized code?",
            ),
            aspect(
                Dimension::Mc,
                "constant",
                "Are all mathematical constants mentioned in the natural language statement, such as 1, 2/3, \u{03c0}, e, are properly included in the formalized code?",
            ),
            aspect(
                Dimension::Mc,
                "operator",
                "Are all mathematical operators used in the natural language statement, such as addition, subtraction, multiplication, division, summation, exponentiation, and product, are correctly represented in the formalized code?",
            ),
            aspect(
                Dimension::Fq,
                "conciseness",
                "Is the formalized code expressed in a minimal, non-redundant form, avoiding unnecessary repetition or complexity?",
            ),
            aspect(
                Dimension::Fq,
                "logical_consistency",
                "Is the formalized code internally coherent and contains no contradictions under the logical rules of the relevant formal system?",
            ),
        ]
    })
}

/// Aspects of one dimension, in registry order.
pub fn registry_for(dimension: Dimension) -> Vec<&'static JudgeAspect> {
    registry()
        .iter()
        .filter(|a| a.dimension == dimension)
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum VerdictParseError {
    #[error("response carries no percent-delimited result block")]
    MissingDelimiters,
    #[error("result block carries no `Judgement:` line")]
    MissingJudgementLine,
    #[error("unrecognized judgement token `{0}`")]
    UnrecognizedToken(String),
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("{count} verdict scores for {expected} weights")]
    LengthMismatch { count: usize, expected: usize },
    #[error("fusion weights must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("fusion weights for {dimension} sum to {sum}, expected 1")]
    WeightsNotNormalized { dimension: Dimension, sum: f64 },
    #[error("weight vector for {dimension} has {count} entries, registry has {expected}")]
    WeightCountMismatch {
        dimension: Dimension,
        count: usize,
        expected: usize,
    },
    #[error("votes_per_aspect must be at least 1")]
    ZeroVotes,
    #[error("no verdicts for any selected dimension")]
    EmptySelection,
    #[error("judge backend failed while scoring {dimension}: {source}")]
    Backend {
        dimension: Dimension,
        #[source]
        source: BackendError,
    },
}

/// One parsed judge answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub aspect: JudgeAspect,
    /// 1 for "True", 0 for "False".
    pub judgement: u8,
    pub explanation: String,
    /// Original response text. Held in memory for sidecar transcripts but
    /// never serialized into traces; equality ignores it for the same
    /// reason.
    #[serde(skip, default)]
    pub raw: String,
}

impl PartialEq for JudgeVerdict {
    fn eq(&self, other: &Self) -> bool {
        self.aspect == other.aspect
            && self.judgement == other.judgement
            && self.explanation == other.explanation
    }
}

/// Per-dimension fusion weights over aspect scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFusionWeights")]
pub struct FusionWeights {
    lp: Vec<f64>,
    mc: Vec<f64>,
    fq: Vec<f64>,
}

#[derive(Deserialize)]
struct RawFusionWeights {
    lp: Vec<f64>,
    mc: Vec<f64>,
    fq: Vec<f64>,
}

impl TryFrom<RawFusionWeights> for FusionWeights {
    type Error = JudgeError;

    fn try_from(raw: RawFusionWeights) -> Result<Self, JudgeError> {
        FusionWeights::new(raw.lp, raw.mc, raw.fq)
    }
}

impl FusionWeights {
    pub fn new(lp: Vec<f64>, mc: Vec<f64>, fq: Vec<f64>) -> Result<Self, JudgeError> {
        for (dimension, weights) in [
            (Dimension::Lp, &lp),
            (Dimension::Mc, &mc),
            (Dimension::Fq, &fq),
        ] {
            let expected = registry_for(dimension).len();
            if weights.len() != expected {
                return Err(JudgeError::WeightCountMismatch {
                    dimension,
                    count: weights.len(),
                    expected,
                });
            }
            for &w in weights {
                if !(w.is_finite() && w > 0.0) {
                    return Err(JudgeError::NonPositiveWeight(w));
                }
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(JudgeError::WeightsNotNormalized { dimension, sum });
            }
        }
        Ok(Self { lp, mc, fq })
    }

    /// Equal weights within each dimension.
    pub fn equal() -> Self {
        let even = |n: usize| vec![1.0 / n as f64; n];
        Self {
            lp: even(registry_for(Dimension::Lp).len()),
            mc: even(registry_for(Dimension::Mc).len()),
            fq: even(registry_for(Dimension::Fq).len()),
        }
    }

    pub fn for_dimension(&self, dimension: Dimension) -> &[f64] {
        match dimension {
            Dimension::Lp => &self.lp,
            Dimension::Mc => &self.mc,
            Dimension::Fq => &self.fq,
        }
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self::equal()
    }
}

const JUDGE_SYSTEM_TEMPLATE: &str = "You are an expert in formal language Lean4.

You will be given a mathematical statement and its proof written in natural language and LaTeX symbols.

You will also be given a formal code which attempted to describe the given mathematical statement and its proof in Lean4.

Your task is to evaluate a specific aspect of the formal code.

The description of the aspect is: {aspect}

Your need to give two things about your evaluation:

1. the judgement of whether the formalization meets this aspect. This should be a binary value in \"True\" or \"False\".

2. the detailed explanation of your judgement.

You should wrap your final results in a way illustrated as the following:

%%%%%%%%%%

Explanation: Your Detailed Explanation

Judgement: Your Binary Judgement

%%%%%%%%%%

Strictly follow the instructions that have been claimed.";

const JUDGE_USER_TEMPLATE: &str = "Natural language statement: {statement}

Natural language proof: {proof}

There are some Lean4 formal codes describing the given mathematical statement and its proof: {code}";

/// System and user texts asking a judge about one aspect of one candidate.
pub fn build_aspect_prompt(
    theorem: &NLTheorem,
    x: &Formalization,
    aspect: &JudgeAspect,
) -> (String, String) {
    let system = JUDGE_SYSTEM_TEMPLATE.replace("{aspect}", &aspect.description);
    let user = JUDGE_USER_TEMPLATE
        .replace("{statement}", &theorem.nl_statement)
        .replace("{proof}", &theorem.nl_proof)
        .replace("{code}", &x.body);
    (system, user)
}

/// Parses a raw judge response into a verdict.
///
/// Takes the last percent-delimited region, reads the `Explanation:` text and
/// the `Judgement:` token; "True"/"False" are matched case-insensitively with
/// surrounding whitespace ignored.
pub fn parse_verdict(raw: &str, aspect: &JudgeAspect) -> Result<JudgeVerdict, VerdictParseError> {
    let block = wire::last_delimited_block(raw).ok_or(VerdictParseError::MissingDelimiters)?;
    let lines: Vec<&str> = block.lines().collect();
    let judgement_index = lines
        .iter()
        .rposition(|line| line.trim_start().starts_with("Judgement:"))
        .ok_or(VerdictParseError::MissingJudgementLine)?;
    let token = lines[judgement_index]
        .trim_start()
        .strip_prefix("Judgement:")
        .expect("line starts with prefix")
        .trim();
    let judgement = match token.to_ascii_lowercase().as_str() {
        "true" => 1,
        "false" => 0,
        _ => return Err(VerdictParseError::UnrecognizedToken(token.to_string())),
    };

    let mut explanation = String::new();
    if let Some(start) = lines
        .iter()
        .position(|line| line.trim_start().starts_with("Explanation:"))
    {
        let first = lines[start]
            .trim_start()
            .strip_prefix("Explanation:")
            .expect("line starts with prefix")
            .trim_start();
        let mut parts = vec![first.to_string()];
        for line in &lines[start + 1..judgement_index] {
            parts.push(line.to_string());
        }
        explanation = parts.join("\n").trim().to_string();
    }

    Ok(JudgeVerdict {
        aspect: aspect.clone(),
        judgement,
        explanation,
        raw: raw.to_string(),
    })
}

/// Weighted fusion of per-aspect scores into one dimension estimate.
pub fn fuse_dimension(scores: &[f64], weights: &[f64]) -> Result<f64, JudgeError> {
    if scores.len() != weights.len() {
        return Err(JudgeError::LengthMismatch {
            count: scores.len(),
            expected: weights.len(),
        });
    }
    let fused: f64 = scores.iter().zip(weights).map(|(s, w)| s * w).sum();
    // Weight-normalization tolerance can push the sum a hair past 1.
    Ok(fused.clamp(0.0, 1.0))
}

/// Soft-dimension estimates plus every verdict behind them.
#[derive(Debug, Clone)]
pub struct SoftScores {
    pub lp: f64,
    pub mc: f64,
    pub fq: f64,
    pub verdicts: Vec<JudgeVerdict>,
}

/// Judge-side configuration bundled for scoring calls.
pub struct JudgeHarness<'a> {
    pub backend: &'a dyn ChatBackend,
    pub weights: &'a FusionWeights,
    pub votes_per_aspect: u32,
    /// How often a vote with an unparseable response is re-asked before it
    /// counts as 0.
    pub parse_retries: u32,
    pub decoding: DecodingParams,
}

impl JudgeHarness<'_> {
    /// Queries every registered aspect `votes_per_aspect` times and fuses the
    /// vote fractions into the three dimension estimates.
    ///
    /// A vote whose response cannot be parsed is retried, then counted as 0;
    /// transport failures surface as a dimension-level error so the caller
    /// never accepts on partial scores.
    pub fn score_soft_dimensions(
        &self,
        theorem: &NLTheorem,
        x: &Formalization,
    ) -> Result<SoftScores, JudgeError> {
        if self.votes_per_aspect == 0 {
            return Err(JudgeError::ZeroVotes);
        }
        let mut estimates = [0.0f64; 3];
        let mut verdicts = Vec::new();
        for (slot, dimension) in Dimension::all().into_iter().enumerate() {
            let mut aspect_scores = Vec::new();
            for aspect in registry_for(dimension) {
                let mut true_votes = 0u32;
                for vote in 0..self.votes_per_aspect {
                    match self.cast_vote(theorem, x, aspect, vote, dimension)? {
                        Some(verdict) => {
                            true_votes += u32::from(verdict.judgement);
                            verdicts.push(verdict);
                        }
                        None => {
                            // Exhausted parse retries: pessimistic zero vote.
                        }
                    }
                }
                aspect_scores.push(f64::from(true_votes) / f64::from(self.votes_per_aspect));
            }
            estimates[slot] =
                fuse_dimension(&aspect_scores, self.weights.for_dimension(dimension))?;
        }
        Ok(SoftScores {
            lp: estimates[0],
            mc: estimates[1],
            fq: estimates[2],
            verdicts,
        })
    }

    fn cast_vote(
        &self,
        theorem: &NLTheorem,
        x: &Formalization,
        aspect: &JudgeAspect,
        vote: u32,
        dimension: Dimension,
    ) -> Result<Option<JudgeVerdict>, JudgeError> {
        let (system, user) = build_aspect_prompt(theorem, x, aspect);
        for attempt in 0..=self.parse_retries {
            let request = ChatRequest {
                system: system.clone(),
                user: user.clone(),
                decoding: self.decoding,
                path: CallPath {
                    theorem_id: theorem.id.clone(),
                    step: x.step_index,
                    purpose: CallPurpose::Judge {
                        candidate: x.id(),
                        aspect: aspect.aspect_id.clone(),
                        vote,
                        attempt,
                    },
                },
            };
            let raw = self
                .backend
                .complete(&request)
                .map_err(|source| JudgeError::Backend { dimension, source })?;
            match parse_verdict(&raw, aspect) {
                Ok(verdict) => return Ok(Some(verdict)),
                Err(_) if attempt < self.parse_retries => continue,
                Err(_) => return Ok(None),
            }
        }
        Ok(None)
    }
}

/// Renders verdicts for the selected dimensions into recurrent-generator
/// feedback: one block per verdict, in registry order per dimension.
pub fn feedback_digest(
    verdicts: &[JudgeVerdict],
    dims: &BTreeSet<Dimension>,
) -> Result<String, JudgeError> {
    let mut blocks = Vec::new();
    for dimension in Dimension::all() {
        if !dims.contains(&dimension) {
            continue;
        }
        for aspect in registry_for(dimension) {
            for verdict in verdicts
                .iter()
                .filter(|v| v.aspect.aspect_id == aspect.aspect_id)
            {
                let word = if verdict.judgement == 1 { "True" } else { "False" };
                blocks.push(format!(
                    "Aspect: {}\nEvaluation: Explanation: {}\nJudgement: {}",
                    aspect.description, verdict.explanation, word
                ));
            }
        }
    }
    if blocks.is_empty() {
        return Err(JudgeError::EmptySelection);
    }
    Ok(blocks.join("\n\n"))
}

/// The full dimension set, the broadest feedback selection.
pub fn all_dimensions() -> BTreeSet<Dimension> {
    Dimension::all().into_iter().collect()
}
