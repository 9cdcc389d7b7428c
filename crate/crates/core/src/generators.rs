//! The three generator roles as prompt builders plus backend invocation and
//! code-block extraction.
//!
//! One-off generators formalize from scratch; repairers refine a candidate
//! the prover rejected, guided by error feedback; recurrent generators refine
//! the incumbent, guided by judge feedback on selected dimensions.

use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

use crate::backend::{
    BackendError, CallPath, CallPurpose, ChatBackend, ChatRequest, DecodingParams,
};
use crate::judge::Dimension;
use crate::model::{Formalization, NLTheorem, Origin, Role};
use crate::wire;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generator name must be nonempty")]
    EmptyName,
    #[error("feedback dimensions must be set exactly for recurrent generators")]
    FeedbackDimsMismatch,
    #[error("{role} proposals require refinement context")]
    MissingContext { role: Role },
    #[error("one-off proposals take no refinement context")]
    UnexpectedContext,
    #[error("refinement feedback must be nonempty")]
    EmptyFeedback,
    #[error("response carries no extractable code block")]
    NoCodeBlock,
}

/// A configured generator: its role, backend, and decoding parameters.
/// Recurrent generators also carry the dimensions whose judge feedback they
/// receive.
#[derive(Clone)]
pub struct GeneratorSpec {
    pub name: String,
    pub role: Role,
    pub feedback_dims: BTreeSet<Dimension>,
    pub backend: Arc<dyn ChatBackend>,
    pub decoding: DecodingParams,
}

impl std::fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("name", &self.name)
            .field("role", &self.role)
            .field("feedback_dims", &self.feedback_dims)
            .field("backend", &self.backend.name())
            .field("decoding", &self.decoding)
            .finish()
    }
}

impl GeneratorSpec {
    pub fn new(
        name: impl Into<String>,
        role: Role,
        feedback_dims: BTreeSet<Dimension>,
        backend: Arc<dyn ChatBackend>,
        decoding: DecodingParams,
    ) -> Result<Self, GeneratorError> {
        let name = name.into();
        if name.is_empty() {
            return Err(GeneratorError::EmptyName);
        }
        let needs_dims = role == Role::Reg;
        if needs_dims != !feedback_dims.is_empty() {
            return Err(GeneratorError::FeedbackDimsMismatch);
        }
        Ok(Self {
            name,
            role,
            feedback_dims,
            backend,
            decoding,
        })
    }
}

/// One sampled proposal. Proposals whose response carried no code block are
/// flagged and must not enter the candidate set.
#[derive(Debug, Clone)]
pub struct CandidateProposal {
    pub formalization: Formalization,
    pub raw_response: String,
    pub extraction_ok: bool,
}

/// What came out of one round of sampling a generator.
#[derive(Debug, Default)]
pub struct ProposalBatch {
    pub proposals: Vec<CandidateProposal>,
    /// Samples lost to transport failures after backend-internal retries.
    pub backend_failures: u32,
}

const OOG_SYSTEM: &str = "You are an expert in formal language Lean4.

You will be given a mathematical statement and its proof written in natural language and LaTeX symbols.

Your task is to provide the formal code of the given natural language mathematical statement and its proof in Lean4 with the following instructions:

1. You should give the formal code directly without any additional comments or explanations.

2. In case that you need to import any necessary preambles, you should not import any fake (non-exist) preambles.

3. You should wrap the formal code in a way illustrated as the following:

%%%%%%%%%%

Your Formal Code

%%%%%%%%%%

Strictly follow the instructions that have been claimed.";

const REFINE_SYSTEM: &str = "You are an expert in formal language Lean4.

You will be given a mathematical statement and its proof written in natural language and LaTeX symbols.

You will also be given a formal code which attempted to describe the given mathematical statement and its proof in Lean4.

Your task is to refine the given formal code to make it correct while maintaining the alignment with the given natural language mathematical statement and proof.

Here are some instructions for your task:

1. You should give the formal code directly without any additional comments or explanations.

2. In case that you need to import any necessary preambles, you should not import any fake (non-exist) preambles.

3. You should wrap the formal code in a way illustrated as the following:

%%%%%%%%%%

Your Formal Code

%%%%%%%%%%

Strictly follow the instructions that have been claimed.";

const ERROR_FEEDBACK_HEADER: &str =
    "According to the theorem prover, the error details of the provided formal code are:";

/// Prompt for a from-scratch formalization.
pub fn build_oog_prompt(theorem: &NLTheorem) -> (String, String) {
    let user = format!(
        "Natural language statement: {}\n\nNatural language proof: {}\n\nGive me the Lean4 formal code of them:",
        theorem.nl_statement, theorem.nl_proof
    );
    (OOG_SYSTEM.to_string(), user)
}

fn refine_user(theorem: &NLTheorem, x: &Formalization, feedback: &str) -> String {
    format!(
        "Natural language statement: {}\n\nNatural language proof: {}\n\nThere are some Lean4 formal codes describing the given mathematical statement and its proof: {}\n\nYou should refine the formal code for your task to make it correct.\n\nHere are some feedbacks about the formal code which can be used to help your task: {}",
        theorem.nl_statement, theorem.nl_proof, x.body, feedback
    )
}

/// Prompt for a validity repair, embedding the prover's error feedback.
pub fn build_fvr_prompt(
    theorem: &NLTheorem,
    x: &Formalization,
    error_feedback: &str,
) -> Result<(String, String), GeneratorError> {
    if error_feedback.trim().is_empty() {
        return Err(GeneratorError::EmptyFeedback);
    }
    let feedback = format!("{ERROR_FEEDBACK_HEADER}\n\n{error_feedback}");
    Ok((REFINE_SYSTEM.to_string(), refine_user(theorem, x, &feedback)))
}

/// Prompt for a recurrent refinement, embedding the judge-feedback digest.
pub fn build_reg_prompt(
    theorem: &NLTheorem,
    x: &Formalization,
    judge_feedback: &str,
) -> Result<(String, String), GeneratorError> {
    if judge_feedback.trim().is_empty() {
        return Err(GeneratorError::EmptyFeedback);
    }
    Ok((REFINE_SYSTEM.to_string(), refine_user(theorem, x, judge_feedback)))
}

/// Leading tokens that mark a bare (unwrapped) response as code.
pub fn default_code_prefixes() -> Vec<String> {
    ["import", "theorem", "example", "open", "--"]
        .into_iter()
        .map(str::to_string)
        .collect()
}

/// Pulls the formal code out of a raw response: the last percent-delimited
/// block, trimmed of blank edge lines. Responses without delimiters are
/// accepted whole when they start with a plausible code token, so a dropped
/// wrapper does not waste a prover call.
pub fn extract_code_block(raw: &str, code_prefixes: &[String]) -> Result<String, GeneratorError> {
    if let Some(block) = wire::last_delimited_block(raw) {
        let trimmed: Vec<&str> = {
            let lines: Vec<&str> = block.lines().collect();
            let start = lines
                .iter()
                .position(|l| !l.trim().is_empty())
                .unwrap_or(lines.len());
            let end = lines
                .iter()
                .rposition(|l| !l.trim().is_empty())
                .map_or(start, |i| i + 1);
            lines[start..end].to_vec()
        };
        if trimmed.is_empty() {
            return Err(GeneratorError::NoCodeBlock);
        }
        return Ok(trimmed.join("\n"));
    }
    let trimmed = raw.trim();
    if code_prefixes
        .iter()
        .any(|prefix| trimmed.starts_with(prefix.as_str()))
    {
        return Ok(trimmed.to_string());
    }
    Err(GeneratorError::NoCodeBlock)
}

/// Refinement context for repairers and recurrent generators.
pub struct ProposalContext<'a> {
    /// The candidate being refined; becomes the proposal's parent.
    pub parent: &'a Formalization,
    /// Error feedback (repairers) or judge-feedback digest (recurrent).
    pub feedback: &'a str,
}

/// Samples up to `n` proposals from one generator.
///
/// Ordinals start at `first_ordinal` so repeated rounds within a step stay
/// unique. Transport failures shrink the batch instead of failing it;
/// extraction failures are returned flagged for the caller to drop.
pub fn propose(
    spec: &GeneratorSpec,
    theorem: &NLTheorem,
    context: Option<&ProposalContext<'_>>,
    n: u32,
    step: usize,
    first_ordinal: u32,
    code_prefixes: &[String],
) -> Result<ProposalBatch, GeneratorError> {
    let (system, user, parent_id) = match (spec.role, context) {
        (Role::Oog, None) => {
            let (system, user) = build_oog_prompt(theorem);
            (system, user, None)
        }
        (Role::Oog, Some(_)) => return Err(GeneratorError::UnexpectedContext),
        (role, None) => return Err(GeneratorError::MissingContext { role }),
        (Role::Fvr, Some(ctx)) => {
            let (system, user) = build_fvr_prompt(theorem, ctx.parent, ctx.feedback)?;
            (system, user, Some(ctx.parent.id()))
        }
        (Role::Reg, Some(ctx)) => {
            let (system, user) = build_reg_prompt(theorem, ctx.parent, ctx.feedback)?;
            (system, user, Some(ctx.parent.id()))
        }
    };

    let mut batch = ProposalBatch::default();
    for sample in 0..n {
        let request = ChatRequest {
            system: system.clone(),
            user: user.clone(),
            decoding: spec.decoding,
            path: CallPath {
                theorem_id: theorem.id.clone(),
                step,
                purpose: CallPurpose::Generate {
                    generator: spec.name.clone(),
                    role: spec.role,
                    sample: first_ordinal + sample,
                },
            },
        };
        let raw = match spec.backend.complete(&request) {
            Ok(raw) => raw,
            Err(BackendError::Transport { .. }) => {
                batch.backend_failures += 1;
                continue;
            }
            Err(_) => {
                // Protocol-level trouble consumed the sample budget; treat it
                // like a malformed response rather than retrying.
                batch.backend_failures += 1;
                continue;
            }
        };
        let (body, extraction_ok) = match extract_code_block(&raw, code_prefixes) {
            Ok(body) => (body, true),
            Err(_) => (String::new(), false),
        };
        batch.proposals.push(CandidateProposal {
            formalization: Formalization {
                body,
                origin: Origin {
                    generator: spec.name.clone(),
                    role: spec.role,
                },
                step_index: step,
                ordinal: first_ordinal + sample,
                parent_id: parent_id.clone(),
            },
            raw_response: raw,
            extraction_ok,
        });
    }
    Ok(batch)
}
