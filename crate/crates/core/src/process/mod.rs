//! The candidate-construction and acceptance loop.
//!
//! Each step fans candidate generation out across the configured one-off
//! generators (plus, after the first acceptance, the recurrent generators),
//! routes every prover failure through every repairer, scores the surviving
//! candidates, and replaces the incumbent only on strict improvement of the
//! plug-in estimate. The incumbent's estimate is frozen at acceptance and
//! never re-evaluated, which is what makes the recorded sequence certifiably
//! monotone even under noisy judges.

pub mod sink;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::sync::Mutex;
use thiserror::Error;

use crate::backend::ChatBackend;
use crate::generators::{
    propose, CandidateProposal, GeneratorError, GeneratorSpec, ProposalContext,
};
use crate::judge::{feedback_digest, FusionWeights, JudgeError, JudgeHarness, JudgeVerdict};
use crate::model::{
    CandidateRecord, DimensionScores, Formalization, IncumbentSnapshot, MarginConfig, NLTheorem,
    RunTrace, StepRecord, TerminalReason, TraceError,
};
use crate::objective::{plugin_estimator, strictly_improves, ObjectiveValue};
use crate::process::sink::{PartialTrace, SinkError, TraceSink};
use crate::prover::{ProverDiagnostics, ProverError, ProverGate};
use crate::responsiveness::{allocate_budgets, estimate_responsiveness, ResponsivenessMap};
use crate::backend::DecodingParams;

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("invalid process configuration: {0}")]
    Config(String),
    #[error("step {step} failed retriably: {reason}")]
    StepRetriable { step: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("trace invariant violated: {0}")]
    Trace(#[from] TraceError),
    #[error("generator error: {0}")]
    Generator(#[from] GeneratorError),
    #[error("prover error: {0}")]
    Prover(ProverError),
    #[error("objective error: {0}")]
    Objective(#[from] crate::objective::ObjectiveError),
}

/// How per-step proposal budgets are assigned.
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetPolicy {
    /// Every active generator draws the same number of samples per step.
    Fixed { per_generator: u32 },
    /// Budgets follow the running responsiveness estimate: merit-proportional
    /// largest-remainder split of `total` with a per-generator `floor`.
    Responsive {
        total: u32,
        floor: u32,
        dimension_weights: [f64; 4],
    },
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        BudgetPolicy::Fixed { per_generator: 1 }
    }
}

/// Runtime configuration for the loop: generator wiring, judge and prover
/// handles, and the scalar knobs of the acceptance rule.
#[derive(Clone)]
pub struct ProcessConfig {
    pub oogs: Vec<GeneratorSpec>,
    pub fvrs: Vec<GeneratorSpec>,
    pub regs: Vec<GeneratorSpec>,
    pub judge_backend: Arc<dyn ChatBackend>,
    pub judge_decoding: DecodingParams,
    pub weights: FusionWeights,
    pub votes_per_aspect: u32,
    pub parse_retries: u32,
    pub gate: ProverGate,
    pub max_steps: usize,
    pub epsilon: f64,
    pub margins: MarginConfig,
    pub budget: BudgetPolicy,
    pub code_prefixes: Vec<String>,
    pub step_retries: u32,
    pub parallelism: usize,
    /// An incumbent estimate within this tolerance of 1 ends the run early.
    pub perfect_tolerance: f64,
}

impl std::fmt::Debug for ProcessConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessConfig")
            .field("oogs", &self.oogs)
            .field("fvrs", &self.fvrs)
            .field("regs", &self.regs)
            .field("max_steps", &self.max_steps)
            .field("epsilon", &self.epsilon)
            .field("budget", &self.budget)
            .finish_non_exhaustive()
    }
}

impl ProcessConfig {
    pub fn validate(&self) -> Result<(), ProcessError> {
        if self.max_steps == 0 {
            return Err(ProcessError::Config("max_steps must be at least 1".into()));
        }
        if self.oogs.is_empty() {
            return Err(ProcessError::Config(
                "at least one one-off generator is required".into(),
            ));
        }
        if self.votes_per_aspect == 0 {
            return Err(ProcessError::Config("votes_per_aspect must be at least 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(ProcessError::Config("epsilon must be nonnegative".into()));
        }
        Ok(())
    }

    fn generator_names(&self) -> Vec<String> {
        self.oogs
            .iter()
            .chain(&self.fvrs)
            .chain(&self.regs)
            .map(|g| g.name.clone())
            .collect()
    }
}

/// The current best formalization with everything acceptance froze for it.
#[derive(Debug, Clone)]
pub struct Incumbent {
    pub formalization: Formalization,
    pub estimate: ObjectiveValue,
    pub scores: DimensionScores,
    pub verdicts: Vec<JudgeVerdict>,
}

impl Incumbent {
    /// The step-0 seed: empty body with sentinel estimate, never scored.
    pub fn seed() -> Self {
        Self {
            formalization: Formalization::initial(),
            estimate: ObjectiveValue::SENTINEL,
            scores: DimensionScores::unscored(false),
            verdicts: Vec::new(),
        }
    }

    fn snapshot(&self) -> IncumbentSnapshot {
        IncumbentSnapshot {
            formalization: self.formalization.clone(),
            estimate: self.estimate,
        }
    }

    fn from_record(record: &StepRecord) -> Self {
        Self {
            formalization: record.incumbent_after.formalization.clone(),
            estimate: record.incumbent_after.estimate,
            scores: record.incumbent_scores,
            verdicts: record.incumbent_verdicts.clone(),
        }
    }
}

/// A candidate that survived extraction, with its validity bit.
#[derive(Debug, Clone)]
pub struct CheckedCandidate {
    pub formalization: Formalization,
    pub fv: bool,
    pub diagnostics: ProverDiagnostics,
}

/// Output of one construction round.
#[derive(Debug, Default)]
pub struct StepCandidates {
    /// Candidates in scan order: one-off derived first (registry order, with
    /// repairs inline where the original failed), then recurrent derived.
    pub candidates: Vec<CheckedCandidate>,
    pub backend_failures: u32,
    pub extraction_drops: u32,
}

fn check_fv(
    gate: &ProverGate,
    step: usize,
    formalization: &Formalization,
) -> Result<(bool, ProverDiagnostics), ProcessError> {
    gate.check_validity(formalization).map_err(|e| match e {
        ProverError::Unavailable(reason) => ProcessError::StepRetriable {
            step,
            reason: format!("prover unavailable: {reason}"),
        },
        other => ProcessError::Prover(other),
    })
}

struct FanOut<'a> {
    cfg: &'a ProcessConfig,
    theorem: &'a NLTheorem,
    step: usize,
    out: StepCandidates,
    fvr_ordinals: Vec<u32>,
}

impl FanOut<'_> {
    /// Checks one proposal; on failure asks every repairer for a fix, keeps
    /// the (re-checked) repairs, and drops the broken original.
    fn admit(&mut self, proposal: CandidateProposal) -> Result<(), ProcessError> {
        if !proposal.extraction_ok {
            self.out.extraction_drops += 1;
            return Ok(());
        }
        let (fv, diagnostics) = check_fv(&self.cfg.gate, self.step, &proposal.formalization)?;
        if fv {
            self.out.candidates.push(CheckedCandidate {
                formalization: proposal.formalization,
                fv,
                diagnostics,
            });
            return Ok(());
        }
        let feedback = self
            .cfg
            .gate
            .repair_feedback(&diagnostics)
            .map_err(ProcessError::Prover)?;
        for (index, fvr) in self.cfg.fvrs.iter().enumerate() {
            let context = ProposalContext {
                parent: &proposal.formalization,
                feedback: &feedback,
            };
            let batch = propose(
                fvr,
                self.theorem,
                Some(&context),
                1,
                self.step,
                self.fvr_ordinals[index],
                &self.cfg.code_prefixes,
            )?;
            self.fvr_ordinals[index] += 1;
            self.out.backend_failures += batch.backend_failures;
            for repair in batch.proposals {
                if !repair.extraction_ok {
                    self.out.extraction_drops += 1;
                    continue;
                }
                let (fv, diagnostics) = check_fv(&self.cfg.gate, self.step, &repair.formalization)?;
                self.out.candidates.push(CheckedCandidate {
                    formalization: repair.formalization,
                    fv,
                    diagnostics,
                });
            }
        }
        Ok(())
    }
}

/// Builds the candidate set for one step.
///
/// Every one-off generator samples its budget; prover failures fan out to
/// every repairer and the broken original is excluded. From the second step
/// on, recurrent generators refine the incumbent using its stored verdicts
/// (skipped while the incumbent has none, e.g. before any valid candidate
/// was ever judged).
pub fn construct_candidates(
    theorem: &NLTheorem,
    incumbent: Option<&Incumbent>,
    step: usize,
    cfg: &ProcessConfig,
    responsiveness: &ResponsivenessMap,
) -> Result<StepCandidates, ProcessError> {
    let mut active: Vec<&GeneratorSpec> = cfg.oogs.iter().collect();
    let mut reg_contexts: Vec<(usize, String)> = Vec::new();
    if let Some(incumbent) = incumbent {
        for (index, reg) in cfg.regs.iter().enumerate() {
            match feedback_digest(&incumbent.verdicts, &reg.feedback_dims) {
                Ok(digest) => {
                    reg_contexts.push((index, digest));
                    active.push(reg);
                }
                Err(JudgeError::EmptySelection) => {
                    // Nothing stored for this generator's dimensions; the
                    // refinement prompt requires nonempty feedback.
                }
                Err(_) => unreachable!("digest only fails on empty selections"),
            }
        }
    }

    let budgets: Vec<u32> = match &cfg.budget {
        BudgetPolicy::Fixed { per_generator } => vec![*per_generator; active.len()],
        BudgetPolicy::Responsive {
            total,
            floor,
            dimension_weights,
        } => {
            let names: Vec<&str> = active.iter().map(|g| g.name.as_str()).collect();
            allocate_budgets(responsiveness, &names, *dimension_weights, *total, *floor)
                .map_err(|e| ProcessError::Config(e.to_string()))?
                .into_iter()
                .map(|(_, b)| b)
                .collect()
        }
    };

    let mut fan_out = FanOut {
        cfg,
        theorem,
        step,
        out: StepCandidates::default(),
        fvr_ordinals: vec![0; cfg.fvrs.len()],
    };

    let mut reg_iter = reg_contexts.into_iter();
    for (position, spec) in active.iter().enumerate() {
        let budget = budgets[position];
        if budget == 0 {
            continue;
        }
        let batch = match spec.role {
            crate::model::Role::Oog => propose(
                spec,
                theorem,
                None,
                budget,
                step,
                0,
                &cfg.code_prefixes,
            )?,
            crate::model::Role::Reg => {
                let (_, digest) = reg_iter.next().expect("one context per active reg");
                let incumbent = incumbent.expect("regs only active with an incumbent");
                let context = ProposalContext {
                    parent: &incumbent.formalization,
                    feedback: &digest,
                };
                propose(
                    spec,
                    theorem,
                    Some(&context),
                    budget,
                    step,
                    0,
                    &cfg.code_prefixes,
                )?
            }
            crate::model::Role::Fvr => unreachable!("repairers are not sampled directly"),
        };
        fan_out.out.backend_failures += batch.backend_failures;
        for proposal in batch.proposals {
            fan_out.admit(proposal)?;
        }
    }

    let out = fan_out.out;
    if out.candidates.is_empty() && out.backend_failures > 0 {
        return Err(ProcessError::StepRetriable {
            step,
            reason: format!(
                "no candidates survived; {} backend failures",
                out.backend_failures
            ),
        });
    }
    Ok(out)
}

/// Scores the candidate set and applies the conservative acceptance rule.
///
/// Valid candidates are judged; invalid ones score zero without a judge
/// call. Selection keeps the last candidate at ties (>=), and the incumbent
/// changes only when the best estimate strictly exceeds the frozen incumbent
/// estimate plus epsilon.
pub fn acceptance_step(
    theorem: &NLTheorem,
    incumbent: &Incumbent,
    set: StepCandidates,
    step: usize,
    cfg: &ProcessConfig,
    responsiveness: &mut ResponsivenessMap,
) -> Result<(Incumbent, StepRecord), ProcessError> {
    let harness = JudgeHarness {
        backend: &*cfg.judge_backend,
        weights: &cfg.weights,
        votes_per_aspect: cfg.votes_per_aspect,
        parse_retries: cfg.parse_retries,
        decoding: cfg.judge_decoding,
    };

    let mut scored: Vec<(CandidateRecord, Vec<JudgeVerdict>)> = Vec::new();
    for candidate in set.candidates {
        let (scores, verdicts) = if candidate.fv {
            let soft = harness
                .score_soft_dimensions(theorem, &candidate.formalization)
                .map_err(|e| match e {
                    JudgeError::Backend { .. } => ProcessError::StepRetriable {
                        step,
                        reason: e.to_string(),
                    },
                    other => ProcessError::Config(other.to_string()),
                })?;
            let scores = DimensionScores::judged(soft.lp, soft.mc, soft.fq)
                .map_err(|e| ProcessError::Config(e.to_string()))?;
            (scores, soft.verdicts)
        } else {
            (DimensionScores::unscored(false), Vec::new())
        };
        let estimate = plugin_estimator(&scores);
        scored.push((
            CandidateRecord {
                formalization: candidate.formalization,
                scores,
                estimate,
            },
            verdicts,
        ));
    }

    for (record, _) in &scored {
        let deltas = estimate_responsiveness(&incumbent.scores, &[record.scores])
            .expect("single candidate is never empty");
        responsiveness.add_observation(&record.formalization.origin.generator, deltas);
    }

    let mut best: Option<usize> = None;
    let mut best_value = 0.0f64;
    for (index, (record, _)) in scored.iter().enumerate() {
        if record.estimate.value() >= best_value {
            best_value = record.estimate.value();
            best = Some(index);
        }
    }

    let accept = match best {
        Some(_) => strictly_improves(
            ObjectiveValue::new_unchecked(best_value),
            incumbent.estimate,
            cfg.epsilon,
        )?,
        None => false,
    };

    let new_incumbent = if accept {
        let index = best.expect("accept implies a best candidate");
        let (record, verdicts) = &scored[index];
        Incumbent {
            formalization: record.formalization.clone(),
            estimate: record.estimate,
            scores: record.scores,
            verdicts: verdicts.clone(),
        }
    } else {
        incumbent.clone()
    };

    let record = StepRecord {
        step_index: step,
        candidates: scored.into_iter().map(|(record, _)| record).collect(),
        incumbent_before: incumbent.snapshot(),
        incumbent_after: new_incumbent.snapshot(),
        accepted: accept,
        epsilon: cfg.epsilon,
        incumbent_scores: new_incumbent.scores,
        incumbent_verdicts: new_incumbent.verdicts.clone(),
        responsiveness: responsiveness.clone(),
    };
    Ok((new_incumbent, record))
}

/// Runs the full loop for one theorem, committing each step to the sink.
pub fn run_theorem(
    theorem: &NLTheorem,
    cfg: &ProcessConfig,
    sink: &dyn TraceSink,
) -> Result<RunTrace, ProcessError> {
    run_theorem_from(theorem, cfg, sink, Vec::new())
}

/// Continues a theorem from previously committed records (empty for a fresh
/// run). Outage past the retry budget truncates the trace with an
/// external-stop marker instead of failing the caller.
pub fn run_theorem_from(
    theorem: &NLTheorem,
    cfg: &ProcessConfig,
    sink: &dyn TraceSink,
    mut records: Vec<StepRecord>,
) -> Result<RunTrace, ProcessError> {
    cfg.validate()?;
    let mut responsiveness = ResponsivenessMap::with_generators(cfg.generator_names());
    let mut incumbent = Incumbent::seed();
    if let Some(last) = records.last() {
        incumbent = Incumbent::from_record(last);
        responsiveness = last.responsiveness.clone();
    }
    let start_step = records.len();

    let mut terminal = TerminalReason::MaxSteps;
    let mut step = start_step;
    while step < cfg.max_steps {
        let mut outcome = None;
        for attempt in 0..=cfg.step_retries {
            let mut scratch_map = responsiveness.clone();
            let result = construct_candidates(
                theorem,
                (step > 0 && !incumbent.formalization.body.is_empty()).then_some(&incumbent),
                step,
                cfg,
                &scratch_map,
            )
            .and_then(|set| {
                acceptance_step(theorem, &incumbent, set, step, cfg, &mut scratch_map)
            });
            match result {
                Ok((new_incumbent, record)) => {
                    outcome = Some((new_incumbent, record, scratch_map));
                    break;
                }
                Err(ProcessError::StepRetriable { .. }) if attempt < cfg.step_retries => continue,
                Err(ProcessError::StepRetriable { .. }) => break,
                Err(other) => return Err(other),
            }
        }
        let Some((new_incumbent, record, new_map)) = outcome else {
            terminal = TerminalReason::ExternalStop;
            break;
        };
        sink.append_step(&theorem.id, &record)?;
        records.push(record);
        incumbent = new_incumbent;
        responsiveness = new_map;
        step += 1;
        if incumbent.estimate.value() >= 1.0 - cfg.perfect_tolerance {
            terminal = TerminalReason::PerfectScore;
            break;
        }
    }

    sink.append_terminal(&theorem.id, terminal)?;
    let trace = RunTrace {
        theorem_id: theorem.id.clone(),
        records,
        terminal_reason: terminal,
    };
    trace.check_invariants()?;
    Ok(trace)
}

/// Runs a dataset with bounded parallelism. Individual theorem outages are
/// isolated as truncated traces; only configuration, sink, or invariant
/// failures abort the batch.
pub fn run_dataset(
    theorems: &[NLTheorem],
    cfg: &ProcessConfig,
    sink: &dyn TraceSink,
) -> Result<Vec<RunTrace>, ProcessError> {
    run_dataset_from(theorems, cfg, sink, &Default::default())
}

/// Resume-aware dataset run: theorems whose stored trace is complete are
/// returned as-is; truncated or partial traces continue from their last
/// committed step.
pub fn run_dataset_from(
    theorems: &[NLTheorem],
    cfg: &ProcessConfig,
    sink: &dyn TraceSink,
    existing: &std::collections::BTreeMap<String, PartialTrace>,
) -> Result<Vec<RunTrace>, ProcessError> {
    if theorems.is_empty() {
        return Err(ProcessError::EmptyDataset);
    }
    cfg.validate()?;

    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<RunTrace, ProcessError>>>> =
        theorems.iter().map(|_| Mutex::new(None)).collect();
    let workers = cfg.parallelism.max(1).min(theorems.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= theorems.len() {
                    break;
                }
                let theorem = &theorems[index];
                let result = match existing.get(&theorem.id) {
                    Some(partial) if partial.is_complete() => Ok(RunTrace {
                        theorem_id: theorem.id.clone(),
                        records: partial.records.clone(),
                        terminal_reason: partial.terminal.expect("complete implies terminal"),
                    }),
                    Some(partial) => {
                        run_theorem_from(theorem, cfg, sink, partial.records.clone())
                    }
                    None => run_theorem(theorem, cfg, sink),
                };
                *results[index].lock().expect("result slot") = Some(result);
            });
        }
    });

    let mut traces = Vec::with_capacity(theorems.len());
    for slot in results {
        let result = slot
            .into_inner()
            .expect("result slot")
            .expect("every theorem was processed");
        traces.push(result?);
    }
    Ok(traces)
}
