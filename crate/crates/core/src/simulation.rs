//! Synthetic generator/judge/prover backends with known ground truth.
//!
//! Simulated candidates carry their latent quality inside the body text as a
//! lineage comment: a validity bit plus, per soft dimension, how many of the
//! registered aspects the candidate truly satisfies. That makes every backend
//! a pure function of its request: the prover reads the bit, judges read the
//! satisfied-aspect counts, and refining generators evolve the counts of the
//! parent they find embedded in their prompt. All randomness is drawn from
//! streams keyed by (world seed, call path), so scheduling cannot change
//! outcomes and identical seeds replay bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

use crate::backend::{BackendError, CallPurpose, ChatBackend, ChatRequest, DecodingParams};
use crate::generators::{default_code_prefixes, GeneratorSpec};
use crate::judge::{registry_for, Dimension, FusionWeights};
use crate::model::{DimensionScores, MarginConfig, NLTheorem, Role};
use crate::objective::lower_confidence_bound;
use crate::process::{BudgetPolicy, ProcessConfig, ProcessError};
use crate::prover::{DiagnosticMessage, ProverBackend, ProverDiagnostics, ProverError, ProverGate};
use crate::wire;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("coverage estimates need at least 100 draws, got {0}")]
    TooFewDraws(usize),
    #[error("body carries no lineage comment: {0}")]
    UnknownBody(String),
}

/// Aspect-grid sizes per soft dimension, taken from the judge registry.
fn grid() -> [u8; 3] {
    [
        registry_for(Dimension::Lp).len() as u8,
        registry_for(Dimension::Mc).len() as u8,
        registry_for(Dimension::Fq).len() as u8,
    ]
}

/// How one simulated generator behaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProfile {
    /// Probability a produced candidate passes the prover.
    pub fv_pass_prob: f64,
    /// Deterministic change, in aspect-grid steps, applied to the parent's
    /// satisfied-aspect counts (refining roles only).
    pub drift: [i8; 3],
    /// Probability of an extra +/-1 step per dimension and sample.
    pub jitter_prob: f64,
    /// Inclusive base ranges for from-scratch counts (one-off role only).
    pub base_counts: [(u8, u8); 3],
}

impl GeneratorProfile {
    pub fn one_off() -> Self {
        Self {
            fv_pass_prob: 0.6,
            drift: [0, 0, 0],
            jitter_prob: 0.2,
            base_counts: [(1, 3), (1, 2), (0, 1)],
        }
    }

    pub fn repairer() -> Self {
        Self {
            fv_pass_prob: 0.85,
            drift: [0, 0, 0],
            jitter_prob: 0.1,
            base_counts: [(0, 0); 3],
        }
    }

    pub fn recurrent() -> Self {
        Self {
            fv_pass_prob: 0.7,
            drift: [0, 0, 0],
            jitter_prob: 0.15,
            base_counts: [(0, 0); 3],
        }
    }
}

/// World parameters: judge noise, per-generator behavior, and optional
/// perfect-candidate injection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimWorldConfig {
    /// Noise scale of the fused-estimate model per soft dimension, used by
    /// the coverage experiment (truncated Gaussian around latent truth).
    pub judge_sigma: [f64; 3],
    /// Probability a single aspect verdict flips inside the process
    /// pipeline. Zero models stable judges.
    pub judge_flip_prob: f64,
    /// Latent truth at which the coverage experiment draws estimates.
    pub coverage_truth: [f64; 3],
    /// Per-generator overrides; missing names fall back to the role default.
    #[serde(default)]
    pub profiles: BTreeMap<String, GeneratorProfile>,
    pub oog_default: GeneratorProfile,
    pub fvr_default: GeneratorProfile,
    pub reg_default: GeneratorProfile,
    /// At this step, every one-off generator's first sample is an ideal
    /// candidate (valid, all aspects satisfied).
    #[serde(default)]
    pub inject_perfect_at_step: Option<usize>,
}

impl Default for SimWorldConfig {
    fn default() -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "reg-lp-a".to_string(),
            GeneratorProfile {
                drift: [1, 0, 0],
                ..GeneratorProfile::recurrent()
            },
        );
        profiles.insert(
            "reg-lp-b".to_string(),
            GeneratorProfile {
                drift: [1, 0, 0],
                jitter_prob: 0.25,
                ..GeneratorProfile::recurrent()
            },
        );
        profiles.insert(
            "reg-fq-a".to_string(),
            GeneratorProfile {
                drift: [0, 0, 1],
                ..GeneratorProfile::recurrent()
            },
        );
        Self {
            judge_sigma: [0.1; 3],
            judge_flip_prob: 0.0,
            coverage_truth: [0.7, 0.6, 0.8],
            profiles,
            oog_default: GeneratorProfile::one_off(),
            fvr_default: GeneratorProfile::repairer(),
            reg_default: GeneratorProfile::recurrent(),
            inject_perfect_at_step: None,
        }
    }
}

/// An immutable simulated world; all behavior derives from (seed, config).
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub seed: u64,
    pub cfg: SimWorldConfig,
}

impl SimWorld {
    pub fn new(seed: u64, cfg: SimWorldConfig) -> Self {
        Self { seed, cfg }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(seed, SimWorldConfig::default())
    }

    fn profile(&self, generator: &str, role: Role) -> GeneratorProfile {
        self.cfg.profiles.get(generator).copied().unwrap_or(match role {
            Role::Oog => self.cfg.oog_default,
            Role::Fvr => self.cfg.fvr_default,
            Role::Reg => self.cfg.reg_default,
        })
    }
}

/// Named substream: a fresh deterministic RNG for (seed, tags).
pub fn stream(seed: u64, tags: &[&str]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for tag in tags {
        hasher.update(tag.as_bytes());
        hasher.update([0u8]);
    }
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

/// Latent ground truth carried by a simulated candidate body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimLatents {
    pub fv: bool,
    /// Satisfied aspects per soft dimension, bounded by the grid.
    pub counts: [u8; 3],
}

impl SimLatents {
    pub fn perfect() -> Self {
        let g = grid();
        Self {
            fv: true,
            counts: [g[0], g[1], g[2]],
        }
    }

    pub fn true_scores(&self) -> [f64; 3] {
        let g = grid();
        [
            f64::from(self.counts[0]) / f64::from(g[0]),
            f64::from(self.counts[1]) / f64::from(g[1]),
            f64::from(self.counts[2]) / f64::from(g[2]),
        ]
    }

    /// True composite objective of this candidate.
    pub fn true_objective(&self) -> f64 {
        if !self.fv {
            return 0.0;
        }
        let s = self.true_scores();
        (s[0] + s[1] + s[2]) / 3.0
    }

    pub fn encode(&self, id: &str) -> String {
        format!(
            "-- lineage {id} fv={} sat={}/{}/{}\ntheorem sim_{id} : True := by trivial",
            u8::from(self.fv),
            self.counts[0],
            self.counts[1],
            self.counts[2]
        )
    }

    pub fn decode(body: &str) -> Result<Self, SimError> {
        let line = body
            .lines()
            .find(|l| l.trim_start().starts_with("-- lineage "))
            .ok_or_else(|| SimError::UnknownBody(body.chars().take(60).collect()))?;
        let mut fv = None;
        let mut counts = None;
        for token in line.split_whitespace() {
            if let Some(value) = token.strip_prefix("fv=") {
                fv = value.parse::<u8>().ok().map(|v| v == 1);
            }
            if let Some(value) = token.strip_prefix("sat=") {
                let parts: Vec<u8> = value
                    .split('/')
                    .filter_map(|p| p.parse().ok())
                    .collect();
                if parts.len() == 3 {
                    counts = Some([parts[0], parts[1], parts[2]]);
                }
            }
        }
        match (fv, counts) {
            (Some(fv), Some(counts)) => Ok(Self { fv, counts }),
            _ => Err(SimError::UnknownBody(body.chars().take(60).collect())),
        }
    }
}

fn short_id(seed: u64, tags: &[&str]) -> String {
    let mut rng = stream(seed, tags);
    format!("{:012x}", rng.gen::<u64>() & 0xffff_ffff_ffff)
}

/// The simulated chat backend: serves both generator and judge calls.
pub struct SimBackend {
    world: SimWorld,
}

impl SimBackend {
    pub fn new(world: SimWorld) -> Self {
        Self { world }
    }

    fn generate(
        &self,
        request: &ChatRequest,
        generator: &str,
        role: Role,
        sample: u32,
    ) -> Result<String, BackendError> {
        let world = &self.world;
        let profile = world.profile(generator, role);
        let theorem = request.path.theorem_id.as_str();
        let step = request.path.step.to_string();
        let sample_tag = sample.to_string();
        let g = grid();

        let latents = if role == Role::Oog {
            if world.cfg.inject_perfect_at_step == Some(request.path.step) && sample == 0 {
                SimLatents::perfect()
            } else {
                let mut base = stream(world.seed, &["oog-base", theorem, generator]);
                let mut counts = [0u8; 3];
                for (slot, (lo, hi)) in counts.iter_mut().zip(profile.base_counts) {
                    *slot = base.gen_range(lo..=hi);
                }
                let counts =
                    self.jittered(counts, &profile, theorem, generator, &step, &sample_tag);
                let fv = self.validity_draw(&profile, theorem, generator, &step, &sample_tag);
                SimLatents { fv, counts }
            }
        } else {
            let parent_body = extract_embedded_body(&request.user).ok_or_else(|| {
                BackendError::Protocol {
                    backend: "sim".into(),
                    message: "refinement prompt carries no embedded candidate".into(),
                }
            })?;
            let parent = SimLatents::decode(&parent_body).map_err(|e| BackendError::Protocol {
                backend: "sim".into(),
                message: e.to_string(),
            })?;
            let mut counts = parent.counts;
            for (slot, (drift, max)) in counts.iter_mut().zip(profile.drift.iter().zip(g)) {
                let shifted = i16::from(*slot) + i16::from(*drift);
                *slot = shifted.clamp(0, i16::from(max)) as u8;
            }
            let counts = self.jittered(counts, &profile, theorem, generator, &step, &sample_tag);
            let fv = self.validity_draw(&profile, theorem, generator, &step, &sample_tag);
            SimLatents { fv, counts }
        };

        let id = short_id(world.seed, &["id", theorem, generator, &step, &sample_tag]);
        Ok(wire::wrap_block(&latents.encode(&id)))
    }

    fn jittered(
        &self,
        mut counts: [u8; 3],
        profile: &GeneratorProfile,
        theorem: &str,
        generator: &str,
        step: &str,
        sample: &str,
    ) -> [u8; 3] {
        if profile.jitter_prob == 0.0 {
            return counts;
        }
        let g = grid();
        let mut rng = stream(
            self.world.seed,
            &["jitter", theorem, generator, step, sample],
        );
        for (slot, max) in counts.iter_mut().zip(g) {
            if rng.gen::<f64>() < profile.jitter_prob {
                let up = rng.gen::<bool>();
                let shifted = i16::from(*slot) + if up { 1 } else { -1 };
                *slot = shifted.clamp(0, i16::from(max)) as u8;
            }
        }
        counts
    }

    fn validity_draw(
        &self,
        profile: &GeneratorProfile,
        theorem: &str,
        generator: &str,
        step: &str,
        sample: &str,
    ) -> bool {
        let mut rng = stream(self.world.seed, &["fv", theorem, generator, step, sample]);
        rng.gen::<f64>() < profile.fv_pass_prob
    }

    fn judge(
        &self,
        request: &ChatRequest,
        aspect_id: &str,
        vote: u32,
        attempt: u32,
    ) -> Result<String, BackendError> {
        let body = judged_body(&request.user).ok_or_else(|| BackendError::Protocol {
            backend: "sim".into(),
            message: "judge prompt carries no embedded candidate".into(),
        })?;
        let latents = SimLatents::decode(&body).map_err(|e| BackendError::Protocol {
            backend: "sim".into(),
            message: e.to_string(),
        })?;
        let aspect = crate::judge::registry()
            .iter()
            .find(|a| a.aspect_id == aspect_id)
            .ok_or_else(|| BackendError::Protocol {
                backend: "sim".into(),
                message: format!("unknown aspect `{aspect_id}`"),
            })?;
        let index = registry_for(aspect.dimension)
            .iter()
            .position(|a| a.aspect_id == aspect_id)
            .expect("aspect belongs to its dimension");
        let dimension_slot = match aspect.dimension {
            Dimension::Lp => 0,
            Dimension::Mc => 1,
            Dimension::Fq => 2,
        };
        let mut verdict = (index as u8) < latents.counts[dimension_slot];

        if self.world.cfg.judge_flip_prob > 0.0 {
            let vote_tag = vote.to_string();
            let attempt_tag = attempt.to_string();
            let mut rng = stream(
                self.world.seed,
                &["flip", &body, aspect_id, &vote_tag, &attempt_tag],
            );
            if rng.gen::<f64>() < self.world.cfg.judge_flip_prob {
                verdict = !verdict;
            }
        }
        let word = if verdict { "True" } else { "False" };
        Ok(format!(
            "%%%%%%%%%%\nExplanation: simulated assessment of {aspect_id}\nJudgement: {word}\n%%%%%%%%%%"
        ))
    }
}

/// Candidate body embedded in a refinement prompt.
fn extract_embedded_body(user: &str) -> Option<String> {
    let marker = "statement and its proof: ";
    let start = user.find(marker)? + marker.len();
    let rest = &user[start..];
    let end = rest
        .find("\n\nYou should refine the formal code")
        .unwrap_or(rest.len());
    Some(rest[..end].to_string())
}

/// Candidate body embedded in a judge prompt (it ends the user text).
fn judged_body(user: &str) -> Option<String> {
    let marker = "statement and its proof: ";
    let start = user.rfind(marker)? + marker.len();
    Some(user[start..].to_string())
}

impl ChatBackend for SimBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        match &request.path.purpose {
            CallPurpose::Generate {
                generator,
                role,
                sample,
            } => self.generate(request, generator, *role, *sample),
            CallPurpose::Judge {
                aspect,
                vote,
                attempt,
                ..
            } => self.judge(request, aspect, *vote, *attempt),
        }
    }

    fn name(&self) -> &str {
        "sim-backend"
    }
}

/// Prover that reads the validity bit from the lineage comment.
pub struct SimProver;

impl ProverBackend for SimProver {
    fn check(&self, body: &str, _timeout: Duration) -> Result<ProverDiagnostics, ProverError> {
        match SimLatents::decode(body) {
            Ok(latents) if latents.fv => Ok(ProverDiagnostics::pass(Duration::ZERO)),
            Ok(_) => Ok(ProverDiagnostics::failure(
                vec![DiagnosticMessage {
                    line: 2,
                    start_col: 0,
                    end_col: Some(7),
                    text: "simulated check failed: proof does not elaborate".into(),
                }],
                Duration::ZERO,
                false,
            )),
            Err(_) => Ok(ProverDiagnostics::failure(
                vec![DiagnosticMessage {
                    line: 1,
                    start_col: 0,
                    end_col: None,
                    text: "simulated check failed: unknown body".into(),
                }],
                Duration::ZERO,
                false,
            )),
        }
    }

    fn name(&self) -> &str {
        "sim-prover"
    }
}

/// Generator wiring for a simulated run.
#[derive(Debug, Clone)]
pub struct SimWiring {
    pub oogs: Vec<String>,
    pub fvrs: Vec<String>,
    pub regs: Vec<(String, BTreeSet<Dimension>)>,
}

impl Default for SimWiring {
    /// Two one-off generators, two repairers, and three recurrent generators
    /// fed LP, LP, and FQ feedback.
    fn default() -> Self {
        Self {
            oogs: vec!["oog-alpha".into(), "oog-beta".into()],
            fvrs: vec!["fvr-alpha".into(), "fvr-beta".into()],
            regs: vec![
                ("reg-lp-a".into(), [Dimension::Lp].into()),
                ("reg-lp-b".into(), [Dimension::Lp].into()),
                ("reg-fq-a".into(), [Dimension::Fq].into()),
            ],
        }
    }
}

/// Scalar knobs for a simulated run.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub max_steps: usize,
    pub epsilon: f64,
    pub margins: MarginConfig,
    pub votes_per_aspect: u32,
    pub budget: BudgetPolicy,
    pub wiring: SimWiring,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            max_steps: 6,
            epsilon: 0.0,
            margins: MarginConfig::default(),
            votes_per_aspect: 1,
            budget: BudgetPolicy::Fixed { per_generator: 1 },
            wiring: SimWiring::default(),
        }
    }
}

/// Builds a real process configuration wired to this world's backends.
pub fn process_config(world: &SimWorld, params: &SimParams) -> ProcessConfig {
    let backend: Arc<dyn ChatBackend> = Arc::new(SimBackend::new(world.clone()));
    let spec = |name: &str, role: Role, dims: BTreeSet<Dimension>| {
        GeneratorSpec::new(name, role, dims, Arc::clone(&backend), DecodingParams::default())
            .expect("sim wiring is valid")
    };
    ProcessConfig {
        oogs: params
            .wiring
            .oogs
            .iter()
            .map(|n| spec(n, Role::Oog, BTreeSet::new()))
            .collect(),
        fvrs: params
            .wiring
            .fvrs
            .iter()
            .map(|n| spec(n, Role::Fvr, BTreeSet::new()))
            .collect(),
        regs: params
            .wiring
            .regs
            .iter()
            .map(|(n, dims)| spec(n, Role::Reg, dims.clone()))
            .collect(),
        judge_backend: backend,
        judge_decoding: DecodingParams::default(),
        weights: FusionWeights::equal(),
        votes_per_aspect: params.votes_per_aspect,
        parse_retries: 1,
        gate: ProverGate::new(Arc::new(SimProver)),
        max_steps: params.max_steps,
        epsilon: params.epsilon,
        margins: params.margins,
        budget: params.budget.clone(),
        code_prefixes: default_code_prefixes(),
        step_retries: 0,
        parallelism: 1,
        perfect_tolerance: 1e-12,
    }
}

/// The synthetic theorem a world runs on.
pub fn sim_theorem(world: &SimWorld) -> NLTheorem {
    NLTheorem::new(
        format!("sim-{}", world.seed),
        format!("Synthetic statement for world {}.", world.seed),
        format!("Synthetic proof for world {}.", world.seed),
    )
    .expect("synthetic theorem is valid")
}

/// Runs the real process against simulated backends, returning the trace and
/// the true composite objective of the incumbent after every step (the seed
/// incumbent reports the sentinel value -1).
pub fn simulate_process(
    world: &SimWorld,
    params: &SimParams,
) -> Result<(crate::model::RunTrace, Vec<f64>), ProcessError> {
    let cfg = process_config(world, params);
    let theorem = sim_theorem(world);
    let trace = crate::process::run_theorem(&theorem, &cfg, &crate::process::sink::NullSink)?;
    let truths = trace
        .records
        .iter()
        .map(|record| {
            let body = &record.incumbent_after.formalization.body;
            if body.is_empty() {
                -1.0
            } else {
                SimLatents::decode(body)
                    .map(|l| l.true_objective())
                    .unwrap_or(-1.0)
            }
        })
        .collect();
    Ok((trace, truths))
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal exists")
}

/// p-quantile of a Gaussian(mu, sigma) truncated to [lo, hi].
pub fn truncated_normal_quantile(mu: f64, sigma: f64, lo: f64, hi: f64, p: f64) -> f64 {
    if sigma == 0.0 {
        return mu;
    }
    let n = standard_normal();
    let a = n.cdf((lo - mu) / sigma);
    let b = n.cdf((hi - mu) / sigma);
    mu + sigma * n.inverse_cdf(a + p * (b - a))
}

/// Inverse-CDF draw from the truncated Gaussian at uniform variate `u`.
pub fn truncated_normal_sample(mu: f64, sigma: f64, lo: f64, hi: f64, u: f64) -> f64 {
    truncated_normal_quantile(mu, sigma, lo, hi, u)
}

impl SimWorld {
    /// Exact one-sided margins at the world's coverage truth: the (1-delta)
    /// quantile of the estimate-minus-truth error under the truncated noise
    /// model, floored at zero.
    pub fn exact_margins(&self, deltas: [f64; 3]) -> [f64; 3] {
        let mut margins = [0.0; 3];
        for (slot, ((truth, sigma), delta)) in margins.iter_mut().zip(
            self.cfg
                .coverage_truth
                .iter()
                .zip(self.cfg.judge_sigma)
                .zip(deltas),
        ) {
            let quantile = truncated_normal_quantile(*truth, sigma, 0.0, 1.0, 1.0 - delta);
            *slot = (quantile - truth).max(0.0);
        }
        margins
    }

    /// Draws one fused-estimate vector from the noise model. The three
    /// dimensions use independent substreams.
    pub fn draw_estimates(&self, draw: usize) -> [f64; 3] {
        let tag = draw.to_string();
        let names = ["lp", "mc", "fq"];
        let mut estimates = [0.0; 3];
        for (slot, ((name, truth), sigma)) in estimates.iter_mut().zip(
            names
                .iter()
                .zip(self.cfg.coverage_truth)
                .zip(self.cfg.judge_sigma),
        ) {
            let u: f64 = stream(self.seed, &["coverage", name, &tag]).gen();
            *slot = truncated_normal_sample(truth, sigma, 0.0, 1.0, u);
        }
        estimates
    }
}

/// Monte-Carlo coverage of the lower confidence bound: the fraction of `n`
/// independent judged draws (validity fixed at 1) whose bound stays at or
/// below the true composite objective.
pub fn monte_carlo_lcb_coverage(
    world: &SimWorld,
    margins: &MarginConfig,
    n: usize,
) -> Result<f64, SimError> {
    if n < 100 {
        return Err(SimError::TooFewDraws(n));
    }
    let truth = world.cfg.coverage_truth;
    let true_objective = (truth[0] + truth[1] + truth[2]) / 3.0;
    let mut covered = 0usize;
    for draw in 0..n {
        let est = world.draw_estimates(draw);
        let scores = DimensionScores::judged(est[0], est[1], est[2])
            .expect("truncated draws stay in range");
        let bound = lower_confidence_bound(&scores, margins).value();
        if bound <= true_objective {
            covered += 1;
        }
    }
    Ok(covered as f64 / n as f64)
}
