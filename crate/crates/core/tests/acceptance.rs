//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line with the measured evidence. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};

use monoform::backend::{
    prompt_digest, BackendError, CallPurpose, ChatBackend, ChatRequest, DecodingParams,
    HttpChatBackend, RetryPolicy,
};
use monoform::generators::{
    build_fvr_prompt, build_oog_prompt, build_reg_prompt, default_code_prefixes, GeneratorSpec,
};
use monoform::judge::{
    build_aspect_prompt, feedback_digest, parse_verdict, registry, registry_for, Dimension,
    FusionWeights, JudgeVerdict,
};
use monoform::model::{
    DimensionScores, Formalization, MarginConfig, NLTheorem, Origin, Role, TerminalReason,
};
use monoform::objective::{
    aggregate_uncertainty, composite_objective, lower_confidence_bound, plugin_estimator,
    ObjectiveValue,
};
use monoform::process::sink::{load_sink, JsonlSink};
use monoform::process::{
    acceptance_step, construct_candidates, run_dataset, run_dataset_from, run_theorem,
    BudgetPolicy, CheckedCandidate, Incumbent, ProcessConfig, StepCandidates,
};
use monoform::prover::{
    format_error_feedback, DiagnosticMessage, MockProver, ProverDiagnostics, ProverGate,
};
use monoform::report::{aggregate_step, emit_report, parse_aggregate_csv, AggregateRow};
use monoform::responsiveness::{estimate_responsiveness, largest_remainder, ResponsivenessMap};
use monoform::simulation::{
    monte_carlo_lcb_coverage, process_config, sim_theorem, simulate_process, GeneratorProfile,
    SimParams, SimWorld, SimWorldConfig,
};
use monoform::wire;

fn pass(criterion: &str, details: &str) {
    println!("[PASS] {criterion}: {details}");
}

// ---------------------------------------------------------------------------
// Criterion 1: objective math against independent oracles.
// ---------------------------------------------------------------------------

#[test]
fn objective_math_matches_oracles() {
    let started = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x0b1ec7);

    for case in 0..1_000 {
        let fv = rng.gen::<bool>();
        let lp = rng.gen::<f64>();
        let mc = rng.gen::<f64>();
        let fq = rng.gen::<f64>();
        let margin = rng.gen::<f64>() * 0.5;
        let deltas = [
            0.01 + rng.gen::<f64>() * 0.9,
            0.01 + rng.gen::<f64>() * 0.9,
            0.01 + rng.gen::<f64>() * 0.9,
        ];

        // Oracle routes use different arithmetic groupings than the
        // implementation.
        let fv_bit = if fv { 1.0 } else { 0.0 };
        let composite_oracle = fv_bit * lp / 3.0 + fv_bit * mc / 3.0 + fv_bit * fq / 3.0;
        let value = composite_objective(fv, lp, mc, fq).unwrap().value();
        assert!(
            (value - composite_oracle).abs() < 1e-12,
            "case {case}: composite {value} vs oracle {composite_oracle}"
        );

        let scores = DimensionScores::new(fv, lp, mc, fq, true).unwrap();
        let plugin = plugin_estimator(&scores).value();
        assert!((plugin - composite_oracle).abs() < 1e-12);

        // Inclusion-exclusion expansion as the uncertainty oracle.
        let [a, b, c] = deltas;
        let agg_oracle = a + b + c - a * b - a * c - b * c + a * b * c;
        let agg = aggregate_uncertainty(a, b, c).unwrap();
        assert!((agg - agg_oracle).abs() < 1e-12);

        // Bound oracle: plug-in minus the masked mean margin.
        let margins = MarginConfig::new([0.05; 3], [margin; 3]).unwrap();
        let lcb = lower_confidence_bound(&scores, &margins).value();
        let lcb_oracle = plugin - fv_bit * (margin + margin + margin) / 3.0;
        assert!((lcb - lcb_oracle).abs() < 1e-12);

        // Mask annihilation and bound ordering on every sampled input.
        if !fv {
            assert_eq!(value, 0.0);
            assert_eq!(plugin, 0.0);
            assert_eq!(lcb, 0.0);
        }
        assert!(lcb <= plugin + 1e-15);
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(
        "objective-math",
        &format!("1000 randomized inputs within 1e-12 of oracles in {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: certified monotonicity over 100 seeded worlds.
// ---------------------------------------------------------------------------

#[test]
fn certified_monotonicity_over_100_worlds() {
    let started = Instant::now();
    let params = SimParams::default();

    let mut violations = 0usize;
    for seed in 0..100 {
        // Stable (flip-free) judges are the default world.
        let world = SimWorld::with_seed(seed);
        let (trace, truths) = simulate_process(&world, &params).unwrap();
        trace.check_invariants().unwrap();

        let estimates = trace.estimate_sequence();
        for pair in estimates.windows(2) {
            if pair[1] < pair[0] {
                violations += 1;
            }
        }
        // Zero-noise judges: the true objective sequence of incumbents must
        // also be non-decreasing.
        for pair in truths.windows(2) {
            if pair[1] < pair[0] {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0, "monotonicity violations found");

    // Under verdict noise the frozen estimates must stay monotone even
    // though true quality may wobble.
    for seed in 0..100 {
        let mut cfg = SimWorldConfig::default();
        cfg.judge_flip_prob = 0.15;
        let world = SimWorld::new(seed, cfg);
        let (trace, _) = simulate_process(&world, &params).unwrap();
        let estimates = trace.estimate_sequence();
        for pair in estimates.windows(2) {
            assert!(pair[1] >= pair[0], "seed {seed}: noisy estimates decreased");
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}");
    pass(
        "certified-monotonicity",
        &format!(
            "0 violations across 100 stable worlds (estimates and true objectives) plus 100 noisy worlds in {elapsed:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: validity absorption and termination.
// ---------------------------------------------------------------------------

fn deterministic_world(seed: u64) -> SimWorld {
    let mut cfg = SimWorldConfig::default();
    cfg.judge_flip_prob = 0.0;
    cfg.judge_sigma = [0.0; 3];
    let fixed = GeneratorProfile {
        fv_pass_prob: 1.0,
        drift: [0, 0, 0],
        jitter_prob: 0.0,
        base_counts: [(2, 2), (1, 1), (1, 1)],
    };
    cfg.oog_default = fixed;
    cfg.fvr_default = fixed;
    cfg.reg_default = fixed;
    cfg.profiles.clear();
    SimWorld::new(seed, cfg)
}

#[test]
fn fv_absorption_and_termination() {
    let started = Instant::now();
    let params = SimParams::default();

    for seed in 0..100 {
        let world = SimWorld::with_seed(seed);
        let (trace, _) = simulate_process(&world, &params).unwrap();
        let mut seen_valid = false;
        for record in &trace.records {
            if seen_valid {
                assert!(
                    record.incumbent_scores.fv(),
                    "seed {seed}: validity regressed at step {}",
                    record.step_index
                );
            }
            seen_valid |= record.incumbent_scores.fv();
        }
    }

    let mut fixations = 0;
    for seed in 0..100 {
        let mut world = deterministic_world(seed);
        world.cfg.inject_perfect_at_step = Some(2);
        let (trace, truths) = simulate_process(&world, &params).unwrap();
        let last = trace.records.last().unwrap();
        if trace.terminal_reason == TerminalReason::PerfectScore
            && trace.records.len() == 3
            && last.incumbent_after.estimate.value() == 1.0
            && *truths.last().unwrap() == 1.0
        {
            fixations += 1;
        }
    }
    assert_eq!(fixations, 100, "not every seed fixated and broke early");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}");
    pass(
        "fv-absorption-termination",
        &format!("validity absorbed in 100/100 worlds; perfect injection fixated 100/100 in {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: lower-confidence-bound coverage.
// ---------------------------------------------------------------------------

#[test]
fn lcb_coverage_meets_composed_level() {
    let started = Instant::now();
    let world = SimWorld::with_seed(2024);
    let deltas = [0.05; 3];
    let margins = MarginConfig::new(deltas, world.exact_margins(deltas)).unwrap();
    let coverage = monte_carlo_lcb_coverage(&world, &margins, 10_000).unwrap();

    let composed = aggregate_uncertainty(0.05, 0.05, 0.05).unwrap();
    assert!((composed - 0.142625).abs() < 1e-12);
    let threshold = 1.0 - composed - 0.02;
    assert!(
        coverage >= threshold,
        "coverage {coverage:.4} below threshold {threshold:.6}"
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    pass(
        "lcb-coverage",
        &format!(
            "coverage {coverage:.4} >= {threshold:.6} over 10000 draws (composed delta {composed:.6}) in {elapsed:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: algorithm fidelity on scripted fixtures.
// ---------------------------------------------------------------------------

struct FnBackend<F> {
    f: F,
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (self.f)(request)
    }

    fn name(&self) -> &str {
        "fn-backend"
    }
}

fn graded_judge() -> Arc<dyn ChatBackend> {
    Arc::new(FnBackend {
        f: |request: &ChatRequest| {
            let body = request
                .user
                .split("statement and its proof: ")
                .last()
                .unwrap_or("");
            let k: u32 = body
                .lines()
                .find_map(|line| line.trim().strip_prefix("-- truevotes:"))
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0);
            let vote = match &request.path.purpose {
                CallPurpose::Judge { vote, .. } => *vote,
                _ => 0,
            };
            let word = if vote < k { "True" } else { "False" };
            Ok(format!(
                "%%%%%%%%%%\nExplanation: graded\nJudgement: {word}\n%%%%%%%%%%"
            ))
        },
    })
}

fn scripted_backend(entries: &[(String, String, String)]) -> Arc<dyn ChatBackend> {
    let mut backend = monoform::backend::ScriptedChatBackend::new(
        "scripted",
        monoform::backend::ScriptedResponses::default(),
    );
    for (system, user, response) in entries {
        backend.push_response(system, user, response.clone());
    }
    Arc::new(backend)
}

fn spec(name: &str, role: Role, dims: BTreeSet<Dimension>, backend: Arc<dyn ChatBackend>) -> GeneratorSpec {
    GeneratorSpec::new(name, role, dims, backend, DecodingParams::default()).unwrap()
}

fn fixture_config(
    oogs: Vec<GeneratorSpec>,
    fvrs: Vec<GeneratorSpec>,
    regs: Vec<GeneratorSpec>,
    prover: MockProver,
) -> ProcessConfig {
    ProcessConfig {
        oogs,
        fvrs,
        regs,
        judge_backend: graded_judge(),
        judge_decoding: DecodingParams::default(),
        weights: FusionWeights::equal(),
        votes_per_aspect: 10,
        parse_retries: 0,
        gate: ProverGate::new(Arc::new(prover)),
        max_steps: 6,
        epsilon: 0.0,
        margins: MarginConfig::default(),
        budget: BudgetPolicy::Fixed { per_generator: 1 },
        code_prefixes: default_code_prefixes(),
        step_retries: 0,
        parallelism: 1,
        perfect_tolerance: 1e-12,
    }
}

fn graded_body(tag: &str, truevotes: u32) -> String {
    format!("-- truevotes:{truevotes}\ntheorem {tag} : True := trivial")
}

#[test]
fn algorithm_fidelity_on_fixtures() {
    let theorem = NLTheorem::new("fid", "Statement.", "Proof.").unwrap();
    let (oog_system, oog_user) = build_oog_prompt(&theorem);

    // Scenario 1: two one-off generators, both valid: set of exactly 2, no
    // repairs.
    let body_a = graded_body("a", 8);
    let body_b = graded_body("b", 6);
    let cfg = fixture_config(
        vec![
            spec(
                "oog-a",
                Role::Oog,
                BTreeSet::new(),
                scripted_backend(&[(oog_system.clone(), oog_user.clone(), wire::wrap_block(&body_a))]),
            ),
            spec(
                "oog-b",
                Role::Oog,
                BTreeSet::new(),
                scripted_backend(&[(oog_system.clone(), oog_user.clone(), wire::wrap_block(&body_b))]),
            ),
        ],
        vec![],
        vec![],
        MockProver::new(false).pass_body(&body_a).pass_body(&body_b),
    );
    let map = ResponsivenessMap::default();
    let set = construct_candidates(&theorem, None, 0, &cfg, &map).unwrap();
    assert_eq!(set.candidates.len(), 2);
    assert!(set.candidates.iter().all(|c| c.fv && c.formalization.parent_id.is_none()));

    // Scenario 2: one broken one-off, two repairers: both repairs enter, the
    // original is excluded, parentage points at it.
    let broken = graded_body("broken", 0);
    let messages = vec![DiagnosticMessage {
        line: 5,
        start_col: 0,
        end_col: Some(1),
        text: "unexpected token '#'; expected command".into(),
    }];
    let gate = ProverGate::new(Arc::new(MockProver::new(true)));
    let feedback = gate
        .repair_feedback(&ProverDiagnostics::failure(
            messages.clone(),
            std::time::Duration::ZERO,
            false,
        ))
        .unwrap();
    let parent = Formalization {
        body: broken.clone(),
        origin: Origin {
            generator: "oog-a".into(),
            role: Role::Oog,
        },
        step_index: 0,
        ordinal: 0,
        parent_id: None,
    };
    let (fvr_system, fvr_user) = build_fvr_prompt(&theorem, &parent, &feedback).unwrap();
    let fix_a = graded_body("fix_a", 7);
    let fix_b = graded_body("fix_b", 5);
    let cfg = fixture_config(
        vec![spec(
            "oog-a",
            Role::Oog,
            BTreeSet::new(),
            scripted_backend(&[(oog_system.clone(), oog_user.clone(), wire::wrap_block(&broken))]),
        )],
        vec![
            spec(
                "fvr-a",
                Role::Fvr,
                BTreeSet::new(),
                scripted_backend(&[(fvr_system.clone(), fvr_user.clone(), wire::wrap_block(&fix_a))]),
            ),
            spec(
                "fvr-b",
                Role::Fvr,
                BTreeSet::new(),
                scripted_backend(&[(fvr_system, fvr_user, wire::wrap_block(&fix_b))]),
            ),
        ],
        vec![],
        MockProver::new(false)
            .fail_body(&broken, messages)
            .pass_body(&fix_a)
            .pass_body(&fix_b),
    );
    let set = construct_candidates(&theorem, None, 0, &cfg, &map).unwrap();
    assert_eq!(set.candidates.len(), 2);
    assert_eq!(set.candidates[0].formalization.body, fix_a);
    assert_eq!(set.candidates[1].formalization.body, fix_b);
    assert!(set
        .candidates
        .iter()
        .all(|c| c.formalization.parent_id.as_ref() == Some(&parent.id())));

    // Scenario 3: step 1 with one valid one-off and one valid recurrent
    // refinement of the incumbent: set of exactly 2.
    let incumbent_body = graded_body("inc", 5);
    let verdicts: Vec<JudgeVerdict> = registry()
        .iter()
        .map(|aspect| JudgeVerdict {
            aspect: aspect.clone(),
            judgement: 1,
            explanation: "stored".into(),
            raw: String::new(),
        })
        .collect();
    let incumbent = Incumbent {
        formalization: Formalization {
            body: incumbent_body.clone(),
            origin: Origin {
                generator: "oog-a".into(),
                role: Role::Oog,
            },
            step_index: 0,
            ordinal: 0,
            parent_id: None,
        },
        estimate: ObjectiveValue::new_unchecked(0.5),
        scores: DimensionScores::judged(0.5, 0.5, 0.5).unwrap(),
        verdicts,
    };
    let dims: BTreeSet<Dimension> = [Dimension::Fq].into();
    let digest = feedback_digest(&incumbent.verdicts, &dims).unwrap();
    let (reg_system, reg_user) = build_reg_prompt(&theorem, &incumbent.formalization, &digest).unwrap();
    let fresh = graded_body("fresh", 6);
    let refined = graded_body("refined", 7);
    let cfg = fixture_config(
        vec![spec(
            "oog-a",
            Role::Oog,
            BTreeSet::new(),
            scripted_backend(&[(oog_system, oog_user, wire::wrap_block(&fresh))]),
        )],
        vec![],
        vec![spec(
            "reg-fq",
            Role::Reg,
            dims,
            scripted_backend(&[(reg_system, reg_user, wire::wrap_block(&refined))]),
        )],
        MockProver::new(false).pass_body(&fresh).pass_body(&refined),
    );
    let set = construct_candidates(&theorem, Some(&incumbent), 1, &cfg, &map).unwrap();
    assert_eq!(set.candidates.len(), 2);
    assert_eq!(set.candidates[0].formalization.origin.role, Role::Oog);
    assert_eq!(set.candidates[1].formalization.origin.role, Role::Reg);

    // Acceptance fixtures: sentinel accepts zero; ties keep the last
    // scanned; strict improvement replaces the incumbent.
    let cfg = fixture_config(
        vec![spec("oog-a", Role::Oog, BTreeSet::new(), scripted_backend(&[]))],
        vec![],
        vec![],
        MockProver::new(true),
    );
    let fixture_set = |entries: &[(&str, u32, bool)]| -> StepCandidates {
        let mut set = StepCandidates::default();
        for (index, (tag, votes, fv)) in entries.iter().enumerate() {
            set.candidates.push(CheckedCandidate {
                formalization: Formalization {
                    body: graded_body(tag, *votes),
                    origin: Origin {
                        generator: "oog-a".into(),
                        role: Role::Oog,
                    },
                    step_index: 0,
                    ordinal: index as u32,
                    parent_id: None,
                },
                fv: *fv,
                diagnostics: ProverDiagnostics::pass(std::time::Duration::ZERO),
            });
        }
        set
    };

    let mut scratch = ResponsivenessMap::default();
    let seed_incumbent = Incumbent::seed();
    let (after, record) = acceptance_step(
        &theorem,
        &seed_incumbent,
        fixture_set(&[("zero", 0, false)]),
        0,
        &cfg,
        &mut scratch,
    )
    .unwrap();
    assert!(record.accepted && after.estimate.value() == 0.0);

    let incumbent_half = Incumbent {
        estimate: ObjectiveValue::new_unchecked(0.5),
        ..incumbent
    };
    let (after, record) = acceptance_step(
        &theorem,
        &incumbent_half,
        fixture_set(&[("a", 4, true), ("b", 4, true)]),
        1,
        &cfg,
        &mut scratch,
    )
    .unwrap();
    assert!(!record.accepted);
    assert_eq!(after.formalization, incumbent_half.formalization);

    let (after, record) = acceptance_step(
        &theorem,
        &incumbent_half,
        fixture_set(&[("a", 4, true), ("b", 6, true)]),
        1,
        &cfg,
        &mut scratch,
    )
    .unwrap();
    assert!(record.accepted);
    assert_eq!(after.formalization.body, graded_body("b", 6));

    let (after, record) = acceptance_step(
        &theorem,
        &seed_incumbent,
        fixture_set(&[("first", 6, true), ("second", 6, true)]),
        0,
        &cfg,
        &mut scratch,
    )
    .unwrap();
    assert!(record.accepted);
    assert_eq!(after.formalization.body, graded_body("second", 6));

    pass(
        "algorithm-fidelity",
        "construction scenarios sized 2/2/2 with exact parentage; selection keeps >= ties and accepts only strict improvement",
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: wire-format fidelity.
// ---------------------------------------------------------------------------

#[test]
fn wire_format_fidelity() {
    let theorem = NLTheorem::new("wf", "Statement text.", "Proof text.").unwrap();
    let candidate = Formalization {
        body: "theorem wf : True := trivial".into(),
        origin: Origin {
            generator: "g".into(),
            role: Role::Oog,
        },
        step_index: 0,
        ordinal: 0,
        parent_id: None,
    };

    // Generator prompt: the numbered instruction lines, byte for byte.
    let (oog_system, oog_user) = build_oog_prompt(&theorem);
    for line in [
        "You are an expert in formal language Lean4.",
        "1. You should give the formal code directly without any additional comments or explanations.",
        "2. In case that you need to import any necessary preambles, you should not import any fake (non-exist) preambles.",
        "3. You should wrap the formal code in a way illustrated as the following:",
        "%%%%%%%%%%",
        "Your Formal Code",
        "Strictly follow the instructions that have been claimed.",
    ] {
        assert!(
            oog_system.lines().any(|l| l == line),
            "missing line: {line}"
        );
    }
    assert!(oog_user.ends_with("Give me the Lean4 formal code of them:"));
    assert_eq!(build_oog_prompt(&theorem), (oog_system, oog_user));

    // Repairer and recurrent generators share one refinement system prompt.
    let feedback = "Error on line 5, start column 0, end column 1: unexpected token '#'; expected command";
    let (fvr_system, fvr_user) = build_fvr_prompt(&theorem, &candidate, feedback).unwrap();
    let (reg_system, reg_user) =
        build_reg_prompt(&theorem, &candidate, "Aspect: q\nEvaluation: Explanation: e\nJudgement: True").unwrap();
    assert_eq!(fvr_system, reg_system);
    assert!(fvr_system.lines().any(|l| l == "Your task is to refine the given formal code to make it correct while maintaining the alignment with the given natural language mathematical statement and proof."));
    assert!(fvr_user.contains(
        "According to the theorem prover, the error details of the provided formal code are:"
    ));
    assert!(fvr_user.lines().any(|l| l == feedback));
    assert!(reg_user.contains(
        "Here are some feedbacks about the formal code which can be used to help your task:"
    ));

    // Judge prompt wire format.
    let conciseness = registry_for(Dimension::Fq)[0];
    let (judge_system, judge_user) = build_aspect_prompt(&theorem, &candidate, conciseness);
    for line in [
        "Your task is to evaluate a specific aspect of the formal code.",
        "Explanation: Your Detailed Explanation",
        "Judgement: Your Binary Judgement",
        "%%%%%%%%%%",
    ] {
        assert!(judge_system.lines().any(|l| l == line));
    }
    assert!(judge_system.contains("minimal, non-redundant form"));
    assert!(judge_user.ends_with(&candidate.body));

    // Error feedback reproduces the documented example lines byte-exactly,
    // including the literal token `None`.
    let diagnostics = ProverDiagnostics::failure(
        vec![
            DiagnosticMessage {
                line: 5,
                start_col: 0,
                end_col: Some(1),
                text: "unexpected token '#'; expected command".into(),
            },
            DiagnosticMessage {
                line: 138,
                start_col: 0,
                end_col: None,
                text: "unexpected end of input; expected '{' or indented tactic sequence".into(),
            },
        ],
        std::time::Duration::ZERO,
        false,
    );
    let text = format_error_feedback(&diagnostics).unwrap();
    assert_eq!(
        text,
        "Error on line 5, start column 0, end column 1: unexpected token '#'; expected command\nError on line 138, start column 0, end column None: unexpected end of input; expected '{' or indented tactic sequence"
    );

    // Verdict wire format round-trips both tokens.
    for (word, expected) in [("True", 1u8), ("False", 0u8)] {
        let raw = format!(
            "%%%%%%%%%%\nExplanation: round trip\nJudgement: {word}\n%%%%%%%%%%"
        );
        let verdict = parse_verdict(&raw, conciseness).unwrap();
        assert_eq!(verdict.judgement, expected);
        assert_eq!(verdict.explanation, "round trip");
    }

    pass(
        "wire-format-fidelity",
        "prompt instruction lines, error-feedback lines (incl. `end column None`), and verdict round-trip are byte-exact",
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: aggregation consistency and allocation oracles.
// ---------------------------------------------------------------------------

fn enumerate_allocations(n: usize, total: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in enumerate_allocations(n - 1, total - first) {
            let mut allocation = vec![first];
            allocation.append(&mut rest);
            out.push(allocation);
        }
    }
    out
}

#[test]
fn aggregation_consistency_and_allocation_oracles() {
    // The published final-step row shape respects the row invariant.
    let published = AggregateRow {
        label: "published".into(),
        fv_pct: 93.44,
        lp_pct: 74.08,
        mc_pct: 90.16,
        fq_pct: 77.05,
        j_pct: 78.22,
    };
    published.check_invariant().unwrap();
    let soft_mean = (published.lp_pct + published.mc_pct + published.fq_pct) / 3.0;
    assert!(published.j_pct <= soft_mean);
    assert!((soft_mean - 80.43).abs() < 0.01);

    let corrupt = AggregateRow {
        j_pct: published.fv_pct + 1.0,
        ..published
    };
    assert!(corrupt.check_invariant().is_err());

    // Responsiveness estimator against a long-hand oracle.
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for _ in 0..200 {
        let base = DimensionScores::new(
            rng.gen::<bool>(),
            rng.gen::<f64>(),
            rng.gen::<f64>(),
            rng.gen::<f64>(),
            true,
        )
        .unwrap();
        let count = rng.gen_range(1..5);
        let candidates: Vec<DimensionScores> = (0..count)
            .map(|_| {
                DimensionScores::new(
                    rng.gen::<bool>(),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                    true,
                )
                .unwrap()
            })
            .collect();
        let estimate = estimate_responsiveness(&base, &candidates).unwrap();
        let mut oracle = [0.0f64; 4];
        for candidate in &candidates {
            oracle[0] += candidate.fv_bit() - base.fv_bit();
            oracle[1] += candidate.lp() - base.lp();
            oracle[2] += candidate.mc() - base.mc();
            oracle[3] += candidate.fq() - base.fq();
        }
        for slot in &mut oracle {
            *slot /= candidates.len() as f64;
        }
        let got = estimate.as_array();
        for (g, o) in got.iter().zip(oracle) {
            assert!((g - o).abs() < 1e-15);
        }
    }

    // Largest-remainder allocation against exhaustive search on every small
    // instance shape: up to 3 generators, budgets up to 10.
    let mut checked = 0usize;
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for n in 1..=3usize {
        for total in 0..=10u32 {
            for _ in 0..10 {
                let merits: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                let floor = if total >= n as u32 { rng.gen_range(0..=1) } else { 0 };
                let budgets = largest_remainder(&merits, total, floor).unwrap();
                assert_eq!(budgets.iter().sum::<u32>(), total);

                let remaining = total - floor * n as u32;
                let merit_sum: f64 = merits.iter().sum();
                let ideals: Vec<f64> = if merit_sum > 0.0 {
                    merits
                        .iter()
                        .map(|m| f64::from(remaining) * m / merit_sum)
                        .collect()
                } else {
                    vec![f64::from(remaining) / n as f64; n]
                };
                let best = enumerate_allocations(n, remaining)
                    .into_iter()
                    .map(|allocation| {
                        allocation
                            .iter()
                            .zip(&ideals)
                            .map(|(&b, &i)| (f64::from(b) - i).abs())
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                let ours: f64 = budgets
                    .iter()
                    .zip(&ideals)
                    .map(|(&b, &i)| (f64::from(b - floor) - i).abs())
                    .sum();
                assert!(ours <= best + 1e-9, "allocation deviates from optimum");
                checked += 1;
            }
        }
    }

    pass(
        "aggregation-consistency",
        &format!(
            "row invariant enforced (published row passes, soft mean 80.43); estimator exact on 200 cases; allocation optimal on {checked} small instances"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism and resume.
// ---------------------------------------------------------------------------

#[test]
fn determinism_and_resume_are_exact() {
    // Identical (seed, config) simulations serialize byte-identically.
    let run = |seed: u64| {
        let world = SimWorld::with_seed(seed);
        let (trace, _) = simulate_process(&world, &SimParams::default()).unwrap();
        serde_json::to_vec(&trace).unwrap()
    };
    assert_eq!(run(31), run(31));
    assert_eq!(run(77), run(77));
    assert_ne!(run(31), run(77));

    // Kill-and-resume equals the uninterrupted run exactly.
    let dir = tempfile::tempdir().unwrap();
    let world = SimWorld::with_seed(5);
    let params = SimParams::default();
    let cfg = process_config(&world, &params);
    let theorem = sim_theorem(&world);

    let full_path = dir.path().join("full.jsonl");
    let sink = JsonlSink::create(&full_path, serde_json::json!({"kind": "acceptance"})).unwrap();
    let uninterrupted = run_theorem(&theorem, &cfg, &sink).unwrap();
    drop(sink);
    assert!(uninterrupted.records.len() >= 3, "run too short to truncate");

    let crashed_path = dir.path().join("crashed.jsonl");
    let text = std::fs::read_to_string(&full_path).unwrap();
    let kept: Vec<&str> = text.lines().take(3).collect(); // header + 2 steps
    std::fs::write(&crashed_path, kept.join("\n") + "\n").unwrap();

    let contents = load_sink(&crashed_path).unwrap();
    assert_eq!(contents.theorems[&theorem.id].records.len(), 2);
    let sink = JsonlSink::append_to(&crashed_path).unwrap();
    let resumed = run_dataset_from(
        std::slice::from_ref(&theorem),
        &cfg,
        &sink,
        &contents.theorems,
    )
    .unwrap();
    assert_eq!(
        serde_json::to_vec(&resumed[0]).unwrap(),
        serde_json::to_vec(&uninterrupted).unwrap()
    );

    pass(
        "determinism-resume",
        "identical (seed, config) traces byte-identical; kill-and-resume equals the uninterrupted run exactly",
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: end-to-end smoke over HTTP-replay backends.
// ---------------------------------------------------------------------------

type Fixtures = BTreeMap<String, Vec<String>>;

/// Minimal chat-completion replay server: answers each POST by digesting the
/// (system, user) pair and serving the next canned response for that digest.
fn spawn_replay_server(fixtures: Fixtures) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind replay server");
    let addr = listener.local_addr().expect("server addr");
    let cursors: Mutex<BTreeMap<String, usize>> = Mutex::new(BTreeMap::new());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() || line.is_empty() {
                continue;
            }
            let mut content_length = 0usize;
            loop {
                let mut header = String::new();
                if reader.read_line(&mut header).is_err() {
                    break;
                }
                let header = header.trim_end();
                if header.is_empty() {
                    break;
                }
                if let Some(value) = header
                    .to_ascii_lowercase()
                    .strip_prefix("content-length:")
                    .map(str::trim)
                    .and_then(|v| v.parse::<usize>().ok())
                {
                    content_length = value;
                }
            }
            let mut body = vec![0u8; content_length];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let parsed: serde_json::Value = match serde_json::from_slice(&body) {
                Ok(value) => value,
                Err(_) => continue,
            };
            let system = parsed["messages"][0]["content"].as_str().unwrap_or("");
            let user = parsed["messages"][1]["content"].as_str().unwrap_or("");
            let digest = prompt_digest(system, user);

            let response = fixtures.get(&digest).map(|entries| {
                let mut cursors = cursors.lock().expect("cursor lock");
                let cursor = cursors.entry(digest.clone()).or_insert(0);
                let index = (*cursor).min(entries.len() - 1);
                *cursor += 1;
                entries[index].clone()
            });
            let (status, payload) = match response {
                Some(content) => (
                    "200 OK",
                    serde_json::json!({
                        "choices": [{"message": {"role": "assistant", "content": content}}]
                    })
                    .to_string(),
                ),
                None => ("404 Not Found", String::from("{\"error\":\"no fixture\"}")),
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len(),
            );
        }
    });
    addr
}

/// Judge answer plan for the smoke run: LP and MC aspects always pass; FQ
/// passes conciseness only for the repaired body and everything for the
/// refined body.
fn smoke_judgement(aspect_id: &str, body_tag: &str) -> &'static str {
    match (aspect_id, body_tag) {
        ("logical_consistency", "v1") => "False",
        _ => "True",
    }
}

#[test]
fn end_to_end_smoke_over_http_replay() {
    let started = Instant::now();
    let theorems: Vec<NLTheorem> = (1..=3)
        .map(|i| {
            NLTheorem::new(
                format!("smoke-{i}"),
                format!("If n = {i} then n + 0 = {i}."),
                "Apply the additive identity.",
            )
            .unwrap()
        })
        .collect();

    let mut fixtures: Fixtures = BTreeMap::new();
    let mut push = |system: &str, user: &str, response: String| {
        fixtures
            .entry(prompt_digest(system, user))
            .or_default()
            .push(response);
    };

    let bad_body = |id: &str| format!("-- smoke bad {id}\ntheorem bad_{id} : True := trivial");
    let v1_body = |id: &str| format!("-- smoke v1 {id}\ntheorem v1_{id} : True := trivial");
    let v2_body = |id: &str| format!("-- smoke v2 {id}\ntheorem v2_{id} : True := trivial");
    let diagnostics = vec![DiagnosticMessage {
        line: 5,
        start_col: 0,
        end_col: Some(1),
        text: "unexpected token '#'; expected command".into(),
    }];

    let mut prover = MockProver::new(false);
    let gate_for_feedback = ProverGate::new(Arc::new(MockProver::new(true)));

    for theorem in &theorems {
        let id = &theorem.id;
        let bad = bad_body(id);
        let v1 = v1_body(id);
        let v2 = v2_body(id);
        prover = prover
            .fail_body(&bad, diagnostics.clone())
            .pass_body(&v1)
            .pass_body(&v2);

        // One-off generation yields the broken body.
        let (oog_system, oog_user) = build_oog_prompt(theorem);
        push(&oog_system, &oog_user, wire::wrap_block(&bad));

        // The repairer sees the exact gate feedback and produces v1.
        let feedback = gate_for_feedback
            .repair_feedback(&ProverDiagnostics::failure(
                diagnostics.clone(),
                std::time::Duration::ZERO,
                false,
            ))
            .unwrap();
        let parent = Formalization {
            body: bad.clone(),
            origin: Origin {
                generator: "oog-http".into(),
                role: Role::Oog,
            },
            step_index: 0,
            ordinal: 0,
            parent_id: None,
        };
        let (fvr_system, fvr_user) = build_fvr_prompt(theorem, &parent, &feedback).unwrap();
        push(&fvr_system, &fvr_user, wire::wrap_block(&v1));
        // Step 1 repairs the re-sampled broken body again (same digest, the
        // cursor repeats the entry).

        // Judge verdicts for both candidate bodies.
        for (body, tag) in [(&v1, "v1"), (&v2, "v2")] {
            let formalization = Formalization {
                body: body.clone(),
                origin: Origin {
                    generator: "x".into(),
                    role: Role::Fvr,
                },
                step_index: 0,
                ordinal: 0,
                parent_id: None,
            };
            for aspect in registry() {
                let (system, user) = build_aspect_prompt(theorem, &formalization, aspect);
                let word = smoke_judgement(&aspect.aspect_id, tag);
                push(
                    &system,
                    &user,
                    format!(
                        "%%%%%%%%%%\nExplanation: smoke check of {}\nJudgement: {word}\n%%%%%%%%%%",
                        aspect.aspect_id
                    ),
                );
            }
        }

        // The recurrent generator refines v1 (the step-0 incumbent) into v2,
        // keyed by the digest of the stored FQ verdicts.
        let stored_verdicts: Vec<JudgeVerdict> = registry()
            .iter()
            .map(|aspect| JudgeVerdict {
                aspect: aspect.clone(),
                judgement: u8::from(smoke_judgement(&aspect.aspect_id, "v1") == "True"),
                explanation: format!("smoke check of {}", aspect.aspect_id),
                raw: String::new(),
            })
            .collect();
        let dims: BTreeSet<Dimension> = [Dimension::Fq].into();
        let digest = feedback_digest(&stored_verdicts, &dims).unwrap();
        let incumbent = Formalization {
            body: v1.clone(),
            origin: Origin {
                generator: "fvr-http".into(),
                role: Role::Fvr,
            },
            step_index: 0,
            ordinal: 0,
            parent_id: Some(parent.id()),
        };
        let (reg_system, reg_user) = build_reg_prompt(theorem, &incumbent, &digest).unwrap();
        push(&reg_system, &reg_user, wire::wrap_block(&v2));
    }

    let addr = spawn_replay_server(fixtures);
    let endpoint = format!("http://{addr}/v1/chat/completions");
    let http = |name: &str| -> Arc<dyn ChatBackend> {
        Arc::new(HttpChatBackend::new(
            name,
            endpoint.clone(),
            "replay-model",
            None,
            false,
            RetryPolicy {
                max_attempts: 3,
                base_delay: std::time::Duration::from_millis(10),
            },
        ))
    };

    let dims: BTreeSet<Dimension> = [Dimension::Fq].into();
    let cfg = ProcessConfig {
        oogs: vec![spec("oog-http", Role::Oog, BTreeSet::new(), http("oog-http"))],
        fvrs: vec![spec("fvr-http", Role::Fvr, BTreeSet::new(), http("fvr-http"))],
        regs: vec![spec("reg-http", Role::Reg, dims, http("reg-http"))],
        judge_backend: http("judge-http"),
        judge_decoding: DecodingParams::default(),
        weights: FusionWeights::equal(),
        votes_per_aspect: 1,
        parse_retries: 1,
        gate: ProverGate::new(Arc::new(prover)),
        max_steps: 4,
        epsilon: 0.0,
        margins: MarginConfig::default(),
        budget: BudgetPolicy::Fixed { per_generator: 1 },
        code_prefixes: default_code_prefixes(),
        step_retries: 1,
        parallelism: 2,
        perfect_tolerance: 1e-12,
    };

    let dir = tempfile::tempdir().unwrap();
    let sink = JsonlSink::create(
        &dir.path().join("traces.jsonl"),
        serde_json::json!({"kind": "smoke"}),
    )
    .unwrap();
    let traces = run_dataset(&theorems, &cfg, &sink).unwrap();

    assert_eq!(traces.len(), 3);
    for trace in &traces {
        trace.check_invariants().unwrap();
        assert_eq!(trace.terminal_reason, TerminalReason::PerfectScore);
        assert_eq!(trace.records.len(), 2);
        // Step 0 accepts the repaired body at 2.5/3; step 1 accepts the
        // refined perfect body.
        let step0 = trace.records[0].incumbent_after.estimate.value();
        assert!((step0 - 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(trace.records[1].incumbent_after.estimate.value(), 1.0);
        let final_origin = &trace.records[1].incumbent_after.formalization.origin;
        assert_eq!(final_origin.role, Role::Reg);
    }

    emit_report(&traces, dir.path()).unwrap();
    let rows = parse_aggregate_csv(&dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].fv_pct, 100.0);
    assert_eq!(rows[1].j_pct, 100.0);
    let row = aggregate_step(&traces, 0).unwrap();
    assert_eq!(row.fv_pct, 100.0);
    assert!((row.j_pct - 83.33).abs() < 0.01);
    assert!(dir.path().join("final_incumbents.json").exists());
    assert!(dir.path().join("curves.csv").exists());
    assert!(dir.path().join("responsiveness.json").exists());

    // Replay the persisted traces and confirm they reload cleanly.
    let contents = load_sink(&dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(contents.theorems.len(), 3);
    for (theorem_id, partial) in contents.theorems {
        let trace = partial.into_trace(&theorem_id).expect("terminal trace");
        trace.check_invariants().unwrap();
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    pass(
        "e2e-smoke",
        &format!(
            "3 theorems through HTTP-replay backends reached a perfect refinement in 2 steps each; reports emitted and traces replay in {elapsed:?}"
        ),
    );
}
