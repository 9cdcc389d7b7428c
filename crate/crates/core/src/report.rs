//! Dataset-level aggregation and report emission: per-step score tables,
//! deltas between variants, paired effect sizes, and the artifact files.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::model::RunTrace;
use crate::responsiveness::ResponsivenessMap;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("aggregation needs at least one trace")]
    EmptyTraces,
    #[error("trace {0} has no record at or before step {1}")]
    MissingStep(String, usize),
    #[error("row invariant violated: overall {j_pct} exceeds validity {fv_pct}")]
    RowInvariant { j_pct: f64, fv_pct: f64 },
    #[error("effect size undefined: {0}")]
    EffectSizeUndefined(&'static str),
    #[error("report destination unwritable: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One aggregate table row: dataset means as percentages, rounded to two
/// decimals the way the score tables print them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub fv_pct: f64,
    pub lp_pct: f64,
    pub mc_pct: f64,
    pub fq_pct: f64,
    pub j_pct: f64,
}

impl AggregateRow {
    /// Every row must keep the overall score at or below validity: the
    /// per-sample overall is validity-masked, so a violation means the
    /// inputs are corrupt.
    pub fn check_invariant(&self) -> Result<(), ReportError> {
        if self.j_pct > self.fv_pct + 1e-9 {
            return Err(ReportError::RowInvariant {
                j_pct: self.j_pct,
                fv_pct: self.fv_pct,
            });
        }
        Ok(())
    }
}

fn round2(value: f64) -> f64 {
    (value * 100.0).round() / 100.0
}

/// Incumbent scores of one trace at a step, carrying the last record forward
/// for traces that terminated early.
fn record_at(trace: &RunTrace, step: usize) -> Option<&crate::model::StepRecord> {
    if trace.records.is_empty() {
        return None;
    }
    let index = step.min(trace.records.len() - 1);
    Some(&trace.records[index])
}

/// Dataset means of the incumbent scores at `step`, as percentages.
pub fn aggregate_step(traces: &[RunTrace], step: usize) -> Result<AggregateRow, ReportError> {
    if traces.is_empty() {
        return Err(ReportError::EmptyTraces);
    }
    let mut sums = [0.0f64; 5];
    for trace in traces {
        let record = record_at(trace, step)
            .ok_or_else(|| ReportError::MissingStep(trace.theorem_id.clone(), step))?;
        let scores = record.incumbent_scores;
        sums[0] += scores.fv_bit();
        sums[1] += scores.lp();
        sums[2] += scores.mc();
        sums[3] += scores.fq();
        // The estimate is clamped at zero for reporting: the sentinel's -1
        // would otherwise leak into dataset means.
        sums[4] += record.incumbent_after.estimate.value().max(0.0);
    }
    let n = traces.len() as f64;
    let row = AggregateRow {
        label: format!("step {step}"),
        fv_pct: round2(sums[0] / n * 100.0),
        lp_pct: round2(sums[1] / n * 100.0),
        mc_pct: round2(sums[2] / n * 100.0),
        fq_pct: round2(sums[3] / n * 100.0),
        j_pct: round2(sums[4] / n * 100.0),
    };
    row.check_invariant()?;
    Ok(row)
}

/// Signed per-column difference between two aggregate rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub label: String,
    pub fv: f64,
    pub lp: f64,
    pub mc: f64,
    pub fq: f64,
    pub j: f64,
}

impl DeltaRow {
    pub fn columns(&self) -> [f64; 5] {
        [self.fv, self.lp, self.mc, self.fq, self.j]
    }
}

/// Renders a signed delta the way comparison tables print them: +1.64, -0.61.
pub struct SignedPct(pub f64);

impl fmt::Display for SignedPct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 >= 0.0 {
            write!(f, "+{:.2}", self.0)
        } else {
            write!(f, "-{:.2}", self.0.abs())
        }
    }
}

/// Variant minus baseline, per column.
pub fn delta_table(baseline: &AggregateRow, variant: &AggregateRow) -> DeltaRow {
    DeltaRow {
        label: format!("{} vs {}", variant.label, baseline.label),
        fv: round2(variant.fv_pct - baseline.fv_pct),
        lp: round2(variant.lp_pct - baseline.lp_pct),
        mc: round2(variant.mc_pct - baseline.mc_pct),
        fq: round2(variant.fq_pct - baseline.fq_pct),
        j: round2(variant.j_pct - baseline.j_pct),
    }
}

/// Paired effect size: mean of the paired deltas over their sample standard
/// deviation (n-1). Undefined for fewer than two values or zero variance.
pub fn cohens_d(paired_deltas: &[f64]) -> Result<f64, ReportError> {
    if paired_deltas.len() < 2 {
        return Err(ReportError::EffectSizeUndefined("fewer than two deltas"));
    }
    if paired_deltas.windows(2).all(|w| w[0] == w[1]) {
        return Err(ReportError::EffectSizeUndefined("zero variance"));
    }
    let n = paired_deltas.len() as f64;
    let mean = paired_deltas.iter().sum::<f64>() / n;
    let var = paired_deltas
        .iter()
        .map(|d| (d - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok(mean / var.sqrt())
}

/// Per-theorem final state for the report.
#[derive(Debug, Serialize)]
struct FinalIncumbent<'a> {
    theorem_id: &'a str,
    terminal_reason: crate::model::TerminalReason,
    steps: usize,
    estimate: f64,
    fv: bool,
    lp: f64,
    mc: f64,
    fq: f64,
    body: &'a str,
}

/// Emits the report suite into `destination`:
///
/// - `aggregate.csv`: one row per step with the five metric columns
/// - `final_incumbents.json`: per-theorem final body and scores
/// - `curves.csv`: long-format per-step metric values for plotting
/// - `responsiveness.json`: final per-theorem responsiveness estimates
///
/// Output is deterministic for identical traces.
pub fn emit_report(traces: &[RunTrace], destination: &Path) -> Result<(), ReportError> {
    if traces.is_empty() {
        return Err(ReportError::EmptyTraces);
    }
    std::fs::create_dir_all(destination)?;
    let steps = traces
        .iter()
        .map(|t| t.records.len())
        .max()
        .unwrap_or(0);

    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        rows.push(aggregate_step(traces, step)?);
    }

    let mut writer = csv::Writer::from_path(destination.join("aggregate.csv"))?;
    writer.write_record(["step", "fv_pct", "lp_pct", "mc_pct", "fq_pct", "j_pct"])?;
    for (step, row) in rows.iter().enumerate() {
        writer.write_record([
            step.to_string(),
            format!("{:.2}", row.fv_pct),
            format!("{:.2}", row.lp_pct),
            format!("{:.2}", row.mc_pct),
            format!("{:.2}", row.fq_pct),
            format!("{:.2}", row.j_pct),
        ])?;
    }
    writer.flush().map_err(ReportError::Io)?;

    let mut writer = csv::Writer::from_path(destination.join("curves.csv"))?;
    writer.write_record(["step", "metric", "value"])?;
    for (step, row) in rows.iter().enumerate() {
        for (metric, value) in [
            ("fv_pct", row.fv_pct),
            ("lp_pct", row.lp_pct),
            ("mc_pct", row.mc_pct),
            ("fq_pct", row.fq_pct),
            ("j_pct", row.j_pct),
        ] {
            writer.write_record([step.to_string(), metric.to_string(), format!("{value:.2}")])?;
        }
    }
    writer.flush().map_err(ReportError::Io)?;

    let mut finals: Vec<FinalIncumbent> = traces
        .iter()
        .filter_map(|trace| {
            trace.records.last().map(|last| FinalIncumbent {
                theorem_id: &trace.theorem_id,
                terminal_reason: trace.terminal_reason,
                steps: trace.records.len(),
                estimate: last.incumbent_after.estimate.value(),
                fv: last.incumbent_scores.fv(),
                lp: last.incumbent_scores.lp(),
                mc: last.incumbent_scores.mc(),
                fq: last.incumbent_scores.fq(),
                body: &last.incumbent_after.formalization.body,
            })
        })
        .collect();
    finals.sort_by(|a, b| a.theorem_id.cmp(b.theorem_id));
    let json = serde_json::to_string_pretty(&finals)
        .map_err(|e| ReportError::Io(std::io::Error::other(e)))?;
    std::fs::write(destination.join("final_incumbents.json"), json + "\n")?;

    let mut responsiveness: Vec<(&str, &ResponsivenessMap)> = traces
        .iter()
        .filter_map(|trace| {
            trace
                .records
                .last()
                .map(|last| (trace.theorem_id.as_str(), &last.responsiveness))
        })
        .collect();
    responsiveness.sort_by(|a, b| a.0.cmp(b.0));
    let entries: Vec<serde_json::Value> = responsiveness
        .into_iter()
        .map(|(theorem_id, map)| {
            serde_json::json!({
                "theorem_id": theorem_id,
                "responsiveness": map,
            })
        })
        .collect();
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| ReportError::Io(std::io::Error::other(e)))?;
    std::fs::write(destination.join("responsiveness.json"), json + "\n")?;
    Ok(())
}

/// Parses an emitted `aggregate.csv` back into rows.
pub fn parse_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>, ReportError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result?;
        let field = |i: usize| -> f64 { record[i].parse().unwrap_or(f64::NAN) };
        rows.push(AggregateRow {
            label: format!("step {}", &record[0]),
            fv_pct: field(1),
            lp_pct: field(2),
            mc_pct: field(3),
            fq_pct: field(4),
            j_pct: field(5),
        });
    }
    Ok(rows)
}
