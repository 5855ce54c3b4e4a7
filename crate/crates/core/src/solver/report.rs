use crate::textio::{fmt_f64, header_kv};
use crate::{Error, Result};
use std::fmt::Write;

/// One row of a convergence trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub stage: String,
    /// Cost of the evaluated iterate (`inf` if it could not be evaluated).
    pub cost: f64,
    /// LM damping used for the step; 0 outside LM.
    pub mu: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// No iterations were requested.
    NoIterations,
    MaxIterations,
    /// Relative cost decrease fell below tolerance.
    SmallDecrease,
    ZeroCost,
    ZeroGradient,
    /// LM could not find a descent step before the damping limit.
    DampingLimit,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::NoIterations => "no-iterations",
            Termination::MaxIterations => "max-iterations",
            Termination::SmallDecrease => "small-decrease",
            Termination::ZeroCost => "zero-cost",
            Termination::ZeroGradient => "zero-gradient",
            Termination::DampingLimit => "damping-limit",
        }
    }

    /// True if the stopping rule indicates convergence. Hitting the damping
    /// limit means no descent step exists at working precision, which is
    /// treated as converged.
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub trace: Vec<TraceEntry>,
    /// Index into `trace` of the returned iterate.
    pub best_index: usize,
    pub termination: Termination,
    /// Iterations performed (SK solves or accepted LM steps).
    pub iterations: usize,
    /// The cost rose between consecutive SK iterates.
    pub oscillation: bool,
    /// Per-iteration condition estimate of the linear LS problem.
    pub condition: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SolveReport {
    pub fn best_cost(&self) -> f64 {
        self.trace[self.best_index].cost
    }

    pub fn initial_cost(&self) -> f64 {
        self.trace[0].cost
    }
}

/// Columnar text: `iteration stage V mu accepted`.
pub fn trace_to_text(trace: &[TraceEntry]) -> String {
    let mut out = String::from("# cost trace\niteration stage V mu accepted\n");
    for e in trace {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            e.iteration,
            e.stage,
            fmt_f64(e.cost),
            fmt_f64(e.mu),
            u8::from(e.accepted)
        );
    }
    out
}

pub fn trace_from_text(text: &str) -> Result<Vec<TraceEntry>> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || header_kv(line).is_some() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line.split_whitespace().collect::<Vec<_>>() != ["iteration", "stage", "V", "mu", "accepted"] {
                return Err(Error::Parse(format!("line {}: unexpected trace header", n + 1)));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("line {}: expected 5 fields", n + 1)));
        }
        let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", n + 1));
        let cost: f64 = f[2].parse().map_err(|_| bad("cost"))?;
        let mu: f64 = f[3].parse().map_err(|_| bad("mu"))?;
        if cost.is_nan() || cost < 0.0 || !mu.is_finite() {
            return Err(bad("value"));
        }
        out.push(TraceEntry {
            iteration: f[0].parse().map_err(|_| bad("iteration"))?,
            stage: f[1].to_string(),
            cost,
            mu,
            accepted: match f[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("accepted flag")),
            },
        });
    }
    Ok(out)
}
