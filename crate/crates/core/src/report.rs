//! Convergence tables: successive-change ratios, normalized timings and
//! CSV / text rendering.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::{build_problem, ProblemError, ProblemKind};
use crate::schemes::{run_scheme, SchemeConfig, SchemeError, SchemeRun};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("level {level}: {source}")]
    Scheme { level: u32, source: SchemeError },
}

/// Runs `kind` at each level. With `parallel` the levels run concurrently.
pub fn run_levels(
    kind: ProblemKind,
    levels: &[u32],
    cfg: &SchemeConfig,
    overrides: Option<&str>,
    parallel: bool,
) -> Result<Vec<SchemeRun>, StudyError> {
    if let Some(&level) = levels.iter().find(|&&l| l > kind.max_level()) {
        return Err(ProblemError::BadLevel {
            problem: kind,
            level,
            max: kind.max_level(),
        }
        .into());
    }
    let one = |&level: &u32| -> Result<SchemeRun, StudyError> {
        let p = build_problem(kind, level, overrides)?;
        run_scheme(p.as_ref(), cfg).map_err(|source| StudyError::Scheme { level, source })
    };
    if parallel {
        levels.par_iter().map(one).collect()
    } else {
        levels.iter().map(one).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub h: String,
    pub value: f64,
    pub avg_policy_its: Option<f64>,
    pub avg_linear_its: f64,
    pub ratio: Option<f64>,
    pub norm_time: Option<f64>,
}

/// `"1"`, `"1/2"`, `"1/4"`, ...
pub fn h_label(level: u32) -> String {
    if level == 0 {
        "1".to_string()
    } else {
        format!("1/{}", 1u64 << level)
    }
}

/// `(v_{k-1} - v_{k-2}) / (v_k - v_{k-1})` for `k >= 2`.
pub fn ratios(values: &[f64]) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|k| {
            if k < 2 {
                return None;
            }
            let num = values[k - 1] - values[k - 2];
            let den = values[k] - values[k - 1];
            if den == 0.0 {
                None
            } else {
                Some(num / den)
            }
        })
        .collect()
}

/// `|v_k - v_{k-1}|` strictly decreasing over the last three values.
pub fn changes_decreasing(values: &[f64]) -> bool {
    if values.len() < 3 {
        return false;
    }
    let n = values.len();
    (values[n - 1] - values[n - 2]).abs() < (values[n - 2] - values[n - 3]).abs()
}

/// Rows for runs at consecutive levels. `reference` is the wall time the
/// timings are normalized by.
pub fn convergence_table(runs: &[SchemeRun], reference: Option<f64>) -> Vec<ConvergenceRow> {
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let ratio = ratios(&values);
    runs.iter()
        .zip(ratio)
        .map(|(r, ratio)| ConvergenceRow {
            h: h_label(r.level),
            value: r.value,
            avg_policy_its: r.avg_policy_iterations(),
            avg_linear_its: r.avg_linear_iterations(),
            ratio,
            norm_time: reference
                .filter(|t| *t > 0.0)
                .map(|t| r.wall_time.as_secs_f64() / t),
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[ConvergenceRow], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.flush()
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ConvergenceRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

fn opt(x: Option<f64>, prec: usize) -> String {
    x.map(|v| format!("{v:.prec$}"))
        .unwrap_or_else(|| "-".to_string())
}

/// Aligned plain-text table.
pub fn format_table(rows: &[ConvergenceRow]) -> String {
    let header = [
        "h",
        "value",
        "avg PI its",
        "avg lin its",
        "ratio",
        "norm time",
    ];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.h.clone(),
                format!("{:.8}", r.value),
                opt(r.avg_policy_its, 2),
                format!("{:.2}", r.avg_linear_its),
                opt(r.ratio, 2),
                opt(r.norm_time, 1),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for c in &cells {
        for (k, s) in c.iter().enumerate() {
            width[k] = width[k].max(s.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, c: &[&str]| {
        let parts: Vec<String> = c
            .iter()
            .zip(width)
            .map(|(s, w)| format!("{s:>w$}"))
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    for c in &cells {
        let refs: Vec<&str> = c.iter().map(String::as_str).collect();
        line(&mut out, &refs);
    }
    out
}
