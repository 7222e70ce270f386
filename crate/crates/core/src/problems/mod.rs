//! Benchmark problems: exchange-rate control, optimal consumption with
//! transaction costs, and a guaranteed minimum withdrawal benefit.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::grid::GridError;
use crate::schemes::QviProblem;

pub mod consumption;
pub mod fex;
pub mod gmwb;
pub mod params;

pub use consumption::{Consumption, ConsumptionParams};
pub use fex::{Fex, FexParams};
pub use gmwb::{Gmwb, GmwbParams};
pub use params::{parse_overrides, ParamError, Params};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("level {level} exceeds the maximum {max} for {problem}")]
    BadLevel {
        problem: ProblemKind,
        level: u32,
        max: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Fex,
    Consumption,
    Gmwb,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 3] = [
        ProblemKind::Fex,
        ProblemKind::Consumption,
        ProblemKind::Gmwb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Fex => "fex",
            ProblemKind::Consumption => "consumption",
            ProblemKind::Gmwb => "gmwb",
        }
    }

    /// Deepest refinement level accepted.
    pub fn max_level(self) -> u32 {
        match self {
            ProblemKind::Fex => 10,
            ProblemKind::Consumption | ProblemKind::Gmwb => 5,
        }
    }

    pub fn parameter_keys(self) -> &'static [&'static str] {
        match self {
            ProblemKind::Fex => FexParams::keys(),
            ProblemKind::Consumption => ConsumptionParams::keys(),
            ProblemKind::Gmwb => GmwbParams::keys(),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fex" => Ok(ProblemKind::Fex),
            "consumption" => Ok(ProblemKind::Consumption),
            "gmwb" => Ok(ProblemKind::Gmwb),
            _ => Err(format!("unknown problem '{s}'")),
        }
    }
}

/// Builds a problem at `level` (`h = 2^-level`), applying optional
/// `key=value` overrides to the default parameters.
pub fn build_problem(
    kind: ProblemKind,
    level: u32,
    overrides: Option<&str>,
) -> Result<Box<dyn QviProblem>, ProblemError> {
    if level > kind.max_level() {
        return Err(ProblemError::BadLevel {
            problem: kind,
            level,
            max: kind.max_level(),
        });
    }
    let text = overrides.unwrap_or("");
    Ok(match kind {
        ProblemKind::Fex => Box::new(Fex::new(FexParams::default().with_overrides(text)?, level)?),
        ProblemKind::Consumption => Box::new(Consumption::new(
            ConsumptionParams::default().with_overrides(text)?,
            level,
        )?),
        ProblemKind::Gmwb => Box::new(Gmwb::new(
            GmwbParams::default().with_overrides(text)?,
            level,
        )?),
    })
}
