//! Controlled Markov chains with vanishing discount on impulse states,
//! a plain-text format for them, and a few named instances.
//!
//! Text format (whitespace separated, `#` starts a comment):
//!
//! ```text
//! states 2
//! rho 0.1
//! state 0
//! w 0.5 0.5 -1.0     # probability row, then cost c_i(w)
//! d 0                # allowed psi values
//! state 1
//! w 0 1 0.0
//! z 1 0 -0.5         # probability row, then cost k_i(z)
//! d 0 1
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use crate::impulse::{ImpulseControl, ImpulseControlProblem, ImpulseModel, STOCHASTIC_TOL};
use crate::matrix::RowBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub probs: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    pub w: Vec<Transition>,
    pub z: Vec<Transition>,
    pub allow_continue: bool,
    pub allow_impulse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub rho: f64,
    pub states: Vec<MdpState>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("state {state}: row is not a probability vector (sum {sum})")]
    NotProbability { state: usize, sum: f64 },
    #[error("state {state}: row has length {len}, expected {expected}")]
    RowLength {
        state: usize,
        len: usize,
        expected: usize,
    },
    #[error("state {state}: control set is empty")]
    EmptyControls { state: usize },
    #[error("discount must be positive, got {0}")]
    Discount(f64),
}

impl MdpSpec {
    pub fn size(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        if !(self.rho > 0.0) {
            return Err(MdpError::Discount(self.rho));
        }
        let n = self.size();
        for (i, s) in self.states.iter().enumerate() {
            let cont = s.allow_continue && !s.w.is_empty();
            let imp = s.allow_impulse && !s.z.is_empty();
            if !cont && !imp {
                return Err(MdpError::EmptyControls { state: i });
            }
            for t in s.w.iter().chain(&s.z) {
                if t.probs.len() != n {
                    return Err(MdpError::RowLength {
                        state: i,
                        len: t.probs.len(),
                        expected: n,
                    });
                }
                let sum: f64 = t.probs.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL || t.probs.iter().any(|p| *p < 0.0) {
                    return Err(MdpError::NotProbability { state: i, sum });
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, MdpError> {
        let mut n: Option<usize> = None;
        let mut rho: Option<f64> = None;
        let mut states: Vec<MdpState> = Vec::new();
        let err = |line: usize, msg: &str| MdpError::Parse {
            line,
            msg: msg.to_string(),
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut tok = body.split_whitespace();
            let key = tok.next().unwrap();
            let nums: Result<Vec<f64>, _> = tok.map(str::parse::<f64>).collect();
            let nums = nums.map_err(|_| err(line, "expected numbers"))?;
            match key {
                "states" => {
                    if nums.len() != 1 || nums[0] < 1.0 || nums[0].fract() != 0.0 {
                        return Err(err(line, "states takes one positive integer"));
                    }
                    n = Some(nums[0] as usize);
                }
                "rho" => {
                    if nums.len() != 1 {
                        return Err(err(line, "rho takes one value"));
                    }
                    rho = Some(nums[0]);
                }
                "state" => {
                    let k = n.ok_or_else(|| err(line, "state before states header"))?;
                    if nums.len() != 1 || nums[0] as usize != states.len() || states.len() >= k {
                        return Err(err(line, "states must be numbered 0, 1, ... in order"));
                    }
                    states.push(MdpState {
                        w: Vec::new(),
                        z: Vec::new(),
                        allow_continue: true,
                        allow_impulse: true,
                    });
                }
                "w" | "z" => {
                    let k = n.ok_or_else(|| err(line, "row before states header"))?;
                    let s = states
                        .last_mut()
                        .ok_or_else(|| err(line, "row before any state"))?;
                    if nums.len() != k + 1 {
                        return Err(err(
                            line,
                            &format!("expected {} probabilities and a cost", k),
                        ));
                    }
                    let t = Transition {
                        probs: nums[..k].to_vec(),
                        cost: nums[k],
                    };
                    if key == "w" {
                        s.w.push(t);
                    } else {
                        s.z.push(t);
                    }
                }
                "d" => {
                    let s = states
                        .last_mut()
                        .ok_or_else(|| err(line, "d before any state"))?;
                    if nums.is_empty() || nums.iter().any(|x| *x != 0.0 && *x != 1.0) {
                        return Err(err(line, "d lists values from {0, 1}"));
                    }
                    s.allow_continue = nums.contains(&0.0);
                    s.allow_impulse = nums.contains(&1.0);
                }
                _ => return Err(err(line, &format!("unknown keyword {key:?}"))),
            }
        }
        let n = n.ok_or_else(|| err(0, "missing states header"))?;
        if states.len() != n {
            return Err(err(
                0,
                &format!("declared {n} states, found {}", states.len()),
            ));
        }
        let spec = MdpSpec {
            rho: rho.ok_or_else(|| err(0, "missing rho"))?,
            states,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "states {}", self.size()).unwrap();
        writeln!(out, "rho {}", self.rho).unwrap();
        for (i, s) in self.states.iter().enumerate() {
            writeln!(out, "state {i}").unwrap();
            for (key, rows) in [("w", &s.w), ("z", &s.z)] {
                for t in rows {
                    let probs: Vec<String> = t.probs.iter().map(|p| p.to_string()).collect();
                    writeln!(out, "{key} {} {}", probs.join(" "), t.cost).unwrap();
                }
            }
            let mut d = Vec::new();
            if s.allow_continue {
                d.push("0");
            }
            if s.allow_impulse {
                d.push("1");
            }
            writeln!(out, "d {}", d.join(" ")).unwrap();
        }
        out
    }
}

/// `L(w) = w / (1 + rho)`, `B(z) = z`.
#[derive(Debug, Clone)]
pub struct MdpModel {
    spec: MdpSpec,
}

impl MdpModel {
    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }
}

impl ImpulseModel for MdpModel {
    fn size(&self) -> usize {
        self.spec.size()
    }

    fn num_continuation(&self, i: usize) -> usize {
        let s = &self.spec.states[i];
        if s.allow_continue {
            s.w.len()
        } else {
            0
        }
    }

    fn num_impulse(&self, i: usize) -> usize {
        let s = &self.spec.states[i];
        if s.allow_impulse {
            s.z.len()
        } else {
            0
        }
    }

    fn continuation_row(&self, i: usize, w: usize, row: &mut RowBuf) -> f64 {
        let t = &self.spec.states[i].w[w];
        let f = 1.0 / (1.0 + self.spec.rho);
        for (j, p) in t.probs.iter().enumerate() {
            if *p != 0.0 {
                row.push(j, p * f);
            }
        }
        t.cost
    }

    fn impulse_row(&self, i: usize, z: usize, row: &mut RowBuf) -> f64 {
        let t = &self.spec.states[i].z[z];
        for (j, p) in t.probs.iter().enumerate() {
            if *p != 0.0 {
                row.push(j, *p);
            }
        }
        t.cost
    }
}

/// Builds the fixed-point problem with `delta = 1`.
pub fn build_mdp(spec: MdpSpec) -> Result<ImpulseControlProblem<'static, MdpModel>, MdpError> {
    spec.validate()?;
    ImpulseControlProblem::new(MdpModel { spec }, 1.0).map_err(|e| match e {
        crate::impulse::ImpulseError::EmptyControlSet { state } => {
            MdpError::EmptyControls { state }
        }
        crate::impulse::ImpulseError::NonPositiveDelta => MdpError::Discount(0.0),
    })
}

fn unit(n: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[j] = 1.0;
    e
}

/// Stay, step left, step right (clipped at the ends) and a uniform mix.
fn three_point_rows(n: usize, i: usize) -> Vec<Vec<f64>> {
    let left = i.saturating_sub(1);
    let right = (i + 1).min(n - 1);
    let mut mix = vec![0.0; n];
    for j in [left, i, right] {
        mix[j] += 1.0 / 3.0;
    }
    let s: f64 = mix.iter().sum();
    mix.iter_mut().for_each(|x| *x /= s);
    vec![unit(n, i), unit(n, left), unit(n, right), mix]
}

fn three_point_state(n: usize, i: usize, cbar: f64) -> Vec<Transition> {
    three_point_rows(n, i)
        .into_iter()
        .enumerate()
        .map(|(k, probs)| Transition {
            probs,
            cost: cbar - 0.05 * k as f64,
        })
        .collect()
}

/// Every impulse state jumps one step toward state 0, which never jumps.
pub fn example_chain(m: usize) -> MdpSpec {
    let c = 0.2;
    let states = (0..m)
        .map(|i| MdpState {
            w: three_point_state(m, i, -0.3 * i as f64),
            z: if i > 0 {
                vec![Transition {
                    probs: unit(m, i - 1),
                    cost: -c,
                }]
            } else {
                Vec::new()
            },
            allow_continue: true,
            allow_impulse: i > 0,
        })
        .collect();
    MdpSpec { rho: 0.1, states }
}

/// Every impulse state jumps straight to state 0, which never jumps.
pub fn example_one_hop(m: usize) -> MdpSpec {
    let c = 0.2;
    let states = (0..m)
        .map(|i| MdpState {
            w: three_point_state(m, i, -0.3 * i as f64),
            z: if i > 0 {
                vec![Transition {
                    probs: unit(m, 0),
                    cost: -c - 0.1 * i as f64,
                }]
            } else {
                Vec::new()
            },
            allow_continue: true,
            allow_impulse: i > 0,
        })
        .collect();
    MdpSpec { rho: 0.1, states }
}

/// Fixed cost of the failure and modified examples.
pub const FAILURE_FIXED_COST: f64 = 1.0;

/// Jumps to any basis vector `e^j` at cost `-C - |i - j|`; state `m / 2`
/// has continuation costs below `-C`, so policy iteration from zero picks
/// the self jump there.
pub fn example_failure(m: usize) -> MdpSpec {
    let c = FAILURE_FIXED_COST;
    let r = m / 2;
    let states = (0..m)
        .map(|i| MdpState {
            w: three_point_state(m, i, if i == r { -c - 1.0 } else { -0.5 }),
            z: (0..m)
                .map(|j| Transition {
                    probs: unit(m, j),
                    cost: -c - (i as f64 - j as f64).abs(),
                })
                .collect(),
            allow_continue: true,
            allow_impulse: true,
        })
        .collect();
    MdpSpec { rho: 0.1, states }
}

/// Index of the state whose continuation costs are below `-C` in
/// [`example_failure`].
pub fn failure_state(m: usize) -> usize {
    m / 2
}

/// Same jumps as [`example_failure`] with three-point continuation rows
/// and nonincreasing best running costs.
pub fn example_modified_spec(m: usize) -> MdpSpec {
    let c = FAILURE_FIXED_COST;
    let states = (0..m)
        .map(|i| MdpState {
            w: three_point_state(m, i, -0.4 * i as f64),
            z: (0..m)
                .map(|j| Transition {
                    probs: unit(m, j),
                    cost: -c - (i as f64 - j as f64).abs(),
                })
                .collect(),
            allow_continue: true,
            allow_impulse: true,
        })
        .collect();
    MdpSpec { rho: 0.1, states }
}

/// [`example_modified_spec`] restricted to `psi_0 = 0` and impulses that
/// only move to lower states. Impulse index `z` targets state `z`.
pub fn example_modified(m: usize) -> ImpulseControlProblem<'static, MdpModel> {
    let p = build_mdp(example_modified_spec(m)).expect("valid by construction");
    p.restrict(|i, c| match *c {
        ImpulseControl::Continue { .. } => true,
        ImpulseControl::Impulse { z } => i > 0 && z < i,
    })
    .expect("continuation always available")
}
