//! Optimal consumption with a stock and a bond and proportional plus
//! fixed transaction costs on rebalancing.

use crate::grid::{upwind_stencil, Axis, AxisTerm, Grid, Stencil};
use crate::matrix::RowBuf;
use crate::schemes::{ControlledDrift, ImpulseTarget, QviProblem, RowTerms};

use super::params::{param_struct, ParamError, Params};
use super::ProblemError;

param_struct!(
    /// Consumption model parameters.
    ConsumptionParams {
        rho: "rho" = 0.10,
        r: "r" = 0.07,
        mu: "mu" = 0.11,
        xi: "xi" = 0.30,
        horizon: "T" = 40.0,
        gamma: "gamma" = 0.3,
        lambda: "lambda" = 0.1,
        c: "C" = 0.05,
        w_max: "w_max" = 100.0,
        s0: "s0" = 45.2,
        b0: "b0" = 45.2,
        s_max: "s_max" = 450.0,
        b_max: "b_max" = 450.0,
    }
);

impl Params for ConsumptionParams {
    fn keys() -> &'static [&'static str] {
        Self::KEYS
    }
    fn get(&self, key: &str) -> Option<f64> {
        self.get_field(key)
    }
    fn set(&mut self, key: &str, value: f64) -> bool {
        self.set_field(key, value)
    }
    fn validate(&self) -> Result<(), ParamError> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(ParamError::Invalid("need 0 <= lambda < 1".into()));
        }
        if !(self.c > 0.0) {
            return Err(ParamError::Invalid("C must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ParamError::Invalid("need 0 < gamma < 1".into()));
        }
        if !(self.s_max > 0.0 && self.b_max > 0.0 && self.horizon > 0.0 && self.w_max > 0.0)
            || self.rho < 0.0
        {
            return Err(ParamError::Invalid(
                "need positive s_max, b_max, T, w_max and rho >= 0".into(),
            ));
        }
        if !(0.0..=self.s_max).contains(&self.s0) || !(0.0..=self.b_max).contains(&self.b0) {
            return Err(ParamError::Invalid(
                "reporting point outside the domain".into(),
            ));
        }
        Ok(())
    }
}

pub struct Consumption {
    pub params: ConsumptionParams,
    grid: Grid,
    w: Vec<f64>,
    utility: Vec<f64>,
    nz: usize,
}

impl Consumption {
    pub const BASE_NODES: usize = 20;
    pub const BASE_W: usize = 15;
    pub const BASE_Z: usize = 15;
    pub const BASE_STEPS: usize = 32;

    pub fn new(params: ConsumptionParams, level: u32) -> Result<Self, ProblemError> {
        params.validate()?;
        let k = 1usize << level;
        let n = Self::BASE_NODES * k;
        let s = Axis::uniform(0.0, params.s_max, n)?;
        let b = Axis::uniform(0.0, params.b_max, n)?;
        let grid = Grid::new(vec![s, b], params.horizon, Self::BASE_STEPS * k, level)?;
        let nw = Self::BASE_W * k;
        let w: Vec<f64> = (0..nw)
            .map(|j| params.w_max * j as f64 / (nw - 1) as f64)
            .collect();
        let utility = w
            .iter()
            .map(|x| x.powf(params.gamma) / params.gamma)
            .collect();
        Ok(Self {
            params,
            grid,
            w,
            utility,
            nz: Self::BASE_Z * k,
        })
    }

    /// Axis positions, flags for `0 < s < s_max` and `0 < b < b_max`.
    fn layout(&self, i: usize) -> ([f64; 2], bool, bool) {
        let m = self.grid.multi_index(i);
        let ns = self.grid.axis(0).len();
        let nb = self.grid.axis(1).len();
        (
            self.grid.coords(i),
            m[0] > 0 && m[0] + 1 < ns,
            m[1] > 0 && m[1] + 1 < nb,
        )
    }

    fn stencil(&self, i: usize, bond_drift: impl Fn(f64) -> f64) -> Stencil {
        let ([s, b], s_in, b_in) = self.layout(i);
        let p = &self.params;
        let ts = if s_in {
            AxisTerm {
                diffusion: 0.5 * p.xi * p.xi * s * s,
                drift: p.mu * s,
            }
        } else {
            AxisTerm::default()
        };
        let tb = if b_in {
            AxisTerm {
                diffusion: 0.0,
                drift: bond_drift(b),
            }
        } else {
            AxisTerm::default()
        };
        upwind_stencil(&self.grid, i, &[ts, tb])
    }

    fn forcing(&self, i: usize, w: usize) -> f64 {
        if self.grid.coords(i)[1] > 0.0 {
            self.utility[w]
        } else {
            0.0
        }
    }

    /// Feasible interval of `z` keeping the post-impulse state in the
    /// truncated domain.
    pub fn impulse_interval(&self, s: f64, b: f64) -> Option<(f64, f64)> {
        let p = &self.params;
        let hi_b = if b >= p.c {
            (b - p.c) / (1.0 + p.lambda)
        } else {
            -(p.c - b) / (1.0 - p.lambda)
        };
        let lo = (-s).max(-(p.b_max - b + p.c) / (1.0 - p.lambda));
        let hi = (p.s_max - s).min(hi_b);
        (lo <= hi).then_some((lo, hi))
    }

    pub fn impulse_target(&self, s: f64, b: f64, z: f64) -> [f64; 2] {
        [s + z, b - z - self.params.lambda * z.abs() - self.params.c]
    }
}

impl QviProblem for Consumption {
    fn name(&self) -> &str {
        "consumption"
    }

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn rho(&self) -> f64 {
        self.params.rho
    }

    fn num_controls(&self) -> usize {
        self.w.len()
    }

    fn control_value(&self, w: usize) -> f64 {
        self.w[w]
    }

    fn generator(&self, i: usize, w: usize, row: &mut RowBuf) -> RowTerms {
        let r = self.params.r;
        let wv = self.w[w];
        self.stencil(i, |b| r * b - wv).push_into(row);
        RowTerms {
            reaction: 0.0,
            forcing: self.forcing(i, w),
        }
    }

    fn generator_apply(&self, i: usize, w: usize, v: &[f64], _row: &mut RowBuf) -> f64 {
        let r = self.params.r;
        let wv = self.w[w];
        self.stencil(i, |b| r * b - wv).apply(i, v) + self.forcing(i, w)
    }

    /// The objective is concave in `w` on each side of `w = r b`, so only
    /// the grid points bracketing each piece's maximizer are compared.
    fn best_generator(&self, i: usize, v: &[f64], row: &mut RowBuf) -> Option<(usize, f64)> {
        let ([_, b], _, b_in) = self.layout(i);
        let last = self.w.len() - 1;
        let mut cands: Vec<usize> = vec![0, last];
        if b_in {
            let n1 = self.grid.axis(0).len();
            let nodes = self.grid.axis(1).nodes();
            let jb = self.grid.multi_index(i)[1];
            let d_fwd = (v[i + n1] - v[i]) / (nodes[jb + 1] - nodes[jb]);
            let d_bwd = (v[i] - v[i - n1]) / (nodes[jb] - nodes[jb - 1]);
            let rb = self.params.r * b;
            let dw = self.w[1] - self.w[0];
            // Pieces: w < rb uses the forward difference, w > rb the backward one.
            let split = self.w.partition_point(|&x| x < rb);
            let after = self.w.partition_point(|&x| x <= rb);
            let g = self.params.gamma;
            let bracket = |cands: &mut Vec<usize>, lo: usize, hi: usize, d: f64| {
                if lo > hi {
                    return;
                }
                cands.push(lo);
                cands.push(hi);
                if d > 0.0 {
                    let star = d.powf(-1.0 / (1.0 - g)) / dw;
                    if star.is_finite() {
                        let k = (star.floor().max(0.0) as usize).clamp(lo, hi);
                        cands.push(k);
                        cands.push((k + 1).min(hi));
                    }
                }
            };
            if split > 0 {
                bracket(&mut cands, 0, split - 1, d_fwd);
            }
            if split < after {
                cands.push(split);
            }
            if after <= last {
                bracket(&mut cands, after, last, d_bwd);
            }
        }
        cands.sort_unstable();
        cands.dedup();
        let mut best: Option<(usize, f64)> = None;
        for w in cands {
            let x = self.generator_apply(i, w, v, row);
            if best.map_or(true, |(_, y)| x > y) {
                best = Some((w, x));
            }
        }
        best
    }

    fn split_generator(&self, i: usize, row: &mut RowBuf) -> RowTerms {
        let r = self.params.r;
        self.stencil(i, |b| r * b).push_into(row);
        RowTerms::default()
    }

    fn controlled_drift(&self, i: usize, w: usize) -> ControlledDrift {
        let (_, _, b_in) = self.layout(i);
        let drift = if b_in { -self.w[w] } else { 0.0 };
        ControlledDrift {
            drift: [0.0, drift],
            forcing: self.forcing(i, w),
        }
    }

    fn impulses(&self, i: usize, out: &mut Vec<ImpulseTarget>) {
        let [s, b] = self.grid.coords(i);
        let Some((lo, hi)) = self.impulse_interval(s, b) else {
            return;
        };
        let count = if hi > lo { self.nz } else { 1 };
        for k in 0..count {
            let z = if count == 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (count - 1) as f64
            };
            out.push(ImpulseTarget {
                z,
                target: self.impulse_target(s, b, z),
                cost: 0.0,
            });
        }
    }

    fn terminal(&self, i: usize) -> f64 {
        let [s, b] = self.grid.coords(i);
        let p = &self.params;
        (b + (1.0 - p.lambda) * s - p.c).max(0.0).powf(p.gamma) / p.gamma
    }

    fn report_point(&self) -> [f64; 2] {
        [self.params.s0, self.params.b0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_interval_edges() {
        let p = Consumption::new(ConsumptionParams::default(), 0).unwrap();
        // No wealth: nothing is affordable.
        assert_eq!(p.impulse_interval(0.0, 0.0), None);
        let (lo, hi) = p.impulse_interval(100.0, 50.0).unwrap();
        assert_eq!(lo, -100.0);
        assert!((hi - (50.0 - 0.05) / 1.1).abs() < 1e-12);
        for z in [lo, hi] {
            let [s, b] = p.impulse_target(100.0, 50.0, z);
            assert!(s >= -1e-12 && b >= -1e-12);
        }
    }

    #[test]
    fn impulses_reduce_total_wealth() {
        let p = Consumption::new(ConsumptionParams::default(), 0).unwrap();
        let mut imp = Vec::new();
        for i in 0..p.grid().len() {
            imp.clear();
            p.impulses(i, &mut imp);
            let [s, b] = p.grid().coords(i);
            for t in &imp {
                assert!(t.target[0] + t.target[1] <= s + b - p.params.c + 1e-9);
            }
        }
    }

    #[test]
    fn fast_argmax_matches_enumeration() {
        let p = Consumption::new(ConsumptionParams::default(), 1).unwrap();
        let mut row = RowBuf::new();
        let n = p.grid().len();
        let v: Vec<f64> = (0..n)
            .map(|i| {
                let [s, b] = p.grid().coords(i);
                (1.0 + s + 2.0 * b).sqrt() * 5.0 + (0.05 * s).sin() + (0.03 * b * b).cos() * 0.2
            })
            .collect();
        for i in 0..n {
            let (w, x) = p.best_generator(i, &v, &mut row).unwrap();
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..p.num_controls() {
                let y = p.generator_apply(i, k, &v, &mut row);
                if y > best.1 {
                    best = (k, y);
                }
            }
            assert!(
                (x - best.1).abs() <= 1e-12 * best.1.abs().max(1.0),
                "node {i}: {w} vs {}",
                best.0
            );
        }
    }

    #[test]
    fn terminal_matches_formula() {
        let p = Consumption::new(ConsumptionParams::default(), 0).unwrap();
        let i = p.grid().index([3, 2]);
        let [s, b] = p.grid().coords(i);
        let expect = (b + 0.9 * s - 0.05f64).powf(0.3) / 0.3;
        assert!((p.terminal(i) - expect).abs() < 1e-12);
        assert_eq!(p.terminal(0), 0.0);
    }
}
