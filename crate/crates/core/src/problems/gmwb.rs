//! Guaranteed minimum withdrawal benefit: an investment account `s` and a
//! guarantee account `a`, with continuous withdrawals at rate `w` and
//! lump-sum withdrawals `z`.

use crate::grid::{upwind_stencil, Axis, AxisTerm, Grid, Stencil};
use crate::matrix::RowBuf;
use crate::schemes::{ControlledDrift, ImpulseTarget, QviProblem, RowTerms};

use super::params::{param_struct, ParamError, Params};
use super::ProblemError;

param_struct!(
    /// Withdrawal benefit contract parameters.
    GmwbParams {
        rho: "rho" = 0.05,
        eta: "eta" = 0.0,
        xi: "xi" = 0.30,
        horizon: "T" = 10.0,
        g: "G" = 10.0,
        kappa: "kappa" = 0.10,
        c: "C" = 1e-6,
        s0: "s0" = 100.0,
        a0: "a0" = 100.0,
        s_max: "s_max" = 500.0,
        a_max: "a_max" = 100.0,
    }
);

impl Params for GmwbParams {
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
        if !(0.0 <= self.eta && self.eta <= self.rho) {
            return Err(ParamError::Invalid("need 0 <= eta <= rho".into()));
        }
        if !(self.c > 0.0) {
            return Err(ParamError::Invalid("C must be positive".into()));
        }
        if !(self.s_max > 0.0 && self.a_max > 0.0 && self.horizon > 0.0) || self.g < 0.0 {
            return Err(ParamError::Invalid(
                "need positive s_max, a_max, T and G >= 0".into(),
            ));
        }
        if !(0.0..=self.s_max).contains(&self.s0) || !(0.0..=self.a_max).contains(&self.a0) {
            return Err(ParamError::Invalid(
                "reporting point outside the domain".into(),
            ));
        }
        Ok(())
    }
}

pub struct Gmwb {
    pub params: GmwbParams,
    grid: Grid,
    nz: usize,
}

impl Gmwb {
    pub const BASE_S: usize = 64;
    pub const BASE_A: usize = 50;
    pub const BASE_Z: usize = 2;
    pub const BASE_STEPS: usize = 32;

    pub fn new(params: GmwbParams, level: u32) -> Result<Self, ProblemError> {
        params.validate()?;
        let k = 1usize << level;
        let s = Axis::uniform(0.0, params.s_max, Self::BASE_S * k)?;
        let a = Axis::uniform(0.0, params.a_max, Self::BASE_A * k)?;
        let grid = Grid::new(vec![s, a], params.horizon, Self::BASE_STEPS * k, level)?;
        Ok(Self {
            params,
            grid,
            nz: Self::BASE_Z * k,
        })
    }

    fn zeta(&self) -> f64 {
        self.params.rho - self.params.eta
    }

    /// `with_w` selects the full generator, otherwise only the
    /// control-free part. Returns the stencil and the reaction term.
    fn stencil(&self, i: usize, w: f64, with_w: bool) -> (Stencil, f64) {
        let m = self.grid.multi_index(i);
        let [s, a] = self.grid.coords(i);
        let at_top = m[0] + 1 == self.grid.axis(0).len();
        let p = &self.params;
        let wd = if with_w { w } else { 0.0 };
        let ws = if s > 0.0 && a > 0.0 { wd } else { 0.0 };
        let wa = if a > 0.0 { wd } else { 0.0 };
        // At s_max the value is taken linear in s, so s u_s = u.
        let (ts, reaction) = if at_top {
            (
                AxisTerm {
                    diffusion: 0.0,
                    drift: -ws,
                },
                self.zeta(),
            )
        } else {
            (
                AxisTerm {
                    diffusion: 0.5 * p.xi * p.xi * s * s,
                    drift: self.zeta() * s - ws,
                },
                0.0,
            )
        };
        let ta = AxisTerm {
            diffusion: 0.0,
            drift: -wa,
        };
        (upwind_stencil(&self.grid, i, &[ts, ta]), reaction)
    }

    fn forcing(&self, i: usize, w: f64) -> f64 {
        if self.grid.coords(i)[1] > 0.0 {
            w
        } else {
            0.0
        }
    }
}

impl QviProblem for Gmwb {
    fn name(&self) -> &str {
        "gmwb"
    }

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn rho(&self) -> f64 {
        self.params.rho
    }

    fn num_controls(&self) -> usize {
        2
    }

    fn control_value(&self, w: usize) -> f64 {
        if w == 0 {
            0.0
        } else {
            self.params.g
        }
    }

    fn generator(&self, i: usize, w: usize, row: &mut RowBuf) -> RowTerms {
        let wv = self.control_value(w);
        let (st, reaction) = self.stencil(i, wv, true);
        st.push_into(row);
        RowTerms {
            reaction,
            forcing: self.forcing(i, wv),
        }
    }

    fn generator_apply(&self, i: usize, w: usize, v: &[f64], _row: &mut RowBuf) -> f64 {
        let wv = self.control_value(w);
        let (st, reaction) = self.stencil(i, wv, true);
        st.apply(i, v) + reaction * v[i] + self.forcing(i, wv)
    }

    fn split_generator(&self, i: usize, row: &mut RowBuf) -> RowTerms {
        let (st, reaction) = self.stencil(i, 0.0, false);
        st.push_into(row);
        RowTerms {
            reaction,
            forcing: 0.0,
        }
    }

    fn controlled_drift(&self, i: usize, w: usize) -> ControlledDrift {
        let [s, a] = self.grid.coords(i);
        let wv = self.control_value(w);
        let ds = if s > 0.0 && a > 0.0 { -wv } else { 0.0 };
        let da = if a > 0.0 { -wv } else { 0.0 };
        ControlledDrift {
            drift: [ds, da],
            forcing: self.forcing(i, wv),
        }
    }

    fn project_foot(&self) -> bool {
        true
    }

    fn impulses(&self, i: usize, out: &mut Vec<ImpulseTarget>) {
        let [s, a] = self.grid.coords(i);
        let p = &self.params;
        let count = if a > 0.0 { self.nz } else { 1 };
        for k in 0..count {
            let z = if count == 1 {
                0.0
            } else {
                a * k as f64 / (count - 1) as f64
            };
            let z = if k + 1 == count { a } else { z };
            out.push(ImpulseTarget {
                z,
                target: [(s - z).max(0.0), a - z],
                cost: (1.0 - p.kappa) * z - p.c,
            });
        }
    }

    fn terminal(&self, i: usize) -> f64 {
        let [s, a] = self.grid.coords(i);
        s.max((1.0 - self.params.kappa) * a - self.params.c)
    }

    fn allow_direct_impulse(&self, _i: usize, z: f64) -> bool {
        z != 0.0
    }

    fn report_point(&self) -> [f64; 2] {
        [self.params.s0, self.params.a0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_a_node_and_sizes_match() {
        let p = Gmwb::new(GmwbParams::default(), 0).unwrap();
        assert_eq!(p.grid().coords(0), [0.0, 0.0]);
        assert_eq!(p.grid().len(), 64 * 50);
        let mut imp = Vec::new();
        p.impulses(0, &mut imp);
        assert_eq!(imp.len(), 1);
        assert_eq!(imp[0].z, 0.0);
        assert!(!p.allow_direct_impulse(0, imp[0].z));
    }

    #[test]
    fn full_surrender_empties_the_guarantee() {
        let p = Gmwb::new(GmwbParams::default(), 1).unwrap();
        let i = p.grid().index([10, 30]);
        let [s, a] = p.grid().coords(i);
        let mut imp = Vec::new();
        p.impulses(i, &mut imp);
        assert_eq!(imp.len(), 4);
        let last = imp.last().unwrap();
        assert_eq!(last.target, [(s - a).max(0.0), 0.0]);
        assert!((last.cost - (0.9 * a - 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn generator_rows_are_monotone() {
        let p = Gmwb::new(GmwbParams::default(), 0).unwrap();
        let mut row = RowBuf::new();
        for i in 0..p.grid().len() {
            for w in 0..2 {
                row.clear();
                let t = p.generator(i, w, &mut row);
                assert!(row.entries().iter().all(|e| e.1 > 0.0));
                // Diagonal of L - rho I stays nonpositive.
                assert!(t.reaction - p.rho() <= 0.0);
            }
        }
    }
}
