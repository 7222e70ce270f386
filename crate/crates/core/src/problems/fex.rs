//! Combined stochastic and impulse control of an exchange rate.

use crate::grid::{upwind_stencil, Axis, AxisTerm, Grid, Stencil};
use crate::matrix::RowBuf;
use crate::schemes::{ControlledDrift, ImpulseTarget, QviProblem, RowTerms};

use super::params::{param_struct, ParamError, Params};
use super::ProblemError;

param_struct!(
    /// Exchange-rate model parameters.
    FexParams {
        rho: "rho" = 0.02,
        sigma: "sigma" = 0.30,
        horizon: "T" = 10.0,
        x_star: "x_star" = 0.0,
        w_max: "w_max" = 0.07,
        a: "a" = 0.25,
        b: "b" = 3.0,
        lambda: "lambda" = 1.0,
        c: "C" = 0.1,
        x_min: "x_min" = -3.0,
        x_max: "x_max" = 3.0,
    }
);

impl Params for FexParams {
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
        if !(self.c > 0.0) {
            return Err(ParamError::Invalid("C must be positive".into()));
        }
        if !(self.x_max > self.x_min) || !(self.horizon > 0.0) || self.rho < 0.0 || self.w_max < 0.0
        {
            return Err(ParamError::Invalid(
                "need x_min < x_max, T > 0, rho >= 0, w_max >= 0".into(),
            ));
        }
        if self.lambda < 0.0 || self.sigma < 0.0 {
            return Err(ParamError::Invalid(
                "lambda and sigma must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

pub struct Fex {
    pub params: FexParams,
    grid: Grid,
    w: Vec<f64>,
    targets: Vec<f64>,
}

impl Fex {
    pub const BASE_X: usize = 32;
    pub const BASE_W: usize = 8;
    pub const BASE_Z: usize = 16;
    pub const BASE_STEPS: usize = 16;

    pub fn new(params: FexParams, level: u32) -> Result<Self, ProblemError> {
        params.validate()?;
        let k = 1usize << level;
        let x = Axis::uniform(params.x_min, params.x_max, Self::BASE_X * k)?;
        let grid = Grid::new(vec![x], params.horizon, Self::BASE_STEPS * k, level)?;
        let nw = Self::BASE_W * k;
        let w = (0..nw)
            .map(|j| params.w_max * j as f64 / (nw - 1) as f64)
            .collect();
        let nz = Self::BASE_Z * k;
        let dz = (params.x_max - params.x_min) / (nz - 1) as f64;
        let mut targets: Vec<f64> = (0..nz).map(|j| params.x_min + j as f64 * dz).collect();
        targets[nz - 1] = params.x_max;
        Ok(Self {
            params,
            grid,
            w,
            targets,
        })
    }

    fn interior(&self, i: usize) -> bool {
        i > 0 && i + 1 < self.grid.len()
    }

    fn x(&self, i: usize) -> f64 {
        self.grid.axis(0).nodes()[i]
    }

    fn stencil(&self, i: usize, w: usize, with_drift: bool) -> Stencil {
        if !self.interior(i) {
            return Stencil::default();
        }
        let drift = if with_drift {
            -self.params.a * self.w[w]
        } else {
            0.0
        };
        let term = AxisTerm {
            diffusion: 0.5 * self.params.sigma * self.params.sigma,
            drift,
        };
        upwind_stencil(&self.grid, i, &[term])
    }

    fn penalty(&self, i: usize) -> f64 {
        let d = (self.x(i) - self.params.x_star).max(0.0);
        d * d
    }
}

impl QviProblem for Fex {
    fn name(&self) -> &str {
        "fex"
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
        self.stencil(i, w, true).push_into(row);
        RowTerms {
            reaction: 0.0,
            forcing: -self.penalty(i) - self.params.b * self.w[w] * self.w[w],
        }
    }

    fn generator_apply(&self, i: usize, w: usize, v: &[f64], _row: &mut RowBuf) -> f64 {
        self.stencil(i, w, true).apply(i, v)
            - self.penalty(i)
            - self.params.b * self.w[w] * self.w[w]
    }

    fn split_generator(&self, i: usize, row: &mut RowBuf) -> RowTerms {
        self.stencil(i, 0, false).push_into(row);
        RowTerms {
            reaction: 0.0,
            forcing: -self.penalty(i),
        }
    }

    fn controlled_drift(&self, i: usize, w: usize) -> ControlledDrift {
        let drift = if self.interior(i) {
            -self.params.a * self.w[w]
        } else {
            0.0
        };
        ControlledDrift {
            drift: [drift, 0.0],
            forcing: -self.params.b * self.w[w] * self.w[w],
        }
    }

    fn impulses(&self, i: usize, out: &mut Vec<ImpulseTarget>) {
        let x = self.x(i);
        for &t in &self.targets {
            let z = t - x;
            out.push(ImpulseTarget {
                z,
                target: [t, 0.0],
                cost: -self.params.lambda * z.abs() - self.params.c,
            });
        }
    }

    fn terminal(&self, _i: usize) -> f64 {
        0.0
    }

    fn allow_direct_impulse(&self, i: usize, z: f64) -> bool {
        i > 0 && z < 0.0
    }

    fn report_point(&self) -> [f64; 2] {
        [0.0, 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes_double_per_level() {
        for level in 0..3 {
            let p = Fex::new(FexParams::default(), level).unwrap();
            let k = 1 << level;
            assert_eq!(p.grid().len(), 32 * k);
            assert_eq!(p.num_controls(), 8 * k);
            assert_eq!(p.grid().steps(), 16 * k);
            let mut imp = Vec::new();
            p.impulses(3, &mut imp);
            assert_eq!(imp.len(), 16 * k);
        }
    }

    #[test]
    fn interior_coefficients_are_nonnegative() {
        let p = Fex::new(FexParams::default(), 1).unwrap();
        let mut row = RowBuf::new();
        for i in 0..p.grid().len() {
            for w in 0..p.num_controls() {
                row.clear();
                p.generator(i, w, &mut row);
                assert!(row.entries().iter().all(|e| e.1 >= 0.0));
                if !p.interior(i) {
                    assert!(row.is_empty());
                }
            }
        }
    }

    #[test]
    fn restriction_blocks_first_node_and_nonnegative_jumps() {
        let p = Fex::new(FexParams::default(), 0).unwrap();
        assert!(!p.allow_direct_impulse(0, -1.0));
        assert!(!p.allow_direct_impulse(5, 0.0));
        assert!(p.allow_direct_impulse(5, -0.1));
        assert!(!p.allow_direct_impulse(5, 0.1));
    }
}
