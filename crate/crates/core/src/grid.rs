//! Rectilinear grids, multilinear interpolation and upwind generator rows.

use thiserror::Error;

use crate::matrix::RowBuf;

/// Points this close to the grid edge (relative to the axis length) are
/// clamped onto it.
const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis needs at least two strictly increasing nodes")]
    BadAxis,
    #[error("expected {expected} coordinates, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least one timestep and a positive horizon")]
    BadTime,
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("point lies outside the grid")]
pub struct OffGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    nodes: Vec<f64>,
    uniform: Option<f64>,
}

impl Axis {
    pub fn new(nodes: Vec<f64>) -> Result<Self, GridError> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GridError::BadAxis);
        }
        Ok(Self {
            nodes,
            uniform: None,
        })
    }

    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self, GridError> {
        if n < 2 || !(hi > lo) {
            return Err(GridError::BadAxis);
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|k| lo + k as f64 * h).collect();
        nodes[n - 1] = hi;
        Ok(Self {
            nodes,
            uniform: Some(h),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Cell index `k` and fraction `theta` with `x = (1-theta) x_k + theta x_{k+1}`.
    pub fn locate(&self, x: f64) -> Result<(usize, f64), OffGrid> {
        let (lo, hi) = (self.lo(), self.hi());
        let slack = EDGE_TOL * (hi - lo);
        if !(x >= lo - slack && x <= hi + slack) {
            return Err(OffGrid);
        }
        let x = x.clamp(lo, hi);
        let n = self.nodes.len();
        let k = match self.uniform {
            Some(h) => (((x - lo) / h).floor() as usize).min(n - 2),
            None => self
                .nodes
                .partition_point(|v| *v <= x)
                .saturating_sub(1)
                .min(n - 2),
        };
        // Guard against rounding in the uniform index.
        let k = if x < self.nodes[k] {
            k.saturating_sub(1)
        } else if x > self.nodes[k + 1] && k + 2 < n {
            k + 1
        } else {
            k
        };
        let theta = ((x - self.nodes[k]) / (self.nodes[k + 1] - self.nodes[k])).clamp(0.0, 1.0);
        Ok((k, theta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    times: Vec<f64>,
    level: u32,
}

impl Grid {
    /// `steps` uniform timesteps on `[0, horizon]`.
    pub fn new(axes: Vec<Axis>, horizon: f64, steps: usize, level: u32) -> Result<Self, GridError> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(GridError::Dimension {
                expected: 2,
                got: axes.len(),
            });
        }
        if steps == 0 || !(horizon > 0.0) {
            return Err(GridError::BadTime);
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|n| n as f64 * dt).collect();
        times[steps] = horizon;
        Ok(Self { axes, times, level })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// `h = 2^-level`.
    pub fn h(&self) -> f64 {
        0.5f64.powi(self.level as i32)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.times[n + 1] - self.times[n]
    }

    /// Flat index; the first axis varies fastest.
    pub fn index(&self, multi: [usize; 2]) -> usize {
        if self.dim() == 1 {
            multi[0]
        } else {
            multi[0] + self.axes[0].len() * multi[1]
        }
    }

    pub fn multi_index(&self, i: usize) -> [usize; 2] {
        if self.dim() == 1 {
            [i, 0]
        } else {
            let n1 = self.axes[0].len();
            [i % n1, i / n1]
        }
    }

    /// Coordinates of node `i` (second entry 0 in 1D).
    pub fn coords(&self, i: usize) -> [f64; 2] {
        let m = self.multi_index(i);
        let x1 = self.axes[0].nodes[m[0]];
        let x2 = if self.dim() == 2 {
            self.axes[1].nodes[m[1]]
        } else {
            0.0
        };
        [x1, x2]
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        interp_row(self, point).is_ok()
    }
}

/// Multilinear interpolation weights, at most four.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interp {
    cols: [usize; 4],
    weights: [f64; 4],
    len: usize,
}

impl Interp {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(|k| (self.cols[k], self.weights[k]))
    }

    pub fn apply(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.len {
            s += self.weights[k] * v[self.cols[k]];
        }
        s
    }

    fn push(&mut self, col: usize, w: f64) {
        if w > 0.0 {
            self.cols[self.len] = col;
            self.weights[self.len] = w;
            self.len += 1;
        }
    }
}

/// Nonnegative weights summing to one that reproduce linear functions.
/// Zero weights are omitted, so a grid node yields a single entry.
pub fn interp_row(grid: &Grid, point: &[f64]) -> Result<Interp, OffGrid> {
    let mut out = Interp {
        cols: [0; 4],
        weights: [0.0; 4],
        len: 0,
    };
    let (k1, t1) = grid.axes[0].locate(point[0])?;
    if grid.dim() == 1 {
        out.push(k1, 1.0 - t1);
        out.push(k1 + 1, t1);
        return Ok(out);
    }
    let (k2, t2) = grid.axes[1].locate(*point.get(1).ok_or(OffGrid)?)?;
    for (d2, w2) in [(0, 1.0 - t2), (1, t2)] {
        for (d1, w1) in [(0, 1.0 - t1), (1, t1)] {
            let w = w1 * w2;
            if w > 0.0 {
                out.push(grid.index([k1 + d1, k2 + d2]), w);
            }
        }
    }
    Ok(out)
}

/// Per-axis coefficients of `d * u_xx + mu * u_x`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisTerm {
    /// Second-order coefficient (`sigma^2 / 2`).
    pub diffusion: f64,
    pub drift: f64,
}

/// Off-diagonal generator coefficients of one node, at most four.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stencil {
    cols: [usize; 4],
    vals: [f64; 4],
    len: usize,
}

impl Stencil {
    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(|k| (self.cols[k], self.vals[k]))
    }

    /// `sum_j a_j (v_j - v_node)`.
    pub fn apply(&self, node: usize, v: &[f64]) -> f64 {
        let vi = v[node];
        let mut s = 0.0;
        for k in 0..self.len {
            s += self.vals[k] * (v[self.cols[k]] - vi);
        }
        s
    }

    pub fn push_into(&self, row: &mut RowBuf) {
        for k in 0..self.len {
            row.push(self.cols[k], self.vals[k]);
        }
    }

    fn push(&mut self, col: usize, val: f64) {
        if val != 0.0 {
            self.cols[self.len] = col;
            self.vals[self.len] = val;
            self.len += 1;
        }
    }
}

/// Nonnegative off-diagonal coefficients of the generator row at `node`:
/// central second differences and one-sided first differences in the
/// direction of the drift. Terms needing a missing neighbour must be
/// zeroed by the caller.
pub fn upwind_stencil(grid: &Grid, node: usize, terms: &[AxisTerm]) -> Stencil {
    let mut out = Stencil::default();
    let m = grid.multi_index(node);
    for (k, t) in terms.iter().enumerate().take(grid.dim()) {
        if t.diffusion == 0.0 && t.drift == 0.0 {
            continue;
        }
        let nodes = grid.axes[k].nodes();
        let j = m[k];
        let has_lo = j > 0;
        let has_hi = j + 1 < nodes.len();
        let h_lo = if has_lo {
            nodes[j] - nodes[j - 1]
        } else {
            f64::NAN
        };
        let h_hi = if has_hi {
            nodes[j + 1] - nodes[j]
        } else {
            f64::NAN
        };
        let mut alpha = 0.0;
        let mut beta = 0.0;
        if t.diffusion != 0.0 {
            assert!(has_lo && has_hi, "second difference needs both neighbours");
            alpha += 2.0 * t.diffusion / (h_lo * (h_lo + h_hi));
            beta += 2.0 * t.diffusion / (h_hi * (h_lo + h_hi));
        }
        if t.drift > 0.0 {
            assert!(has_hi, "forward difference needs an upper neighbour");
            beta += t.drift / h_hi;
        } else if t.drift < 0.0 {
            assert!(has_lo, "backward difference needs a lower neighbour");
            alpha -= t.drift / h_lo;
        }
        let step = if k == 0 { 1 } else { grid.axes[0].len() };
        if alpha != 0.0 {
            out.push(node - step, alpha);
        }
        if beta != 0.0 {
            out.push(node + step, beta);
        }
    }
    out
}

/// Pushes the entries of [`upwind_stencil`] into `row`.
pub fn upwind_offdiagonals(grid: &Grid, node: usize, terms: &[AxisTerm], row: &mut RowBuf) {
    upwind_stencil(grid, node, terms).push_into(row);
}

/// Full row of `L_h - rho I` with diagonal `-sum(off) + reaction - rho`.
pub fn upwind_generator(
    grid: &Grid,
    node: usize,
    terms: &[AxisTerm],
    reaction: f64,
    rho: f64,
    row: &mut RowBuf,
) {
    upwind_offdiagonals(grid, node, terms, row);
    row.normalize();
    let mut sum = 0.0;
    for &(_, a) in row.entries() {
        sum += a;
    }
    row.push(node, -sum + reaction - rho);
    row.normalize();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Grid {
        Grid::new(
            vec![Axis::uniform(0.0, (n - 1) as f64, n).unwrap()],
            1.0,
            1,
            0,
        )
        .unwrap()
    }

    #[test]
    fn node_and_midpoint_weights() {
        let g = line(5);
        let at = interp_row(&g, &[2.0]).unwrap();
        assert_eq!(at.entries().collect::<Vec<_>>(), vec![(2, 1.0)]);
        let mid = interp_row(&g, &[2.5]).unwrap();
        assert_eq!(mid.entries().collect::<Vec<_>>(), vec![(2, 0.5), (3, 0.5)]);
        assert_eq!(
            interp_row(&g, &[4.0])
                .unwrap()
                .entries()
                .collect::<Vec<_>>(),
            vec![(4, 1.0)]
        );
        assert_eq!(interp_row(&g, &[4.5]), Err(OffGrid));
        assert_eq!(interp_row(&g, &[-1e-3]), Err(OffGrid));
        assert!(interp_row(&g, &[4.0 + 1e-15]).is_ok());
    }

    #[test]
    fn cell_centre_in_2d() {
        let g = Grid::new(
            vec![
                Axis::uniform(0.0, 1.0, 2).unwrap(),
                Axis::uniform(0.0, 2.0, 3).unwrap(),
            ],
            1.0,
            1,
            0,
        )
        .unwrap();
        let r = interp_row(&g, &[0.5, 1.5]).unwrap();
        let e: Vec<_> = r.entries().collect();
        assert_eq!(e, vec![(2, 0.25), (3, 0.25), (4, 0.25), (5, 0.25)]);
        let v: Vec<f64> = (0..g.len())
            .map(|i| g.coords(i)[0] + 3.0 * g.coords(i)[1])
            .collect();
        assert!((r.apply(&v) - (0.5 + 4.5)).abs() < 1e-14);
    }

    #[test]
    fn pure_advection_and_laplacian() {
        let g = line(5);
        let mut row = RowBuf::new();
        upwind_generator(
            &g,
            2,
            &[AxisTerm {
                diffusion: 0.0,
                drift: 2.0,
            }],
            0.0,
            0.0,
            &mut row,
        );
        assert_eq!(row.entries(), &[(2, -2.0), (3, 2.0)]);
        row.clear();
        upwind_generator(
            &g,
            2,
            &[AxisTerm {
                diffusion: 1.0,
                drift: 0.0,
            }],
            0.0,
            0.0,
            &mut row,
        );
        assert_eq!(row.entries(), &[(1, 1.0), (2, -2.0), (3, 1.0)]);
        row.clear();
        upwind_generator(
            &g,
            2,
            &[AxisTerm {
                diffusion: 0.0,
                drift: -1.0,
            }],
            0.0,
            0.5,
            &mut row,
        );
        assert_eq!(row.entries(), &[(1, 1.0), (2, -1.5)]);
    }

    #[test]
    fn nonuniform_coefficients_stay_nonnegative() {
        let g = Grid::new(
            vec![Axis::new(vec![0.0, 0.1, 0.5, 2.0]).unwrap()],
            1.0,
            1,
            0,
        )
        .unwrap();
        for mu in [-3.0, -0.1, 0.0, 0.4, 5.0] {
            let mut row = RowBuf::new();
            upwind_generator(
                &g,
                1,
                &[AxisTerm {
                    diffusion: 0.3,
                    drift: mu,
                }],
                0.0,
                0.0,
                &mut row,
            );
            let mut s = 0.0;
            for &(j, a) in row.entries() {
                if j != 1 {
                    assert!(a >= 0.0);
                }
                s += a;
            }
            assert!(s.abs() < 1e-12);
            // Exact on linear functions.
            let lin: f64 = row
                .entries()
                .iter()
                .map(|&(j, a)| a * g.axis(0).nodes()[j])
                .sum();
            assert!((lin - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_index_round_trips() {
        let g = Grid::new(
            vec![
                Axis::uniform(0.0, 1.0, 3).unwrap(),
                Axis::uniform(0.0, 1.0, 4).unwrap(),
            ],
            2.0,
            4,
            1,
        )
        .unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(g.multi_index(i)), i);
        }
        assert_eq!(g.steps(), 4);
        assert_eq!(g.dt(0), 0.5);
        assert_eq!(g.h(), 0.5);
    }
}
