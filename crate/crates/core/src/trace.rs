//! Hermite trace of grid velocity fields along the beam: nodal values, first and second
//! x-derivatives of u∘η.

use crate::error::Result;
use crate::fluid::{FluidGrid, VecField};
use crate::geometry::BeamCurve;

/// Sparse rows mapping a flat [`VecField`] to the 6(M+1) nodal Hermite dofs of Π(u∘η).
#[derive(Debug, Clone)]
pub struct TraceMap {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl TraceMap {
    pub fn new(grid: &FluidGrid, curve: &BeamCurve) -> Result<Self> {
        curve.check_feasible()?;
        let (n3, n2) = (grid.n + 3, grid.n + 2);
        let off2 = n3 * n2;
        let mut rows = vec![Vec::new(); 6 * (curve.m + 1)];
        for node in 0..=curve.m {
            let d = |r: usize| [curve.dofs[6 * node + 2 * r], curve.dofs[6 * node + 2 * r + 1]];
            let (z, t1, t2) = (d(0), d(1), d(2));
            let (cx, cy) = grid.cell_of(z);
            let bx3 = grid.x3.eval_in_cell(cx, z[0], 2);
            let bx2 = grid.x2.eval_in_cell(cx, z[0], 2);
            let by3 = grid.y3.eval_in_cell(cy, z[1], 2);
            let by2 = grid.y2.eval_in_cell(cy, z[1], 2);
            for (c, bxl, byl, nx, off, na, nb) in [(0usize, &bx3, &by2, n3, 0usize, 4, 3), (1, &bx2, &by3, n2, off2, 3, 4)] {
                for b in 0..nb {
                    for a in 0..na {
                        let col = off + (cy + b) * nx + cx + a;
                        let f = |p: usize, q: usize| bxl.d[p][a] * byl.d[q][b];
                        let val = f(0, 0);
                        let g = [f(1, 0), f(0, 1)];
                        let h = [[f(2, 0), f(1, 1)], [f(1, 1), f(0, 2)]];
                        let first = g[0] * t1[0] + g[1] * t1[1];
                        let mut second = g[0] * t2[0] + g[1] * t2[1];
                        for i in 0..2 {
                            for j in 0..2 {
                                second += h[i][j] * t1[i] * t1[j];
                            }
                        }
                        for (r, v) in [val, first, second].into_iter().enumerate() {
                            if v != 0.0 {
                                rows[6 * node + 2 * r + c].push((col, v));
                            }
                        }
                    }
                }
            }
        }
        Ok(TraceMap { ncols: 2 * off2, rows })
    }

    pub fn apply(&self, flat: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(c, v)| v * flat[c]).sum()).collect()
    }

    pub fn apply_field(&self, u: &VecField) -> Vec<f64> {
        self.apply(&u.to_flat())
    }

    /// Bᵀ y.
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, row) in self.rows.iter().enumerate() {
            if y[r] == 0.0 {
                continue;
            }
            for &(c, v) in row {
                out[c] += v * y[r];
            }
        }
        out
    }
}
