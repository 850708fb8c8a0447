//! Right inverses of the divergence on subgraph domains: a minimum-norm region solve and the
//! universal stripe-decomposed operator built from it.

use rayon::prelude::*;

use crate::bspline::Basis1d;
use crate::error::{FsiError, Result};
use crate::fluid::{FluidGrid, ScalarField, VecField};
use crate::geometry::BeamCurve;
use crate::linalg::{DenseSpd, SparseSpd, Triplets};

/// Which wall the domain rests on. `Below`: {y_lo < y < y_lo + g(x)}; `Above`:
/// {y_hi − g(x) < y < y_hi}. In both cases g is the local height above the wall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Below,
    Above,
}

/// Piecewise-linear graph on uniform samples over [0, ℓ].
#[derive(Debug, Clone)]
pub struct Graph {
    pub ell: f64,
    pub vals: Vec<f64>,
    /// Safety margin subtracted from every minimum query.
    pub pad: f64,
}

impl Graph {
    pub fn new(ell: f64, vals: Vec<f64>) -> Result<Self> {
        if vals.len() < 2 || vals.iter().any(|v| !v.is_finite()) {
            return Err(FsiError::InvalidParam("graph needs at least two finite samples".into()));
        }
        Ok(Graph { ell, vals, pad: 0.0 })
    }

    pub fn flat(ell: f64, height: f64) -> Self {
        Graph { ell, vals: vec![height, height], pad: 0.0 }
    }

    fn dx(&self) -> f64 {
        self.ell / (self.vals.len() - 1) as f64
    }

    pub fn eval(&self, x: f64) -> f64 {
        let m = self.vals.len() - 1;
        let s = (x / self.dx()).clamp(0.0, m as f64);
        let i = (s.floor() as usize).min(m - 1);
        let f = s - i as f64;
        (1.0 - f) * self.vals[i] + f * self.vals[i + 1]
    }

    /// Minimum over [x0, x1] (exact for the interpolant), minus the pad.
    pub fn min_on(&self, x0: f64, x1: f64) -> f64 {
        let dx = self.dx();
        let mut m = self.eval(x0).min(self.eval(x1));
        let i0 = (x0 / dx).ceil().max(0.0) as usize;
        let i1 = ((x1 / dx).floor() as usize).min(self.vals.len() - 1);
        for i in i0..=i1.max(i0) {
            if i < self.vals.len() && i as f64 * dx >= x0 && i as f64 * dx <= x1 {
                m = m.min(self.vals[i]);
            }
        }
        m - self.pad
    }

    pub fn min(&self) -> f64 {
        self.vals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn lipschitz(&self) -> f64 {
        let dx = self.dx();
        self.vals.windows(2).map(|w| (w[1] - w[0]).abs() / dx).fold(0.0, f64::max)
    }
}

/// Lipschitz subgraph domain with floor γ, slope bound L and ceiling M.
#[derive(Debug, Clone)]
pub struct SubgraphDomain {
    pub ell: f64,
    pub gamma: f64,
    pub lip: f64,
    pub ceiling: f64,
    pub graph: Graph,
    pub orient: Orientation,
}

impl SubgraphDomain {
    pub fn new(ell: f64, gamma: f64, lip: f64, ceiling: f64, graph: Graph) -> Result<Self> {
        let d = SubgraphDomain { ell, gamma, lip, ceiling, graph, orient: Orientation::Below };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = 1e-9 * self.ell;
        if !(self.gamma > 0.0 && self.gamma <= self.ceiling + tol && self.lip >= 0.0) {
            return Err(FsiError::InvalidParam(format!(
                "need 0 < gamma <= M and L >= 0 (gamma={}, M={}, L={})",
                self.gamma, self.ceiling, self.lip
            )));
        }
        if self.graph.min() < self.gamma - tol || self.graph.max() > self.ceiling + tol {
            return Err(FsiError::InvalidParam(format!(
                "graph outside [gamma, M]: min {}, max {}",
                self.graph.min(),
                self.graph.max()
            )));
        }
        if self.graph.lipschitz() > self.lip * (1.0 + 1e-9) + tol {
            return Err(FsiError::InvalidParam(format!(
                "graph slope {} exceeds L = {}",
                self.graph.lipschitz(),
                self.lip
            )));
        }
        Ok(())
    }

    /// The fluid region on one side of the curve, seen from its wall.
    pub fn from_curve(curve: &BeamCurve, orient: Orientation, samples_per_unit: usize) -> Result<Self> {
        let ell = curve.ell;
        let m = (samples_per_unit as f64 * ell).ceil().max(8.0) as usize;
        let mut vals = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let z1 = ell * k as f64 / m as f64;
            let y = curve.height_at(z1)?;
            vals.push(match orient {
                Orientation::Below => y + 0.5 * ell,
                Orientation::Above => 0.5 * ell - y,
            });
        }
        let mut graph = Graph::new(ell, vals)?;
        // chord error bound from second differences
        let dx = graph.dx();
        let curv = graph.vals.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max);
        graph.pad = curv + 1e-9 * ell + 0.0 * dx;
        let gamma = graph.min() - graph.pad;
        if gamma <= 0.0 {
            return Err(FsiError::Degenerate("curve touches the wall".into()));
        }
        Ok(SubgraphDomain {
            ell,
            gamma,
            lip: graph.lipschitz(),
            ceiling: graph.max(),
            graph,
            orient,
        })
    }

    fn wall(&self, grid: &FluidGrid) -> f64 {
        match self.orient {
            Orientation::Below => grid.ylo(),
            Orientation::Above => grid.ylo() + grid.ell,
        }
    }

    /// Local height coordinate of a global ordinate.
    pub fn local_y(&self, grid: &FluidGrid, y: f64) -> f64 {
        match self.orient {
            Orientation::Below => y - self.wall(grid),
            Orientation::Above => self.wall(grid) - y,
        }
    }

    /// Whether the support box lies inside the closed domain.
    fn box_inside(&self, grid: &FluidGrid, xs: (f64, f64), ys: (f64, f64)) -> bool {
        let (a, b) = (self.local_y(grid, ys.0), self.local_y(grid, ys.1));
        let (lo, hi) = (a.min(b), a.max(b));
        let tol = 1e-12 * self.ell;
        lo >= -tol && hi <= self.graph.min_on(xs.0, xs.1) + tol
    }

    pub fn contains(&self, grid: &FluidGrid, z: [f64; 2]) -> bool {
        let y = self.local_y(grid, z[1]);
        z[0] >= 0.0 && z[0] <= self.ell && y > 0.0 && y < self.graph.eval(z[0])
    }
}

/// Q-basis indices (S²⊗S², x-fastest) that vanish on the walls and whose support lies in
/// the domain and in [xa, xb].
pub fn q_inside(grid: &FluidGrid, dom: &SubgraphDomain, xa: f64, xb: f64) -> Vec<usize> {
    let n2 = grid.n + 2;
    let tol = 1e-12 * grid.ell;
    let mut out = Vec::new();
    for j in 1..n2 - 1 {
        for i in 1..n2 - 1 {
            let xs = grid.x2.support(i);
            if xs.0 < xa - tol || xs.1 > xb + tol {
                continue;
            }
            if dom.box_inside(grid, xs, grid.y2.support(j)) {
                out.push(j * n2 + i);
            }
        }
    }
    out
}

/// Vector-field basis functions (flat index: c1 block then c2 block) that vanish on ∂Ω, whose
/// divergence vanishes on the walls, and with support in the domain and in [xa, xb].
pub fn v_inside(grid: &FluidGrid, dom: &SubgraphDomain, xa: f64, xb: f64) -> Vec<usize> {
    let (n3, n2) = (grid.n + 3, grid.n + 2);
    let tol = 1e-12 * grid.ell;
    let mut out = Vec::new();
    // cubic factor clamped (value and slope), quadratic factor zero at the walls
    let blocks: [(&Basis1d, &Basis1d, usize, usize, usize, usize, usize); 2] =
        [(&grid.x3, &grid.y2, n3, n2, 0, 2, 1), (&grid.x2, &grid.y3, n2, n3, n3 * n2, 1, 2)];
    for (bx, by, nx, ny, off, cx, cy) in blocks {
        for j in cy..ny - cy {
            for i in cx..nx - cx {
                let xs = bx.support(i);
                if xs.0 < xa - tol || xs.1 > xb + tol {
                    continue;
                }
                if dom.box_inside(grid, xs, by.support(j)) {
                    out.push(off + j * nx + i);
                }
            }
        }
    }
    out
}

/// H¹-seminorm stiffness restricted to the listed vector basis functions (flat indices).
pub(crate) fn stiffness(grid: &FluidGrid, v_idx: &[usize]) -> Triplets {
    let (n3, n2) = (grid.n + 3, grid.n + 2);
    let mut v_pos = vec![usize::MAX; 2 * n3 * n2];
    for (k, &v) in v_idx.iter().enumerate() {
        v_pos[v] = k;
    }
    let (gx3_0, gx3_1) = (grid.x3.gram(0, 0), grid.x3.gram(1, 1));
    let (gx2_0, gx2_1) = (grid.x2.gram(0, 0), grid.x2.gram(1, 1));
    let (gy3_0, gy3_1) = (grid.y3.gram(0, 0), grid.y3.gram(1, 1));
    let (gy2_0, gy2_1) = (grid.y2.gram(0, 0), grid.y2.gram(1, 1));
    let nv = v_idx.len();
    let mut a = Triplets::new(nv, nv);
    for (k, &v) in v_idx.iter().enumerate() {
        let (nx, ny, gx0, gx1, gy0, gy1, off) = if v < n3 * n2 {
            (n3, n2, &gx3_0, &gx3_1, &gy2_0, &gy2_1, 0)
        } else {
            (n2, n3, &gx2_0, &gx2_1, &gy3_0, &gy3_1, n3 * n2)
        };
        let loc = v - off;
        let (i, j) = (loc % nx, loc / nx);
        for jj in j.saturating_sub(3)..(j + 4).min(ny) {
            for ii in i.saturating_sub(3)..(i + 4).min(nx) {
                let p = v_pos[off + jj * nx + ii];
                if p == usize::MAX {
                    continue;
                }
                let val = gx1[i * nx + ii] * gy0[j * ny + jj] + gx0[i * nx + ii] * gy1[j * ny + jj];
                a.push(k, p, val);
            }
        }
    }
    a
}

/// Rows of the divergence (one per listed Q basis) over the listed vector basis, in local
/// column numbering. Fails when the divergence of a listed field leaves the Q list.
pub(crate) fn divergence_rows(grid: &FluidGrid, v_idx: &[usize], q_idx: &[usize]) -> Result<Vec<Vec<(usize, f64)>>> {
    let (n3, n2) = (grid.n + 3, grid.n + 2);
    let mut q_pos = vec![usize::MAX; n2 * n2];
    for (k, &q) in q_idx.iter().enumerate() {
        q_pos[q] = k;
    }
    let dx = grid.x3.derivative_entries();
    let dy = grid.y3.derivative_entries();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); q_idx.len()];
    for (k, &v) in v_idx.iter().enumerate() {
        let mut push = |q: usize, w: f64| {
            let p = q_pos[q];
            if p == usize::MAX {
                return Err(FsiError::SupportLeak("divergence of an interior field left the region".into()));
            }
            rows[p].push((k, w));
            Ok(())
        };
        if v < n3 * n2 {
            let (i, j) = (v % n3, v / n3);
            for &(r, c, w) in &dx {
                if c == i {
                    push(j * n2 + r, w)?;
                }
            }
        } else {
            let v2 = v - n3 * n2;
            let (i, j) = (v2 % n2, v2 / n2);
            for &(r, c, w) in &dy {
                if c == j {
                    push(r * n2 + i, w)?;
                }
            }
        }
    }
    Ok(rows)
}

/// Q-basis integrals for the listed indices.
pub(crate) fn q_weights(grid: &FluidGrid, q_idx: &[usize]) -> Vec<f64> {
    let n2 = grid.n + 2;
    let ix = grid.x2.integrals();
    let iy = grid.y2.integrals();
    q_idx.iter().map(|&q| ix[q % n2] * iy[q / n2]).collect()
}

/// Minimizer of ∫|∇v|² + κ Σ_s (c_s·v − r_s)² subject to hard constraints C v = r, over a
/// subset of the vector basis. The first `mean.len()` hard rows may carry one dependency with
/// weights `mean` (Σ wᵢ rowᵢ = 0); their right-hand sides must satisfy Σ wᵢ rᵢ = 0.
pub(crate) struct MinNorm {
    pub ncols_full: usize,
    pub v_idx: Vec<usize>,
    chol: SparseSpd,
    hard: Vec<Vec<(usize, f64)>>,
    soft: Vec<Vec<(usize, f64)>>,
    kappa: f64,
    x: Vec<Vec<f64>>,
    schur: DenseSpd,
}

impl MinNorm {
    pub fn new(
        grid: &FluidGrid,
        v_idx: Vec<usize>,
        hard: Vec<Vec<(usize, f64)>>,
        mean: Option<&[f64]>,
        soft: Vec<Vec<(usize, f64)>>,
        kappa: f64,
    ) -> Result<Self> {
        let nv = v_idx.len();
        let mut a = stiffness(grid, &v_idx);
        for row in &soft {
            for &(i, vi) in row {
                for &(j, vj) in row {
                    a.push(i, j, kappa * vi * vj);
                }
            }
        }
        let chol = SparseSpd::factor(&a.to_csc())?;
        let x: Vec<Vec<f64>> = hard
            .par_iter()
            .map(|row| {
                let mut rhs = vec![0.0; nv];
                for &(k, w) in row {
                    rhs[k] = w;
                }
                chol.solve(&rhs)
            })
            .collect();
        let nr = hard.len();
        let mut s: Vec<f64> = (0..nr * nr)
            .into_par_iter()
            .map(|rc| {
                let (r, c) = (rc / nr, rc % nr);
                hard[r].iter().map(|&(k, w)| w * x[c][k]).sum()
            })
            .collect();
        if let Some(w) = mean {
            let m = w.len();
            let diag_mean = (0..m).map(|i| s[i * nr + i]).sum::<f64>() / m as f64;
            let wn2: f64 = w.iter().map(|v| v * v).sum();
            let scale = diag_mean / wn2 * m as f64;
            for r in 0..m {
                for c in 0..m {
                    s[r * nr + c] += scale * w[r] * w[c];
                }
            }
        }
        let schur = DenseSpd::factor(nr, &s)
            .map_err(|_| FsiError::Solver("constraints are not independent on this basis".into()))?;
        Ok(MinNorm { ncols_full: 2 * (grid.n + 3) * (grid.n + 2), v_idx, chol, hard, soft, kappa, x, schur })
    }

    /// Flat vector-field coefficients of the minimizer.
    pub fn solve(&self, hard_rhs: &[f64], soft_rhs: &[f64]) -> Vec<f64> {
        let nv = self.v_idx.len();
        let mut local = vec![0.0; nv];
        let mut rhs = hard_rhs.to_vec();
        if soft_rhs.iter().any(|&r| r != 0.0) {
            let mut f = vec![0.0; nv];
            for (row, &r) in self.soft.iter().zip(soft_rhs) {
                for &(k, w) in row {
                    f[k] += self.kappa * w * r;
                }
            }
            local = self.chol.solve(&f);
            for (h, row) in rhs.iter_mut().zip(&self.hard) {
                *h -= row.iter().map(|&(k, w)| w * local[k]).sum::<f64>();
            }
        }
        let lam = self.schur.solve(&rhs);
        for (b, &l) in lam.iter().enumerate() {
            if l != 0.0 {
                for (k, &xv) in self.x[b].iter().enumerate() {
                    local[k] += l * xv;
                }
            }
        }
        let mut flat = vec![0.0; self.ncols_full];
        for (k, &v) in local.iter().enumerate() {
            flat[self.v_idx[k]] = v;
        }
        flat
    }
}

/// Minimum-norm right inverse of the divergence on one region: for mean-zero g supported in
/// the region, returns v with div v = g, v = 0 on the region boundary, minimizing ∫|∇v|².
pub struct RegionSolver {
    grid: FluidGrid,
    q_idx: Vec<usize>,
    q_pos: Vec<usize>,
    wq: Vec<f64>,
    core: MinNorm,
}

impl RegionSolver {
    pub fn new(grid: &FluidGrid, dom: &SubgraphDomain, xa: f64, xb: f64) -> Result<Self> {
        let v_idx = v_inside(grid, dom, xa, xb);
        let q_idx = q_inside(grid, dom, xa, xb);
        if v_idx.is_empty() || q_idx.len() < 2 {
            return Err(FsiError::GridTooCoarse(format!("region [{xa:.4}, {xb:.4}] resolves no divergence pairs")));
        }
        let rows = divergence_rows(grid, &v_idx, &q_idx)?;
        let wq = q_weights(grid, &q_idx);
        let core = MinNorm::new(grid, v_idx, rows, Some(&wq), Vec::new(), 0.0)
            .map_err(|_| FsiError::Solver("divergence not onto mean-zero fields on this region".into()))?;
        let mut q_pos = vec![usize::MAX; (grid.n + 2) * (grid.n + 2)];
        for (k, &q) in q_idx.iter().enumerate() {
            q_pos[q] = k;
        }
        Ok(RegionSolver { grid: grid.clone(), q_idx, q_pos, wq, core })
    }

    pub fn q_indices(&self) -> &[usize] {
        &self.q_idx
    }

    pub fn v_indices(&self) -> &[usize] {
        &self.core.v_idx
    }

    /// Solve div v = g; errors when g leaves the region or has nonzero mean.
    pub fn solve(&self, g: &ScalarField) -> Result<VecField> {
        let scale = g.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rhs = vec![0.0; self.q_idx.len()];
        for (q, &val) in g.c.iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            let p = self.q_pos[q];
            if p == usize::MAX {
                if val.abs() > 1e-13 * scale {
                    return Err(FsiError::SupportLeak(format!("datum coefficient {q} outside the region")));
                }
                continue;
            }
            rhs[p] = val;
        }
        let mean: f64 = rhs.iter().zip(&self.wq).map(|(a, b)| a * b).sum();
        let mass: f64 = rhs.iter().zip(&self.wq).map(|(a, b)| a.abs() * b).sum();
        let tol = 1e-9 * mass.max(f64::MIN_POSITIVE);
        if mean.abs() > tol {
            return Err(FsiError::NonzeroMean { mean, tol });
        }
        Ok(VecField::from_flat(&self.grid, &self.core.solve(&rhs, &[])))
    }
}

/// Quintic smoothstep.
pub fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// C² bump on [−1, 1] whose integer translates sum to one.
pub fn partition_bump(t: f64) -> f64 {
    smoothstep(1.0 - t.abs())
}

/// Unit-mass template on [0, 1].
pub fn mass_template(t: f64) -> f64 {
    if (0.0..=1.0).contains(&t) {
        30.0 * t * t * (1.0 - t) * (1.0 - t)
    } else {
        0.0
    }
}

/// Stripe geometry fixed by (ℓ, γ, L, M) alone.
#[derive(Debug, Clone)]
pub struct StripeDecomposition {
    pub ell: f64,
    pub gamma: f64,
    pub lip: f64,
    pub ceiling: f64,
    /// Partition spacing s = ℓ/N ≤ γ/(4 max(L,1)).
    pub spacing: f64,
    /// Stripe width a = 2s.
    pub width: f64,
    /// Number of stripes N; partition functions ψ₀ … ψ_N.
    pub count: usize,
}

impl StripeDecomposition {
    pub fn new(ell: f64, gamma: f64, lip: f64, ceiling: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= ceiling && lip >= 0.0 && ell > 0.0) {
            return Err(FsiError::InvalidParam(format!("inconsistent (ell={ell}, gamma={gamma}, L={lip}, M={ceiling})")));
        }
        let l_eff = lip.max(1.0);
        let count = ((4.0 * l_eff * ell / gamma) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let spacing = ell / count as f64;
        Ok(StripeDecomposition { ell, gamma, lip, ceiling, spacing, width: 2.0 * spacing, count })
    }

    pub fn psi(&self, k: usize, x: f64) -> f64 {
        partition_bump(x / self.spacing - k as f64)
    }

    /// x-extent of stripe k, clipped to [0, ℓ].
    pub fn stripe(&self, k: usize) -> (f64, f64) {
        let s = self.spacing;
        (((k as f64 - 1.0) * s).max(0.0), ((k as f64 + 1.0) * s).min(self.ell))
    }

    /// Sampled segment test of star-shapedness of stripe k w.r.t. its cube
    /// (stripe × [0, a]); returns the worst margin (≥ 0 means the test passed).
    pub fn star_shaped_margin(&self, graph: &Graph, k: usize, samples: usize) -> f64 {
        let (x0, x1) = self.stripe(k);
        let a = self.width.min(self.gamma / 2.0);
        let mut worst = f64::INFINITY;
        for i in 0..=samples {
            let xb = x0 + (x1 - x0) * i as f64 / samples as f64;
            let yb = graph.eval(xb);
            for pi in 0..=4 {
                let p = x0 + (x1 - x0) * pi as f64 / 4.0;
                for qi in 0..=4 {
                    let q = a * qi as f64 / 4.0;
                    for ti in 0..=samples {
                        let t = ti as f64 / samples as f64;
                        let x = t * p + (1.0 - t) * xb;
                        let y = t * q + (1.0 - t) * yb;
                        worst = worst.min(graph.eval(x) - y + 1e-12);
                    }
                }
            }
        }
        worst
    }

    /// Discrete unit-mass bump in the cube [ks, (k+1)s] × [0, γ].
    pub fn phi(&self, grid: &FluidGrid, dom: &SubgraphDomain, k: usize) -> Result<ScalarField> {
        let s = self.spacing;
        let (xa, xb) = (k as f64 * s, (k as f64 + 1.0) * s);
        let n2 = grid.n + 2;
        let tol = 1e-12 * grid.ell;
        let mut f = ScalarField::zeros(grid);
        for j in 0..n2 {
            let ys = grid.y2.support(j);
            let (a, b) = (dom.local_y(grid, ys.0), dom.local_y(grid, ys.1));
            if a.min(b) < -tol || a.max(b) > self.gamma + tol {
                continue;
            }
            let ty = dom.local_y(grid, grid.y2.greville(j)) / self.gamma;
            for i in 0..n2 {
                let xs = grid.x2.support(i);
                if xs.0 < xa - tol || xs.1 > xb + tol {
                    continue;
                }
                let tx = (grid.x2.greville(i) - xa) / s;
                f.c[j * n2 + i] = mass_template(tx) * mass_template(ty);
            }
        }
        let m = f.integral();
        if m <= 0.0 {
            return Err(FsiError::GridTooCoarse(format!("no divergence basis fits in cube {k} (spacing {s:.4}, h {:.4})", grid.h)));
        }
        f.c.iter_mut().for_each(|c| *c /= m);
        Ok(f)
    }

    /// Telescoped pieces T_k f, k = 0..=N.
    pub fn split(&self, f: &ScalarField, phis: &[ScalarField]) -> Vec<ScalarField> {
        let grid = &f.grid;
        let n2 = grid.n + 2;
        let gr: Vec<f64> = (0..n2).map(|i| grid.x2.greville(i)).collect();
        let mut pieces = Vec::with_capacity(self.count + 1);
        let mut cum = 0.0;
        for k in 0..=self.count {
            let mut fk = f.clone();
            for (q, c) in fk.c.iter_mut().enumerate() {
                *c *= self.psi(k, gr[q % n2]);
            }
            let ak = fk.integral();
            let prev = cum;
            cum += ak;
            if k < self.count {
                for (c, p) in fk.c.iter_mut().zip(&phis[k].c) {
                    *c -= cum * p;
                }
            }
            if k > 0 {
                for (c, p) in fk.c.iter_mut().zip(&phis[k - 1].c) {
                    *c += prev * p;
                }
            }
            pieces.push(fk);
        }
        pieces
    }
}

/// Universal operator for one domain: stripe solvers plus the cube bumps.
pub struct UniversalBogovskij {
    pub decomp: StripeDecomposition,
    pub domain: SubgraphDomain,
    phis: Vec<ScalarField>,
    solvers: Vec<RegionSolver>,
}

impl UniversalBogovskij {
    pub fn new(grid: &FluidGrid, decomp: &StripeDecomposition, domain: &SubgraphDomain) -> Result<Self> {
        let tol = 1e-9 * decomp.ell;
        if domain.gamma < decomp.gamma - tol || domain.lip > decomp.lip.max(1.0) + tol || domain.graph.max() > decomp.ceiling + tol {
            return Err(FsiError::InvalidParam("domain outside the class of the decomposition".into()));
        }
        let phis = (0..decomp.count).map(|k| decomp.phi(grid, domain, k)).collect::<Result<Vec<_>>>()?;
        let h = grid.h;
        let solvers = (0..=decomp.count)
            .into_par_iter()
            .map(|k| {
                let s = decomp.spacing;
                let xa = ((k as f64 - 1.0) * s - 2.0 * h).max(0.0);
                let xb = ((k as f64 + 1.0) * s + 2.0 * h).min(decomp.ell);
                RegionSolver::new(grid, domain, xa, xb)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UniversalBogovskij { decomp: decomp.clone(), domain: domain.clone(), phis, solvers })
    }

    pub fn apply(&self, f: &ScalarField) -> Result<VecField> {
        let total = f.integral();
        let mass: f64 = f.c.iter().map(|c| c.abs()).sum::<f64>() * f.grid.h * f.grid.h;
        if total.abs() > 1e-9 * mass.max(f64::MIN_POSITIVE) {
            return Err(FsiError::NonzeroMean { mean: total, tol: 1e-9 * mass });
        }
        let pieces = self.decomp.split(f, &self.phis);
        let parts = self
            .solvers
            .par_iter()
            .zip(pieces.par_iter())
            .map(|(s, p)| s.solve(p))
            .collect::<Result<Vec<_>>>()?;
        let mut out = VecField::zeros(&f.grid);
        for p in &parts {
            out.axpy(1.0, p);
        }
        Ok(out)
    }
}

/// Whether every nonzero coefficient of `v` belongs to a basis function inside the domain.
pub fn support_inside(v: &VecField, dom: &SubgraphDomain) -> bool {
    let allowed = v_inside(&v.grid, dom, 0.0, dom.ell);
    let mut mask = vec![false; v.len()];
    for i in allowed {
        mask[i] = true;
    }
    v.to_flat().iter().enumerate().all(|(i, c)| *c == 0.0 || mask[i])
}

/// ‖div v − f‖_{L²} / ‖f‖_{L²}.
pub fn divergence_residual(v: &VecField, f: &ScalarField) -> f64 {
    let mut d = v.divergence();
    for (a, b) in d.c.iter_mut().zip(&f.c) {
        *a -= b;
    }
    (d.l2_sq() / f.l2_sq().max(f64::MIN_POSITIVE)).sqrt()
}

/// Random mean-zero datum supported in the domain.
pub fn random_datum(grid: &FluidGrid, dom: &SubgraphDomain, rng: &mut impl rand::Rng) -> ScalarField {
    let idx = q_inside(grid, dom, 0.0, dom.ell);
    let n2 = grid.n + 2;
    let ix = grid.x2.integrals();
    let iy = grid.y2.integrals();
    let mut f = ScalarField::zeros(grid);
    for &q in &idx {
        f.c[q] = rng.gen::<f64>() - 0.5;
    }
    let w: f64 = idx.iter().map(|&q| ix[q % n2] * iy[q / n2]).sum();
    let m = f.integral() / w;
    for &q in &idx {
        f.c[q] -= m;
    }
    f
}

/// Random Lipschitz graph with min exactly γ, slopes ≤ L and values ≤ M.
pub fn random_graph(ell: f64, gamma: f64, lip: f64, ceiling: f64, samples: usize, rng: &mut impl rand::Rng) -> Graph {
    let dx = ell / samples as f64;
    let mut vals = vec![0.0; samples + 1];
    let mut y = gamma + rng.gen::<f64>() * (ceiling - gamma);
    for v in vals.iter_mut() {
        *v = y;
        let step = (2.0 * rng.gen::<f64>() - 1.0) * lip * dx;
        y += step;
        if y < gamma || y > ceiling {
            y -= 2.0 * step;
        }
        y = y.clamp(gamma, ceiling);
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = gamma - lo;
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + shift;
    let squeeze = if hi > ceiling { (ceiling - gamma) / (hi - gamma) } else { 1.0 };
    for v in vals.iter_mut() {
        *v = gamma + (*v + shift - gamma) * squeeze;
    }
    Graph { ell, vals, pad: 0.0 }
}

/// Measured H¹ operator constants of the universal operator over several domains.
#[derive(Debug, Clone)]
pub struct NormProbe {
    /// (domain id, trial, ‖𝓑f‖_{H¹}/‖f‖_{L²}).
    pub rows: Vec<(usize, usize, f64)>,
    pub per_domain_max: Vec<f64>,
    pub spread: f64,
    /// (1 + ℓ)(ℓL)^{1/2}/γ with L ≥ 1.
    pub formula: f64,
    pub max_residual: f64,
    pub supports_ok: bool,
}

pub fn operator_norm_probe(
    grid: &FluidGrid,
    decomp: &StripeDecomposition,
    domains: &[SubgraphDomain],
    trials: usize,
    rng: &mut impl rand::Rng,
) -> Result<NormProbe> {
    let mut rows = Vec::new();
    let mut per_domain_max = Vec::new();
    let mut max_residual: f64 = 0.0;
    let mut supports_ok = true;
    for (d, dom) in domains.iter().enumerate() {
        let op = UniversalBogovskij::new(grid, decomp, dom)?;
        let mut best: f64 = 0.0;
        for t in 0..trials {
            let f = random_datum(grid, dom, rng);
            let v = op.apply(&f)?;
            max_residual = max_residual.max(divergence_residual(&v, &f));
            supports_ok &= support_inside(&v, dom);
            let (l2, h1) = v.l2_h1_sq();
            let ratio = ((l2 + h1) / f.l2_sq()).sqrt();
            best = best.max(ratio);
            rows.push((d, t, ratio));
        }
        per_domain_max.push(best);
    }
    let lo = per_domain_max.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per_domain_max.iter().cloned().fold(0.0, f64::max);
    let ell = decomp.ell;
    Ok(NormProbe {
        rows,
        spread: hi / lo,
        per_domain_max,
        formula: (1.0 + ell) * (ell * decomp.lip.max(1.0)).sqrt() / decomp.gamma,
        max_residual,
        supports_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> FluidGrid {
        FluidGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn stripe_counts() {
        let d = StripeDecomposition::new(1.0, 0.2, 2.0, 0.8).unwrap();
        assert_eq!(d.count, 40);
        assert!((d.width - 0.05).abs() < 1e-15);
        let flat = StripeDecomposition::new(1.0, 0.4, 1.0, 0.4).unwrap();
        assert!((flat.width - 0.2).abs() < 1e-15);
        assert!(StripeDecomposition::new(1.0, 0.5, 1.0, 0.4).is_err());
    }

    #[test]
    fn partition_of_unity() {
        let d = StripeDecomposition::new(1.0, 0.3, 1.5, 0.9).unwrap();
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            let s: f64 = (0..=d.count).map(|k| d.psi(k, x)).sum();
            assert!((s - 1.0).abs() < 1e-14);
            for k in 0..=d.count {
                let (a, b) = d.stripe(k);
                if d.psi(k, x) > 0.0 {
                    assert!(x >= a - 1e-14 && x <= b + 1e-14);
                }
            }
        }
    }

    #[test]
    fn star_shaped_stripes() {
        let d = StripeDecomposition::new(1.0, 0.2, 2.0, 0.6).unwrap();
        let flat = Graph::flat(1.0, 0.2);
        assert!(d.star_shaped_margin(&flat, 3, 8) >= 0.0);
        // sawtooth at exactly slope L
        let m = 200;
        let vals: Vec<f64> = (0..=m)
            .map(|i| {
                let x = i as f64 / m as f64;
                let t = (x * 10.0).fract();
                0.2 + 2.0 * 0.1 * (if t < 0.5 { t } else { 1.0 - t })
            })
            .collect();
        let saw = Graph::new(1.0, vals).unwrap();
        assert!((saw.lipschitz() - 2.0).abs() < 1e-9);
        for k in 0..=d.count {
            assert!(d.star_shaped_margin(&saw, k, 12) >= 0.0, "stripe {k}");
        }
    }

    #[test]
    fn region_solver_dipole_and_zero() {
        let g = grid(16);
        let dom = SubgraphDomain::new(1.0, 0.3, 1.0, 0.6, Graph::new(1.0, vec![0.4, 0.6, 0.3]).unwrap()).unwrap();
        let solver = RegionSolver::new(&g, &dom, 0.0, 1.0).unwrap();
        let zero = solver.solve(&ScalarField::zeros(&g)).unwrap();
        assert_eq!(zero.max_abs_coeff(), 0.0);
        let d = StripeDecomposition::new(1.0, 0.3, 1.0, 0.6).unwrap();
        let _ = d;
        let mut f = ScalarField::zeros(&g);
        let q = solver.q_indices();
        f.c[q[3]] = 1.0;
        f.c[q[q.len() / 2]] = -1.0;
        let n2 = g.n + 2;
        let w = |k: usize| g.x2.integrals()[k % n2] * g.y2.integrals()[k / n2];
        f.c[q[q.len() / 2]] = -w(q[3]) / w(q[q.len() / 2]);
        let v = solver.solve(&f).unwrap();
        assert!(divergence_residual(&v, &f) < 1e-9);
        assert!(support_inside(&v, &dom));
        let mut bad = f.clone();
        bad.c[q[0]] += 1.0;
        assert!(matches!(solver.solve(&bad), Err(FsiError::NonzeroMean { .. })));
    }

    #[test]
    fn region_solver_is_scale_invariant() {
        let ratio = |ell: f64| {
            let g = FluidGrid::new(ell, 12).unwrap();
            let dom = SubgraphDomain::new(ell, 0.25 * ell, 1.0, 0.5 * ell, Graph::flat(ell, 0.5 * ell)).unwrap();
            let s = RegionSolver::new(&g, &dom, 0.0, ell).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let f = random_datum(&g, &dom, &mut rng);
            let v = s.solve(&f).unwrap();
            let (_, h1) = v.l2_h1_sq();
            (h1 / f.l2_sq()).sqrt()
        };
        let (a, b) = (ratio(1.0), ratio(0.5));
        assert!((a - b).abs() < 1e-8 * a, "{a} {b}");
    }

    #[test]
    fn universal_operator_identity() {
        let g = grid(24);
        let decomp = StripeDecomposition::new(1.0, 0.5, 1.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let graph = random_graph(1.0, 0.5, 1.0, 0.9, 48, &mut rng);
        let dom = SubgraphDomain::new(1.0, 0.5, 1.0, 0.9, graph).unwrap();
        let op = UniversalBogovskij::new(&g, &decomp, &dom).unwrap();
        let f = random_datum(&g, &dom, &mut rng);
        let pieces = decomp.split(&f, &op.phis);
        let mut sum = ScalarField::zeros(&g);
        for p in &pieces {
            assert!(p.integral().abs() < 1e-12);
            for (a, b) in sum.c.iter_mut().zip(&p.c) {
                *a += b;
            }
        }
        for (a, b) in sum.c.iter().zip(&f.c) {
            assert!((a - b).abs() < 1e-12);
        }
        let v = op.apply(&f).unwrap();
        assert!(divergence_residual(&v, &f) < 1e-8);
        assert!(support_inside(&v, &dom));
        // linearity
        let f2 = random_datum(&g, &dom, &mut rng);
        let mut fs = f.clone();
        for (a, b) in fs.c.iter_mut().zip(&f2.c) {
            *a += b;
        }
        let mut lhs = op.apply(&fs).unwrap();
        lhs.axpy(-1.0, &v);
        lhs.axpy(-1.0, &op.apply(&f2).unwrap());
        assert!(lhs.max_abs_coeff() < 1e-10 * v.max_abs_coeff());
        assert_eq!(op.apply(&ScalarField::zeros(&g)).unwrap().max_abs_coeff(), 0.0);
    }

    #[test]
    fn coarse_grid_is_reported() {
        let g = grid(8);
        let decomp = StripeDecomposition::new(1.0, 0.2, 2.0, 0.6).unwrap();
        let dom = SubgraphDomain::new(1.0, 0.2, 2.0, 0.6, Graph::flat(1.0, 0.4)).unwrap();
        assert!(matches!(UniversalBogovskij::new(&g, &decomp, &dom), Err(FsiError::GridTooCoarse(_))));
    }
}
