//! Spline velocity fields on Ω = [0,ℓ]×[−ℓ/2,ℓ/2]: the stream-function space, general
//! vector fields in S³⊗S² × S²⊗S³, material blending and forcing.

use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::bspline::{Basis1d, LocalBasis};
use crate::error::{FsiError, Result};
use crate::geometry::{BeamCurve, RegionLabel};
use crate::linalg::{spmv, spmv_t, DenseSpd, Triplets};
use crate::quad::gauss_legendre;

/// Gauss points per direction in a cell.
pub const CELL_GAUSS: usize = 4;
/// Sub-cells per direction in cut cells.
pub const CUT_REFINE: usize = 4;

#[derive(Debug, Clone)]
pub struct FluidGrid {
    pub ell: f64,
    pub n: usize,
    pub h: f64,
    pub x3: Basis1d,
    pub y3: Basis1d,
    pub x2: Basis1d,
    pub y2: Basis1d,
}

impl FluidGrid {
    pub fn new(ell: f64, n: usize) -> Result<Self> {
        if n < 8 {
            return Err(FsiError::InvalidParam(format!("fluid grid needs n >= 8, got {n}")));
        }
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(FsiError::InvalidParam(format!("ell must be positive, got {ell}")));
        }
        let (ylo, yhi) = (-0.5 * ell, 0.5 * ell);
        Ok(FluidGrid {
            ell,
            n,
            h: ell / n as f64,
            x3: Basis1d::new(3, n, 0.0, ell),
            y3: Basis1d::new(3, n, ylo, yhi),
            x2: Basis1d::new(2, n, 0.0, ell),
            y2: Basis1d::new(2, n, ylo, yhi),
        })
    }

    pub fn ylo(&self) -> f64 {
        -0.5 * self.ell
    }

    pub fn contains(&self, z: [f64; 2]) -> bool {
        let tol = 1e-12 * self.ell;
        z[0] >= -tol && z[0] <= self.ell + tol && z[1].abs() <= 0.5 * self.ell + tol
    }

    pub fn cell_of(&self, z: [f64; 2]) -> (usize, usize) {
        (self.x3.cell_of(z[0]), self.y3.cell_of(z[1]))
    }

    pub fn cell_box(&self, cx: usize, cy: usize) -> [f64; 4] {
        let x0 = cx as f64 * self.h;
        let y0 = self.ylo() + cy as f64 * self.h;
        [x0, x0 + self.h, y0, y0 + self.h]
    }

    /// Dimension of the full bicubic stream coefficient array.
    pub fn stream_dim(&self) -> usize {
        (self.n + 3) * (self.n + 3)
    }

    /// Tensor Gauss rule on every cell: (z, w, cell).
    pub fn cell_quadrature(&self) -> Vec<([f64; 2], f64, (usize, usize))> {
        let (gx, gw) = gauss_legendre(CELL_GAUSS);
        let mut out = Vec::with_capacity(self.n * self.n * CELL_GAUSS * CELL_GAUSS);
        for cy in 0..self.n {
            for cx in 0..self.n {
                let b = self.cell_box(cx, cy);
                for (yj, wj) in gx.iter().zip(&gw) {
                    for (xi, wi) in gx.iter().zip(&gw) {
                        let z = [b[0] + 0.5 * self.h * (xi + 1.0), b[2] + 0.5 * self.h * (yj + 1.0)];
                        out.push((z, 0.25 * self.h * self.h * wi * wj, (cx, cy)));
                    }
                }
            }
        }
        out
    }
}

/// Mixed partials ∂₁ᵖ∂₂ᑫ of both components, `d[c][p][q]`, p, q ≤ 3.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub d: [[[f64; 4]; 4]; 2],
}

impl Jet {
    pub fn value(&self) -> [f64; 2] {
        [self.d[0][0][0], self.d[1][0][0]]
    }

    /// `g[i][j] = ∂ⱼ uᵢ`.
    pub fn grad(&self) -> [[f64; 2]; 2] {
        [[self.d[0][1][0], self.d[0][0][1]], [self.d[1][1][0], self.d[1][0][1]]]
    }

    pub fn div(&self) -> f64 {
        self.d[0][1][0] + self.d[1][0][1]
    }

    /// (ε₁₁, ε₂₂, ε₁₂).
    pub fn sym_grad(&self) -> [f64; 3] {
        let g = self.grad();
        [g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0])]
    }

    /// `h[i][j][k] = ∂ⱼ∂ₖ uᵢ`.
    pub fn hess(&self) -> [[[f64; 2]; 2]; 2] {
        let mut h = [[[0.0; 2]; 2]; 2];
        for (i, hi) in h.iter_mut().enumerate() {
            hi[0][0] = self.d[i][2][0];
            hi[0][1] = self.d[i][1][1];
            hi[1][0] = self.d[i][1][1];
            hi[1][1] = self.d[i][0][2];
        }
        h
    }

    /// `g[i][j] = ∂ⱼ Δuᵢ`.
    pub fn grad_lap(&self) -> [[f64; 2]; 2] {
        let mut g = [[0.0; 2]; 2];
        for (i, gi) in g.iter_mut().enumerate() {
            gi[0] = self.d[i][3][0] + self.d[i][1][2];
            gi[1] = self.d[i][2][1] + self.d[i][0][3];
        }
        g
    }
}

pub fn sym_sq(e: [f64; 3]) -> f64 {
    e[0] * e[0] + e[1] * e[1] + 2.0 * e[2] * e[2]
}

pub fn sym_dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + 2.0 * a[2] * b[2]
}

pub fn mat_dot(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

/// Vector field with u₁ ∈ S³⊗S² and u₂ ∈ S²⊗S³ (coefficients x-fastest).
#[derive(Debug, Clone)]
pub struct VecField {
    pub grid: FluidGrid,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

/// Scalar field in S²⊗S² (the divergence space), coefficients x-fastest.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: FluidGrid,
    pub c: Vec<f64>,
}

fn d_at(lb: &LocalBasis, k: usize, a: usize) -> f64 {
    if k < 4 {
        lb.d[k][a]
    } else {
        0.0
    }
}

impl VecField {
    pub fn zeros(grid: &FluidGrid) -> Self {
        let n = grid.n;
        VecField { grid: grid.clone(), c1: vec![0.0; (n + 3) * (n + 2)], c2: vec![0.0; (n + 2) * (n + 3)] }
    }

    pub fn len(&self) -> usize {
        self.c1.len() + self.c2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view: c1 then c2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.c1.clone();
        v.extend_from_slice(&self.c2);
        v
    }

    pub fn from_flat(grid: &FluidGrid, v: &[f64]) -> Self {
        let mut f = VecField::zeros(grid);
        let k = f.c1.len();
        f.c1.copy_from_slice(&v[..k]);
        f.c2.copy_from_slice(&v[k..]);
        f
    }

    pub fn axpy(&mut self, a: f64, other: &VecField) {
        for (x, y) in self.c1.iter_mut().zip(&other.c1) {
            *x += a * y;
        }
        for (x, y) in self.c2.iter_mut().zip(&other.c2) {
            *x += a * y;
        }
    }

    pub fn scaled(&self, a: f64) -> VecField {
        let mut f = self.clone();
        f.c1.iter_mut().for_each(|x| *x *= a);
        f.c2.iter_mut().for_each(|x| *x *= a);
        f
    }

    pub fn eval_in_cell(&self, cx: usize, cy: usize, z: [f64; 2], order: usize) -> Jet {
        let g = &self.grid;
        let nd = order.min(3);
        let bx3 = g.x3.eval_in_cell(cx, z[0], nd);
        let bx2 = g.x2.eval_in_cell(cx, z[0], nd);
        let by3 = g.y3.eval_in_cell(cy, z[1], nd);
        let by2 = g.y2.eval_in_cell(cy, z[1], nd);
        let mut jet = Jet::default();
        let (n3, n2) = (g.n + 3, g.n + 2);
        for p in 0..=nd {
            for q in 0..=(nd - p) {
                let mut s1 = 0.0;
                for b in 0..3 {
                    let row = (cy + b) * n3 + cx;
                    for a in 0..4 {
                        s1 += self.c1[row + a] * bx3.d[p][a] * by2.d[q][b];
                    }
                }
                let mut s2 = 0.0;
                for b in 0..4 {
                    let row = (cy + b) * n2 + cx;
                    for a in 0..3 {
                        s2 += self.c2[row + a] * bx2.d[p][a] * by3.d[q][b];
                    }
                }
                jet.d[0][p][q] = s1;
                jet.d[1][p][q] = s2;
            }
        }
        jet
    }

    pub fn eval(&self, z: [f64; 2], order: usize) -> Jet {
        let (cx, cy) = self.grid.cell_of(z);
        self.eval_in_cell(cx, cy, z, order)
    }

    pub fn value(&self, z: [f64; 2]) -> [f64; 2] {
        self.eval(z, 0).value()
    }

    /// Exact divergence in S²⊗S².
    pub fn divergence(&self) -> ScalarField {
        let g = &self.grid;
        let (n3, n2) = (g.n + 3, g.n + 2);
        let mut c = vec![0.0; n2 * n2];
        let dx = g.x3.derivative_entries();
        let dy = g.y3.derivative_entries();
        for j in 0..n2 {
            for &(r, col, w) in &dx {
                c[j * n2 + r] += w * self.c1[j * n3 + col];
            }
        }
        for i in 0..n2 {
            for &(r, col, w) in &dy {
                c[r * n2 + i] += w * self.c2[col * n2 + i];
            }
        }
        ScalarField { grid: g.clone(), c }
    }

    /// Zero the coefficients of basis functions that are nonzero on ∂Ω.
    pub fn clamp_boundary(&mut self) {
        let n = self.grid.n;
        let (n3, n2) = (n + 3, n + 2);
        for j in 0..n2 {
            for i in 0..n3 {
                if i == 0 || i == n3 - 1 || j == 0 || j == n2 - 1 {
                    self.c1[j * n3 + i] = 0.0;
                }
            }
        }
        for j in 0..n3 {
            for i in 0..n2 {
                if i == 0 || i == n2 - 1 || j == 0 || j == n3 - 1 {
                    self.c2[j * n2 + i] = 0.0;
                }
            }
        }
    }

    /// ∫|u|², ∫|∇u|² by cell quadrature.
    pub fn l2_h1_sq(&self) -> (f64, f64) {
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for (z, w, (cx, cy)) in self.grid.cell_quadrature() {
            let j = self.eval_in_cell(cx, cy, z, 1);
            let v = j.value();
            let g = j.grad();
            l2 += w * (v[0] * v[0] + v[1] * v[1]);
            h1 += w * mat_dot(g, g);
        }
        (l2, h1)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.c1.iter().chain(&self.c2).fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

impl ScalarField {
    pub fn zeros(grid: &FluidGrid) -> Self {
        ScalarField { grid: grid.clone(), c: vec![0.0; (grid.n + 2) * (grid.n + 2)] }
    }

    pub fn eval(&self, z: [f64; 2]) -> f64 {
        let g = &self.grid;
        let (cx, cy) = g.cell_of(z);
        let bx = g.x2.eval_in_cell(cx, z[0], 0);
        let by = g.y2.eval_in_cell(cy, z[1], 0);
        let n2 = g.n + 2;
        let mut s = 0.0;
        for b in 0..3 {
            for a in 0..3 {
                s += self.c[(cy + b) * n2 + cx + a] * bx.d[0][a] * by.d[0][b];
            }
        }
        s
    }

    /// Exact integral over Ω.
    pub fn integral(&self) -> f64 {
        let g = &self.grid;
        let ix = g.x2.integrals();
        let iy = g.y2.integrals();
        let n2 = g.n + 2;
        let mut s = 0.0;
        for j in 0..n2 {
            for i in 0..n2 {
                s += self.c[j * n2 + i] * ix[i] * iy[j];
            }
        }
        s
    }

    /// ∫ f² by cell quadrature.
    pub fn l2_sq(&self) -> f64 {
        self.grid.cell_quadrature().iter().map(|(z, w, _)| w * self.eval(*z).powi(2)).sum()
    }
}

/// Tensor L² projection of `f` onto `bx ⊗ by` (coefficients x-fastest).
/// L² projection of a one-variable function onto a spline basis.
pub fn project_1d(b: &Basis1d, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (gx, gw) = gauss_legendre(CELL_GAUSS + 2);
    let mut rhs = vec![0.0; b.dim()];
    for cell in 0..b.cells {
        let x0 = b.a + cell as f64 * b.h;
        for (xi, w) in gx.iter().zip(&gw) {
            let x = x0 + 0.5 * b.h * (xi + 1.0);
            let lb = b.eval_in_cell(cell, x, 0);
            let fx = 0.5 * b.h * w * f(x);
            for a in 0..=b.degree {
                rhs[cell + a] += fx * lb.d[0][a];
            }
        }
    }
    Ok(DenseSpd::factor(b.dim(), &b.gram(0, 0))?.solve(&rhs))
}

pub fn project_tensor(bx: &Basis1d, by: &Basis1d, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    let (nx, ny) = (bx.dim(), by.dim());
    let (gx, gw) = gauss_legendre(CELL_GAUSS + 2);
    let mut rhs = vec![0.0; nx * ny];
    for cy in 0..by.cells {
        let y0 = by.a + cy as f64 * by.h;
        for (yi, wy) in gx.iter().zip(&gw) {
            let y = y0 + 0.5 * by.h * (yi + 1.0);
            let lby = by.eval_in_cell(cy, y, 0);
            for cx in 0..bx.cells {
                let x0 = bx.a + cx as f64 * bx.h;
                for (xi, wx) in gx.iter().zip(&gw) {
                    let x = x0 + 0.5 * bx.h * (xi + 1.0);
                    let lbx = bx.eval_in_cell(cx, x, 0);
                    let w = 0.25 * bx.h * by.h * wx * wy * f(x, y);
                    for b in 0..=by.degree {
                        for a in 0..=bx.degree {
                            rhs[(cy + b) * nx + cx + a] += w * lbx.d[0][a] * lby.d[0][b];
                        }
                    }
                }
            }
        }
    }
    let sx = DenseSpd::factor(nx, &bx.gram(0, 0))?;
    let sy = DenseSpd::factor(ny, &by.gram(0, 0))?;
    // solve along x for every row, then along y for every column
    for j in 0..ny {
        let row = sx.solve(&rhs[j * nx..(j + 1) * nx]);
        rhs[j * nx..(j + 1) * nx].copy_from_slice(&row);
    }
    for i in 0..nx {
        let col: Vec<f64> = (0..ny).map(|j| rhs[j * nx + i]).collect();
        let s = sy.solve(&col);
        for j in 0..ny {
            rhs[j * nx + i] = s[j];
        }
    }
    Ok(rhs)
}

/// Bicubic basis at a point, with the 16 full stream indices it touches.
#[derive(Debug, Clone)]
pub struct LocalStream {
    pub cx: usize,
    pub cy: usize,
    pub idx: [usize; 16],
    bx: LocalBasis,
    by: LocalBasis,
}

impl LocalStream {
    pub fn new(grid: &FluidGrid, z: [f64; 2], nd: usize) -> Self {
        let (cx, cy) = grid.cell_of(z);
        Self::in_cell(grid, cx, cy, z, nd)
    }

    pub fn in_cell(grid: &FluidGrid, cx: usize, cy: usize, z: [f64; 2], nd: usize) -> Self {
        let bx = grid.x3.eval_in_cell(cx, z[0], nd);
        let by = grid.y3.eval_in_cell(cy, z[1], nd);
        let n3 = grid.n + 3;
        let mut idx = [0; 16];
        for b in 0..4 {
            for a in 0..4 {
                idx[4 * b + a] = (cy + b) * n3 + cx + a;
            }
        }
        LocalStream { cx, cy, idx, bx, by }
    }

    /// ∂₁ᵖ∂₂ᑫ of local basis `k = 4b + a`.
    #[inline]
    pub fn dpsi(&self, k: usize, p: usize, q: usize) -> f64 {
        d_at(&self.bx, p, k % 4) * d_at(&self.by, q, k / 4)
    }

    /// Jet of curl of local basis `k`, up to total order `order`.
    pub fn jet(&self, k: usize, order: usize) -> Jet {
        let mut j = Jet::default();
        for p in 0..=order {
            for q in 0..=(order - p) {
                j.d[0][p][q] = self.dpsi(k, p, q + 1);
                j.d[1][p][q] = -self.dpsi(k, p + 1, q);
            }
        }
        j
    }

    pub fn u(&self, k: usize) -> [f64; 2] {
        [self.dpsi(k, 0, 1), -self.dpsi(k, 1, 0)]
    }

    /// Jet of u = curl ψ for full coefficients `c`.
    pub fn field_jet(&self, c: &[f64], order: usize) -> Jet {
        let mut out = Jet::default();
        for (k, &i) in self.idx.iter().enumerate() {
            let ck = c[i];
            if ck == 0.0 {
                continue;
            }
            let j = self.jet(k, order);
            for comp in 0..2 {
                for p in 0..4 {
                    for q in 0..4 {
                        out.d[comp][p][q] += ck * j.d[comp][p][q];
                    }
                }
            }
        }
        out
    }
}

/// The clamped stream-function space: free parameters p map to full bicubic coefficients
/// c = T p with ψ = ∂ₙψ = 0 on ∂Ω and ∂₁₁ψ = 0 at the beam ends (0,0) and (ℓ,0).
#[derive(Debug, Clone)]
pub struct StreamSpace {
    pub grid: FluidGrid,
    pub nfree: usize,
    pub t: CsrMatrix<f64>,
}

impl StreamSpace {
    pub fn new(grid: &FluidGrid) -> Self {
        let n = grid.n;
        let n3 = n + 3;
        // corner rows: a_j = M_j(0) for the two edge columns i = 2 and i = n
        let lby = grid.y3.eval(0.0, 0);
        let weights: Vec<(usize, f64)> =
            (0..4).map(|b| (lby.first + b, lby.d[0][b])).filter(|(_, w)| w.abs() > 1e-14).collect();
        let pivot = weights.iter().cloned().fold((0, 0.0), |m, x| if x.1 > m.1 { x } else { m });
        let mut free_of = vec![usize::MAX; n3 * n3];
        let mut nfree = 0;
        for j in 2..=n {
            for i in 2..=n {
                if (i == 2 || i == n) && j == pivot.0 {
                    continue;
                }
                free_of[j * n3 + i] = nfree;
                nfree += 1;
            }
        }
        let mut t = Triplets::new(n3 * n3, nfree);
        for (k, &f) in free_of.iter().enumerate() {
            if f != usize::MAX {
                t.push(k, f, 1.0);
            }
        }
        for i in [2, n] {
            let prow = pivot.0 * n3 + i;
            for &(j, w) in &weights {
                if j != pivot.0 {
                    t.push(prow, free_of[j * n3 + i], -w / pivot.1);
                }
            }
        }
        StreamSpace { grid: grid.clone(), nfree, t: t.to_csr() }
    }

    pub fn to_full(&self, p: &[f64]) -> Vec<f64> {
        spmv(&self.t, p)
    }

    /// Tᵀ g: pulls a gradient over full coefficients back to free parameters.
    pub fn pull_back(&self, g_full: &[f64]) -> Vec<f64> {
        spmv_t(&self.t, g_full)
    }

    /// Exact curl of full coefficients into the vector-field space.
    pub fn curl_full(grid: &FluidGrid, c: &[f64]) -> VecField {
        let n = grid.n;
        let (n3, n2) = (n + 3, n + 2);
        let mut f = VecField::zeros(grid);
        let dx = grid.x3.derivative_entries();
        let dy = grid.y3.derivative_entries();
        // u₁ = ∂₂ψ ∈ S³⊗S²
        for i in 0..n3 {
            for &(r, col, w) in &dy {
                f.c1[r * n3 + i] += w * c[col * n3 + i];
            }
        }
        // u₂ = −∂₁ψ ∈ S²⊗S³
        for j in 0..n3 {
            for &(r, col, w) in &dx {
                f.c2[j * n2 + r] -= w * c[j * n3 + col];
            }
        }
        f
    }

    pub fn curl(&self, p: &[f64]) -> VecField {
        Self::curl_full(&self.grid, &self.to_full(p))
    }
}

/// Piecewise-constant densities and viscosities over a labelled quadrature.
#[derive(Debug, Clone)]
pub struct MaterialBlend {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub cells: Vec<(usize, usize)>,
    pub labels: Vec<RegionLabel>,
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
}

impl MaterialBlend {
    pub fn area(&self, label: RegionLabel) -> f64 {
        self.weights.iter().zip(&self.labels).filter(|(_, l)| **l == label).map(|(w, _)| w).sum()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lower and upper curve height over [x0, x1] (sampled, widened by `pad`).
fn height_range(curve: &BeamCurve, x0: f64, x1: f64, pad: f64) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..=16 {
        let z1 = x0 + (x1 - x0) * k as f64 / 16.0;
        let y = curve.height_at(z1.clamp(0.0, curve.ell))?;
        lo = lo.min(y);
        hi = hi.max(y);
    }
    Ok((lo - pad, hi + pad))
}

/// Labelled quadrature of Ω for the current curve; cut cells are refined `CUT_REFINE`-fold per
/// direction and interface points are split into one Plus and one Minus half-weight sample.
pub fn blend_materials(grid: &FluidGrid, curve: &BeamCurve, rho_pm: [f64; 2], mu_pm: [f64; 2]) -> Result<MaterialBlend> {
    let (gx, gw) = gauss_legendre(CELL_GAUSS);
    let mut out = MaterialBlend {
        points: Vec::new(),
        weights: Vec::new(),
        cells: Vec::new(),
        labels: Vec::new(),
        rho: Vec::new(),
        mu: Vec::new(),
    };
    let push = |out: &mut MaterialBlend, z: [f64; 2], w: f64, cell: (usize, usize), l: RegionLabel| {
        let k = if l == RegionLabel::Plus { 0 } else { 1 };
        out.points.push(z);
        out.weights.push(w);
        out.cells.push(cell);
        out.labels.push(l);
        out.rho.push(rho_pm[k]);
        out.mu.push(mu_pm[k]);
    };
    for cx in 0..grid.n {
        let b0 = grid.cell_box(cx, 0);
        let (lo, hi) = height_range(curve, b0[0], b0[1], 0.1 * grid.h)?;
        for cy in 0..grid.n {
            let b = grid.cell_box(cx, cy);
            let cut = b[3] >= lo && b[2] <= hi;
            let sub = if cut { CUT_REFINE } else { 1 };
            let hs = grid.h / sub as f64;
            let fixed = if cut {
                None
            } else if b[2] > hi {
                Some(RegionLabel::Plus)
            } else {
                Some(RegionLabel::Minus)
            };
            for sy in 0..sub {
                for sx in 0..sub {
                    let x0 = b[0] + sx as f64 * hs;
                    let y0 = b[2] + sy as f64 * hs;
                    for (yj, wj) in gx.iter().zip(&gw) {
                        for (xi, wi) in gx.iter().zip(&gw) {
                            let z = [x0 + 0.5 * hs * (xi + 1.0), y0 + 0.5 * hs * (yj + 1.0)];
                            let w = 0.25 * hs * hs * wi * wj;
                            let l = match fixed {
                                Some(l) => l,
                                None => curve.classify(z, 1e-12 * grid.ell)?,
                            };
                            if l == RegionLabel::Interface {
                                push(&mut out, z, 0.5 * w, (cx, cy), RegionLabel::Plus);
                                push(&mut out, z, 0.5 * w, (cx, cy), RegionLabel::Minus);
                            } else {
                                push(&mut out, z, w, (cx, cy), l);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// ∫ μ |ε(u)|² over the blend quadrature.
pub fn sym_gradient_energy(u: &VecField, blend: &MaterialBlend) -> f64 {
    let mut s = 0.0;
    for k in 0..blend.len() {
        let (cx, cy) = blend.cells[k];
        let e = u.eval_in_cell(cx, cy, blend.points[k], 1).sym_grad();
        s += blend.weights[k] * blend.mu[k] * sym_sq(e);
    }
    s
}

/// δ₀ ∫ |∇Δu|² by cell quadrature (third derivatives taken cellwise).
pub fn hyperviscosity_energy(u: &VecField, delta0: f64) -> f64 {
    if delta0 == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (z, w, (cx, cy)) in u.grid.cell_quadrature() {
        let g = u.eval_in_cell(cx, cy, z, 3).grad_lap();
        s += w * mat_dot(g, g);
    }
    delta0 * s
}

/// Velocity samples; errors for points outside Ω̄.
pub fn sample_velocity(u: &VecField, points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .map(|&z| if u.grid.contains(z) { Ok(u.value(z)) } else { Err(FsiError::OutsideDomain(z[0], z[1])) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Forcing {
    /// f = 0.
    None,
    /// f = (0, −g).
    Gravity { g: f64 },
    /// f = (0, a·sin(πz₁/ℓ)) for t < t_off, zero afterwards.
    Lift { a: f64, t_off: f64 },
    /// f = a·(−z₂, z₁ − ℓ/2).
    Vortex { a: f64 },
    /// Bilinear interpolation of samples on an (nx+1)×(ny+1) lattice over Ω, x-fastest.
    Gridded { nx: usize, ny: usize, f1: Vec<f64>, f2: Vec<f64> },
}

impl Forcing {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FsiError::InvalidParam(m.into()));
        match self {
            Forcing::Gridded { nx, ny, f1, f2 } => {
                let k = (nx + 1) * (ny + 1);
                if *nx == 0 || *ny == 0 || f1.len() != k || f2.len() != k {
                    return bad("gridded forcing needs (nx+1)*(ny+1) samples per component");
                }
                if f1.iter().chain(f2).any(|v| !v.is_finite()) {
                    return bad("gridded forcing has non-finite samples");
                }
                Ok(())
            }
            Forcing::Gravity { g } if !g.is_finite() => bad("gravity must be finite"),
            Forcing::Lift { a, .. } | Forcing::Vortex { a } if !a.is_finite() => bad("forcing amplitude must be finite"),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64, z: [f64; 2], ell: f64) -> [f64; 2] {
        match self {
            Forcing::None => [0.0, 0.0],
            Forcing::Gravity { g } => [0.0, -g],
            Forcing::Lift { a, t_off } => {
                if t < *t_off {
                    [0.0, a * (std::f64::consts::PI * z[0] / ell).sin()]
                } else {
                    [0.0, 0.0]
                }
            }
            Forcing::Vortex { a } => [-a * z[1], a * (z[0] - 0.5 * ell)],
            Forcing::Gridded { nx, ny, f1, f2 } => {
                let sx = (z[0] / ell * *nx as f64).clamp(0.0, *nx as f64);
                let sy = ((z[1] + 0.5 * ell) / ell * *ny as f64).clamp(0.0, *ny as f64);
                let i = (sx.floor() as usize).min(nx - 1);
                let j = (sy.floor() as usize).min(ny - 1);
                let (fx, fy) = (sx - i as f64, sy - j as f64);
                let at = |v: &Vec<f64>, a: usize, b: usize| v[b * (nx + 1) + a];
                let bil = |v: &Vec<f64>| {
                    (1.0 - fx) * (1.0 - fy) * at(v, i, j)
                        + fx * (1.0 - fy) * at(v, i + 1, j)
                        + (1.0 - fx) * fy * at(v, i, j + 1)
                        + fx * fy * at(v, i + 1, j + 1)
                };
                [bil(f1), bil(f2)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> FluidGrid {
        FluidGrid::new(1.0, n).unwrap()
    }

    fn random_stream(space: &StreamSpace, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..space.nfree).map(|_| rng.gen::<f64>() - 0.5).collect()
    }

    /// Cox–de Boor recursion, used as an independent evaluation path.
    fn cox_de_boor(b: &Basis1d, i: usize, p: usize, x: f64) -> f64 {
        let mut knots = vec![b.a; b.degree];
        for k in 0..=b.cells {
            knots.push(b.a + k as f64 * b.h);
        }
        knots.extend(vec![b.b; b.degree]);
        fn rec(t: &[f64], i: usize, p: usize, x: f64, last: f64) -> f64 {
            if p == 0 {
                let inside = (t[i] <= x && x < t[i + 1]) || (x == last && t[i] < x && t[i + 1] == x);
                return if inside { 1.0 } else { 0.0 };
            }
            let mut s = 0.0;
            if t[i + p] > t[i] {
                s += (x - t[i]) / (t[i + p] - t[i]) * rec(t, i, p - 1, x, last);
            }
            if t[i + p + 1] > t[i + 1] {
                s += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * rec(t, i + 1, p - 1, x, last);
            }
            s
        }
        rec(&knots, i, p, x, b.b)
    }

    #[test]
    fn constant_stream_gives_zero_velocity() {
        let g = grid(8);
        let c = vec![2.5; g.stream_dim()];
        let u = StreamSpace::curl_full(&g, &c);
        assert!(u.max_abs_coeff() < 1e-12);
    }

    #[test]
    fn bilinear_stream_gives_hyperbolic_flow() {
        let g = grid(8);
        let n3 = g.n + 3;
        let mut c = vec![0.0; g.stream_dim()];
        for j in 0..n3 {
            for i in 0..n3 {
                c[j * n3 + i] = g.x3.greville(i) * g.y3.greville(j);
            }
        }
        let u = StreamSpace::curl_full(&g, &c);
        for &z in &[[0.31, 0.12], [0.77, -0.4], [0.5, 0.0]] {
            let v = u.value(z);
            assert!((v[0] - z[0]).abs() < 1e-13 && (v[1] + z[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn divergence_free_and_no_slip() {
        let g = grid(10);
        let s = StreamSpace::new(&g);
        let p = random_stream(&s, 1);
        let norm = crate::linalg::norm(&p);
        let u = s.curl(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let z = [rng.gen::<f64>(), rng.gen::<f64>() - 0.5];
            assert!(u.eval(z, 1).div().abs() <= 1e-12 * norm);
        }
        assert!(u.divergence().c.iter().all(|v| v.abs() < 1e-12 * norm));
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            for z in [[t, -0.5], [t, 0.5], [0.0, t - 0.5], [1.0, t - 0.5]] {
                let v = u.value(z);
                assert!(v[0].abs() < 1e-12 * norm && v[1].abs() < 1e-12 * norm, "{z:?} {v:?}");
            }
        }
    }

    #[test]
    fn corner_constraint_kills_end_slope() {
        let g = grid(12);
        let s = StreamSpace::new(&g);
        let u = s.curl(&random_stream(&s, 3));
        for z in [[0.0, 0.0], [1.0, 0.0]] {
            let gr = u.eval(z, 1).grad();
            assert!(gr[0][0].abs() < 1e-12 && gr[1][0].abs() < 1e-12, "{gr:?}");
        }
    }

    #[test]
    fn stream_jets_match_vector_field() {
        let g = grid(9);
        let s = StreamSpace::new(&g);
        let c = s.to_full(&random_stream(&s, 4));
        let u = StreamSpace::curl_full(&g, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let z = [rng.gen::<f64>(), rng.gen::<f64>() - 0.5];
            let a = u.eval(z, 3);
            let b = LocalStream::new(&g, z, 3).field_jet(&c, 3);
            for comp in 0..2 {
                for p in 0..4 {
                    for q in 0..(4 - p) {
                        assert!((a.d[comp][p][q] - b.d[comp][p][q]).abs() < 1e-9 * (1.0 + a.d[comp][p][q].abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn basis_matches_cox_de_boor() {
        let g = grid(8);
        let s = StreamSpace::new(&g);
        let c = s.to_full(&random_stream(&s, 6));
        let n3 = g.n + 3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let z = [rng.gen::<f64>(), rng.gen::<f64>() - 0.5];
            let mut psi = 0.0;
            for j in 0..n3 {
                let my = cox_de_boor(&g.y3, j, 3, z[1]);
                if my == 0.0 {
                    continue;
                }
                for i in 0..n3 {
                    psi += c[j * n3 + i] * cox_de_boor(&g.x3, i, 3, z[0]) * my;
                }
            }
            let ls = LocalStream::new(&g, z, 0);
            let direct: f64 = (0..16).map(|k| c[ls.idx[k]] * ls.dpsi(k, 0, 0)).sum();
            assert!((psi - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_velocity_errors_outside() {
        let g = grid(8);
        let u = VecField::zeros(&g);
        assert!(sample_velocity(&u, &[[0.5, 0.0]]).is_ok());
        assert!(matches!(sample_velocity(&u, &[[1.5, 0.0]]), Err(FsiError::OutsideDomain(..))));
    }

    #[test]
    fn rotation_has_no_strain_and_harmonic_no_hyperviscosity() {
        let g = grid(8);
        let rest = BeamCurve::rest(1.0, 8);
        let blend = blend_materials(&g, &rest, [1.0, 1.0], [1.0, 1.0]).unwrap();
        let rot = project_tensor(&g.x3, &g.y3, |x, y| 0.5 * (x * x + y * y)).unwrap();
        let u = StreamSpace::curl_full(&g, &rot);
        assert!(sym_gradient_energy(&u, &blend) < 1e-20);
        let harm = project_tensor(&g.x3, &g.y3, |x, y| x * x - y * y + x * y).unwrap();
        let u = StreamSpace::curl_full(&g, &harm);
        let hv = hyperviscosity_energy(&u, 1.0);
        assert!(hv < 1e-15, "{hv}");
        assert_eq!(hyperviscosity_energy(&u, 0.0), 0.0);
    }

    #[test]
    fn trigonometric_strain_energy() {
        // ∫|ε(u)|² = (ℓ²/4)[2a²b² + (b² − a²)²/2] with a = π, b = 2π, ℓ = 1
        let g = grid(32);
        let pi = std::f64::consts::PI;
        let c = project_tensor(&g.x3, &g.y3, |x, y| (pi * x).sin() * (2.0 * pi * y + pi).sin()).unwrap();
        let u = StreamSpace::curl_full(&g, &c);
        let blend = blend_materials(&g, &BeamCurve::rest(1.0, 8), [1.0, 1.0], [1.0, 1.0]).unwrap();
        let want = 0.25 * (2.0 * pi.powi(2) * 4.0 * pi.powi(2) + 0.5 * (3.0 * pi * pi).powi(2));
        let got = sym_gradient_energy(&u, &blend);
        assert!((got - want).abs() < 1e-4 * want, "got {got} want {want}");
    }

    #[test]
    fn korn_constant_is_one_half() {
        let g = grid(10);
        let s = StreamSpace::new(&g);
        let blend = blend_materials(&g, &BeamCurve::rest(1.0, 8), [1.0, 1.0], [1.0, 1.0]).unwrap();
        for seed in 0..5 {
            let u = s.curl(&random_stream(&s, 10 + seed));
            let e = sym_gradient_energy(&u, &blend);
            let (_, h1) = u.l2_h1_sq();
            assert!((e / h1 - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn blend_rest_curve_is_exact() {
        let g = grid(8);
        let b = blend_materials(&g, &BeamCurve::rest(1.0, 8), [2.0, 3.0], [5.0, 7.0]).unwrap();
        for k in 0..b.len() {
            let above = b.points[k][1] > 0.0;
            assert_eq!(b.labels[k] == RegionLabel::Plus, above);
            assert_eq!(b.rho[k], if above { 2.0 } else { 3.0 });
            assert_eq!(b.mu[k], if above { 5.0 } else { 7.0 });
        }
        let pa = b.area(RegionLabel::Plus);
        assert!((pa - 0.5).abs() < 1e-12, "{pa}");
        assert!((b.area(RegionLabel::Minus) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn blend_sine_area() {
        let g = grid(64);
        let amp = 0.2;
        let b = blend_materials(&g, &BeamCurve::sine(1.0, 32, amp), [1.0, 2.0], [1.0, 1.0]).unwrap();
        let plus = b.area(RegionLabel::Plus);
        let want = 0.5 - 0.5 * amp;
        assert!((plus - want).abs() < 0.01 * want);
        let tot = plus + b.area(RegionLabel::Minus);
        assert!((tot - 1.0).abs() < 1e-11, "{tot}");
        assert!(b.rho.iter().all(|&r| r == 1.0 || r == 2.0));
    }

    #[test]
    fn projection_reproduces_cubics() {
        let g = grid(8);
        let c = project_tensor(&g.x3, &g.y3, |x, y| x * x * x - 2.0 * x * y * y + y).unwrap();
        let ls = LocalStream::new(&g, [0.3, 0.2], 0);
        let v: f64 = (0..16).map(|k| c[ls.idx[k]] * ls.dpsi(k, 0, 0)).sum();
        assert!((v - (0.027 - 2.0 * 0.3 * 0.04 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn forcing_presets() {
        let f = Forcing::Gravity { g: 2.0 };
        assert_eq!(f.eval(0.0, [0.3, 0.1], 1.0), [0.0, -2.0]);
        let l = Forcing::Lift { a: 1.0, t_off: 0.5 };
        assert!((l.eval(0.1, [0.5, 0.0], 1.0)[1] - 1.0).abs() < 1e-15);
        assert_eq!(l.eval(0.6, [0.5, 0.0], 1.0), [0.0, 0.0]);
        let gr = Forcing::Gridded { nx: 1, ny: 1, f1: vec![0.0, 1.0, 0.0, 1.0], f2: vec![0.0; 4] };
        gr.validate().unwrap();
        assert!((gr.eval(0.0, [0.25, 0.0], 1.0)[0] - 0.25).abs() < 1e-15);
        assert!(Forcing::Gridded { nx: 2, ny: 1, f1: vec![], f2: vec![] }.validate().is_err());
    }
}
