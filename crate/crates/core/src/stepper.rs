//! Minimizing-movements stepper: the per-substep functional over stream dofs, its
//! preconditioned L-BFGS minimization, marker flow maps, windows of the time-delayed
//! problem and their concatenation.

use std::collections::VecDeque;

use nalgebra_sparse::{CscMatrix, CsrMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{
    derivative_gram, elastic_energy, elastic_gradient_full, elastic_hessian_full, seminorm_sq, BeamParams,
    EnergyBreakdown,
};
use crate::error::{FsiError, Result};
use crate::fluid::{
    blend_materials, mat_dot, sym_dot, sym_sq, FluidGrid, Forcing, LocalStream, MaterialBlend, StreamSpace,
    VecField,
};
use crate::geometry::{pinned_dofs, BeamCurve, RegionLabel};
use crate::linalg::{dot, norm, spmv, spmv_t, SparseSpd, Triplets};
use crate::quad::gauss_legendre;

/// L-BFGS memory.
const LBFGS_MEMORY: usize = 8;
/// Iteration cap per substep.
const MAX_ITER: usize = 400;
/// Number of fixed Euler–Lagrange test directions.
const BATTERY: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeParams {
    /// Window length (acceleration scale).
    pub h: f64,
    /// Substeps per window N, τ = h/N.
    pub substeps: usize,
    /// δ₀ = h^α₀.
    pub alpha0: f64,
    /// Solid dissipation regularizer.
    #[serde(default)]
    pub eps0: f64,
    /// Final time.
    pub t_final: f64,
}

impl SchemeParams {
    pub fn tau(&self) -> f64 {
        self.h / self.substeps as f64
    }

    pub fn delta0(&self) -> f64 {
        self.h.powf(self.alpha0)
    }

    pub fn windows(&self) -> usize {
        (self.t_final / self.h - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FsiError::InvalidParam(m));
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("h must be positive, got {}", self.h));
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if !(self.alpha0 > 0.0 && self.alpha0 < 1.0) {
            return bad(format!("alpha0 must lie in (0,1), got {}", self.alpha0));
        }
        if !(self.eps0 >= 0.0 && self.eps0.is_finite()) {
            return bad(format!("eps0 must be nonnegative, got {}", self.eps0));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final must be nonnegative, got {}", self.t_final));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    pub beam: BeamParams,
    pub rho_plus: f64,
    pub rho_minus: f64,
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub forcing: Forcing,
}

impl Physics {
    pub fn rho_pm(&self) -> [f64; 2] {
        [self.rho_plus, self.rho_minus]
    }

    pub fn mu_pm(&self) -> [f64; 2] {
        [self.mu_plus, self.mu_minus]
    }

    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        for (name, v) in
            [("rho_plus", self.rho_plus), ("rho_minus", self.rho_minus), ("mu_plus", self.mu_plus), ("mu_minus", self.mu_minus)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FsiError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        self.forcing.validate()
    }
}

/// Initial fluid velocity, given through its stream function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialVelocity {
    Zero,
    /// ψ₀ = aℓ/π · sin⁴(πx/ℓ) cos²(πy/ℓ).
    Swirl { amplitude: f64 },
}

/// Free stream parameters of an initial velocity (least-squares fit of Greville samples).
pub fn initial_stream(space: &StreamSpace, iv: &InitialVelocity) -> Result<Vec<f64>> {
    let a = match iv {
        InitialVelocity::Zero => return Ok(vec![0.0; space.nfree]),
        InitialVelocity::Swirl { amplitude } => *amplitude,
    };
    let g = &space.grid;
    let k = std::f64::consts::PI / g.ell;
    let n3 = g.n + 3;
    let mut c = vec![0.0; g.stream_dim()];
    for j in 0..n3 {
        let y = g.y3.greville(j);
        for i in 0..n3 {
            let x = g.x3.greville(i);
            c[j * n3 + i] = a * g.ell / std::f64::consts::PI * (k * x).sin().powi(4) * (k * y).cos().powi(2);
        }
    }
    let tt = space.t.transpose();
    let gram = &tt * &space.t;
    SparseSpd::factor(&CscMatrix::from(&gram)).map(|s| s.solve(&space.pull_back(&c)))
}

/// Indices of the 16 bicubic coefficients supported on cell (cx, cy), local order 4b + a.
pub fn cell_indices(grid: &FluidGrid, cx: usize, cy: usize) -> [usize; 16] {
    let n3 = grid.n + 3;
    let mut idx = [0; 16];
    for b in 0..4 {
        for a in 0..4 {
            idx[4 * b + a] = (cy + b) * n3 + cx + a;
        }
    }
    idx
}

fn blocks_to_csr(grid: &FluidGrid, blocks: &[[f64; 256]]) -> CsrMatrix<f64> {
    let n = grid.n;
    let mut t = Triplets::new(grid.stream_dim(), grid.stream_dim());
    for cy in 0..n {
        for cx in 0..n {
            t.add_block(&cell_indices(grid, cx, cy), &blocks[cy * n + cx]);
        }
    }
    t.to_csr()
}

fn dense_to_csr(n: usize, a: &[f64]) -> CsrMatrix<f64> {
    let mut t = Triplets::new(n, n);
    for r in 0..n {
        for c in 0..n {
            t.push(r, c, a[r * n + c]);
        }
    }
    t.to_csr()
}

fn scaled(m: &CsrMatrix<f64>, s: f64) -> CsrMatrix<f64> {
    let mut out = m.clone();
    out.values_mut().iter_mut().for_each(|v| *v *= s);
    out
}

/// Dofs of η − (x, 0); the identity part has no third derivative.
pub fn displacement(curve: &BeamCurve) -> Vec<f64> {
    let mut d = curve.dofs.clone();
    for i in 0..=curve.m {
        d[6 * i] -= curve.node_x(i);
        d[6 * i + 2] -= 1.0;
    }
    d
}

/// √δ₀/2 ‖∂ₓ³η‖².
pub fn third_reg(curve: &BeamCurve, delta0: f64) -> f64 {
    0.5 * delta0.sqrt() * seminorm_sq(curve, &displacement(curve), 3)
}

pub(crate) fn dense_matvec(n: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    (0..n).map(|r| dot(&a[r * n..(r + 1) * n], x)).collect()
}

/// Rows mapping full stream coefficients to the nodal Hermite dofs of Π(curl ψ ∘ η):
/// value, first and second x-derivative per node and component. Pinned rows are left empty.
pub fn stream_trace(grid: &FluidGrid, curve: &BeamCurve) -> Triplets {
    let mut t = Triplets::new(6 * (curve.m + 1), grid.stream_dim());
    let pinned = pinned_dofs(curve.m);
    for node in 0..=curve.m {
        let d = |r: usize| [curve.dofs[6 * node + 2 * r], curve.dofs[6 * node + 2 * r + 1]];
        let (z, t1, t2) = (d(0), d(1), d(2));
        let ls = LocalStream::new(grid, z, 3);
        for (k, &col) in ls.idx.iter().enumerate() {
            let j = ls.jet(k, 2);
            for c in 0..2 {
                let g = [j.d[c][1][0], j.d[c][0][1]];
                let hs = [[j.d[c][2][0], j.d[c][1][1]], [j.d[c][1][1], j.d[c][0][2]]];
                let first = g[0] * t1[0] + g[1] * t1[1];
                let mut second = g[0] * t2[0] + g[1] * t2[1];
                for a in 0..2 {
                    for b in 0..2 {
                        second += hs[a][b] * t1[a] * t1[b];
                    }
                }
                for (r, v) in [j.d[c][0][0], first, second].into_iter().enumerate() {
                    let row = 6 * node + 2 * r + c;
                    if !pinned.contains(&row) {
                        t.push(row, col, v);
                    }
                }
            }
        }
    }
    t
}

/// Static discretization shared by all substeps of a run.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: FluidGrid,
    pub space: StreamSpace,
    pub m: usize,
    pub phys: Physics,
    pub scheme: SchemeParams,
    /// Tᵀ(∫∇Δ:∇Δ)T over free stream parameters.
    pub hyper: CsrMatrix<f64>,
    /// Beam L² Gram matrix.
    pub m0: Vec<f64>,
    /// Beam Gram matrix of third derivatives.
    pub d3: Vec<f64>,
    pub battery: Vec<Vec<f64>>,
    tt: CsrMatrix<f64>,
}

impl Model {
    pub fn new(ell: f64, n: usize, m: usize, phys: Physics, scheme: SchemeParams) -> Result<Self> {
        phys.validate()?;
        scheme.validate()?;
        if m < 2 {
            return Err(FsiError::InvalidParam(format!("beam needs at least 2 elements, got {m}")));
        }
        let grid = FluidGrid::new(ell, n)?;
        let space = StreamSpace::new(&grid);
        let tt = space.t.transpose();
        let (gx, gw) = gauss_legendre(crate::fluid::CELL_GAUSS);
        let blocks: Vec<[f64; 256]> = (0..n * n)
            .into_par_iter()
            .map(|c| {
                let (cx, cy) = (c % n, c / n);
                let b = grid.cell_box(cx, cy);
                let mut loc = [0.0; 256];
                for (yj, wj) in gx.iter().zip(&gw) {
                    for (xi, wi) in gx.iter().zip(&gw) {
                        let z = [b[0] + 0.5 * grid.h * (xi + 1.0), b[2] + 0.5 * grid.h * (yj + 1.0)];
                        let w = 0.25 * grid.h * grid.h * wi * wj;
                        let ls = LocalStream::in_cell(&grid, cx, cy, z, 3);
                        let gl: Vec<[[f64; 2]; 2]> = (0..16).map(|k| ls.jet(k, 3).grad_lap()).collect();
                        for a in 0..16 {
                            for bb in 0..16 {
                                loc[16 * a + bb] += w * mat_dot(gl[a], gl[bb]);
                            }
                        }
                    }
                }
                loc
            })
            .collect();
        let full = blocks_to_csr(&grid, &blocks);
        let hyper = &(&tt * &full) * &space.t;
        let rest = BeamCurve::rest(ell, m);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let battery = (0..BATTERY)
            .map(|_| {
                let d: Vec<f64> = (0..space.nfree).map(|_| rng.gen::<f64>() - 0.5).collect();
                let s = 1.0 / norm(&d);
                d.into_iter().map(|x| x * s).collect()
            })
            .collect();
        Ok(Model {
            m0: derivative_gram(&rest, 0),
            d3: derivative_gram(&rest, 3),
            grid,
            space,
            m,
            phys,
            scheme,
            hyper,
            battery,
            tt,
        })
    }

    pub fn ell(&self) -> f64 {
        self.grid.ell
    }

    pub fn nbeam(&self) -> usize {
        6 * (self.m + 1)
    }

    /// Tᵀ A T for a matrix over full stream coefficients.
    pub fn pull_back(&self, full: &CsrMatrix<f64>) -> CsrMatrix<f64> {
        &(&self.tt * full) * &self.space.t
    }

    /// Beam trace map over free stream parameters at `curve`.
    pub fn trace(&self, curve: &BeamCurve) -> CsrMatrix<f64> {
        &stream_trace(&self.grid, curve).to_csr() * &self.space.t
    }
}

/// Material markers on a (2n)×(2n) lattice of cell Gauss points; `reference` holds the
/// positions at the current window start and `jac` the tracked deformation gradients
/// (row-major) since then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMap {
    pub side: usize,
    pub reference: Vec<[f64; 2]>,
    pub pos: Vec<[f64; 2]>,
    pub jac: Vec<[f64; 4]>,
    pub mass: Vec<f64>,
    pub clamp_events: usize,
}

const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

fn shoelace(p: [[f64; 2]; 4]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let (a, b) = (p[i], p[(i + 1) % 4]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

impl FlowMap {
    pub fn seed(grid: &FluidGrid, curve: &BeamCurve, rho_pm: [f64; 2]) -> Result<Self> {
        let (g, _) = gauss_legendre(2);
        let side = 2 * grid.n;
        let coord = |k: usize, lo: f64| lo + (k / 2) as f64 * grid.h + 0.5 * grid.h * (1.0 + g[k % 2]);
        let mut pos = Vec::with_capacity(side * side);
        let mut mass = Vec::with_capacity(side * side);
        let w = 0.25 * grid.h * grid.h;
        for jj in 0..side {
            for ii in 0..side {
                let z = [coord(ii, 0.0), coord(jj, grid.ylo())];
                let rho = match curve.classify(z, 1e-12 * grid.ell)? {
                    RegionLabel::Plus => rho_pm[0],
                    RegionLabel::Minus => rho_pm[1],
                    RegionLabel::Interface => 0.5 * (rho_pm[0] + rho_pm[1]),
                };
                pos.push(z);
                mass.push(rho * w);
            }
        }
        let jac = vec![IDENTITY; pos.len()];
        Ok(FlowMap { side, reference: pos.clone(), pos, jac, mass, clamp_events: 0 })
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    /// Restarts the window: current positions become the reference.
    pub fn rebase(&mut self) {
        self.reference = self.pos.clone();
        self.jac.iter_mut().for_each(|f| *f = IDENTITY);
    }

    /// Explicit Euler push Y ← Y + τV, F ← (I + τ∇u)F, positions clamped to Ω̄.
    pub fn push(&mut self, vel: &[[f64; 2]], grad: &[[[f64; 2]; 2]], tau: f64, ell: f64) {
        for (f, g) in self.jac.iter_mut().zip(grad) {
            let a = [1.0 + tau * g[0][0], tau * g[0][1], tau * g[1][0], 1.0 + tau * g[1][1]];
            *f = [
                a[0] * f[0] + a[1] * f[2],
                a[0] * f[1] + a[1] * f[3],
                a[2] * f[0] + a[3] * f[2],
                a[2] * f[1] + a[3] * f[3],
            ];
        }
        for (z, v) in self.pos.iter_mut().zip(vel) {
            let mut y = [z[0] + tau * v[0], z[1] + tau * v[1]];
            let c = [y[0].clamp(0.0, ell), y[1].clamp(-0.5 * ell, 0.5 * ell)];
            if c != y {
                self.clamp_events += 1;
                y = c;
            }
            *z = y;
        }
    }

    /// det∇Φ per marker from the tracked deformation gradients.
    pub fn jacobians(&self) -> Vec<f64> {
        self.jac.iter().map(|f| f[0] * f[3] - f[1] * f[2]).collect()
    }

    /// Lattice-quad area ratios, current over reference.
    pub fn area_ratios(&self) -> Vec<f64> {
        let s = self.side;
        let mut out = Vec::with_capacity((s - 1) * (s - 1));
        for j in 0..s - 1 {
            for i in 0..s - 1 {
                let k = [j * s + i, j * s + i + 1, (j + 1) * s + i + 1, (j + 1) * s + i];
                let a0 = shoelace(k.map(|q| self.reference[q]));
                let a1 = shoelace(k.map(|q| self.pos[q]));
                out.push(a1 / a0);
            }
        }
        out
    }

    /// Largest ratio |Φ(X)−Φ(Y)|/|X−Y| over lattice neighbours.
    pub fn max_stretch(&self) -> f64 {
        let s = self.side;
        let mut m = 0.0f64;
        let ratio = |a: usize, b: usize| {
            let d0 = (self.reference[a][0] - self.reference[b][0]).hypot(self.reference[a][1] - self.reference[b][1]);
            let d1 = (self.pos[a][0] - self.pos[b][0]).hypot(self.pos[a][1] - self.pos[b][1]);
            d1 / d0
        };
        for j in 0..s {
            for i in 0..s {
                if i + 1 < s {
                    m = m.max(ratio(j * s + i, j * s + i + 1));
                }
                if j + 1 < s {
                    m = m.max(ratio(j * s + i, (j + 1) * s + i));
                }
            }
        }
        m
    }
}

/// Marker velocities of u and the explicit-Euler flow-map update.
pub fn update_flow_map(flow: &mut FlowMap, u: &VecField, tau: f64) -> Vec<[f64; 2]> {
    let jets: Vec<_> = flow.pos.par_iter().map(|&z| u.eval(z, 1)).collect();
    let vel: Vec<[f64; 2]> = jets.iter().map(|j| j.value()).collect();
    let grad: Vec<[[f64; 2]; 2]> = jets.iter().map(|j| j.grad()).collect();
    flow.push(&vel, &grad, tau, u.grid.ell);
    vel
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub det_min: f64,
    pub det_max: f64,
    pub area_min: f64,
    pub area_max: f64,
    pub det_lower: f64,
    pub det_upper: f64,
    pub stretch: f64,
    pub stretch_bound: f64,
    pub clamp_events: usize,
}

impl FlowDiagnostics {
    pub fn within(&self, tol: f64) -> bool {
        self.det_min >= self.det_lower - tol && self.det_max <= self.det_upper + tol
    }

    pub fn max_dev(&self) -> f64 {
        (self.det_max - 1.0).abs().max((1.0 - self.det_min).abs())
    }
}

/// Jacobian range against [e^{−4τ𝒦}, e^{2τ𝒦}] and stretch against exp(√(𝒦h)).
pub fn flow_map_diagnostics(flow: &FlowMap, kappa: f64, tau: f64, h: f64) -> FlowDiagnostics {
    let j = flow.jacobians();
    let det_min = j.iter().cloned().fold(f64::INFINITY, f64::min);
    let det_max = j.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let a = flow.area_ratios();
    FlowDiagnostics {
        det_min,
        det_max,
        area_min: a.iter().cloned().fold(f64::INFINITY, f64::min),
        area_max: a.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        det_lower: (-4.0 * tau * kappa).exp(),
        det_upper: (2.0 * tau * kappa).exp(),
        stretch: flow.max_stretch(),
        stretch_bound: (kappa * h).sqrt().exp(),
        clamp_events: flow.clamp_events,
    }
}

/// Sampled history: `values[i]` at `times[i]`, linear in between; repeated times encode jumps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn constant(t0: f64, t1: f64, v: Vec<f64>) -> Self {
        TimeSeries { times: vec![t0, t1], values: vec![v.clone(), v] }
    }

    pub fn push(&mut self, t: f64, v: Vec<f64>) {
        self.times.push(t);
        self.values.push(v);
    }

    pub fn clear(&mut self) {
        self.times.clear();
        self.values.clear();
    }
}

/// (1/(t₁−t₀))∫ w dt by the trapezoidal rule over the stored samples.
pub fn average_w(hist: &TimeSeries, t0: f64, t1: f64) -> Result<Vec<f64>> {
    let k = hist.times.len();
    let eps = 1e-12 * (1.0 + t1.abs());
    if k < 2 || !(t1 > t0) || hist.times[0] > t0 + eps || hist.times[k - 1] < t1 - eps {
        return Err(FsiError::Degenerate(format!("history does not cover [{t0}, {t1}]")));
    }
    let dim = hist.values[0].len();
    let mut acc = vec![0.0; dim];
    for s in 0..k - 1 {
        let (ta, tb) = (hist.times[s], hist.times[s + 1]);
        if tb <= ta {
            continue;
        }
        let (lo, hi) = (ta.max(t0), tb.min(t1));
        if hi <= lo {
            continue;
        }
        let (va, vb) = (&hist.values[s], &hist.values[s + 1]);
        let wl = |t: f64| (t - ta) / (tb - ta);
        let (al, ah) = (wl(lo), wl(hi));
        for d in 0..dim {
            let fl = va[d] + al * (vb[d] - va[d]);
            let fh = va[d] + ah * (vb[d] - va[d]);
            acc[d] += 0.5 * (hi - lo) * (fl + fh);
        }
    }
    let inv = 1.0 / (t1 - t0);
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// Data of one substep: η^k, the warm start, marker positions Y^k and the delayed velocities.
#[derive(Debug, Clone)]
pub struct StepState {
    pub eta: BeamCurve,
    pub psi: Vec<f64>,
    pub flow: FlowMap,
    /// w^k at each marker.
    pub w: Vec<[f64; 2]>,
    /// Delayed solid velocity as beam dofs.
    pub w_solid: Vec<f64>,
}

/// Cell index with its local 16×16 matrix and load vector.
type CellBlock = ((usize, usize), [f64; 256], [f64; 16]);

/// G(p) = 𝓔_K(η^k + τBp) + ½pᵀAp − bᵀp + c over free stream parameters p.
pub struct StepProblem<'a> {
    pub model: &'a Model,
    pub t: f64,
    pub tau: f64,
    pub eta_k: BeamCurve,
    /// Beam trace over free parameters.
    pub b: CsrMatrix<f64>,
    pub bt: CsrMatrix<f64>,
    pub a: CsrMatrix<f64>,
    pub lin: Vec<f64>,
    pub constant: f64,
    pub blend: MaterialBlend,
}

/// The separate terms of G at a point, plus the energy-inequality bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub elastic: EnergyBreakdown,
    pub elastic_prev: f64,
    /// √δ₀/2 ‖∂ₓ³η^{k+1}‖² and the same at η^k.
    pub reg: f64,
    pub reg_prev: f64,
    /// ε₀‖∂ₓ³v‖².
    pub eps_rate: f64,
    /// ρ_s‖v‖², ρ_s‖v − w_s‖², ρ_s‖w_s‖².
    pub solid_sq: f64,
    pub solid_diff_sq: f64,
    pub solid_w_sq: f64,
    /// Σ m|U|², Σ m|U − W|², Σ m|W|².
    pub marker_sq: f64,
    pub marker_diff_sq: f64,
    pub marker_w_sq: f64,
    /// δ₀‖∇Δu‖², ∫μ|ε(u)|², ∫ρ f·u.
    pub hyper: f64,
    pub viscous: f64,
    pub forcing: f64,
}

impl StepTerms {
    pub fn g_value(&self, tau: f64, h: f64) -> f64 {
        self.elastic.total
            + 0.5 * tau * self.eps_rate
            + tau / (2.0 * h) * self.solid_diff_sq
            + self.reg
            + tau / (2.0 * h) * self.marker_diff_sq
            + 0.5 * tau * (self.hyper + self.viscous)
            - tau * self.forcing
    }

    /// Left side of the substep energy inequality.
    pub fn lhs(&self, tau: f64, h: f64) -> f64 {
        self.elastic.total
            + self.reg
            + tau * (self.eps_rate + self.hyper + self.viscous)
            + tau / (2.0 * h) * (self.solid_sq + self.marker_sq)
    }

    /// Right side of the substep energy inequality.
    pub fn rhs(&self, tau: f64, h: f64) -> f64 {
        self.elastic_prev + self.reg_prev + tau / (2.0 * h) * (self.solid_w_sq + self.marker_w_sq) + tau * self.forcing
    }
}

impl<'a> StepProblem<'a> {
    pub fn assemble(model: &'a Model, st: &StepState, t: f64, tau: f64) -> Result<Self> {
        let sc = &model.scheme;
        let (h, d0, eps0) = (sc.h, sc.delta0(), sc.eps0);
        let rho_s = model.phys.beam.rho_s;
        let grid = &model.grid;
        let n = grid.n;
        st.eta.check_feasible()?;
        let blend = blend_materials(grid, &st.eta, model.phys.rho_pm(), model.phys.mu_pm())?;
        let tm = t + 0.5 * tau;
        let mut runs = Vec::new();
        let mut s = 0;
        while s < blend.len() {
            let mut e = s + 1;
            while e < blend.len() && blend.cells[e] == blend.cells[s] {
                e += 1;
            }
            runs.push((s, e));
            s = e;
        }
        let parts: Vec<CellBlock> = runs
            .par_iter()
            .map(|&(s, e)| {
                let (cx, cy) = blend.cells[s];
                let mut loc = [0.0; 256];
                let mut fl = [0.0; 16];
                for q in s..e {
                    let z = blend.points[q];
                    let ls = LocalStream::in_cell(grid, cx, cy, z, 2);
                    let mut eps = [[0.0; 3]; 16];
                    let mut uu = [[0.0; 2]; 16];
                    for k in 0..16 {
                        let j = ls.jet(k, 1);
                        eps[k] = j.sym_grad();
                        uu[k] = j.value();
                    }
                    let wm = tau * blend.weights[q] * blend.mu[q];
                    for a in 0..16 {
                        for b in 0..16 {
                            loc[16 * a + b] += wm * sym_dot(eps[a], eps[b]);
                        }
                    }
                    let f = model.phys.forcing.eval(tm, z, grid.ell);
                    let wf = tau * blend.weights[q] * blend.rho[q];
                    for a in 0..16 {
                        fl[a] += wf * (f[0] * uu[a][0] + f[1] * uu[a][1]);
                    }
                }
                ((cx, cy), loc, fl)
            })
            .collect();
        let mut blocks = vec![[0.0f64; 256]; n * n];
        let mut lin_full = vec![0.0; grid.stream_dim()];
        for ((cx, cy), loc, fl) in parts {
            let blk = &mut blocks[cy * n + cx];
            blk.iter_mut().zip(loc.iter()).for_each(|(x, y)| *x += y);
            for (a, &i) in cell_indices(grid, cx, cy).iter().enumerate() {
                lin_full[i] += fl[a];
            }
        }
        let coef = tau / h;
        let mut constant = 0.0;
        for (i, &z) in st.flow.pos.iter().enumerate() {
            let ls = LocalStream::new(grid, z, 1);
            let mi = coef * st.flow.mass[i];
            let wv = st.w[i];
            let uu: Vec<[f64; 2]> = (0..16).map(|k| ls.u(k)).collect();
            let blk = &mut blocks[ls.cy * n + ls.cx];
            for a in 0..16 {
                for b in 0..16 {
                    blk[16 * a + b] += mi * (uu[a][0] * uu[b][0] + uu[a][1] * uu[b][1]);
                }
                lin_full[ls.idx[a]] += mi * (uu[a][0] * wv[0] + uu[a][1] * wv[1]);
            }
            constant += 0.5 * mi * (wv[0] * wv[0] + wv[1] * wv[1]);
        }
        let a_cells = model.pull_back(&blocks_to_csr(grid, &blocks));
        let b = model.trace(&st.eta);
        let bt = b.transpose();
        let nb = model.nbeam();
        let kmat: Vec<f64> = (0..nb * nb)
            .map(|i| (eps0 * tau + d0.sqrt() * tau * tau) * model.d3[i] + tau * rho_s / h * model.m0[i])
            .collect();
        let beam_part = &bt * &(&dense_to_csr(nb, &kmat) * &b);
        let a = &(&a_cells + &scaled(&model.hyper, tau * d0)) + &beam_part;
        let m0ws = dense_matvec(nb, &model.m0, &st.w_solid);
        let disp = displacement(&st.eta);
        let d3eta = dense_matvec(nb, &model.d3, &disp);
        let y: Vec<f64> = (0..nb).map(|i| tau * rho_s / h * m0ws[i] - d0.sqrt() * tau * d3eta[i]).collect();
        let mut lin = model.space.pull_back(&lin_full);
        lin.iter_mut().zip(spmv_t(&b, &y)).for_each(|(x, y)| *x += y);
        constant += tau * rho_s / (2.0 * h) * dot(&st.w_solid, &m0ws) + third_reg(&st.eta, d0);
        Ok(StepProblem { model, t, tau, eta_k: st.eta.clone(), b, bt, a, lin, constant, blend })
    }

    pub fn dim(&self) -> usize {
        self.model.space.nfree
    }

    /// v = Bp, the beam velocity induced by p.
    pub fn beam_velocity(&self, p: &[f64]) -> Vec<f64> {
        spmv(&self.b, p)
    }

    /// η = η^k + τBp.
    pub fn curve_of(&self, p: &[f64]) -> BeamCurve {
        let mut c = self.eta_k.clone();
        c.axpy(self.tau, &self.beam_velocity(p));
        c
    }

    fn quadratic(&self, p: &[f64]) -> f64 {
        0.5 * dot(p, &spmv(&self.a, p)) - dot(&self.lin, p) + self.constant
    }

    /// G(p), or +∞ when the induced curve is infeasible or leaves Ω.
    pub fn value(&self, p: &[f64]) -> f64 {
        let c = self.curve_of(p);
        if c.max_abs_eta2() >= 0.5 * c.ell {
            return f64::INFINITY;
        }
        match elastic_energy(&c, &self.model.phys.beam) {
            Ok(e) => e.total + self.quadratic(p),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        let c = self.curve_of(p);
        let ge = elastic_gradient_full(&c, &self.model.phys.beam)?;
        let mut g = spmv(&self.a, p);
        let bg = spmv_t(&self.b, &ge);
        for i in 0..g.len() {
            g[i] += self.tau * bg[i] - self.lin[i];
        }
        Ok(g)
    }

    /// A + τ²Bᵀ∇²𝓔_K B at p.
    pub fn hessian(&self, p: &[f64]) -> Result<CscMatrix<f64>> {
        let c = self.curve_of(p);
        let he = elastic_hessian_full(&c, &self.model.phys.beam)?;
        let nb = self.model.nbeam();
        let e = &self.bt * &(&dense_to_csr(nb, &he) * &self.b);
        Ok(CscMatrix::from(&(&self.a + &scaled(&e, self.tau * self.tau))))
    }

    /// Every term of G at p, each evaluated directly from its definition.
    pub fn terms(&self, p: &[f64], st: &StepState) -> Result<StepTerms> {
        let model = self.model;
        let d0 = model.scheme.delta0();
        let rho_s = model.phys.beam.rho_s;
        let c = self.curve_of(p);
        let v = self.beam_velocity(p);
        let u = model.space.curl(p);
        let elastic = elastic_energy(&c, &model.phys.beam)?;
        let elastic_prev = elastic_energy(&self.eta_k, &model.phys.beam)?.total;
        let dv: Vec<f64> = v.iter().zip(&st.w_solid).map(|(a, b)| a - b).collect();
        let vel: Vec<[f64; 2]> = st.flow.pos.par_iter().map(|&z| u.value(z)).collect();
        let (mut msq, mut mdiff, mut mw) = (0.0, 0.0, 0.0);
        for i in 0..vel.len() {
            let (uu, ww, m) = (vel[i], st.w[i], st.flow.mass[i]);
            msq += m * (uu[0] * uu[0] + uu[1] * uu[1]);
            mdiff += m * ((uu[0] - ww[0]).powi(2) + (uu[1] - ww[1]).powi(2));
            mw += m * (ww[0] * ww[0] + ww[1] * ww[1]);
        }
        let tm = self.t + 0.5 * self.tau;
        let f = &model.phys.forcing;
        let bl = &self.blend;
        let pts: Vec<(f64, f64)> = (0..bl.len())
            .into_par_iter()
            .map(|q| {
                let (cx, cy) = bl.cells[q];
                let j = u.eval_in_cell(cx, cy, bl.points[q], 1);
                let fz = f.eval(tm, bl.points[q], model.grid.ell);
                let uv = j.value();
                (
                    bl.weights[q] * bl.mu[q] * sym_sq(j.sym_grad()),
                    bl.weights[q] * bl.rho[q] * (fz[0] * uv[0] + fz[1] * uv[1]),
                )
            })
            .collect();
        let viscous = pts.iter().map(|x| x.0).sum();
        let forcing = pts.iter().map(|x| x.1).sum();
        Ok(StepTerms {
            elastic,
            elastic_prev,
            reg: third_reg(&c, d0),
            reg_prev: third_reg(&self.eta_k, d0),
            eps_rate: model.scheme.eps0 * seminorm_sq(&c, &v, 3),
            solid_sq: rho_s * seminorm_sq(&c, &v, 0),
            solid_diff_sq: rho_s * seminorm_sq(&c, &dv, 0),
            solid_w_sq: rho_s * seminorm_sq(&c, &st.w_solid, 0),
            marker_sq: msq,
            marker_diff_sq: mdiff,
            marker_w_sq: mw,
            hyper: crate::fluid::hyperviscosity_energy(&u, d0),
            viscous,
            forcing,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeReport {
    pub iterations: usize,
    pub g_start: f64,
    pub g_zero: f64,
    pub g_value: f64,
    pub grad_norm: f64,
    /// min ∂ₓη₁ of the accepted curve.
    pub min_slope: f64,
    pub backtracks: usize,
    /// max over the fixed battery of |∇G·d|/τ.
    pub el_residual: f64,
    pub converged: bool,
}

/// Preconditioned L-BFGS with a feasibility-aware Armijo backtracking line search.
/// The preconditioner is the exact Hessian at the starting point.
pub fn minimize(problem: &StepProblem, start: Vec<f64>) -> Result<(Vec<f64>, MinimizeReport)> {
    let g_zero = problem.value(&vec![0.0; problem.dim()]);
    let mut p = start;
    let mut f = problem.value(&p);
    if !f.is_finite() {
        return Err(FsiError::Infeasible { min_slope: problem.curve_of(&p).min_slope() });
    }
    let g_start = f;
    let mut g = problem.gradient(&p)?;
    let pre = SparseSpd::factor(&problem.hessian(&p)?)?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let (mut it, mut backtracks, mut converged) = (0, 0, false);
    loop {
        let gn = norm(&g);
        if gn <= 1e-8 * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        if it >= MAX_ITER {
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let mut r = pre.solve(&q);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &r);
            r.iter_mut().zip(s).for_each(|(ri, si)| *ri += (a - b) * si);
        }
        let mut d: Vec<f64> = r.iter().map(|x| -x).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = pre.solve(&g).iter().map(|x| -x).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let pn: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let fnew = problem.value(&pn);
            if fnew.is_finite() && fnew <= f + 1e-4 * step * slope {
                accepted = Some((pn, fnew));
                break;
            }
            step *= 0.5;
            backtracks += 1;
        }
        let Some((pn, fnew)) = accepted else {
            if slope.abs() <= 1e-13 * (1.0 + f.abs()) {
                break;
            }
            return Err(FsiError::LineSearch { backtracks });
        };
        let gnew = problem.gradient(&pn)?;
        let s: Vec<f64> = pn.iter().zip(&p).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * norm(&s) * norm(&y) {
            if hist.len() == LBFGS_MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        p = pn;
        f = fnew;
        g = gnew;
        it += 1;
    }
    let el_residual =
        problem.model.battery.iter().map(|d| dot(&g, d).abs() / problem.tau).fold(0.0, f64::max);
    let report = MinimizeReport {
        iterations: it,
        g_start,
        g_zero,
        g_value: f,
        grad_norm: norm(&g),
        min_slope: problem.curve_of(&p).min_slope(),
        backtracks,
        el_residual,
        converged,
    };
    Ok((p, report))
}

/// Full solution data of one accepted substep.
#[derive(Debug, Clone)]
pub struct SubstepSolution {
    pub t: f64,
    pub tau: f64,
    pub eta_k: BeamCurve,
    pub eta_next: BeamCurve,
    pub psi: Vec<f64>,
    pub u: VecField,
    /// Beam velocity (η^{k+1} − η^k)/τ.
    pub v: Vec<f64>,
    /// Marker positions Y^k before the push and their velocities U.
    pub markers: Vec<[f64; 2]>,
    pub marker_vel: Vec<[f64; 2]>,
    pub mass: Vec<f64>,
    pub w: Vec<[f64; 2]>,
    pub w_solid: Vec<f64>,
    pub blend: MaterialBlend,
    pub terms: StepTerms,
}

/// One ledger row per accepted substep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerRow {
    pub window: usize,
    pub substep: usize,
    pub t: f64,
    pub tau: f64,
    pub iterations: usize,
    pub backtracks: usize,
    pub g_value: f64,
    pub g_zero: f64,
    pub grad_norm: f64,
    pub el_residual: f64,
    pub min_slope: f64,
    pub max_abs_eta2: f64,
    pub e_stretch: f64,
    pub e_barrier: f64,
    pub e_bend_h: f64,
    pub e_bend_v: f64,
    pub e_total: f64,
    pub reg_third: f64,
    pub eps_term: f64,
    pub fluid_kinetic: f64,
    pub solid_kinetic: f64,
    pub upper_kinetic: f64,
    pub upper_strain: f64,
    pub lower_kinetic: f64,
    pub lower_strain: f64,
    pub lower_force_sq: f64,
    pub cum_viscous: f64,
    pub cum_hyper: f64,
    pub cum_eps: f64,
    pub cum_forcing: f64,
    pub trailing_kinetic: f64,
    pub energy_bound: f64,
    pub margin: f64,
    pub step_margin: f64,
    pub det_min: f64,
    pub det_max: f64,
    pub det_lower: f64,
    pub det_upper: f64,
    pub area_min: f64,
    pub area_max: f64,
    pub stretch: f64,
    pub stretch_bound: f64,
    pub kappa: f64,
    pub lip: f64,
    pub clamp_events: usize,
    pub lambda0: f64,
    pub pressure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct KineticSlot {
    t0: f64,
    t1: f64,
    value: f64,
}

/// Running sums of the energy inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accumulators {
    /// 𝓔_K(η₀) + √δ₀/2‖∂ₓ³η₀‖² + initial kinetic energy.
    pub initial: f64,
    pub initial_kinetic: f64,
    pub cum_viscous: f64,
    pub cum_hyper: f64,
    pub cum_eps: f64,
    pub cum_forcing: f64,
    pub step_margin_sum: f64,
    /// Σ τ·Lip(u)² in the current window.
    pub kappa: f64,
    trailing: Vec<KineticSlot>,
}

impl Accumulators {
    fn trailing(&self, t: f64, h: f64) -> f64 {
        let lo = t - h;
        self.trailing
            .iter()
            .map(|s| {
                let ov = (s.t1.min(t) - s.t0.max(lo)).max(0.0);
                s.value * ov / (s.t1 - s.t0)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExitStatus {
    Completed,
    Collision { last_safe_time: f64 },
    SolverAbort,
}

/// Complete restartable state at a window boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: f64,
    pub window: usize,
    pub eta: BeamCurve,
    pub psi: Vec<f64>,
    pub flow: FlowMap,
    /// Previous window: marker velocities then beam velocities, times relative to its start.
    pub history: TimeSeries,
    pub acc: Accumulators,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window: usize,
    pub t_end: f64,
    pub steps: usize,
    pub iterations: usize,
    pub min_slope: f64,
    pub max_det_dev: f64,
    pub kappa: f64,
    pub min_margin: f64,
    pub decrease_ok: bool,
    pub halvings: usize,
    pub warnings: Vec<String>,
}

/// Initial data and parameters of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub ell: f64,
    pub n: usize,
    pub m: usize,
    pub phys: Physics,
    pub scheme: SchemeParams,
    pub eta0: BeamCurve,
    pub psi0: Vec<f64>,
    /// Collision threshold on the wall distance.
    pub collision_tol: f64,
}

pub struct Simulation {
    pub model: Model,
    pub state: SimState,
    pub ledger: Vec<LedgerRow>,
    pub windows: Vec<WindowSummary>,
    pub status: Option<ExitStatus>,
    pub collision_tol: f64,
}

type Observer<'o> = dyn FnMut(&Model, &SubstepSolution, &mut LedgerRow) -> Result<()> + 'o;

impl Simulation {
    pub fn new(scn: &Scenario) -> Result<Self> {
        let model = Model::new(scn.ell, scn.n, scn.m, scn.phys.clone(), scn.scheme)?;
        if scn.eta0.m != scn.m || scn.eta0.ell != scn.ell {
            return Err(FsiError::InvalidParam("initial curve does not match the beam grid".into()));
        }
        scn.eta0.check_clamped(1e-12)?;
        scn.eta0.check_feasible()?;
        if scn.psi0.len() != model.space.nfree {
            return Err(FsiError::InvalidParam("initial stream vector has the wrong length".into()));
        }
        let flow = FlowMap::seed(&model.grid, &scn.eta0, model.phys.rho_pm())?;
        let u0 = model.space.curl(&scn.psi0);
        let mut init: Vec<f64> = Vec::with_capacity(2 * flow.len() + model.nbeam());
        let mut kin = 0.0;
        for (z, m) in flow.pos.iter().zip(&flow.mass) {
            let v = u0.value(*z);
            kin += m * (v[0] * v[0] + v[1] * v[1]);
            init.extend_from_slice(&v);
        }
        let ws = spmv(&model.trace(&scn.eta0), &scn.psi0);
        kin += model.phys.beam.rho_s * seminorm_sq(&scn.eta0, &ws, 0);
        init.extend_from_slice(&ws);
        let h = model.scheme.h;
        let e0 = elastic_energy(&scn.eta0, &model.phys.beam)?.total;
        let s0 = third_reg(&scn.eta0, model.scheme.delta0());
        let acc = Accumulators {
            initial: e0 + s0 + 0.5 * kin,
            initial_kinetic: 0.5 * kin,
            cum_viscous: 0.0,
            cum_hyper: 0.0,
            cum_eps: 0.0,
            cum_forcing: 0.0,
            step_margin_sum: 0.0,
            kappa: 0.0,
            trailing: vec![KineticSlot { t0: -h, t1: 0.0, value: 0.5 * kin }],
        };
        let state = SimState {
            t: 0.0,
            window: 0,
            eta: scn.eta0.clone(),
            psi: scn.psi0.clone(),
            flow,
            history: TimeSeries::constant(0.0, h, init),
            acc,
        };
        Ok(Simulation { model, state, ledger: Vec::new(), windows: Vec::new(), status: None, collision_tol: scn.collision_tol })
    }

    /// Rebuilds a simulation from a window-boundary checkpoint.
    pub fn restore(scn: &Scenario, state: SimState) -> Result<Self> {
        let mut sim = Simulation::new(scn)?;
        sim.state = state;
        Ok(sim)
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.state)?)
    }

    pub fn restore_json(scn: &Scenario, json: &str) -> Result<Self> {
        Self::restore(scn, serde_json::from_str(json)?)
    }

    /// Data of the first substep of the current window.
    pub fn step_state(&self) -> Result<StepState> {
        let nm = self.state.flow.len();
        let avg = average_w(&self.state.history, 0.0, self.model.scheme.tau())?;
        Ok(StepState {
            eta: self.state.eta.clone(),
            psi: self.state.psi.clone(),
            flow: self.state.flow.clone(),
            w: (0..nm).map(|i| [avg[2 * i], avg[2 * i + 1]]).collect(),
            w_solid: avg[2 * nm..].to_vec(),
        })
    }

    pub fn done(&self) -> bool {
        self.status.is_some() || self.state.t >= self.model.scheme.t_final - 1e-12 * self.model.scheme.h
    }

    /// Runs windows until T, a collision or a solver abort.
    pub fn run(&mut self) -> ExitStatus {
        self.run_with(&mut |_, _, _| Ok(()))
    }

    pub fn run_with(&mut self, obs: &mut Observer) -> ExitStatus {
        while !self.done() {
            if self.run_window_with(obs).is_err() {
                self.status = Some(ExitStatus::SolverAbort);
            }
        }
        let s = self.status.unwrap_or(ExitStatus::Completed);
        self.status = Some(s);
        s
    }

    pub fn run_window(&mut self) -> Result<WindowSummary> {
        self.run_window_with(&mut |_, _, _| Ok(()))
    }

    /// N substeps of the time-delayed problem; the flow map is rebased and the window's
    /// history becomes the next window's delayed data.
    pub fn run_window_with(&mut self, obs: &mut Observer) -> Result<WindowSummary> {
        let sc = self.model.scheme;
        let tau = sc.tau();
        let nb = self.model.nbeam();
        let mut current = TimeSeries::default();
        let mut summary = WindowSummary {
            window: self.state.window,
            t_end: self.state.t,
            steps: 0,
            iterations: 0,
            min_slope: f64::INFINITY,
            max_det_dev: 0.0,
            kappa: 0.0,
            min_margin: f64::INFINITY,
            decrease_ok: true,
            halvings: 0,
            warnings: Vec::new(),
        };
        self.state.acc.kappa = 0.0;
        let t_start = self.state.t;
        for k in 0..sc.substeps {
            let t_rel = k as f64 * tau;
            let before = self.state.clone();
            let rows_before = self.ledger.len();
            let attempt = self.advance(t_start, t_rel, tau, k, &mut current, obs, &mut summary);
            if attempt.is_err() {
                self.state = before;
                self.ledger.truncate(rows_before);
                summary.halvings += 1;
                summary.warnings.push(format!("substep {k} of window {}: retried with tau/2", summary.window));
                let half = 0.5 * tau;
                self.advance(t_start, t_rel, half, k, &mut current, obs, &mut summary)?;
                self.advance(t_start, t_rel + half, half, k, &mut current, obs, &mut summary)?;
            }
            let d = self.state.eta.min_boundary_distance(self.collision_tol);
            if d.collision {
                let last_safe_time = self.ledger.iter().rev().nth(1).map(|r| r.t).unwrap_or(0.0);
                self.status = Some(ExitStatus::Collision { last_safe_time });
                break;
            }
        }
        if self.status.is_none() {
            debug_assert!(current.values.iter().all(|v| v.len() == 2 * self.state.flow.len() + nb));
            self.state.history = current;
            self.state.flow.rebase();
            self.state.window += 1;
            self.state.t = t_start + sc.h;
        }
        summary.t_end = self.state.t;
        summary.kappa = self.state.acc.kappa;
        self.windows.push(summary.clone());
        Ok(summary)
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        t_start: f64,
        t_rel: f64,
        tau: f64,
        k: usize,
        current: &mut TimeSeries,
        obs: &mut Observer,
        summary: &mut WindowSummary,
    ) -> Result<()> {
        let model = &self.model;
        let sc = model.scheme;
        let h = sc.h;
        let nm = self.state.flow.len();
        let avg = average_w(&self.state.history, t_rel, t_rel + tau)?;
        let w: Vec<[f64; 2]> = (0..nm).map(|i| [avg[2 * i], avg[2 * i + 1]]).collect();
        let st = StepState {
            eta: self.state.eta.clone(),
            psi: self.state.psi.clone(),
            flow: self.state.flow.clone(),
            w,
            w_solid: avg[2 * nm..].to_vec(),
        };
        let t_abs = t_start + t_rel;
        let prob = StepProblem::assemble(model, &st, t_abs, tau)?;
        let zero = vec![0.0; prob.dim()];
        let start = if prob.value(&st.psi) < prob.value(&zero) { st.psi.clone() } else { zero };
        let (p, rep) = minimize(&prob, start)?;
        let terms = prob.terms(&p, &st)?;
        let u = model.space.curl(&p);
        let v = prob.beam_velocity(&p);
        let eta_next = prob.curve_of(&p);
        let mut flow = st.flow.clone();
        let vel = update_flow_map(&mut flow, &u, tau);

        let bl = &prob.blend;
        let pts: Vec<[f64; 6]> = (0..bl.len())
            .into_par_iter()
            .map(|q| {
                let (cx, cy) = bl.cells[q];
                let j = u.eval_in_cell(cx, cy, bl.points[q], 1);
                let uv = j.value();
                let g = j.grad();
                let w = bl.weights[q];
                let e2 = sym_sq(j.sym_grad());
                let fz = model.phys.forcing.eval(t_abs + 0.5 * tau, bl.points[q], model.grid.ell);
                let plus = bl.labels[q] == RegionLabel::Plus;
                let kin = 0.5 * w * bl.rho[q] * (uv[0] * uv[0] + uv[1] * uv[1]);
                [
                    kin,
                    if plus { kin } else { 0.0 },
                    if plus { w * bl.mu[q] * e2 } else { 0.0 },
                    if plus { 0.0 } else { w * bl.mu[q] * e2 },
                    if plus { 0.0 } else { w * (fz[0] * fz[0] + fz[1] * fz[1]) },
                    mat_dot(g, g).sqrt(),
                ]
            })
            .collect();
        let sum = |i: usize| pts.iter().map(|x| x[i]).sum::<f64>();
        let lip = pts.iter().map(|x| x[5]).fold(0.0, f64::max);
        let fluid_kinetic = sum(0);
        let upper_kinetic = sum(1);

        let acc = &mut self.state.acc;
        acc.cum_viscous += tau * terms.viscous;
        acc.cum_hyper += tau * terms.hyper;
        acc.cum_eps += tau * terms.eps_rate;
        acc.cum_forcing += tau * terms.forcing;
        acc.kappa += tau * lip * lip;
        let step_margin = terms.rhs(tau, h) - terms.lhs(tau, h);
        acc.step_margin_sum += step_margin;
        let t_end = t_abs + tau;
        acc.trailing.push(KineticSlot {
            t0: t_abs,
            t1: t_end,
            value: tau / (2.0 * h) * (terms.solid_sq + terms.marker_sq),
        });
        acc.trailing.retain(|s| s.t1 > t_end - h + 1e-12 * h);
        let trailing = acc.trailing(t_end, h);
        let energy_bound = acc.initial + acc.cum_forcing;
        let lhs = terms.elastic.total + terms.reg + acc.cum_viscous + acc.cum_hyper + acc.cum_eps + trailing;
        let diag = flow_map_diagnostics(&flow, acc.kappa, tau, h);
        if tau * acc.kappa * 4.0 >= 1.0 {
            summary.warnings.push(format!("tau-safeguard: tau = {tau:e} >= 1/(4K) with K = {:e}", acc.kappa));
        }
        let mut row = LedgerRow {
            window: self.state.window,
            substep: k,
            t: t_end,
            tau,
            iterations: rep.iterations,
            backtracks: rep.backtracks,
            g_value: rep.g_value,
            g_zero: rep.g_zero,
            grad_norm: rep.grad_norm,
            el_residual: rep.el_residual,
            min_slope: rep.min_slope,
            max_abs_eta2: eta_next.max_abs_eta2(),
            e_stretch: terms.elastic.stretch,
            e_barrier: terms.elastic.barrier,
            e_bend_h: terms.elastic.bend_h,
            e_bend_v: terms.elastic.bend_v,
            e_total: terms.elastic.total,
            reg_third: terms.reg,
            eps_term: terms.eps_rate,
            fluid_kinetic,
            solid_kinetic: 0.5 * terms.solid_sq,
            upper_kinetic,
            upper_strain: sum(2),
            lower_kinetic: fluid_kinetic - upper_kinetic,
            lower_strain: sum(3),
            lower_force_sq: sum(4),
            cum_viscous: acc.cum_viscous,
            cum_hyper: acc.cum_hyper,
            cum_eps: acc.cum_eps,
            cum_forcing: acc.cum_forcing,
            trailing_kinetic: trailing,
            energy_bound,
            margin: energy_bound - lhs,
            step_margin,
            det_min: diag.det_min,
            det_max: diag.det_max,
            det_lower: diag.det_lower,
            det_upper: diag.det_upper,
            area_min: diag.area_min,
            area_max: diag.area_max,
            stretch: diag.stretch,
            stretch_bound: diag.stretch_bound,
            kappa: acc.kappa,
            lip,
            clamp_events: diag.clamp_events,
            lambda0: f64::NAN,
            pressure: f64::NAN,
        };
        summary.steps += 1;
        summary.iterations += rep.iterations;
        summary.min_slope = summary.min_slope.min(rep.min_slope);
        summary.max_det_dev = summary.max_det_dev.max(diag.max_dev());
        summary.min_margin = summary.min_margin.min(row.margin);
        summary.decrease_ok &= rep.g_value <= rep.g_zero;

        let mut sample: Vec<f64> = Vec::with_capacity(2 * nm + v.len());
        vel.iter().for_each(|x| sample.extend_from_slice(x));
        sample.extend_from_slice(&v);
        current.push(t_rel, sample.clone());
        current.push(t_rel + tau, sample);

        let sol = SubstepSolution {
            t: t_abs,
            tau,
            eta_k: st.eta,
            eta_next: eta_next.clone(),
            psi: p.clone(),
            u,
            v,
            markers: st.flow.pos,
            marker_vel: vel,
            mass: st.flow.mass,
            w: st.w,
            w_solid: st.w_solid,
            blend: prob.blend.clone(),
            terms,
        };
        drop(prob);
        obs(&self.model, &sol, &mut row)?;
        self.ledger.push(row);
        self.state.eta = eta_next;
        self.state.psi = p;
        self.state.flow = flow;
        Ok(())
    }
}

/// Runs a scenario to completion.
pub fn run_simulation(scn: &Scenario) -> Result<Simulation> {
    let mut sim = Simulation::new(scn)?;
    sim.run();
    Ok(sim)
}
