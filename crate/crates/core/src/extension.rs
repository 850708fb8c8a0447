//! Almost solenoidal extension of beam fields into the fluid box: naive graph extension,
//! flux defect λ, and a divergence correction that keeps the Hermite trace on the curve.

use crate::bogovskij::{divergence_rows, q_inside, q_weights, smoothstep, v_inside, Graph, MinNorm, SubgraphDomain};
use crate::error::{FsiError, Result};
use crate::fluid::{project_1d, FluidGrid, ScalarField, VecField};
use crate::geometry::{hermite_eval, pinned_dofs, BeamCurve};
use crate::trace::TraceMap;

/// Two-component field on the beam mesh with zero end values, in the Hermite dof layout of
/// [`BeamCurve`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryField {
    pub ell: f64,
    pub m: usize,
    pub dofs: Vec<f64>,
}

impl BoundaryField {
    pub fn new(ell: f64, m: usize, dofs: Vec<f64>) -> Result<Self> {
        if m < 1 || dofs.len() != 6 * (m + 1) {
            return Err(FsiError::InvalidParam(format!("boundary field needs {} dofs", 6 * (m + 1))));
        }
        let scale = dofs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for node in [0, m] {
            for c in 0..2 {
                if dofs[6 * node + c].abs() > 1e-12 * scale {
                    return Err(FsiError::NotClamped(format!("boundary field is nonzero at node {node}")));
                }
            }
        }
        Ok(BoundaryField { ell, m, dofs })
    }

    pub fn zeros(ell: f64, m: usize) -> Self {
        BoundaryField { ell, m, dofs: vec![0.0; 6 * (m + 1)] }
    }

    /// Hermite interpolant of b given with its first two derivatives.
    pub fn from_fn(ell: f64, m: usize, f: impl Fn(f64) -> [[f64; 2]; 3]) -> Result<Self> {
        let mut dofs = vec![0.0; 6 * (m + 1)];
        for i in 0..=m {
            let v = f(ell * i as f64 / m as f64);
            for r in 0..3 {
                for c in 0..2 {
                    dofs[6 * i + 2 * r + c] = v[r][c];
                }
            }
        }
        Self::new(ell, m, dofs)
    }

    pub fn eval(&self, x: f64, order: usize) -> [f64; 2] {
        hermite_eval(self.ell, self.m, &self.dofs, x.clamp(0.0, self.ell), order)
    }

    /// ∫|b|² + ∫|b'|².
    pub fn h1_norm_sq(&self, curve: &BeamCurve) -> f64 {
        curve
            .quadrature()
            .iter()
            .map(|&(_, _, x, w)| {
                let (v, d) = (self.eval(x, 0), self.eval(x, 1));
                w * (v[0] * v[0] + v[1] * v[1] + d[0] * d[0] + d[1] * d[1])
            })
            .sum()
    }

    pub fn add(&self, other: &BoundaryField) -> BoundaryField {
        let dofs = self.dofs.iter().zip(&other.dofs).map(|(a, b)| a + b).collect();
        BoundaryField { ell: self.ell, m: self.m, dofs }
    }

    pub fn scaled(&self, a: f64) -> BoundaryField {
        BoundaryField { ell: self.ell, m: self.m, dofs: self.dofs.iter().map(|v| a * v).collect() }
    }
}

/// C² cutoff in x₂: one on [−ℓ/2+γ, ℓ/2−γ], zero within γ/4 of the walls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffProfile {
    pub ell: f64,
    pub gamma: f64,
}

impl CutoffProfile {
    pub fn new(ell: f64, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 0.5 * ell) {
            return Err(FsiError::InvalidParam(format!("cutoff band {gamma} must lie in (0, ell/2)")));
        }
        Ok(CutoffProfile { ell, gamma })
    }

    /// Band γ = ℓ/6.
    pub fn standard(ell: f64) -> Self {
        CutoffProfile { ell, gamma: ell / 6.0 }
    }

    pub fn eval(&self, y: f64) -> f64 {
        let d = 0.5 * self.ell - y.abs();
        smoothstep((d - 0.25 * self.gamma) / (0.75 * self.gamma))
    }

    /// Largest admissible |η₂|.
    pub fn limit(&self) -> f64 {
        0.5 * self.ell - self.gamma
    }
}

/// Unit-mass bumps ψ⁺ (upper third) and ψ⁻ (lower third) in the divergence space.
#[derive(Debug, Clone)]
pub struct BumpPair {
    pub plus: ScalarField,
    pub minus: ScalarField,
}

fn window_bump(grid: &FluidGrid, xw: (f64, f64), yw: (f64, f64)) -> Result<ScalarField> {
    let n2 = grid.n + 2;
    let tol = 1e-12 * grid.ell;
    let t = |v: f64, w: (f64, f64)| crate::bogovskij::mass_template((v - w.0) / (w.1 - w.0));
    let mut f = ScalarField::zeros(grid);
    for j in 1..n2 - 1 {
        let ys = grid.y2.support(j);
        if ys.0 < yw.0 - tol || ys.1 > yw.1 + tol {
            continue;
        }
        for i in 1..n2 - 1 {
            let xs = grid.x2.support(i);
            if xs.0 < xw.0 - tol || xs.1 > xw.1 + tol {
                continue;
            }
            f.c[j * n2 + i] = t(grid.x2.greville(i), xw) * t(grid.y2.greville(j), yw);
        }
    }
    let m = f.integral();
    if m <= 0.0 {
        return Err(FsiError::GridTooCoarse("bump window resolves no divergence basis".into()));
    }
    f.c.iter_mut().for_each(|c| *c /= m);
    Ok(f)
}

impl BumpPair {
    /// Variant 0 is centred; variant 1 is an independent off-centre pair.
    pub fn new(grid: &FluidGrid, variant: usize) -> Result<Self> {
        let l = grid.ell;
        let yw = (l / 3.0, 0.49 * l);
        let (xp, xm) = match variant {
            0 => ((0.3 * l, 0.7 * l), (0.3 * l, 0.7 * l)),
            1 => ((0.05 * l, 0.4 * l), (0.6 * l, 0.95 * l)),
            _ => return Err(FsiError::InvalidParam(format!("unknown bump variant {variant}"))),
        };
        Ok(BumpPair { plus: window_bump(grid, xp, yw)?, minus: window_bump(grid, xm, (-yw.1, -yw.0))? })
    }

    /// ψ⁺ − ψ⁻.
    pub fn difference(&self) -> ScalarField {
        let mut d = self.plus.clone();
        for (a, b) in d.c.iter_mut().zip(&self.minus.c) {
            *a -= b;
        }
        d
    }
}

/// λ = ∫ ∂ₓη ∧ b.
pub fn lambda_of(b: &BoundaryField, curve: &BeamCurve) -> f64 {
    curve
        .quadrature()
        .iter()
        .map(|&(_, _, x, w)| {
            let (d, v) = (curve.eval_unchecked(x, 1), b.eval(x, 0));
            w * (d[0] * v[1] - d[1] * v[0])
        })
        .sum()
}

/// The same quantity after integration by parts: −∫ η ∧ ∂ₓb.
pub fn lambda_by_parts(b: &BoundaryField, curve: &BeamCurve) -> f64 {
    -curve
        .quadrature()
        .iter()
        .map(|&(_, _, x, w)| {
            let (e, d) = (curve.eval_unchecked(x, 0), b.eval(x, 1));
            w * (e[0] * d[1] - e[1] * d[0])
        })
        .sum::<f64>()
}

fn check_band(curve: &BeamCurve, beta: &CutoffProfile) -> Result<()> {
    let max_abs = curve.max_abs_eta2();
    if max_abs >= beta.limit() {
        return Err(FsiError::BandExit { max_abs, limit: beta.limit() });
    }
    Ok(())
}

/// Whether flat index `k` of a vector field is a basis function that vanishes on ∂Ω with
/// divergence vanishing on ∂Ω.
fn clamped_out(grid: &FluidGrid, k: usize) -> bool {
    let (n3, n2) = (grid.n + 3, grid.n + 2);
    let edge = |i: usize, len: usize, w: usize| i < w || i + w >= len;
    if k < n3 * n2 {
        let (i, j) = (k % n3, k / n3);
        edge(i, n3, 2) || edge(j, n2, 1)
    } else {
        let k = k - n3 * n2;
        let (i, j) = (k % n2, k / n2);
        edge(i, n2, 1) || edge(j, n3, 2)
    }
}

/// Discrete b(η₁⁻¹(x₁)) β(x₂): tensor L² projection, restricted to the clamped space.
pub fn naive_extension(grid: &FluidGrid, b: &BoundaryField, curve: &BeamCurve, beta: &CutoffProfile) -> Result<VecField> {
    check_band(curve, beta)?;
    curve.check_feasible()?;
    let failed = std::cell::Cell::new(false);
    let comp = |basis, c: usize| {
        project_1d(basis, |x1| match curve.inverse_eta1(x1.clamp(0.0, curve.ell)) {
            Ok(x) => b.eval(x, 0)[c],
            Err(_) => {
                failed.set(true);
                0.0
            }
        })
    };
    let c1x = comp(&grid.x3, 0)?;
    let c2x = comp(&grid.x2, 1)?;
    if failed.get() {
        return Err(FsiError::Degenerate("curve is not invertible in x1".into()));
    }
    let by2 = project_1d(&grid.y2, |y| beta.eval(y))?;
    let by3 = project_1d(&grid.y3, |y| beta.eval(y))?;
    let mut u = VecField::zeros(grid);
    let (n3, n2) = (grid.n + 3, grid.n + 2);
    for j in 0..n2 {
        for i in 0..n3 {
            u.c1[j * n3 + i] = c1x[i] * by2[j];
        }
    }
    for j in 0..n3 {
        for i in 0..n2 {
            u.c2[j * n2 + i] = c2x[i] * by3[j];
        }
    }
    let mut flat = u.to_flat();
    for (k, v) in flat.iter_mut().enumerate() {
        if clamped_out(grid, k) {
            *v = 0.0;
        }
    }
    Ok(VecField::from_flat(grid, &flat))
}

/// Extension result: field with ∇·field = −λ(ψ⁺ − ψ⁻) and Hermite trace b.
#[derive(Debug, Clone)]
pub struct Extension {
    pub field: VecField,
    pub lambda: f64,
}

/// Weight of the trace penalty relative to the H¹ seminorm.
pub const TRACE_WEIGHT: f64 = 1e6;

/// Divergence and trace corrector for one curve: the minimum-H¹ correction with exact
/// divergence and exact pinned-end trace, whose remaining Hermite trace jets on the curve are
/// matched in weighted least squares. Restricted to data supported away from the curve it acts
/// as a Bogovskij operator on each side.
pub struct ExtensionSolver {
    pub grid: FluidGrid,
    pub curve: BeamCurve,
    pub beta: CutoffProfile,
    pub bumps: BumpPair,
    pub trace: TraceMap,
    q_idx: Vec<usize>,
    wq: Vec<f64>,
    hard: Vec<usize>,
    soft: Vec<(usize, f64)>,
    dropped: Vec<usize>,
    core: MinNorm,
}

impl ExtensionSolver {
    pub fn new(grid: &FluidGrid, curve: &BeamCurve, beta: CutoffProfile, bumps: BumpPair) -> Result<Self> {
        check_band(curve, &beta)?;
        let whole = SubgraphDomain {
            ell: grid.ell,
            gamma: grid.ell,
            lip: 0.0,
            ceiling: grid.ell,
            graph: Graph::flat(grid.ell, grid.ell),
            orient: crate::bogovskij::Orientation::Below,
        };
        let v_idx = v_inside(grid, &whole, 0.0, grid.ell);
        let q_idx = q_inside(grid, &whole, 0.0, grid.ell);
        let mut hard_rows = divergence_rows(grid, &v_idx, &q_idx)?;
        let wq = q_weights(grid, &q_idx);
        let trace = TraceMap::new(grid, curve)?;
        let mut v_pos = vec![usize::MAX; trace.ncols];
        for (k, &v) in v_idx.iter().enumerate() {
            v_pos[v] = k;
        }
        let pinned = pinned_dofs(curve.m);
        let (mut hard, mut soft, mut dropped, mut soft_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (r, row) in trace.rows.iter().enumerate() {
            let local: Vec<(usize, f64)> =
                row.iter().filter(|&&(c, _)| v_pos[c] != usize::MAX).map(|&(c, v)| (v_pos[c], v)).collect();
            let norm = local.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
            let full = row.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
            if norm <= 1e-10 * full.max(1.0) {
                dropped.push(r);
            } else if pinned.contains(&r) {
                hard_rows.push(local);
                hard.push(r);
            } else {
                let w = grid.h.powi(((r % 6) / 2) as i32);
                soft_rows.push(local.into_iter().map(|(k, v)| (k, w * v)).collect());
                soft.push((r, w));
            }
        }
        let core = MinNorm::new(grid, v_idx, hard_rows, Some(&wq), soft_rows, TRACE_WEIGHT)?;
        Ok(ExtensionSolver { grid: grid.clone(), curve: curve.clone(), beta, bumps, trace, q_idx, wq, hard, soft, dropped, core })
    }

    fn div_rhs(&self, g: &ScalarField) -> Result<Vec<f64>> {
        let n2 = self.grid.n + 2;
        let scale = g.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut inside = vec![false; n2 * n2];
        for &q in &self.q_idx {
            inside[q] = true;
        }
        for (q, v) in g.c.iter().enumerate() {
            if !inside[q] && v.abs() > 1e-12 * scale {
                return Err(FsiError::SupportLeak(format!("divergence datum touches the wall at basis {q}")));
            }
        }
        let rhs: Vec<f64> = self.q_idx.iter().map(|&q| g.c[q]).collect();
        let mean: f64 = rhs.iter().zip(&self.wq).map(|(a, b)| a * b).sum();
        let mass: f64 = rhs.iter().zip(&self.wq).map(|(a, b)| a.abs() * b).sum();
        if mean.abs() > 1e-9 * mass.max(f64::MIN_POSITIVE) {
            return Err(FsiError::NonzeroMean { mean, tol: 1e-9 * mass });
        }
        Ok(rhs)
    }

    /// Minimum-norm v with ∇·v = g whose trace jets on the curve vanish (pinned ones exactly).
    pub fn zero_trace_solve(&self, g: &ScalarField) -> Result<VecField> {
        let mut rhs = self.div_rhs(g)?;
        rhs.extend(std::iter::repeat_n(0.0, self.hard.len()));
        Ok(VecField::from_flat(&self.grid, &self.core.solve(&rhs, &vec![0.0; self.soft.len()])))
    }

    /// Extension of b with ∇·field = −λ(ψ⁺ − ψ⁻), λ = ∫ ∂ₓη ∧ b.
    pub fn extend(&self, b: &BoundaryField) -> Result<Extension> {
        if b.m != self.curve.m || (b.ell - self.curve.ell).abs() > 1e-12 * self.curve.ell {
            return Err(FsiError::InvalidParam("boundary field and curve use different meshes".into()));
        }
        let naive = naive_extension(&self.grid, b, &self.curve, &self.beta)?;
        let lambda = lambda_of(b, &self.curve);
        let mut g = naive.divergence();
        for (a, d) in g.c.iter_mut().zip(&self.bumps.difference().c) {
            *a += lambda * d;
        }
        let mut rhs = self.div_rhs(&g)?;
        let tr = self.trace.apply_field(&naive);
        let scale = b.dofs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for &r in &self.dropped {
            if b.dofs[r].abs() > 1e-10 * scale {
                return Err(FsiError::NotClamped(format!("trace dof {r} cannot be matched by a no-slip field")));
            }
        }
        rhs.extend(self.hard.iter().map(|&r| tr[r] - b.dofs[r]));
        let soft: Vec<f64> = self.soft.iter().map(|&(r, w)| w * (tr[r] - b.dofs[r])).collect();
        let corr = self.core.solve(&rhs, &soft);
        let mut field = naive;
        field.axpy(-1.0, &VecField::from_flat(&self.grid, &corr));
        Ok(Extension { field, lambda })
    }

    /// Largest deviation of the pinned-end trace of `u` from b.
    pub fn pinned_residual(&self, u: &VecField, b: &BoundaryField) -> f64 {
        let tr = self.trace.apply_field(u);
        self.hard.iter().chain(&self.dropped).map(|&r| (tr[r] - b.dofs[r]).abs()).fold(0.0, f64::max)
    }

    /// Hermite trace Bu as a boundary field on the beam mesh.
    pub fn trace_of(&self, u: &VecField) -> BoundaryField {
        BoundaryField { ell: self.curve.ell, m: self.curve.m, dofs: self.trace.apply_field(u) }
    }
}

/// sup over beam quadrature points of |u(η(x)) − b(x)|.
pub fn pointwise_trace_error(u: &VecField, b: &BoundaryField, curve: &BeamCurve) -> f64 {
    curve
        .quadrature()
        .iter()
        .map(|&(_, _, x, _)| {
            let z = curve.eval_unchecked(x, 0);
            let (v, w) = (u.value(z), b.eval(x, 0));
            (v[0] - w[0]).hypot(v[1] - w[1])
        })
        .fold(0.0, f64::max)
}

/// ‖∇·u + λ(ψ⁺ − ψ⁻)‖ / (‖b‖_{H¹} + 1).
pub fn divergence_defect(ext: &Extension, bumps: &BumpPair, b_h1: f64) -> f64 {
    let mut d = ext.field.divergence();
    for (a, p) in d.c.iter_mut().zip(&bumps.difference().c) {
        *a += ext.lambda * p;
    }
    d.l2_sq().sqrt() / (b_h1 + 1.0)
}

/// One-shot extension with the standard cutoff.
pub fn solenoidal_extension(grid: &FluidGrid, b: &BoundaryField, curve: &BeamCurve, bumps: &BumpPair) -> Result<Extension> {
    ExtensionSolver::new(grid, curve, CutoffProfile::standard(grid.ell), bumps.clone())?.extend(b)
}

/// Smooth random boundary field with clamped horizontal slope at the ends.
pub fn random_boundary_field(ell: f64, m: usize, modes: usize, rng: &mut impl rand::Rng) -> BoundaryField {
    let a: Vec<[f64; 2]> = (1..=modes).map(|k| [(rng.gen::<f64>() - 0.5) / k as f64, (rng.gen::<f64>() - 0.5) / k as f64]).collect();
    let k0 = std::f64::consts::PI / ell;
    BoundaryField::from_fn(ell, m, |x| {
        let mut v = [[0.0; 2]; 3];
        for (k, ak) in a.iter().enumerate() {
            let kk = (k + 1) as f64 * k0;
            let (s, c) = ((kk * x).sin(), (kk * x).cos());
            // horizontal: sin² modes (zero value and slope), vertical: sin modes
            let (s1, c1) = ((k0 * x).sin(), (k0 * x).cos());
            let h = [s1 * s1 * s, 2.0 * k0 * s1 * c1 * s + s1 * s1 * kk * c,
                2.0 * k0 * k0 * (c1 * c1 - s1 * s1) * s + 4.0 * k0 * s1 * c1 * kk * c - s1 * s1 * kk * kk * s];
            let g = [s, kk * c, -kk * kk * s];
            for r in 0..3 {
                v[r][0] += ak[0] * h[r];
                v[r][1] += ak[1] * g[r];
            }
        }
        v
    })
    .expect("modal fields vanish at the ends")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const M: usize = 16;

    fn sine_field(ell: f64) -> BoundaryField {
        let k = PI / ell;
        BoundaryField::from_fn(ell, M, |x| [[0.0, (k * x).sin()], [0.0, k * (k * x).cos()], [0.0, -k * k * (k * x).sin()]]).unwrap()
    }

    #[test]
    fn lambda_oracles() {
        let rest = BeamCurve::rest(1.0, M);
        assert_eq!(lambda_of(&BoundaryField::zeros(1.0, M), &rest), 0.0);
        let lam = lambda_of(&sine_field(1.0), &rest);
        assert!((lam - 2.0 / PI).abs() < 1e-9, "{lam}");
        let horiz = BoundaryField::from_fn(1.0, M, |x| [[x * (1.0 - x), 0.0], [1.0 - 2.0 * x, 0.0], [-2.0, 0.0]]).unwrap();
        assert_eq!(lambda_of(&horiz, &rest), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let c = BeamCurve::random_modal(1.0, M, 3, 0.3, 0.2, &mut rng);
            let b = random_boundary_field(1.0, M, 4, &mut rng);
            assert!((lambda_of(&b, &c) - lambda_by_parts(&b, &c)).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_profile() {
        let b = CutoffProfile::standard(1.0);
        assert_eq!(b.eval(0.0), 1.0);
        assert!((b.eval(0.5 - b.gamma) - 1.0).abs() < 1e-12);
        assert_eq!(b.eval(0.5), 0.0);
        assert_eq!(b.eval(-0.49), 0.0);
        assert!((0..=100).all(|i| (0.0..=1.0).contains(&b.eval(-0.5 + i as f64 / 100.0))));
    }

    #[test]
    fn naive_extension_of_parabola() {
        let g = FluidGrid::new(1.0, 32).unwrap();
        let rest = BeamCurve::rest(1.0, M);
        let b = BoundaryField::from_fn(1.0, M, |x| [[0.0, x * (1.0 - x)], [0.0, 1.0 - 2.0 * x], [0.0, -2.0]]).unwrap();
        let beta = CutoffProfile::standard(1.0);
        let u = naive_extension(&g, &b, &rest, &beta).unwrap();
        let mut err: f64 = 0.0;
        for i in 0..=20 {
            for j in 0..=20 {
                let z = [i as f64 / 20.0, -0.5 + j as f64 / 20.0];
                let v = u.value(z);
                err = err.max(v[0].abs()).max((v[1] - z[0] * (1.0 - z[0]) * beta.eval(z[1])).abs());
            }
        }
        assert!(err < 2e-3, "{err}");
        assert!(pointwise_trace_error(&u, &b, &rest) < 1e-3);
        let zero = naive_extension(&g, &BoundaryField::zeros(1.0, M), &rest, &beta).unwrap();
        assert_eq!(zero.max_abs_coeff(), 0.0);
        let high = BeamCurve::sine(1.0, M, 0.4);
        assert!(matches!(naive_extension(&g, &b, &high, &beta), Err(FsiError::BandExit { .. })));
    }

    #[test]
    fn extension_contract_on_rest_curve() {
        let g = FluidGrid::new(1.0, 32).unwrap();
        let rest = BeamCurve::rest(1.0, M);
        let bumps = BumpPair::new(&g, 0).unwrap();
        assert!((bumps.plus.integral() - 1.0).abs() < 1e-13);
        assert!((bumps.minus.integral() - 1.0).abs() < 1e-13);
        let solver = ExtensionSolver::new(&g, &rest, CutoffProfile::standard(1.0), bumps.clone()).unwrap();
        let b = sine_field(1.0);
        let ext = solver.extend(&b).unwrap();
        assert!((ext.lambda - 2.0 / PI).abs() < 1e-9);
        assert!(solver.pinned_residual(&ext.field, &b) < 1e-9);
        assert!(divergence_defect(&ext, &bumps, b.h1_norm_sq(&rest).sqrt()) < 1e-9);
        let naive = naive_extension(&g, &b, &rest, &solver.beta).unwrap();
        let (e_ext, e_naive) = (pointwise_trace_error(&ext.field, &b, &rest), pointwise_trace_error(&naive, &b, &rest));
        println!("trace errors {e_ext:e} {e_naive:e}");
        assert!(e_ext < 1e-3);
        let zero = solver.extend(&BoundaryField::zeros(1.0, M)).unwrap();
        assert_eq!(zero.field.max_abs_coeff(), 0.0);
        assert_eq!(zero.lambda, 0.0);
    }

    #[test]
    fn extension_is_linear_on_curved_interface() {
        let g = FluidGrid::new(1.0, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let curve = BeamCurve::random_modal(1.0, M, 3, 0.4, 0.2, &mut rng);
        let bumps = BumpPair::new(&g, 1).unwrap();
        let solver = ExtensionSolver::new(&g, &curve, CutoffProfile::standard(1.0), bumps.clone()).unwrap();
        let b1 = random_boundary_field(1.0, M, 4, &mut rng);
        let b2 = random_boundary_field(1.0, M, 4, &mut rng);
        let (e1, e2) = (solver.extend(&b1).unwrap(), solver.extend(&b2).unwrap());
        let e12 = solver.extend(&b1.add(&b2)).unwrap();
        let mut d = e12.field.clone();
        d.axpy(-1.0, &e1.field);
        d.axpy(-1.0, &e2.field);
        assert!(d.max_abs_coeff() < 1e-10 * e12.field.max_abs_coeff());
        assert!((e12.lambda - e1.lambda - e2.lambda).abs() < 1e-13);
        assert!(solver.pinned_residual(&e1.field, &b1) < 1e-9);
        let e = pointwise_trace_error(&e1.field, &b1, &curve);
        let e0 = pointwise_trace_error(&naive_extension(&g, &b1, &curve, &solver.beta).unwrap(), &b1, &curve);
        println!("trace errors {e:e} {e0:e}");
        assert!(e < 1e-2);
        assert!(divergence_defect(&e1, &bumps, b1.h1_norm_sq(&curve).sqrt()) < 1e-8);
    }
}
