//! Elastic energy of the beam, its dof gradient and Hessian, the injectivity floor and
//! the coercivity margin.

use serde::{Deserialize, Serialize};

use crate::error::{FsiError, Result};
use crate::geometry::{shape, BeamCurve};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamParams {
    pub c1: f64,
    pub c2: f64,
    pub lambda0: f64,
    pub alpha: f64,
    pub rho_s: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams { c1: 1.0, c2: 1.0, lambda0: 1.0, alpha: 2.0, rho_s: 1.0 }
    }
}

impl BeamParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("lambda0", self.lambda0), ("rho_s", self.rho_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FsiError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(FsiError::InvalidParam(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub stretch: f64,
    pub barrier: f64,
    pub bend_h: f64,
    pub bend_v: f64,
    pub total: f64,
}

struct QPoint {
    e: usize,
    w: f64,
    s1: [f64; 6],
    s2: [f64; 6],
}

fn qpoints(curve: &BeamCurve) -> Vec<QPoint> {
    let he = curve.he();
    curve
        .quadrature()
        .into_iter()
        .map(|(e, t, _, w)| QPoint { e, w, s1: shape(t, he, 1), s2: shape(t, he, 2) })
        .collect()
}

fn local(curve: &BeamCurve, q: &QPoint) -> (f64, f64, f64) {
    let d1 = curve.element_dofs(q.e, 0);
    let d2 = curve.element_dofs(q.e, 1);
    let a: f64 = (0..6).map(|j| q.s1[j] * d1[j]).sum();
    let b1: f64 = (0..6).map(|j| q.s2[j] * d1[j]).sum();
    let b2: f64 = (0..6).map(|j| q.s2[j] * d2[j]).sum();
    (a, b1, b2)
}

/// 𝓔_K by Gauss quadrature; an error when ∂ₓη₁ ≤ 0 at a quadrature point.
pub fn elastic_energy(curve: &BeamCurve, p: &BeamParams) -> Result<EnergyBreakdown> {
    let mut out = EnergyBreakdown::default();
    for q in qpoints(curve) {
        let (a, b1, b2) = local(curve, &q);
        if !(a > 0.0) {
            return Err(FsiError::Infeasible { min_slope: a });
        }
        out.stretch += q.w * 0.5 * p.c1 * (a - 1.0) * (a - 1.0);
        out.barrier += q.w * a.powf(-2.0 * p.alpha);
        out.bend_h += q.w * 0.5 * p.lambda0 * b1 * b1;
        out.bend_v += q.w * 0.5 * p.c2 * b2 * b2;
    }
    if !out.barrier.is_finite() {
        return Err(FsiError::Infeasible { min_slope: 0.0 });
    }
    out.total = out.stretch + out.barrier + out.bend_h + out.bend_v;
    Ok(out)
}

/// Gradient of 𝓔_K with respect to every dof (pinned dofs included; callers restrict).
pub fn elastic_gradient_full(curve: &BeamCurve, p: &BeamParams) -> Result<Vec<f64>> {
    let mut g = vec![0.0; curve.dofs.len()];
    for q in qpoints(curve) {
        let (a, b1, b2) = local(curve, &q);
        if !(a > 0.0) {
            return Err(FsiError::Infeasible { min_slope: a });
        }
        let da = p.c1 * (a - 1.0) - 2.0 * p.alpha * a.powf(-2.0 * p.alpha - 1.0);
        for j in 0..6 {
            let i1 = BeamCurve::global_index(q.e, j, 0);
            let i2 = BeamCurve::global_index(q.e, j, 1);
            g[i1] += q.w * (da * q.s1[j] + p.lambda0 * b1 * q.s2[j]);
            g[i2] += q.w * p.c2 * b2 * q.s2[j];
        }
    }
    Ok(g)
}

/// Gradient restricted to the free dofs (pinned ends excluded).
pub fn elastic_gradient(curve: &BeamCurve, p: &BeamParams) -> Result<Vec<f64>> {
    let g = elastic_gradient_full(curve, p)?;
    Ok(crate::geometry::free_dofs(curve.m).into_iter().map(|i| g[i]).collect())
}

/// Dense Hessian of 𝓔_K over all dofs, row-major.
pub fn elastic_hessian_full(curve: &BeamCurve, p: &BeamParams) -> Result<Vec<f64>> {
    let n = curve.dofs.len();
    let mut h = vec![0.0; n * n];
    for q in qpoints(curve) {
        let (a, _, _) = local(curve, &q);
        if !(a > 0.0) {
            return Err(FsiError::Infeasible { min_slope: a });
        }
        let kaa = p.c1 + 2.0 * p.alpha * (2.0 * p.alpha + 1.0) * a.powf(-2.0 * p.alpha - 2.0);
        for i in 0..6 {
            for j in 0..6 {
                let (r1, c1) = (BeamCurve::global_index(q.e, i, 0), BeamCurve::global_index(q.e, j, 0));
                let (r2, c2) = (BeamCurve::global_index(q.e, i, 1), BeamCurve::global_index(q.e, j, 1));
                h[r1 * n + c1] += q.w * (kaa * q.s1[i] * q.s1[j] + p.lambda0 * q.s2[i] * q.s2[j]);
                h[r2 * n + c2] += q.w * p.c2 * q.s2[i] * q.s2[j];
            }
        }
    }
    Ok(h)
}

/// δ₁ = ((α−1)E0/√(2λ₀) + 1)^{1/(1−α)}.
pub fn injectivity_floor(e0: f64, alpha: f64, lambda0: f64) -> f64 {
    ((alpha - 1.0) * e0.max(0.0) / (2.0 * lambda0).sqrt() + 1.0).powf(1.0 / (1.0 - alpha))
}

/// Gram matrix of the k-th derivative over all dofs (both components), row-major.
pub fn derivative_gram(curve: &BeamCurve, k: usize) -> Vec<f64> {
    let n = curve.dofs.len();
    let mut g = vec![0.0; n * n];
    let he = curve.he();
    for (e, t, _, w) in curve.quadrature() {
        let s = shape(t, he, k);
        for c in 0..2 {
            for i in 0..6 {
                let r = BeamCurve::global_index(e, i, c);
                for j in 0..6 {
                    let cc = BeamCurve::global_index(e, j, c);
                    g[r * n + cc] += w * s[i] * s[j];
                }
            }
        }
    }
    g
}

/// ∫|∂ₓᵏ v|² for a dof vector `v` laid out like a curve.
pub fn seminorm_sq(curve: &BeamCurve, v: &[f64], k: usize) -> f64 {
    let he = curve.he();
    let mut s = 0.0;
    for (e, t, _, w) in curve.quadrature() {
        let sh = shape(t, he, k);
        for c in 0..2 {
            let mut val = 0.0;
            for j in 0..6 {
                val += sh[j] * v[BeamCurve::global_index(e, j, c)];
            }
            s += w * val * val;
        }
    }
    s
}

/// Discrete ‖η‖²_{H²} = Σ_{k≤2} ∫|∂ₓᵏη|².
pub fn h2_norm_sq(curve: &BeamCurve) -> f64 {
    (0..3).map(|k| seminorm_sq(curve, &curve.dofs, k)).sum()
}

/// 𝓔_K(η) − [½ min{c₁,c₂,λ₀} ‖η‖²_{H²} − ℓc₁/2].
pub fn coercivity_check(curve: &BeamCurve, p: &BeamParams) -> Result<f64> {
    let e = elastic_energy(curve, p)?.total;
    let m = p.c1.min(p.c2).min(p.lambda0);
    Ok(e - (0.5 * m * h2_norm_sq(curve) - 0.5 * curve.ell * p.c1))
}

/// The part of the bound the energy controls term by term:
/// 𝓔_K − [½ min{c₁,c₂,λ₀}(‖∂ₓη₁‖² + ‖∂ₓₓη‖²) − ℓc₁/2] ≥ 0.
pub fn coercivity_seminorm_margin(curve: &BeamCurve, p: &BeamParams) -> Result<f64> {
    let e = elastic_energy(curve, p)?.total;
    let m = p.c1.min(p.c2).min(p.lambda0);
    let mut d1 = 0.0;
    for (_, _, x, w) in curve.quadrature() {
        d1 += w * curve.eval_unchecked(x, 1)[0].powi(2);
    }
    let d2 = seminorm_sq(curve, &curve.dofs, 2);
    Ok(e - (0.5 * m * (d1 + d2) - 0.5 * curve.ell * p.c1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::free_dofs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(seed: u64, amp: f64) -> BeamCurve {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = BeamCurve::rest(1.0, 8);
        for i in free_dofs(8) {
            c.dofs[i] += amp * (rng.gen::<f64>() - 0.5);
        }
        c
    }

    #[test]
    fn rest_curve_energy() {
        let p = BeamParams { c1: 3.0, c2: 0.5, lambda0: 2.0, alpha: 1.7, rho_s: 1.0 };
        let e = elastic_energy(&BeamCurve::rest(2.0, 8), &p).unwrap();
        assert!(e.stretch < 1e-25);
        assert!((e.barrier - 2.0).abs() < 1e-14);
        assert!(e.bend_h + e.bend_v < 1e-25);
        assert!((e.total - 2.0).abs() < 1e-14);
        let g = elastic_gradient(&BeamCurve::rest(2.0, 8), &p).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-11), "{g:?}");
    }

    #[test]
    fn quartic_bending_energy() {
        // ∫₀¹ |(x²(1−x)²)''|² dx = ∫ (2 − 12x + 12x²)² dx = 4/5
        let eps = 0.3;
        let c = BeamCurve::from_fn(1.0, 4, |x| {
            let p = x * x * (1.0 - x) * (1.0 - x);
            let dp = 2.0 * x * (1.0 - x) * (1.0 - 2.0 * x);
            let ddp = 2.0 - 12.0 * x + 12.0 * x * x;
            [[x, eps * p], [1.0, eps * dp], [0.0, eps * ddp]]
        })
        .unwrap();
        let p = BeamParams { c2: 2.5, ..Default::default() };
        let e = elastic_energy(&c, &p).unwrap();
        assert!((e.total - (1.0 + 0.5 * 2.5 * eps * eps * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_error() {
        let mut c = BeamCurve::rest(1.0, 4);
        c.dofs[6 * 2 + 2] = -0.5;
        assert!(matches!(elastic_energy(&c, &BeamParams::default()), Err(FsiError::Infeasible { .. })));
    }

    #[test]
    fn barrier_grows_under_compression() {
        let p = BeamParams::default();
        let mut last = 0.0;
        for k in 0..6 {
            let mut c = BeamCurve::rest(1.0, 4);
            c.dofs[6 * 2 + 2] = 0.5f64.powi(k);
            let e = elastic_energy(&c, &p).unwrap().total;
            assert!(e > last);
            last = e;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = BeamParams { c1: 1.3, c2: 0.7, lambda0: 2.0, alpha: 2.5, rho_s: 1.0 };
        for seed in 0..5 {
            let c = perturbed(seed, 0.1);
            let g = elastic_gradient_full(&c, &p).unwrap();
            for i in free_dofs(8) {
                let h = 1e-6;
                let mut cp = c.clone();
                cp.dofs[i] += h;
                let mut cm = c.clone();
                cm.dofs[i] -= h;
                let fd = (elastic_energy(&cp, &p).unwrap().total - elastic_energy(&cm, &p).unwrap().total) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "i={i} fd={fd} g={}", g[i]);
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let p = BeamParams::default();
        let c = perturbed(7, 0.1);
        let hs = elastic_hessian_full(&c, &p).unwrap();
        let n = c.dofs.len();
        for i in free_dofs(8).into_iter().step_by(5) {
            let h = 1e-6;
            let mut cp = c.clone();
            cp.dofs[i] += h;
            let mut cm = c.clone();
            cm.dofs[i] -= h;
            let gp = elastic_gradient_full(&cp, &p).unwrap();
            let gm = elastic_gradient_full(&cm, &p).unwrap();
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!((fd - hs[j * n + i]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn vertical_perturbation_decouples() {
        let p = BeamParams::default();
        let mut c = BeamCurve::rest(1.0, 8);
        for i in 1..8 {
            c.dofs[6 * i + 1] = 0.05 * (i as f64).sin();
            c.dofs[6 * i + 5] = 0.3 * (i as f64).cos();
        }
        let g = elastic_gradient_full(&c, &p).unwrap();
        for i in free_dofs(8).into_iter().filter(|i| i % 2 == 0) {
            assert!(g[i].abs() < 1e-12, "i={i} g={}", g[i]);
        }
    }

    #[test]
    fn floor_values() {
        assert_eq!(injectivity_floor(0.0, 2.0, 1.0), 1.0);
        assert_eq!(injectivity_floor(2.0, 2.0, 2.0), 0.5);
        let mut last = 1.0;
        for k in 1..20 {
            let d = injectivity_floor(k as f64, 1.5, 0.7);
            assert!(d < last && d > 0.0);
            last = d;
        }
    }

    #[test]
    fn coercivity_rest_curve() {
        let p = BeamParams { c1: 1.0, c2: 2.0, lambda0: 3.0, alpha: 2.0, rho_s: 1.0 };
        let c = BeamCurve::rest(1.0, 8);
        let m = coercivity_check(&c, &p).unwrap();
        // ‖(x,0)‖²_{H²} = 1/3 + 1
        let want = 1.0 - 0.5 * (1.0 / 3.0 + 1.0) + 0.5;
        assert!((m - want).abs() < 1e-13 && m >= 0.0);
    }

    #[test]
    fn full_norm_bound_fails_for_long_beams() {
        // ‖η₁‖²_{L²} grows like ℓ³/3 while the energy of the rest state is ℓ
        let c = BeamCurve::rest(10.0, 8);
        assert!(coercivity_check(&c, &BeamParams::default()).unwrap() < 0.0);
        assert!(coercivity_seminorm_margin(&c, &BeamParams::default()).unwrap() >= 0.0);
    }
}
