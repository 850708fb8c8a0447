//! Box domain, clamped quintic beam curves, region labels and the inverse of η₁.

use serde::{Deserialize, Serialize};

use crate::error::{FsiError, Result};
use crate::quad::gauss_on;

/// Gauss points per beam element.
pub const BEAM_GAUSS: usize = 6;

/// Ω = (0, ℓ) × (−ℓ/2, ℓ/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub ell: f64,
}

impl DomainSpec {
    pub fn new(ell: f64) -> Result<Self> {
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(FsiError::InvalidParam(format!("ell must be positive, got {ell}")));
        }
        Ok(DomainSpec { ell })
    }

    pub fn contains_closed(&self, z: [f64; 2]) -> bool {
        let h = 0.5 * self.ell;
        z[0] >= 0.0 && z[0] <= self.ell && z[1] >= -h && z[1] <= h
    }

    pub fn area(&self) -> f64 {
        self.ell * self.ell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Plus,
    Minus,
    Interface,
}

/// Quintic Hermite shape functions on [0,1] in monomial form, ordered
/// (left value, left slope, left curvature, right value, right slope, right curvature).
const HERMITE: [[f64; 6]; 6] = [
    [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
    [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
    [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
    [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
    [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
    [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
];

fn poly_deriv(c: &[f64; 6], t: f64, k: usize) -> f64 {
    let mut s = 0.0;
    for (p, &cp) in c.iter().enumerate().skip(k) {
        let mut f = 1.0;
        for q in 0..k {
            f *= (p - q) as f64;
        }
        s += cp * f * t.powi((p - k) as i32);
    }
    s
}

/// k-th x-derivative of the six local shape functions of an element of length `he`,
/// already scaled so that they multiply the raw nodal dofs (value, ∂ₓ, ∂ₓₓ).
pub fn shape(t: f64, he: f64, k: usize) -> [f64; 6] {
    let mut out = [0.0; 6];
    let sk = he.powi(-(k as i32));
    for (j, o) in out.iter_mut().enumerate() {
        let r = j % 3;
        *o = poly_deriv(&HERMITE[j], t, k) * sk * he.powi(r as i32);
    }
    out
}

/// Evaluates the `order`-th derivative of a two-component quintic Hermite field with the
/// nodal dof layout of [`BeamCurve`].
pub fn hermite_eval(ell: f64, m: usize, dofs: &[f64], x: f64, order: usize) -> [f64; 2] {
    let he = ell / m as f64;
    let e = ((x / he).floor().max(0.0) as usize).min(m - 1);
    let t = (x - e as f64 * he) / he;
    let s = shape(t, he, order);
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..6).map(|j| s[j] * dofs[BeamCurve::global_index(e, j, c)]).sum();
    }
    out
}

/// Clamped C² piecewise-quintic curve. `dofs[6*i + 2*r + c]` holds the r-th derivative
/// of component c at node i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCurve {
    pub ell: f64,
    pub m: usize,
    pub dofs: Vec<f64>,
}

/// Indices of the pinned dofs (end values and end slopes).
pub fn pinned_dofs(m: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(8);
    for node in [0, m] {
        for k in 0..4 {
            v.push(6 * node + k);
        }
    }
    v
}

/// Indices of the free dofs, in increasing order.
pub fn free_dofs(m: usize) -> Vec<usize> {
    let pinned = pinned_dofs(m);
    (0..6 * (m + 1)).filter(|i| !pinned.contains(i)).collect()
}

impl BeamCurve {
    /// Identity deformation η(x) = (x, 0).
    pub fn rest(ell: f64, m: usize) -> Self {
        let mut dofs = vec![0.0; 6 * (m + 1)];
        for i in 0..=m {
            dofs[6 * i] = ell * i as f64 / m as f64;
            dofs[6 * i + 2] = 1.0;
        }
        BeamCurve { ell, m, dofs }
    }

    /// Hermite interpolant of a curve given with its first two derivatives.
    pub fn from_fn(ell: f64, m: usize, f: impl Fn(f64) -> [[f64; 2]; 3]) -> Result<Self> {
        if m < 1 {
            return Err(FsiError::InvalidParam("beam needs at least one element".into()));
        }
        let mut dofs = vec![0.0; 6 * (m + 1)];
        for i in 0..=m {
            let x = ell * i as f64 / m as f64;
            let v = f(x);
            for r in 0..3 {
                for c in 0..2 {
                    dofs[6 * i + 2 * r + c] = v[r][c];
                }
            }
        }
        let mut curve = BeamCurve { ell, m, dofs };
        curve.check_clamped(1e-12)?;
        for (node, x) in [(0, 0.0), (m, ell)] {
            curve.dofs[6 * node..6 * node + 4].copy_from_slice(&[x, 0.0, 1.0, 0.0]);
        }
        Ok(curve)
    }

    /// η(x) = (x, A sin²(πx/ℓ)); clamped for every amplitude.
    pub fn sine(ell: f64, m: usize, amp: f64) -> Self {
        let k = std::f64::consts::PI / ell;
        Self::from_fn(ell, m, |x| {
            let s = (k * x).sin();
            let c = (k * x).cos();
            [[x, amp * s * s], [1.0, 2.0 * amp * k * s * c], [0.0, 2.0 * amp * k * k * (c * c - s * s)]]
        })
        .expect("sine preset is clamped")
    }

    /// η = (x + p₁, p₂) with p_c = Σ_k a_{ck} sin²(πx/ℓ) sin(kπx/ℓ); clamped for all coefficients.
    pub fn modal(ell: f64, m: usize, a1: &[f64], a2: &[f64]) -> Self {
        let k0 = std::f64::consts::PI / ell;
        let pert = |a: &[f64], x: f64| {
            let (s, c) = ((k0 * x).sin(), (k0 * x).cos());
            let (f0, f1, f2) = (s * s, 2.0 * k0 * s * c, 2.0 * k0 * k0 * (c * c - s * s));
            let mut out = [0.0; 3];
            for (k, &ak) in a.iter().enumerate() {
                let kk = (k + 1) as f64 * k0;
                let (g0, g1, g2) = ((kk * x).sin(), kk * (kk * x).cos(), -kk * kk * (kk * x).sin());
                out[0] += ak * f0 * g0;
                out[1] += ak * (f1 * g0 + f0 * g1);
                out[2] += ak * (f2 * g0 + 2.0 * f1 * g1 + f0 * g2);
            }
            out
        };
        Self::from_fn(ell, m, |x| {
            let (p, q) = (pert(a1, x), pert(a2, x));
            [[x + p[0], q[0]], [1.0 + p[1], q[1]], [p[2], q[2]]]
        })
        .expect("modal curves are clamped")
    }

    /// Random feasible modal curve with min ∂ₓη₁ ≥ `min_slope` and max|η₂| ≤ `max_height`.
    pub fn random_modal(
        ell: f64,
        m: usize,
        modes: usize,
        min_slope: f64,
        max_height: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let a1: Vec<f64> = (1..=modes).map(|k| (rng.gen::<f64>() - 0.5) * 0.3 * ell / k as f64).collect();
        let a2: Vec<f64> = (1..=modes).map(|k| (rng.gen::<f64>() - 0.5) * 0.6 * ell / k as f64).collect();
        let mut scale = 1.0;
        loop {
            let s1: Vec<f64> = a1.iter().map(|a| a * scale).collect();
            let s2: Vec<f64> = a2.iter().map(|a| a * scale).collect();
            let c = Self::modal(ell, m, &s1, &s2);
            if c.min_slope() >= min_slope && c.max_abs_eta2() <= max_height {
                return c;
            }
            scale *= 0.8;
        }
    }

    pub fn he(&self) -> f64 {
        self.ell / self.m as f64
    }

    pub fn node_x(&self, i: usize) -> f64 {
        self.ell * i as f64 / self.m as f64
    }

    pub fn check_clamped(&self, tol: f64) -> Result<()> {
        let m = self.m;
        let want = [(0usize, 0usize, 0.0), (0, 1, 0.0), (0, 2, 1.0), (0, 3, 0.0)];
        for (node, target_x) in [(0usize, 0.0), (m, self.ell)] {
            for &(_, k, v) in &want {
                let target = if k == 0 { target_x } else { v };
                let got = self.dofs[6 * node + k];
                if (got - target).abs() > tol {
                    return Err(FsiError::NotClamped(format!(
                        "node {node} dof {k}: {got} != {target}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn element_of(&self, x: f64) -> (usize, f64) {
        let he = self.he();
        let e = ((x / he).floor().max(0.0) as usize).min(self.m - 1);
        (e, (x - e as f64 * he) / he)
    }

    /// Element dofs for component `c`, in shape-function order.
    pub fn element_dofs(&self, e: usize, c: usize) -> [f64; 6] {
        let mut out = [0.0; 6];
        for a in 0..2 {
            for r in 0..3 {
                out[3 * a + r] = self.dofs[6 * (e + a) + 2 * r + c];
            }
        }
        out
    }

    /// Global dof index for local shape index `j` of element `e`, component `c`.
    pub fn global_index(e: usize, j: usize, c: usize) -> usize {
        6 * (e + j / 3) + 2 * (j % 3) + c
    }

    pub fn eval_unchecked(&self, x: f64, order: usize) -> [f64; 2] {
        hermite_eval(self.ell, self.m, &self.dofs, x, order)
    }

    /// η or one of its first three derivatives at x.
    pub fn eval(&self, x: f64, order: usize) -> Result<[f64; 2]> {
        if order > 3 {
            return Err(FsiError::BadOrder(order));
        }
        if !(-1e-14 * self.ell..=self.ell * (1.0 + 1e-14)).contains(&x) {
            return Err(FsiError::OutOfRange { x, ell: self.ell });
        }
        Ok(self.eval_unchecked(x.clamp(0.0, self.ell), order))
    }

    /// Beam quadrature: (element, local t, x, weight).
    pub fn quadrature(&self) -> Vec<(usize, f64, f64, f64)> {
        let he = self.he();
        let rule = gauss_on(BEAM_GAUSS, 0.0, 1.0);
        let mut out = Vec::with_capacity(self.m * BEAM_GAUSS);
        for e in 0..self.m {
            for &(t, w) in &rule {
                out.push((e, t, (e as f64 + t) * he, w * he));
            }
        }
        out
    }

    /// Minimum of ∂ₓη₁ over quadrature points and nodes.
    pub fn min_slope(&self) -> f64 {
        let mut m = f64::INFINITY;
        for (_, _, x, _) in self.quadrature() {
            m = m.min(self.eval_unchecked(x, 1)[0]);
        }
        for i in 0..=self.m {
            m = m.min(self.dofs[6 * i + 2]);
        }
        m
    }

    pub fn check_feasible(&self) -> Result<f64> {
        let s = self.min_slope();
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(FsiError::Infeasible { min_slope: s })
        }
    }

    /// x ∈ [0,ℓ] with η₁(x) = z1.
    pub fn inverse_eta1(&self, z1: f64) -> Result<f64> {
        if !(-1e-14 * self.ell..=self.ell * (1.0 + 1e-14)).contains(&z1) {
            return Err(FsiError::OutOfRange { x: z1, ell: self.ell });
        }
        if z1 <= 0.0 {
            return Ok(0.0);
        }
        if z1 >= self.ell {
            return Ok(self.ell);
        }
        // locate the element by the (monotone) nodal values
        let mut lo = 0usize;
        let mut hi = self.m;
        for i in 0..self.m {
            if self.dofs[6 * (i + 1)] <= self.dofs[6 * i] {
                return Err(FsiError::NotMonotone { x: self.node_x(i) });
            }
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.dofs[6 * mid] <= z1 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let e = lo;
        let he = self.he();
        let d = self.element_dofs(e, 0);
        let f = |t: f64, k: usize| -> f64 {
            let s = shape(t, he, k);
            (0..6).map(|j| s[j] * d[j]).sum::<f64>()
        };
        let (mut a, mut b) = (0.0f64, 1.0f64);
        let mut t = ((z1 - d[0]) / (d[3] - d[0])).clamp(0.0, 1.0);
        for _ in 0..200 {
            let r = f(t, 0) - z1;
            if r.abs() <= 1e-15 * self.ell.max(1.0) {
                break;
            }
            if r > 0.0 {
                b = t;
            } else {
                a = t;
            }
            let slope = f(t, 1) * he;
            if slope <= 0.0 {
                return Err(FsiError::NotMonotone { x: (e as f64 + t) * he });
            }
            let mut tn = t - r / slope;
            if !(tn > a && tn < b) {
                tn = 0.5 * (a + b);
            }
            if (tn - t).abs() < 1e-16 {
                t = tn;
                break;
            }
            t = tn;
        }
        Ok((e as f64 + t) * he)
    }

    /// Height of the interface above z1: η₂(η₁⁻¹(z1)).
    pub fn height_at(&self, z1: f64) -> Result<f64> {
        let x = self.inverse_eta1(z1)?;
        Ok(self.eval_unchecked(x, 0)[1])
    }

    pub fn classify(&self, z: [f64; 2], tol: f64) -> Result<RegionLabel> {
        let g = self.height_at(z[0].clamp(0.0, self.ell))?;
        Ok(if z[1] > g + tol {
            RegionLabel::Plus
        } else if z[1] < g - tol {
            RegionLabel::Minus
        } else {
            RegionLabel::Interface
        })
    }

    pub fn max_abs_eta2(&self) -> f64 {
        let mut m = 0.0f64;
        for (_, _, x, _) in self.quadrature() {
            m = m.max(self.eval_unchecked(x, 0)[1].abs());
        }
        for i in 0..=self.m {
            m = m.max(self.dofs[6 * i + 1].abs());
        }
        m
    }

    /// Distance to the top and bottom walls (the clamped ends sit on the side walls).
    pub fn min_boundary_distance(&self, collision_tol: f64) -> BoundaryDistance {
        let d = 0.5 * self.ell - self.max_abs_eta2();
        // smallest chord ratio between samples at least two elements apart
        let pts: Vec<(f64, [f64; 2])> = (0..=4 * self.m)
            .map(|k| {
                let x = self.ell * k as f64 / (4 * self.m) as f64;
                (x, self.eval_unchecked(x, 0))
            })
            .collect();
        let mut ratio = f64::INFINITY;
        let gap = 2.0 * self.he();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let dx = pts[j].0 - pts[i].0;
                if dx < gap - 1e-12 {
                    continue;
                }
                let dz = ((pts[j].1[0] - pts[i].1[0]).powi(2) + (pts[j].1[1] - pts[i].1[1]).powi(2)).sqrt();
                ratio = ratio.min(dz / dx);
            }
        }
        BoundaryDistance { distance: d.max(0.0), collision: d <= collision_tol, self_chord_ratio: ratio }
    }

    /// dofs += a·v
    pub fn axpy(&mut self, a: f64, v: &[f64]) {
        for (d, x) in self.dofs.iter_mut().zip(v) {
            *d += a * x;
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundaryDistance {
    pub distance: f64,
    pub collision: bool,
    pub self_chord_ratio: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quartic(ell: f64, m: usize, eps: f64) -> BeamCurve {
        BeamCurve::from_fn(ell, m, |x| {
            let p = x * x * (ell - x) * (ell - x);
            let dp = 2.0 * x * (ell - x) * (ell - 2.0 * x);
            let ddp = 2.0 * (ell * ell - 6.0 * ell * x + 6.0 * x * x);
            [[x, eps * p], [1.0, eps * dp], [0.0, eps * ddp]]
        })
        .unwrap()
    }

    #[test]
    fn hermite_shapes_interpolate_dofs() {
        let he = 0.7;
        for k in 0..3 {
            let s0 = shape(0.0, he, k);
            let s1 = shape(1.0, he, k);
            for j in 0..6 {
                let e0 = if j == k { 1.0 } else { 0.0 };
                let e1 = if j == 3 + k { 1.0 } else { 0.0 };
                assert!((s0[j] - e0).abs() < 1e-12, "k={k} j={j}");
                assert!((s1[j] - e1).abs() < 1e-12, "k={k} j={j}");
            }
        }
    }

    #[test]
    fn rest_curve_values() {
        let c = BeamCurve::rest(1.0, 8);
        let p = c.eval(0.5, 0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && p[1].abs() < 1e-15);
        for k in 0..=10 {
            let d = c.eval(k as f64 / 10.0, 1).unwrap();
            assert!((d[0] - 1.0).abs() < 1e-14 && d[1].abs() < 1e-14);
        }
        assert!(c.eval(1.5, 0).is_err());
        assert!(c.eval(0.5, 4).is_err());
    }

    #[test]
    fn quartic_is_reproduced() {
        let ell = 1.3;
        let c = quartic(ell, 4, 0.1);
        let d2 = c.eval(0.0, 2).unwrap()[1];
        assert!((d2 - 0.1 * 2.0 * ell * ell).abs() < 1e-12);
        for k in 0..=13 {
            let x = ell * k as f64 / 13.0;
            let p = 0.1 * x * x * (ell - x) * (ell - x);
            assert!((c.eval(x, 0).unwrap()[1] - p).abs() < 1e-13);
        }
    }

    #[test]
    fn third_derivative_of_quartic() {
        let ell = 1.0;
        let c = quartic(ell, 5, 1.0);
        for k in 0..=10 {
            let x = 0.1 * k as f64;
            // (x²(1−x)²)''' = 24x − 12
            assert!((c.eval(x, 3).unwrap()[1] - (24.0 * x - 12.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let ell = 1.0;
        let pi = std::f64::consts::PI;
        let a = 0.05;
        let c = BeamCurve::from_fn(ell, 16, |x| {
            let (s, co) = ((pi * x).sin(), (pi * x).cos());
            [
                [x + a * s * s * s, 0.0],
                [1.0 + 3.0 * a * pi * s * s * co, 0.0],
                [3.0 * a * pi * pi * (2.0 * s * co * co - s * s * s), 0.0],
            ]
        })
        .unwrap();
        for k in 0..=40 {
            let x = k as f64 / 40.0;
            let z = c.eval(x, 0).unwrap()[0];
            let xi = c.inverse_eta1(z).unwrap();
            assert!((xi - x).abs() < 1e-12, "x={x} xi={xi}");
        }
        assert_eq!(c.inverse_eta1(1.0).unwrap(), 1.0);
    }

    #[test]
    fn classification() {
        let c = BeamCurve::rest(1.0, 8);
        assert_eq!(c.classify([0.5, 0.25], 1e-6).unwrap(), RegionLabel::Plus);
        assert_eq!(c.classify([0.5, -0.25], 1e-6).unwrap(), RegionLabel::Minus);
        let s = BeamCurve::sine(1.0, 16, 0.1);
        assert_eq!(s.classify([0.5, 0.0], 1e-6).unwrap(), RegionLabel::Minus);
        for k in 0..=20 {
            let p = s.eval(k as f64 / 20.0, 0).unwrap();
            assert_eq!(s.classify(p, 1e-9).unwrap(), RegionLabel::Interface);
        }
    }

    #[test]
    fn boundary_distance() {
        let c = BeamCurve::rest(1.0, 8);
        assert!((c.min_boundary_distance(1e-9).distance - 0.5).abs() < 1e-15);
        let s = BeamCurve::sine(1.0, 32, 0.3);
        let d = s.min_boundary_distance(1e-9);
        assert!((d.distance - 0.2).abs() < 1e-6);
        assert!(!d.collision);
        let t = BeamCurve::sine(1.0, 32, 0.5);
        assert!(t.min_boundary_distance(1e-9).collision);
    }

    #[test]
    fn pinned_and_free_partition() {
        let m = 5;
        let mut all = pinned_dofs(m);
        all.extend(free_dofs(m));
        all.sort();
        assert_eq!(all, (0..6 * (m + 1)).collect::<Vec<_>>());
    }
}
