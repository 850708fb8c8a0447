//! Pressure diagnostics: the weak residual of an accepted substep, the differential pressure
//! across the beam, the pressure functional P(a) in two constructions, energy ledger checks
//! and the vanishing-fluid sweep.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{elastic_energy, elastic_gradient_full, seminorm_sq};
use crate::bogovskij::{Orientation, RegionSolver, SubgraphDomain};
use crate::error::{FsiError, Result};
use crate::extension::{lambda_of, pointwise_trace_error, BoundaryField, BumpPair, CutoffProfile, ExtensionSolver};
use crate::fluid::{blend_materials, mat_dot, sym_dot, FluidGrid, ScalarField, VecField};
use crate::geometry::{BeamCurve, RegionLabel};
use crate::linalg::{dot, norm, SparseSpd, Triplets};
use crate::stepper::{dense_matvec, displacement, LedgerRow, Model, Scenario, Simulation, SubstepSolution};

/// The vertical test field (0, x(ℓ − x)) on the beam mesh.
pub fn xi0(ell: f64, m: usize) -> BoundaryField {
    BoundaryField::from_fn(ell, m, |x| [[0.0, x * (ell - x)], [0.0, ell - 2.0 * x], [0.0, -2.0]])
        .expect("x(l - x) vanishes at both ends")
}

/// λ₀ = ∫ ∂ₓη ∧ ξ₀.
pub fn lambda0(curve: &BeamCurve) -> f64 {
    lambda_of(&xi0(curve.ell, curve.m), curve)
}

/// The terms of the weak residual R(ξ, q) of one substep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualTerms {
    pub elastic: f64,
    pub eps: f64,
    pub solid: f64,
    pub reg: f64,
    pub inertia: f64,
    pub hyper: f64,
    pub viscous: f64,
    pub forcing: f64,
}

impl ResidualTerms {
    pub fn total(&self) -> f64 {
        self.elastic + self.eps + self.solid + self.reg + self.inertia + self.hyper + self.viscous + self.forcing
    }

    /// Sum of the term magnitudes, the natural roundoff scale of the total.
    pub fn scale(&self) -> f64 {
        [self.elastic, self.eps, self.solid, self.reg, self.inertia, self.hyper, self.viscous, self.forcing]
            .iter()
            .map(|v| v.abs())
            .sum()
    }
}

/// R(ξ, q) at an accepted substep for a beam test field ξ (Hermite dofs) and a fluid test
/// field q. For q = curl ψ with free stream dofs ψ and ξ its beam trace, τR equals ∇G·ψ.
pub fn weak_residual(model: &Model, sol: &SubstepSolution, xi: &[f64], q: &VecField) -> Result<ResidualTerms> {
    let nb = model.nbeam();
    if xi.len() != nb {
        return Err(FsiError::InvalidParam(format!("beam test field needs {nb} dofs")));
    }
    let sc = &model.scheme;
    let (h, d0) = (sc.h, sc.delta0());
    let rho_s = model.phys.beam.rho_s;
    let ge = elastic_gradient_full(&sol.eta_next, &model.phys.beam)?;
    let d3xi = dense_matvec(nb, &model.d3, xi);
    let m0xi = dense_matvec(nb, &model.m0, xi);
    let dv: Vec<f64> = sol.v.iter().zip(&sol.w_solid).map(|(a, b)| a - b).collect();
    let inertia: f64 = (0..sol.markers.len())
        .into_par_iter()
        .map(|i| {
            let qv = q.value(sol.markers[i]);
            let (uu, ww) = (sol.marker_vel[i], sol.w[i]);
            sol.mass[i] * ((uu[0] - ww[0]) * qv[0] + (uu[1] - ww[1]) * qv[1])
        })
        .sum::<f64>()
        / h;
    let hyper = if d0 == 0.0 {
        0.0
    } else {
        let cells = model.grid.cell_quadrature();
        d0 * cells
            .par_iter()
            .map(|&(z, w, (cx, cy))| {
                let gu = sol.u.eval_in_cell(cx, cy, z, 3).grad_lap();
                let gq = q.eval_in_cell(cx, cy, z, 3).grad_lap();
                w * mat_dot(gu, gq)
            })
            .sum::<f64>()
    };
    let tm = sol.t + 0.5 * sol.tau;
    let bl = &sol.blend;
    let (viscous, forcing) = (0..bl.len())
        .into_par_iter()
        .map(|k| {
            let (cx, cy) = bl.cells[k];
            let z = bl.points[k];
            let ju = sol.u.eval_in_cell(cx, cy, z, 1);
            let jq = q.eval_in_cell(cx, cy, z, 1);
            let f = model.phys.forcing.eval(tm, z, model.grid.ell);
            let qv = jq.value();
            (
                bl.weights[k] * bl.mu[k] * sym_dot(ju.sym_grad(), jq.sym_grad()),
                -bl.weights[k] * bl.rho[k] * (f[0] * qv[0] + f[1] * qv[1]),
            )
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(ResidualTerms {
        elastic: dot(&ge, xi),
        eps: sc.eps0 * dot(&sol.v, &d3xi),
        solid: rho_s / h * dot(&dv, &m0xi),
        reg: d0.sqrt() * dot(&displacement(&sol.eta_next), &d3xi),
        inertia,
        hyper,
        viscous,
        forcing,
    })
}

/// One evaluation of the pressure functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureProbe {
    /// P(a) = R(ξ, q).
    pub value: f64,
    /// Roundoff scale of the residual terms.
    pub scale: f64,
    /// ∫_{Ω⁺} a.
    pub upper_mass: f64,
    /// ‖∇·q − a‖ / ‖a‖.
    pub div_residual: f64,
    /// sup |q∘η − ξ| relative to sup |ξ| (absolute when ξ = 0).
    pub trace_residual: f64,
}

/// Agreement of the two constructions of P(a).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub first: PressureProbe,
    pub second: PressureProbe,
    pub difference: f64,
    /// ‖∇G‖·‖ψ_d‖/τ for the stream function ψ_d of the difference field.
    pub bound: f64,
    /// Relative least-squares residual of curl ψ_d against the difference field.
    pub curl_residual: f64,
}

impl Agreement {
    /// |P₁ − P₂| ≤ 10·bound plus roundoff.
    pub fn ok(&self) -> bool {
        self.difference <= 10.0 * self.bound + 1e-10 * (self.first.scale + self.second.scale)
    }
}

/// Pressure data of one accepted substep: the extension of ξ₀ on η^k and the differential
/// pressure R(ξ₀, q₀)/λ₀.
pub struct PressureContext<'a> {
    pub model: &'a Model,
    pub sol: &'a SubstepSolution,
    pub ext: ExtensionSolver,
    pub q0: VecField,
    pub xi0: Vec<f64>,
    pub lambda0: f64,
    pub p_diff: f64,
    pub r0: ResidualTerms,
}

impl<'a> PressureContext<'a> {
    pub fn new(model: &'a Model, sol: &'a SubstepSolution, bump_variant: usize) -> Result<Self> {
        let ell = model.ell();
        let curve = &sol.eta_k;
        let b = xi0(ell, curve.m);
        let lambda0 = lambda_of(&b, curve);
        if lambda0.abs() < 1e-6 * ell.powi(3) {
            return Err(FsiError::Degenerate(format!("lambda0 = {lambda0:e} is below 1e-6 l^3")));
        }
        let bumps = BumpPair::new(&model.grid, bump_variant)?;
        let ext = ExtensionSolver::new(&model.grid, curve, CutoffProfile::standard(ell), bumps)?;
        let e = ext.extend(&b)?;
        let xi = ext.trace.apply_field(&e.field);
        let r0 = weak_residual(model, sol, &xi, &e.field)?;
        Ok(PressureContext { model, sol, q0: e.field, xi0: xi, lambda0, p_diff: r0.total() / lambda0, r0, ext })
    }

    /// ∫_{Ω⁺} a over the material quadrature at η^k.
    pub fn upper_mass(&self, a: &ScalarField) -> f64 {
        let bl = &self.sol.blend;
        (0..bl.len()).filter(|&k| bl.labels[k] == RegionLabel::Plus).map(|k| bl.weights[k] * a.eval(bl.points[k])).sum()
    }

    fn check_mean(&self, a: &ScalarField) -> Result<()> {
        let mean = a.integral();
        let mass: f64 = a.c.iter().map(|v| v.abs()).sum::<f64>() * self.model.grid.h * self.model.grid.h;
        let tol = 1e-9 * mass.max(f64::MIN_POSITIVE);
        if mean.abs() > tol {
            return Err(FsiError::NonzeroMean { mean, tol });
        }
        Ok(())
    }

    fn probe(&self, a: &ScalarField, q: &VecField, upper_mass: f64) -> Result<PressureProbe> {
        let xi = self.ext.trace.apply_field(q);
        let r = weak_residual(self.model, self.sol, &xi, q)?;
        let mut d = q.divergence();
        d.c.iter_mut().zip(&a.c).for_each(|(x, y)| *x -= y);
        let an = a.l2_sq().sqrt();
        let target = xi0(self.model.ell(), self.sol.eta_k.m).scaled(-upper_mass / self.lambda0);
        let tscale = target.dofs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let terr = pointwise_trace_error(q, &target, &self.sol.eta_k);
        Ok(PressureProbe {
            value: r.total(),
            scale: r.scale(),
            upper_mass,
            div_residual: d.l2_sq().sqrt() / an.max(f64::MIN_POSITIVE),
            trace_residual: if tscale > 0.0 { terr / tscale } else { terr },
        })
    }

    /// P(a) with q = q₁ − (A⁺/λ₀)q₀, where q₁ solves ∇·q₁ = a − A⁺(ψ⁺ − ψ⁻) with zero trace.
    pub fn functional(&self, a: &ScalarField) -> Result<PressureProbe> {
        self.check_mean(a)?;
        self.probe(a, &self.first_field(a)?, self.upper_mass(a))
    }

    fn first_field(&self, a: &ScalarField) -> Result<VecField> {
        let ap = self.upper_mass(a);
        let mut g = a.clone();
        g.c.iter_mut().zip(&self.ext.bumps.difference().c).for_each(|(x, d)| *x -= ap * d);
        let mut q = self.ext.zero_trace_solve(&g)?;
        q.axpy(-ap / self.lambda0, &self.q0);
        Ok(q)
    }

    /// P(a) with q = q⁺ + q⁻ − (A⁺/λ₀)q₀, where q^± solve ∇·q^± = aχ_{Ω^±} − A^±ψ^± on each
    /// side of the curve with zero boundary values. `a` must vanish near the curve.
    pub fn functional_by_regions(&self, a: &ScalarField) -> Result<PressureProbe> {
        self.check_mean(a)?;
        self.probe(a, &self.second_field(a)?, self.upper_mass(a))
    }

    fn second_field(&self, a: &ScalarField) -> Result<VecField> {
        let grid = &self.model.grid;
        let curve = &self.sol.eta_k;
        let (ap, am) = split_masses(grid, curve, a)?;
        let mut q = VecField::from_flat(grid, &vec![0.0; 2 * (grid.n + 3) * (grid.n + 2)]);
        for (orient, bump, mass) in
            [(Orientation::Above, &self.ext.bumps.plus, ap), (Orientation::Below, &self.ext.bumps.minus, am)]
        {
            let dom = SubgraphDomain::from_curve(curve, orient, 4 * grid.n)?;
            let mut g = restrict(grid, curve, a, orient)?;
            g.c.iter_mut().zip(&bump.c).for_each(|(x, b)| *x -= mass * b);
            let solver = RegionSolver::new(grid, &dom, 0.0, grid.ell)?;
            q.axpy(1.0, &solver.solve(&g)?);
        }
        q.axpy(-ap / self.lambda0, &self.q0);
        Ok(q)
    }

    /// Both constructions and the bound implied by the solver tolerance; `grad_norm` is the
    /// final gradient norm of the substep minimization.
    pub fn agreement(&self, a: &ScalarField, grad_norm: f64) -> Result<Agreement> {
        self.check_mean(a)?;
        let ap = self.upper_mass(a);
        let qa = self.first_field(a)?;
        let qb = self.second_field(a)?;
        let first = self.probe(a, &qa, ap)?;
        let second = self.probe(a, &qb, ap)?;
        let mut d = qa;
        d.axpy(-1.0, &qb);
        let (psi, curl_residual) = stream_of(self.model, &d)?;
        Ok(Agreement {
            first,
            second,
            difference: (first.value - second.value).abs(),
            bound: grad_norm * norm(&psi) / self.sol.tau,
            curl_residual,
        })
    }
}

/// Coefficient ranges of the datum space split by side of the curve.
fn side_of(grid: &FluidGrid, curve: &BeamCurve, q: usize) -> Result<Option<Orientation>> {
    let n2 = grid.n + 2;
    let (i, j) = (q % n2, q / n2);
    let xs = grid.x2.support(i);
    let ys = grid.y2.support(j);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..=16 {
        let x = (xs.0 + (xs.1 - xs.0) * k as f64 / 16.0).clamp(0.0, grid.ell);
        let y = curve.height_at(x)?;
        lo = lo.min(y);
        hi = hi.max(y);
    }
    let gap = grid.h;
    Ok(if ys.0 >= hi + gap {
        Some(Orientation::Above)
    } else if ys.1 <= lo - gap {
        Some(Orientation::Below)
    } else {
        None
    })
}

fn restrict(grid: &FluidGrid, curve: &BeamCurve, a: &ScalarField, orient: Orientation) -> Result<ScalarField> {
    let mut out = ScalarField::zeros(grid);
    let scale = a.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (q, &v) in a.c.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        match side_of(grid, curve, q)? {
            Some(o) if o == orient => out.c[q] = v,
            Some(_) => {}
            None if v.abs() > 1e-13 * scale => {
                return Err(FsiError::SupportLeak(format!("datum coefficient {q} meets the curve")));
            }
            None => {}
        }
    }
    Ok(out)
}

fn split_masses(grid: &FluidGrid, curve: &BeamCurve, a: &ScalarField) -> Result<(f64, f64)> {
    Ok((restrict(grid, curve, a, Orientation::Above)?.integral(), restrict(grid, curve, a, Orientation::Below)?.integral()))
}

/// Least-squares stream function of a divergence-free field: free dofs ψ minimizing
/// ‖curl ψ − d‖ over coefficients, with the relative residual.
pub fn stream_of(model: &Model, d: &VecField) -> Result<(Vec<f64>, f64)> {
    let nf = model.space.nfree;
    let target = d.to_flat();
    let cols: Vec<Vec<(usize, f64)>> = (0..nf)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; nf];
            e[j] = 1.0;
            model.space.curl(&e).to_flat().into_iter().enumerate().filter(|x| x.1 != 0.0).collect()
        })
        .collect();
    let mut t = Triplets::new(target.len(), nf);
    for (j, col) in cols.iter().enumerate() {
        for &(r, v) in col {
            t.push(r, j, v);
        }
    }
    let c = t.to_csr();
    let ct = c.transpose();
    let normal = nalgebra_sparse::CscMatrix::from(&(&ct * &c));
    let rhs = crate::linalg::spmv(&ct, &target);
    let psi = SparseSpd::factor(&normal)?.solve(&rhs);
    let fit = crate::linalg::spmv(&c, &psi);
    let res: Vec<f64> = fit.iter().zip(&target).map(|(a, b)| a - b).collect();
    Ok((psi, norm(&res) / norm(&target).max(f64::MIN_POSITIVE)))
}

/// Random mean-zero datum supported on both sides of the curve, at least one cell away from
/// it, with nonzero mass on each side.
pub fn random_split_datum(grid: &FluidGrid, curve: &BeamCurve, rng: &mut impl Rng) -> Result<ScalarField> {
    let n2 = grid.n + 2;
    let mut a = ScalarField::zeros(grid);
    let mut masses = [0.0f64; 2];
    let ix = grid.x2.integrals();
    let iy = grid.y2.integrals();
    let mut weights = [0.0f64; 2];
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for j in 1..n2 - 1 {
        for i in 1..n2 - 1 {
            let q = j * n2 + i;
            let side = match side_of(grid, curve, q)? {
                Some(Orientation::Above) => 0,
                Some(Orientation::Below) => 1,
                None => continue,
            };
            let v: f64 = rng.gen::<f64>() + 0.25;
            a.c[q] = v;
            masses[side] += v * ix[i] * iy[j];
            weights[side] += ix[i] * iy[j];
            picks.push((q, side));
        }
    }
    if weights[0] == 0.0 || weights[1] == 0.0 {
        return Err(FsiError::GridTooCoarse("no datum basis clear of the curve on one side".into()));
    }
    // upper part keeps its positive mass, lower part is shifted to carry its negative
    let shift = (masses[0] + masses[1]) / weights[1];
    for (q, side) in picks {
        if side == 1 {
            a.c[q] -= shift;
        }
    }
    Ok(a)
}

/// Pressure values for a ledger row: λ₀ and the differential pressure.
pub fn differential_pressure(model: &Model, sol: &SubstepSolution) -> Result<(f64, f64)> {
    let ctx = PressureContext::new(model, sol, 0)?;
    Ok((ctx.lambda0, ctx.p_diff))
}

/// Observer filling λ₀ and the differential pressure every `every` substeps; a failed
/// evaluation leaves NaN in the row and does not stop the run.
pub fn pressure_observer(every: usize) -> impl FnMut(&Model, &SubstepSolution, &mut LedgerRow) -> Result<()> {
    let mut count = 0usize;
    move |model, sol, row| {
        if every > 0 && count.is_multiple_of(every) {
            if let Ok((l, p)) = differential_pressure(model, sol) {
                row.lambda0 = l;
                row.pressure = p;
            }
        }
        count += 1;
        Ok(())
    }
}

/// Energy inequality along a ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub min_margin: f64,
    pub min_step_margin: f64,
    pub tolerance: f64,
    /// Cumulative dissipation and forcing columns never decrease.
    pub cumulative_monotone: bool,
    pub ok: bool,
}

/// Checks the telescoped and per-substep margins against −1e-6(1 + E₀).
pub fn energy_inequality_check(ledger: &[LedgerRow], initial: f64) -> InequalityReport {
    let tolerance = 1e-6 * (1.0 + initial.abs());
    let min_margin = ledger.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    let min_step_margin = ledger.iter().map(|r| r.step_margin).fold(f64::INFINITY, f64::min);
    let cumulative_monotone = ledger.windows(2).all(|w| {
        w[1].cum_viscous >= w[0].cum_viscous
            && w[1].cum_hyper >= w[0].cum_hyper
            && w[1].cum_eps >= w[0].cum_eps
    });
    InequalityReport {
        min_margin,
        min_step_margin,
        tolerance,
        cumulative_monotone,
        ok: cumulative_monotone && min_margin >= -tolerance && min_step_margin >= -tolerance,
    }
}

/// One run of the vanishing-fluid sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VanishingRow {
    pub k: f64,
    pub rho_plus: f64,
    pub mu_plus: f64,
    /// sup over t of the upper kinetic energy ½ρ⁺‖u‖²_{Ω⁺}.
    pub upper_kinetic: f64,
    /// sup over t of √ρ⁺‖u‖_{Ω⁺} and √μ⁺‖ε(u)‖_{Ω⁺}.
    pub upper_velocity: f64,
    pub upper_strain: f64,
    /// ‖u_k − u_prev‖_{L²(Ω⁻)} at the final time against the previous k (NaN for the first).
    pub lower_difference: f64,
    /// sup |η_k − η_prev| at the final time.
    pub curve_difference: f64,
    /// Smallest margin of the one-sided energy inequality.
    pub one_sided_margin: f64,
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VanishingReport {
    pub rows: Vec<VanishingRow>,
    pub upper_decreasing: bool,
    pub differences_decreasing: bool,
    pub one_sided_ok: bool,
}

/// ½ρ⁻‖u₀‖²_{Ω⁻} + ½ρ_s‖v₀‖² + 𝓔_K(η₀) for the one-sided inequality.
fn one_sided_initial(sim: &Simulation, scn: &Scenario) -> Result<f64> {
    let model = &sim.model;
    let u0 = model.space.curl(&scn.psi0);
    let bl = blend_materials(&model.grid, &scn.eta0, model.phys.rho_pm(), model.phys.mu_pm())?;
    let lower: f64 = (0..bl.len())
        .filter(|&k| bl.labels[k] == RegionLabel::Minus)
        .map(|k| {
            let v = u0.eval_in_cell(bl.cells[k].0, bl.cells[k].1, bl.points[k], 0).value();
            0.5 * bl.weights[k] * bl.rho[k] * (v[0] * v[0] + v[1] * v[1])
        })
        .sum();
    let v0 = crate::linalg::spmv(&model.trace(&scn.eta0), &scn.psi0);
    let solid = 0.5 * model.phys.beam.rho_s * seminorm_sq(&scn.eta0, &v0, 0);
    Ok(lower + solid + elastic_energy(&scn.eta0, &model.phys.beam)?.total)
}

fn one_sided_margin(ledger: &[LedgerRow], initial: f64, rho_minus: f64) -> f64 {
    let (mut strain, mut force) = (0.0, 0.0);
    let mut worst = f64::INFINITY;
    for r in ledger {
        strain += r.tau * r.lower_strain;
        force += r.tau * r.lower_force_sq;
        let lhs = 0.5 * r.lower_kinetic + 0.5 * strain + r.solid_kinetic + r.e_total;
        let rhs = initial + rho_minus * force;
        worst = worst.min(rhs - lhs);
    }
    worst
}

fn lower_l2_difference(a: &VecField, b: &VecField, curve: &BeamCurve, grid: &FluidGrid) -> Result<f64> {
    let bl = blend_materials(grid, curve, [1.0, 1.0], [1.0, 1.0])?;
    let s: f64 = (0..bl.len())
        .into_par_iter()
        .filter(|&k| bl.labels[k] == RegionLabel::Minus)
        .map(|k| {
            let (cx, cy) = bl.cells[k];
            let (u, v) = (a.eval_in_cell(cx, cy, bl.points[k], 0).value(), b.eval_in_cell(cx, cy, bl.points[k], 0).value());
            bl.weights[k] * ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2))
        })
        .sum();
    Ok(s.sqrt())
}

/// Runs the scenario with ρ⁺ = 1/k² and μ⁺ = 1/k for each k, in parallel.
pub fn vanishing_fluid_sweep(base: &Scenario, ks: &[f64]) -> Result<VanishingReport> {
    let runs: Vec<Result<(Simulation, f64)>> = ks
        .par_iter()
        .map(|&k| {
            let mut scn = base.clone();
            scn.phys.rho_plus = 1.0 / (k * k);
            scn.phys.mu_plus = 1.0 / k;
            let mut sim = Simulation::new(&scn)?;
            sim.run();
            let init = one_sided_initial(&sim, &scn)?;
            Ok((sim, init))
        })
        .collect();
    let runs: Vec<(Simulation, f64)> = runs.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(ks.len());
    for (i, (sim, init)) in runs.iter().enumerate() {
        let k = ks[i];
        let rho_plus = 1.0 / (k * k);
        let mu_plus = 1.0 / k;
        let upper_kinetic = sim.ledger.iter().map(|r| r.upper_kinetic).fold(0.0, f64::max);
        let upper_strain = sim.ledger.iter().map(|r| r.upper_strain.sqrt()).fold(0.0, f64::max);
        let (lower_difference, curve_difference) = if i == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let prev = &runs[i - 1].0;
            let ua = sim.model.space.curl(&sim.state.psi);
            let ub = prev.model.space.curl(&prev.state.psi);
            let d = lower_l2_difference(&ua, &ub, &sim.state.eta, &sim.model.grid)?;
            let c = sim.state.eta.dofs.iter().zip(&prev.state.eta.dofs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            (d, c)
        };
        rows.push(VanishingRow {
            k,
            rho_plus,
            mu_plus,
            upper_kinetic,
            upper_velocity: (2.0 * upper_kinetic).sqrt(),
            upper_strain,
            lower_difference,
            curve_difference,
            one_sided_margin: one_sided_margin(&sim.ledger, *init, base.phys.rho_minus),
            completed: matches!(sim.status, Some(crate::stepper::ExitStatus::Completed)),
        });
    }
    let upper_decreasing = rows.windows(2).all(|w| w[1].upper_kinetic < w[0].upper_kinetic);
    let diffs: Vec<f64> = rows.iter().skip(1).map(|r| r.lower_difference).collect();
    let differences_decreasing = diffs.windows(2).all(|w| w[1] < w[0]);
    let one_sided_ok = rows.iter().all(|r| r.one_sided_margin >= -1e-6);
    Ok(VanishingReport { rows, upper_decreasing, differences_decreasing, one_sided_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::Forcing;
    use crate::stepper::{tests::scenario, StepProblem, StepState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn first_solution(scn: &Scenario) -> (Simulation, SubstepSolution, f64) {
        let mut sim = Simulation::new(scn).unwrap();
        let mut keep: Option<(SubstepSolution, f64)> = None;
        let mut obs = |_: &Model, s: &SubstepSolution, r: &mut LedgerRow| {
            if keep.is_none() {
                keep = Some((s.clone(), r.grad_norm));
            }
            Ok(())
        };
        sim.run_window_with(&mut obs).unwrap();
        let (s, g) = keep.unwrap();
        (sim, s, g)
    }

    #[test]
    fn xi0_flux_at_rest() {
        for ell in [1.0, 2.5] {
            let c = BeamCurve::rest(ell, 8);
            assert!((lambda0(&c) - ell.powi(3) / 6.0).abs() < 1e-12 * ell.powi(3));
        }
    }

    #[test]
    fn rest_pressure_vanishes() {
        let scn = scenario(24, 8, Forcing::None, 1);
        let (sim, sol, g) = first_solution(&scn);
        let ctx = PressureContext::new(&sim.model, &sol, 0).unwrap();
        assert!((ctx.lambda0 - 1.0 / 6.0).abs() < 1e-12);
        assert!(ctx.p_diff.abs() < 1e-12, "{}", ctx.p_diff);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_split_datum(&sim.model.grid, &sol.eta_k, &mut rng).unwrap();
        let ag = ctx.agreement(&a, g).unwrap();
        assert!(ag.first.value.abs() < 1e-10 && ag.second.value.abs() < 1e-10, "{ag:?}");
        assert!(ag.first.div_residual < 1e-8 && ag.second.div_residual < 1e-8, "{ag:?}");
    }

    #[test]
    fn residual_is_the_scaled_gradient() {
        let mut scn = scenario(24, 8, Forcing::Vortex { a: 2.0 }, 1);
        scn.eta0 = BeamCurve::modal(1.0, 8, &[0.0], &[0.0, 0.05]);
        let model = Model::new(scn.ell, scn.n, scn.m, scn.phys.clone(), scn.scheme).unwrap();
        let (_, sol, _) = first_solution(&scn);
        let sim = Simulation::new(&scn).unwrap();
        let nm = sim.state.flow.len();
        let st = StepState {
            eta: sol.eta_k.clone(),
            psi: sol.psi.clone(),
            flow: sim.state.flow.clone(),
            w: sol.w.clone(),
            w_solid: sol.w_solid.clone(),
        };
        assert_eq!(nm, sol.markers.len());
        let prob = StepProblem::assemble(&model, &st, sol.t, sol.tau).unwrap();
        // evaluate at a perturbed point so the gradient is not negligible
        let mut p = sol.psi.clone();
        p.iter_mut().enumerate().for_each(|(i, x)| *x += 1e-3 * ((i as f64) * 0.37).sin());
        let g = prob.gradient(&p).unwrap();
        let mut s2 = sol.clone();
        s2.psi = p.clone();
        s2.u = model.space.curl(&p);
        s2.v = prob.beam_velocity(&p);
        s2.eta_next = prob.curve_of(&p);
        s2.marker_vel = s2.markers.iter().map(|&z| s2.u.value(z)).collect();
        let trace = TraceMapLike::new(&model, &sol.eta_k);
        for j in [0, 7, 31, model.space.nfree / 2, model.space.nfree - 3] {
            let mut e = vec![0.0; model.space.nfree];
            e[j] = 1.0;
            let q = model.space.curl(&e);
            let xi = trace.apply(&q);
            let r = weak_residual(&model, &s2, &xi, &q).unwrap();
            let lhs = sol.tau * r.total();
            assert!((lhs - g[j]).abs() < 1e-9 * (1.0 + g[j].abs() + sol.tau * r.scale()), "{j}: {lhs} vs {}", g[j]);
        }
    }

    struct TraceMapLike(crate::trace::TraceMap);

    impl TraceMapLike {
        fn new(model: &Model, c: &BeamCurve) -> Self {
            TraceMapLike(crate::trace::TraceMap::new(&model.grid, c).unwrap())
        }
        fn apply(&self, q: &VecField) -> Vec<f64> {
            self.0.apply_field(q)
        }
    }

    #[test]
    fn constructions_agree_and_gauge_shift() {
        let mut scn = scenario(24, 8, Forcing::Vortex { a: 2.0 }, 1);
        scn.eta0 = BeamCurve::modal(1.0, 8, &[0.0], &[0.0, 0.05]);
        let (sim, sol, g) = first_solution(&scn);
        let ctx = PressureContext::new(&sim.model, &sol, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_split_datum(&sim.model.grid, &sol.eta_k, &mut rng).unwrap();
        let ag = ctx.agreement(&a, g).unwrap();
        assert!(ag.curl_residual < 1e-8, "{ag:?}");
        assert!(ag.ok(), "{ag:?}");
        // the bump pair cancels from P(a) but not from the differential pressure
        let ctx1 = PressureContext::new(&sim.model, &sol, 1).unwrap();
        let p1 = ctx1.functional(&a).unwrap().value;
        assert!((p1 - ag.first.value).abs() < 1e-9 * ag.first.scale);
        assert!((ctx1.p_diff - ctx.p_diff).abs() > 1e-6 * ctx.p_diff.abs());
        let shift = 0.7;
        let mut a2 = a.clone();
        a2.c.iter_mut().zip(&ctx.ext.bumps.difference().c).for_each(|(x, d)| *x += shift * d);
        let p1 = ctx.functional(&a).unwrap().value;
        let p2 = ctx.functional(&a2).unwrap().value;
        assert!((p2 - (p1 - shift * ctx.p_diff)).abs() < 1e-9 * (1.0 + p1.abs() + ctx.r0.scale()), "{p1} {p2} {}", ctx.p_diff);
    }

    #[test]
    fn hydrostatic_pressure_is_linear_in_gravity() {
        let mut vals = Vec::new();
        for g0 in [1.0, 2.0] {
            let scn = scenario(24, 8, Forcing::Gravity { g: g0 }, 1);
            let (sim, sol, _) = first_solution(&scn);
            let (l, p) = differential_pressure(&sim.model, &sol).unwrap();
            assert!((l - 1.0 / 6.0).abs() < 1e-10);
            vals.push(p);
        }
        let grid = FluidGrid::new(1.0, 24).unwrap();
        let bumps = BumpPair::new(&grid, 0).unwrap();
        let centroid = |f: &ScalarField| -> f64 {
            grid.cell_quadrature().iter().map(|&(z, w, _)| w * z[1] * f.eval(z)).sum()
        };
        let head = centroid(&bumps.plus) - centroid(&bumps.minus);
        assert!((vals[0] - head).abs() < 1e-6 * head, "{vals:?} vs {head}");
        assert!((vals[1] - 2.0 * vals[0]).abs() < 1e-6 * vals[1].abs(), "{vals:?}");
    }

    #[test]
    fn nonzero_mean_datum_is_rejected() {
        let scn = scenario(24, 8, Forcing::None, 1);
        let (sim, sol, _) = first_solution(&scn);
        let ctx = PressureContext::new(&sim.model, &sol, 0).unwrap();
        let a = ctx.ext.bumps.plus.clone();
        assert!(matches!(ctx.functional(&a), Err(FsiError::NonzeroMean { .. })));
    }

    #[test]
    fn ledger_check_flags_negative_margin() {
        let mut rows = vec![LedgerRow::default(); 3];
        for (i, r) in rows.iter_mut().enumerate() {
            r.cum_viscous = i as f64;
            r.margin = 0.1;
            r.step_margin = 0.0;
        }
        assert!(energy_inequality_check(&rows, 1.0).ok);
        rows[2].margin = -1e-3;
        assert!(!energy_inequality_check(&rows, 1.0).ok);
        rows[2].margin = 0.1;
        rows[2].cum_viscous = 0.5;
        assert!(!energy_inequality_check(&rows, 1.0).cumulative_monotone);
    }
}
