use fsi_core::beam::{elastic_energy, elastic_gradient, BeamParams};
use fsi_core::bogovskij::{random_datum, random_graph, StripeDecomposition, SubgraphDomain};
use fsi_core::extension::{lambda_by_parts, lambda_of, random_boundary_field, BumpPair, CutoffProfile, ExtensionSolver};
use fsi_core::fluid::{blend_materials, FluidGrid, StreamSpace};
use fsi_core::geometry::{free_dofs, BeamCurve, RegionLabel};
use fsi_core::stepper::{Simulation, StepProblem};
use fsi_core::config::ScenarioConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Feasible modal curve from raw coefficients, shrunk until min slope ≥ 0.2 and max|η₂| ≤ 0.3.
fn curve(m: usize, a1: &[f64], a2: &[f64]) -> BeamCurve {
    let mut s = 1.0;
    loop {
        let c = BeamCurve::modal(1.0, m, &a1.iter().map(|a| a * s).collect::<Vec<_>>(), &a2.iter().map(|a| a * s).collect::<Vec<_>>());
        if c.min_slope() >= 0.2 && c.max_abs_eta2() <= 0.3 {
            return c;
        }
        s *= 0.8;
    }
}

fn coeffs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-0.15..0.15f64, 3), prop::collection::vec(-0.3..0.3f64, 3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inverse_eta1_round_trips((a1, a2) in coeffs(), x in 0.0..1.0f64) {
        let c = curve(16, &a1, &a2);
        let z = c.eval(x, 0).unwrap();
        prop_assert!((c.inverse_eta1(z[0]).unwrap() - x).abs() < 1e-11);
        prop_assert_eq!(c.classify(z, 1e-9).unwrap(), RegionLabel::Interface);
    }

    #[test]
    fn ends_are_clamped_exactly((a1, a2) in coeffs()) {
        let c = curve(16, &a1, &a2);
        prop_assert!(c.check_clamped(0.0).is_ok());
        prop_assert_eq!(c.eval(0.0, 0).unwrap(), [0.0, 0.0]);
        prop_assert_eq!(c.eval(1.0, 0).unwrap(), [1.0, 0.0]);
        prop_assert_eq!(c.eval(0.0, 1).unwrap(), [1.0, 0.0]);
        prop_assert_eq!(c.eval(1.0, 1).unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn elastic_gradient_matches_fd((a1, a2) in coeffs(), c1 in 0.5..2.0f64, alpha in 1.5..3.0f64) {
        let c = curve(8, &a1, &a2);
        let p = BeamParams { c1, c2: 1.0, lambda0: 1.0, alpha, rho_s: 1.0 };
        let g = elastic_gradient(&c, &p).unwrap();
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-6;
        for (k, i) in free_dofs(8).into_iter().enumerate() {
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp.dofs[i] += h;
            cm.dofs[i] -= h;
            let fd = (elastic_energy(&cp, &p).unwrap().total - elastic_energy(&cm, &p).unwrap().total) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() <= 1e-5 * gmax, "dof {}: {} vs {}", i, fd, g[k]);
        }
    }

    #[test]
    fn barrier_blows_up_along_a_compressing_path(amp in 0.05..0.2f64, mode in 1usize..4) {
        // η₁ = x + s·a·w(x) with w' = cos 2kx − cos kx, whose minimum −9/8 makes the slope vanish at s = 8/(9a)
        let p = BeamParams::default();
        let k = mode as f64 * 2.0 * std::f64::consts::PI;
        let at = |s: f64| {
            let c = BeamCurve::from_fn(1.0, 32, |x| {
                let w = [(2.0 * k * x).sin() / (2.0 * k) - (k * x).sin() / k, (2.0 * k * x).cos() - (k * x).cos(),
                    -2.0 * k * (2.0 * k * x).sin() + k * (k * x).sin()];
                [[x + s * amp * w[0], 0.0], [1.0 + s * amp * w[1], 0.0], [s * amp * w[2], 0.0]]
            })
            .unwrap();
            elastic_energy(&c, &p).map(|e| e.total).unwrap_or(f64::INFINITY)
        };
        let critical = 8.0 / (9.0 * amp);
        let energies: Vec<f64> = (1..=6).map(|j| at(critical * (1.0 - 10f64.powi(-j)))).collect();
        prop_assert!(energies.windows(2).all(|w| w[1] > w[0]), "{:?}", energies);
        prop_assert!(energies[5] > 1e3 * energies[0].max(1.0), "{:?}", energies);
    }

    #[test]
    fn stream_fields_are_solenoidal_with_no_slip(seed in any::<u64>()) {
        let grid = FluidGrid::new(1.0, 8).unwrap();
        let space = StreamSpace::new(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi: Vec<f64> = (0..space.nfree).map(|_| rand::Rng::gen::<f64>(&mut rng) - 0.5).collect();
        let scale = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = space.curl(&psi);
        for i in 0..200 {
            let z = [rand::Rng::gen::<f64>(&mut rng), rand::Rng::gen::<f64>(&mut rng) - 0.5];
            prop_assert!(u.eval(z, 1).div().abs() <= 1e-12 * scale);
            let t = i as f64 / 200.0;
            for b in [[t, -0.5], [t, 0.5], [0.0, t - 0.5], [1.0, t - 0.5]] {
                let v = u.value(b);
                prop_assert!(v[0].hypot(v[1]) <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn blend_weights_cover_the_box((a1, a2) in coeffs()) {
        let c = curve(16, &a1, &a2);
        let grid = FluidGrid::new(1.0, 12).unwrap();
        let bl = blend_materials(&grid, &c, [1.0, 2.0], [1.0, 1.0]).unwrap();
        let plus: f64 = (0..bl.len()).filter(|&k| bl.labels[k] == RegionLabel::Plus).map(|k| bl.weights[k]).sum();
        let minus: f64 = (0..bl.len()).filter(|&k| bl.labels[k] == RegionLabel::Minus).map(|k| bl.weights[k]).sum();
        prop_assert!((plus + minus - 1.0).abs() < 1e-12);
        prop_assert!(bl.labels.iter().all(|l| *l != RegionLabel::Interface));
    }

    #[test]
    fn lambda_formulas_agree((a1, a2) in coeffs(), seed in any::<u64>()) {
        let c = curve(16, &a1, &a2);
        let b = random_boundary_field(1.0, 16, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((lambda_of(&b, &c) - lambda_by_parts(&b, &c)).abs() < 1e-12);
    }

    #[test]
    fn step_constraint_is_exact(seed in any::<u64>()) {
        let mut cfg = ScenarioConfig::preset("sine").unwrap();
        cfg.fluid_field.n = 8;
        cfg.geometry.m = 8;
        let sim = Simulation::new(&cfg.scenario().unwrap()).unwrap();
        let st = sim.step_state().unwrap();
        let tau = sim.model.scheme.tau();
        let prob = StepProblem::assemble(&sim.model, &st, 0.0, tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..prob.dim()).map(|_| 1e-2 * (rand::Rng::gen::<f64>(&mut rng) - 0.5)).collect();
        let next = prob.curve_of(&p);
        let v = prob.beam_velocity(&p);
        for i in 0..v.len() {
            let d = (next.dofs[i] - st.eta.dofs[i]) / tau;
            prop_assert!((d - v[i]).abs() <= 1e-9 * (1.0 + v[i].abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn telescoped_pieces_sum_to_the_datum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = FluidGrid::new(1.0, 40).unwrap();
        // built before any graph exists
        let decomp = StripeDecomposition::new(1.0, 0.4, 1.0, 0.9).unwrap();
        let dom = SubgraphDomain::new(1.0, 0.4, 1.0, 0.9, random_graph(1.0, 0.4, 1.0, 0.9, 80, &mut rng)).unwrap();
        let phis: Vec<_> = (0..decomp.count).map(|k| decomp.phi(&grid, &dom, k).unwrap()).collect();
        let f = random_datum(&grid, &dom, &mut rng);
        let pieces = decomp.split(&f, &phis);
        let scale = f.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for q in 0..f.c.len() {
            let s: f64 = pieces.iter().map(|p| p.c[q]).sum();
            prop_assert!((s - f.c[q]).abs() <= 1e-13 * scale);
        }
        for p in &pieces {
            prop_assert!(p.integral().abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn extension_is_linear((a1, a2) in coeffs(), seed in any::<u64>()) {
        let grid = FluidGrid::new(1.0, 24).unwrap();
        let c = curve(16, &a1, &a2);
        let s = ExtensionSolver::new(&grid, &c, CutoffProfile::standard(1.0), BumpPair::new(&grid, 0).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b1, b2) = (random_boundary_field(1.0, 16, 4, &mut rng), random_boundary_field(1.0, 16, 4, &mut rng));
        let (e1, e2, e12) = (s.extend(&b1).unwrap(), s.extend(&b2).unwrap(), s.extend(&b1.add(&b2)).unwrap());
        let mut d = e12.field.clone();
        d.axpy(-1.0, &e1.field);
        d.axpy(-1.0, &e2.field);
        prop_assert!(d.max_abs_coeff() <= 1e-10 * e12.field.max_abs_coeff().max(1e-300));
        prop_assert!((e12.lambda - e1.lambda - e2.lambda).abs() <= 1e-13);
    }
}
