use fsi_core::bogovskij::{operator_norm_probe, random_graph, StripeDecomposition, SubgraphDomain};
use fsi_core::fluid::FluidGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn domains(gamma: f64, lip: f64, ceiling: f64, count: usize, seed: u64) -> Vec<SubgraphDomain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let g = random_graph(1.0, gamma, lip, ceiling, 80, &mut rng);
            SubgraphDomain::new(1.0, gamma, lip, ceiling, g).unwrap()
        })
        .collect()
}

#[test]
fn random_graphs_share_one_constant() {
    let grid = FluidGrid::new(1.0, 40).unwrap();
    let decomp = StripeDecomposition::new(1.0, 0.4, 1.0, 0.9).unwrap();
    let doms = domains(0.4, 1.0, 0.9, 5, 3);
    for d in &doms {
        for k in 0..=decomp.count {
            assert!(decomp.star_shaped_margin(&d.graph, k, 10) >= 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probe = operator_norm_probe(&grid, &decomp, &doms, 3, &mut rng).unwrap();
    println!("{:?} spread {} formula {}", probe.per_domain_max, probe.spread, probe.formula);
    assert!(probe.max_residual < 1e-8, "residual {}", probe.max_residual);
    assert!(probe.supports_ok);
    assert!(probe.spread <= 10.0);
}

#[test]
fn halving_gamma_does_not_shrink_the_constant() {
    let grid = FluidGrid::new(1.0, 80).unwrap();
    let mut maxima = Vec::new();
    for gamma in [0.4, 0.2] {
        let decomp = StripeDecomposition::new(1.0, gamma, 1.0, 0.9).unwrap();
        let doms = domains(gamma, 1.0, 0.9, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe = operator_norm_probe(&grid, &decomp, &doms, 2, &mut rng).unwrap();
        maxima.push(probe.per_domain_max.iter().cloned().fold(0.0, f64::max));
    }
    println!("{maxima:?}");
    assert!(maxima[1] >= 0.9 * maxima[0]);
}
