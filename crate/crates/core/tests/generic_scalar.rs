//! The same computations in single and double precision.

use bsee_core::{get_case, CoefficientSet, ForwardModel, Grid32, Lattice32, LatticeConfig, Operator32, Scheme};

#[test]
fn single_precision_scheme_tracks_double() {
    let op32 = Operator32::laplacian_1d(4).unwrap();
    let op64 = bsee_core::Operator::laplacian_1d(4).unwrap();
    let cfg = LatticeConfig { points: 129, ..LatticeConfig::default() };
    let b32 = Lattice32::new(&cfg, 1.0).unwrap();
    let b64 = bsee_core::Lattice::new(&cfg, 1.0).unwrap();
    let g32 = Grid32::new(1.0, 16).unwrap();
    let g64 = bsee_core::Grid::new(1.0, 16).unwrap();
    for scheme in [Scheme::One, Scheme::Two, Scheme::Three] {
        let p32 = scheme.solve(&get_case("N1", &op32, 1.0).unwrap().problem(&op32, g32), &b32, 2).unwrap();
        let p64 = scheme.solve(&get_case("N1", &op64, 1.0).unwrap().problem(&op64, g64), &b64, 2).unwrap();
        for (a, b) in p32.p.fields[0].values.iter().zip(p64.p.fields[0].values.iter()) {
            assert!((f64::from(*a) - b).abs() < 1e-4, "{scheme:?}: {a} vs {b}");
        }
    }
}

#[test]
fn single_precision_state_map() {
    let op = Operator32::laplacian_1d(2).unwrap();
    let grid = Grid32::new(1.0, 8).unwrap();
    let b = Lattice32::aligned(1.0, grid.tau(), 5.0).unwrap();
    let c = CoefficientSet::constant(0.2, 1.0, 0.5, 0.3);
    let m = ForwardModel::new(&c, &op, grid, &b, 2).unwrap();
    let mut u = m.zeros();
    for f in u.fields.iter_mut().take(8) {
        f.values.fill(1.0);
    }
    let y = m.solve_state(&u).unwrap();
    assert!(y.fields.iter().all(|f| f.values.iter().all(|v| v.is_finite())));
    assert!(y.fields[8].values.iter().any(|&v| v > 0.0));
}
