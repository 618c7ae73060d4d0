use std::sync::Arc;

use fmdlab_core::grid::{gradient, DomainGrid, ScalarField, ShapeTag, VectorField};
use fmdlab_core::pde::{residual_field, solve, OperatorSpec, ProblemSpec, SolveOptions};
use fmdlab_core::verify::{check_global_comparison, p1_instance, p2_instance, ComparisonPair, SmoothDraw, DRAW_KMAX};

fn square(n: usize) -> Arc<DomainGrid<f64>> {
    Arc::new(DomainGrid::new(ShapeTag::Square, n, n, 1.0 / n as f64).unwrap())
}

// Midpoint rule on a 400² lattice over the unit square.
fn quadrature(f: impl Fn(f64, f64) -> f64) -> f64 {
    let m = 400;
    let h = 1.0 / m as f64;
    let mut s = 0.0;
    for j in 0..m {
        for i in 0..m {
            s += f((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
        }
    }
    s * h * h
}

#[test]
fn draw_energy_splits_evenly() {
    let d = SmoothDraw::new(3, DRAW_KMAX);
    let grad = quadrature(|x, y| {
        let (g, _) = d.parts(x, y);
        g.0 * g.0 + g.1 * g.1
    });
    let curl = quadrature(|x, y| {
        let (_, c) = d.parts(x, y);
        c.0 * c.0 + c.1 * c.1
    });
    let cross = quadrature(|x, y| {
        let (g, c) = d.parts(x, y);
        g.0 * c.0 + g.1 * c.1
    });
    assert!((grad - 0.5).abs() < 1e-3, "{grad}");
    assert!((curl - 0.5).abs() < 1e-3, "{curl}");
    assert!(cross.abs() < 1e-3, "{cross}");
}

#[test]
fn dirichlet_gradient_is_the_gradient_part_of_the_data() {
    let seed = 3;
    let g = square(64);
    let spec = p1_instance(g.clone(), 2.0, 0.0, seed).unwrap();
    let sol = solve(&spec, &SolveOptions::default()).unwrap();
    let du = gradient(&sol.u);
    let d = SmoothDraw::new(seed, DRAW_KMAX);
    let (mut err, mut norm) = (0.0, 0.0);
    for k in g.interior_cells() {
        let (x, y) = g.center(k);
        let (want, _) = d.parts(x, y);
        let got = du.get(k);
        err += (got.0 - want.0).powi(2) + (got.1 - want.1).powi(2);
        norm += want.0 * want.0 + want.1 * want.1;
    }
    let rel = (err / norm).sqrt();
    assert!(rel < 0.1, "relative gradient error {rel}");

    let pair = ComparisonPair::p1(&spec, &sol).unwrap();
    let ratio = check_global_comparison(&pair).unwrap();
    let oracle = quadrature(|x, y| {
        let (a, b) = d.eval(x, y);
        a * a + b * b
    }) / quadrature(|x, y| {
        let (g, _) = d.parts(x, y);
        g.0 * g.0 + g.1 * g.1
    });
    assert!((oracle - 2.0).abs() < 5e-3, "{oracle}");
    assert!((ratio / oracle - 1.0).abs() < 0.06, "{ratio} vs {oracle}");
}

#[test]
fn discrete_maximum_principle() {
    let g = Arc::new(DomainGrid::new(ShapeTag::Disk, 40, 40, 1.0 / 20.0).unwrap());
    let trace = ScalarField::from_fn(g.clone(), |x: f64, y| x * x - 0.5 * y + 0.3 * (3.0 * x * y).sin());
    let op = OperatorSpec::constant(g.clone(), 2.0, 0.0, 1.0).unwrap();
    let spec = ProblemSpec::dirichlet(op, VectorField::zeros(g.clone()), trace.clone());
    let sol = solve(&spec, &SolveOptions::default()).unwrap();
    let bd: Vec<f64> = g.boundary_cells().iter().map(|&k| trace.get(k)).collect();
    let (lo, hi) = bd.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for k in g.interior_cells() {
        let v = sol.u.get(k);
        assert!(v >= lo - 1e-10 && v <= hi + 1e-10, "u = {v} outside [{lo}, {hi}]");
    }
}

#[test]
fn energy_never_increases() {
    let g = square(32);
    for (p, s) in [(1.5, 0.0), (2.0, 0.5), (2.5, 0.1)] {
        let spec = p1_instance(g.clone(), p, s, 9).unwrap();
        let sol = solve(&spec, &SolveOptions::default()).unwrap();
        for stage in &sol.meta.schedule {
            for w in stage.energy.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "p {p} ς {s}: {} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn obstacle_solution_is_complementary() {
    let g = square(48);
    let spec = p2_instance(g.clone(), 2.0, 0.5, 4, 0.05).unwrap();
    let sol = solve(&spec, &SolveOptions::default()).unwrap();
    let (f1, f2) = spec.obstacles.as_ref().unwrap();
    let r0 = residual_field(&spec, &spec.g).unwrap().max_abs();
    let r = residual_field(&spec, &sol.u).unwrap();
    let (mut free, mut contact) = (0, 0);
    for k in g.interior_cells() {
        let (u, a, b) = (sol.u.get(k), f1.get(k), f2.get(k));
        assert!(a <= u && u <= b, "{a} <= {u} <= {b}");
        if u > a + 1e-8 && u < b - 1e-8 {
            free += 1;
            assert!(r.get(k).abs() <= 1e-5 * r0, "residual {} at a free cell", r.get(k));
        } else {
            contact += 1;
        }
    }
    assert!(free > 0 && contact > 0, "free {free} contact {contact}");
}

#[test]
fn f32_solve_tracks_f64() {
    let opts = SolveOptions { tol_rel: 1e-5, tol_abs: 1e-7, ..SolveOptions::default() };
    let g64 = square(24);
    let g32 = Arc::new(DomainGrid::<f32>::new(ShapeTag::Square, 24, 24, 1.0 / 24.0).unwrap());
    let u64 = solve(&p1_instance(g64, 2.0, 0.0, 5).unwrap(), &opts).unwrap().u;
    let u32 = solve(&p1_instance(g32, 2.0f32, 0.0, 5).unwrap(), &opts).unwrap().u;
    let top = u64.max_abs();
    let worst = u64.values().iter().zip(u32.values()).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-3 * top, "{worst} vs {top}");
}
