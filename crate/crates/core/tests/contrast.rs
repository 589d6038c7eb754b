mod common;

use common::*;
use csi_core::contrast::*;
use csi_core::mmv::ContrastSourceMatrix;
use ndarray::Array2;
use num_complex::Complex64;

/// Random instance with data and sources generated from `chi_true`.
fn consistent_problem(n: usize, m: usize, p: usize, seed: u64) -> (ContrastProblem, Vec<Complex64>) {
    let mut r = rng(seed);
    let phi = random_matrix(m, n, &mut r);
    let total = random_matrix(n, p, &mut r).mapv(|v| v + c(1.0, 0.0));
    let incident = random_matrix(n, p, &mut r).mapv(|v| v + c(1.0, 0.0));
    let chi_true = random_vec(n, &mut r);
    let j = Array2::from_shape_fn((n, p), |(i, q)| total[[i, q]] * chi_true[i]);
    let f = phi.dot(&j);
    let eps_b = vec![c(100.0, -100.0); n];
    let problem = ContrastProblem::new(
        phi,
        f,
        ContrastSourceMatrix::new(j).unwrap(),
        TotalFieldSet::new(total, incident).unwrap(),
        eps_b,
    )
    .unwrap();
    (problem, chi_true)
}

fn direct_cost(problem: &ContrastProblem, chi: &[Complex64]) -> (f64, f64) {
    let (n, p) = problem.totals.total.dim();
    let m = problem.phi.nrows();
    let mut data_num = 0.0;
    let mut f_sq = 0.0;
    let mut state_num = 0.0;
    let mut state_den = 0.0;
    for q in 0..p {
        for row in 0..m {
            let mut psi = c(0.0, 0.0);
            for i in 0..n {
                psi += problem.phi[[row, i]] * problem.totals.total[[i, q]] * chi[i];
            }
            data_num += (problem.f[[row, q]] - psi).norm_sqr();
            f_sq += problem.f[[row, q]].norm_sqr();
        }
        for i in 0..n {
            state_num += (problem.j_hat.data[[i, q]] - problem.totals.total[[i, q]] * chi[i]).norm_sqr();
            state_den += (problem.totals.incident[[i, q]] * chi[i]).norm_sqr();
        }
    }
    (data_num / f_sq, state_num / state_den)
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..5 {
        let (problem, chi_true) = consistent_problem(30, 12, 2, 100 + seed);
        let mut r = rng(200 + seed);
        let chi: Vec<_> = chi_true.iter().zip(random_vec(30, &mut r)).map(|(a, b)| a + b).collect();
        let den = problem.state_normalization(&chi);
        let g = problem.gradient(&chi).unwrap();
        let g_fd = fd_gradient(|x| problem.frozen_cost(x, den), &chi, 1e-6);
        let diff: Vec<_> = g.iter().zip(&g_fd).map(|(a, b)| a - b).collect();
        let rel = vnorm(&diff) / vnorm(&g);
        assert!(rel <= 1e-6, "seed {seed}: {rel}");
    }
}

#[test]
fn gradient_vanishes_at_exact_contrast() {
    let (problem, chi_true) = consistent_problem(12, 8, 3, 7);
    let g = problem.gradient(&chi_true).unwrap();
    assert!(vnorm(&g) <= 1e-10);
    let cost = problem.cost(&chi_true);
    assert!(cost.total <= 1e-24);
}

#[test]
fn cost_matches_direct_evaluation() {
    let (problem, chi_true) = consistent_problem(9, 7, 2, 8);
    let mut r = rng(9);
    let chi = random_vec(9, &mut r);
    let cost = problem.cost(&chi);
    let (data, state) = direct_cost(&problem, &chi);
    assert!((cost.data - data).abs() <= 1e-12 * data);
    assert!((cost.state - state).abs() <= 1e-12 * state);
    assert!((cost.total - data - state).abs() <= 1e-12 * (data + state));

    let doubled: Vec<_> = chi_true.iter().map(|v| v * 2.0).collect();
    assert!((problem.cost(&doubled).data - 1.0).abs() <= 1e-12);
}

#[test]
fn zero_contrast_has_infinite_state_term() {
    let (problem, _) = consistent_problem(6, 5, 2, 10);
    let cost = problem.cost(&vec![c(0.0, 0.0); 6]);
    assert!(cost.state.is_infinite());
}

#[test]
fn init_matches_least_squares_oracle() {
    let mut r = rng(12);
    let (n, p) = (15, 3);
    let total = random_matrix(n, p, &mut r);
    let j = random_matrix(n, p, &mut r);
    let totals = TotalFieldSet::new(total.clone(), total.clone()).unwrap();
    let (chi, flagged) = init_contrast(&ContrastSourceMatrix::new(j.clone()).unwrap(), &totals);
    assert!(flagged.is_empty());
    for i in 0..n {
        // Normal equation of min_x sum_p |j_p - e_p x|^2, solved by hand.
        let mut num = c(0.0, 0.0);
        let mut den = 0.0;
        for q in 0..p {
            num += total[[i, q]].conj() * j[[i, q]];
            den += total[[i, q]].norm_sqr();
        }
        let expected = num / den;
        assert!((chi.values[i] - expected).norm() <= 1e-12 * expected.norm().max(1.0));
    }
}

#[test]
fn init_recovers_exact_state_equation() {
    let (problem, chi_true) = consistent_problem(9, 4, 1, 13);
    let (chi, _) = init_contrast(&problem.j_hat, &problem.totals);
    for (a, b) in chi.values.iter().zip(&chi_true) {
        assert!((a - b).norm() <= 1e-12);
    }
    let zero = ContrastSourceMatrix::zeros(9, 1, 3).unwrap();
    let (chi0, _) = init_contrast(&zero, &problem.totals);
    assert!(chi0.values.iter().all(|v| *v == c(0.0, 0.0)));
}

#[test]
fn init_flags_zero_field_components() {
    let total = Array2::from_shape_fn((3, 2), |(i, _)| if i == 1 { c(0.0, 0.0) } else { c(1.0, 0.0) });
    let totals = TotalFieldSet::new(total.clone(), total).unwrap();
    let j = ContrastSourceMatrix::new(Array2::from_elem((3, 2), c(1.0, 1.0))).unwrap();
    let (chi, flagged) = init_contrast(&j, &totals);
    assert_eq!(flagged, vec![1]);
    assert_eq!(chi.values[1], c(0.0, 0.0));
}

#[test]
fn consistent_inversion_converges() {
    let (problem, _) = consistent_problem(24, 30, 3, 14);
    let (chi, history) = invert_contrast(&problem, &ContrastOptions::default()).unwrap();
    let last = history.records.last().unwrap();
    assert!(history.records.len() <= 21);
    assert!(last.data_error < 1e-3 && last.state_error < 1e-3, "{last:?}");
    for w in history.records.windows(2) {
        assert!(w[1].data_error <= w[0].data_error * (1.0 + 1e-9) + 1e-30);
        assert!(w[1].state_error <= w[0].state_error * (1.0 + 1e-9) + 1e-30);
    }
    assert!(in_range(&chi.values, &problem.eps_b));
}

/// Sources perturbed away from the state equation: the cost descends
/// monotonically from the initial guess to a nonzero floor.
#[test]
fn perturbed_sources_descend() {
    let (mut problem, _) = consistent_problem(24, 30, 3, 14);
    let mut r = rng(15);
    let noise = random_matrix(24, 3, &mut r).mapv(|v| v * 0.3);
    problem.j_hat.data = &problem.j_hat.data + &noise;
    let (chi, history) = invert_contrast(&problem, &ContrastOptions::default()).unwrap();
    for w in history.records.windows(2) {
        assert!(w[1].total <= w[0].total * (1.0 + 1e-12));
        assert!(w[1].line_min <= w[1].line_zero);
    }
    let first = history.records[0].total;
    let last = history.records.last().unwrap().total;
    assert!(last < first && last > 0.0);
    assert!(in_range(&chi.values, &problem.eps_b));
}

#[test]
fn zero_iterations_return_initial_guess() {
    let (problem, _) = consistent_problem(9, 5, 2, 16);
    let opts = ContrastOptions {
        iterations: 0,
        ..ContrastOptions::default()
    };
    let (chi, history) = invert_contrast(&problem, &opts).unwrap();
    let (mut chi0, _) = init_contrast(&problem.j_hat, &problem.totals);
    project_range(&mut chi0.values, &problem.eps_b);
    assert_eq!(chi, chi0);
    assert_eq!(history.records.len(), 1);
}

#[test]
fn constraints_hold_after_every_iteration() {
    let (mut problem, _) = consistent_problem(18, 20, 2, 17);
    problem.eps_b = vec![c(1.0, 0.0); 18];
    let opts = ContrastOptions {
        iterations: 5,
        rel_tol: 0.0,
    };
    for iters in 0..=opts.iterations {
        let (chi, _) = invert_contrast(
            &problem,
            &ContrastOptions {
                iterations: iters,
                ..opts.clone()
            },
        )
        .unwrap();
        assert!(in_range(&chi.values, &problem.eps_b));
    }
}

#[test]
fn isotropic_reduction_ignores_component_order() {
    let mut r = rng(18);
    let v = random_vec(6, &mut r);
    let a = ContrastVector { values: v.clone() };
    let b = ContrastVector {
        values: vec![v[2], v[0], v[1], v[4], v[5], v[3]],
    };
    for (x, y) in a.isotropic().iter().zip(b.isotropic()) {
        assert!((x - y).norm() <= 1e-15);
    }
}
