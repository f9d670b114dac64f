//! Solver checks against grid-search, enumeration and Monte-Carlo oracles.

use bridgeflow::costs::{CostKind, CostMatrix};
use bridgeflow::ot::{
    entropic_gw, expected_matching_accuracy, fgw, monte_carlo_matching_accuracy, sample_pairs,
    sinkhorn, sinkhorn_balanced, true_coupling, uniform, Coupling, OTConfig, SolverReport,
};
use bridgeflow::{Matrix, PairedSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cost(m: Matrix) -> CostMatrix {
    CostMatrix::new(m, CostKind::SqEuclidean, false).unwrap()
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CostMatrix {
    cost(Matrix::from_fn(n, m, |_, _| rng.gen_range(0.0..1.0)))
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn plogp(t: &Matrix) -> f64 {
    t.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum()
}

/// Four-fold loop over the quadratic objective.
fn brute_gw(c1: &Matrix, c2: &Matrix, t: &Matrix) -> f64 {
    let (n, m) = t.shape();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..m {
            for k in 0..n {
                for l in 0..m {
                    s += (c1[(i, k)] - c2[(j, l)]).powi(2) * t[(i, j)] * t[(k, l)];
                }
            }
        }
    }
    s
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn perm_coupling(p: &[usize]) -> Matrix {
    let n = p.len();
    Matrix::from_fn(n, n, |i, j| if p[i] == j { 1.0 / n as f64 } else { 0.0 })
}

fn line_distances(xs: &[f64]) -> Matrix {
    Matrix::from_fn(xs.len(), xs.len(), |i, j| (xs[i] - xs[j]).abs())
}

#[test]
fn two_by_two_matches_grid_search() {
    let eps = 0.1;
    let c = cost(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
    let cfg = OTConfig::default().with_epsilon(eps);
    let pi = sinkhorn(&uniform(2), &uniform(2), &c, &cfg).unwrap();

    // Transport polytope: [[p, 1/2 - p], [1/2 - p, p]] for p in [0, 1/2].
    let objective = |p: f64| {
        let t = Matrix::from_rows(&[[p, 0.5 - p], [0.5 - p, p]]).unwrap();
        2.0 * (0.5 - p) + eps * plogp(&t)
    };
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..12 {
        let steps = 100;
        let h = (hi - lo) / steps as f64;
        let best = (0..=steps)
            .map(|k| lo + k as f64 * h)
            .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        lo = (best - h).max(0.0);
        hi = (best + h).min(0.5);
    }
    let p = 0.5 * (lo + hi);
    assert!(
        (pi.values()[(0, 0)] - p).abs() < 1e-6,
        "{} vs {p}",
        pi.values()[(0, 0)]
    );
    assert!((pi.values()[(0, 1)] - (0.5 - p)).abs() < 1e-6);
}

#[test]
fn random_balanced_instances_meet_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let c = random_cost(&mut rng, 50, 50);
        let a = random_weights(&mut rng, 50);
        let b = random_weights(&mut rng, 50);
        let pi = sinkhorn(&a, &b, &c, &OTConfig::default().with_epsilon(0.05)).unwrap();
        assert!(pi.report.converged);
        assert!(pi.report.marginal_violation <= 1e-6);
        assert!(pi.values().as_slice().iter().all(|&v| v >= 0.0));
        assert!(pi.total_mass() <= 1.0 + 1e-6);
    }
}

#[test]
fn unit_tau_is_bit_identical_to_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random_cost(&mut rng, 12, 9);
    let (a, b) = (random_weights(&mut rng, 12), random_weights(&mut rng, 9));
    let cfg = OTConfig::default().with_epsilon(0.02).with_tau(1.0, 1.0);
    let u = sinkhorn(&a, &b, &c, &cfg).unwrap();
    let bal = sinkhorn_balanced(&a, &b, &c, &cfg.with_tau(0.3, 0.4)).unwrap();
    assert_eq!(u, bal);
}

#[test]
fn joint_scaling_of_cost_and_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_cost(&mut rng, 20, 15);
    let (a, b) = (uniform(20), uniform(15));
    let base = sinkhorn(&a, &b, &c, &OTConfig::default().with_epsilon(0.05)).unwrap();
    for k in [0.25, 3.0, 40.0] {
        let mut v = c.values().clone();
        v.scale(k);
        let scaled = sinkhorn(
            &a,
            &b,
            &cost(v),
            &OTConfig::default().with_epsilon(0.05 * k),
        )
        .unwrap();
        assert!(scaled.values().max_abs_diff(base.values()) < 1e-8);
    }
}

/// Stationarity of the damped updates: with `λ = ετ/(1-τ)`, each row satisfies
/// `log(r_i / a_i) = -f_i / λ`, and the potential differences are read back
/// from ratios of coupling entries in a shared column.
#[test]
fn unbalanced_fixed_point_matches_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = random_cost(&mut rng, 10, 10);
    let (a, b) = (uniform(10), random_weights(&mut rng, 10));
    let (eps, tau) = (0.05, 0.6);
    let cfg = OTConfig {
        tolerance: 1e-12,
        ..OTConfig::default().with_epsilon(eps).with_tau(tau, tau)
    };
    let pi = sinkhorn(&a, &b, &c, &cfg).unwrap();
    assert!(pi.report.converged);
    let p = pi.values();
    let cv = c.values();
    let lambda = eps * tau / (1.0 - tau);
    let (r, q) = (pi.row_sums(), pi.col_sums());
    for i in 1..10 {
        let df = eps * (p[(i, 0)] / p[(0, 0)]).ln() + cv[(i, 0)] - cv[(0, 0)];
        let lhs = (r[i] / a[i]).ln() - (r[0] / a[0]).ln();
        assert!(
            (lhs + df / lambda).abs() < 1e-9,
            "row {i}: {lhs} vs {}",
            -df / lambda
        );
        let dg = eps * (p[(0, i)] / p[(0, 0)]).ln() + cv[(0, i)] - cv[(0, 0)];
        let lhs = (q[i] / b[i]).ln() - (q[0] / b[0]).ln();
        assert!(
            (lhs + dg / lambda).abs() < 1e-8,
            "col {i}: {lhs} vs {}",
            -dg / lambda
        );
    }
    assert!(
        pi.marginal_violation() > 1e-3,
        "damping should leave the marginals relaxed"
    );
}

#[test]
fn gw_on_identical_spaces_beats_identity_coupling() {
    let c = line_distances(&[0.0, 0.2, 0.55, 0.9, 1.0]);
    let cm = cost(c.clone());
    let eps = 0.01;
    let pi = entropic_gw(
        &cm,
        &cm,
        &uniform(5),
        &uniform(5),
        &OTConfig::default().with_epsilon(eps),
    )
    .unwrap();
    let id = perm_coupling(&[0, 1, 2, 3, 4]);
    let obj = brute_gw(&c, &c, pi.values()) + eps * plogp(pi.values());
    let id_obj = brute_gw(&c, &c, &id) + eps * plogp(&id);
    assert!(obj <= id_obj + 1e-6, "{obj} vs {id_obj}");
}

#[test]
fn gw_three_points_beats_every_permutation() {
    let c1 = line_distances(&[0.0, 1.0, 3.0]);
    let c2 = line_distances(&[5.0, 3.1, 2.0]);
    let eps = 0.01;
    let cfg = OTConfig::default().with_epsilon(eps);
    let pi = entropic_gw(
        &cost(c1.clone()),
        &cost(c2.clone()),
        &uniform(3),
        &uniform(3),
        &cfg,
    )
    .unwrap();
    let obj = brute_gw(&c1, &c2, pi.values()) + eps * plogp(pi.values());
    let best = permutations(3)
        .iter()
        .map(|p| {
            let t = perm_coupling(p);
            brute_gw(&c1, &c2, &t) + eps * plogp(&t)
        })
        .fold(f64::INFINITY, f64::min);
    assert!(obj <= best + 1e-6, "{obj} vs {best}");
    assert_eq!(pi.row_argmax(), vec![2, 1, 0]);
}

#[test]
fn gw_is_row_permutation_equivariant() {
    let xs = [0.0, 0.4, 1.5, 2.0, 3.7];
    let c1 = line_distances(&xs);
    let c2 = line_distances(&[1.0, 2.2, 2.5, 4.0, 4.1]);
    let cfg = OTConfig::default().with_epsilon(0.02);
    let pi = entropic_gw(
        &cost(c1.clone()),
        &cost(c2.clone()),
        &uniform(5),
        &uniform(5),
        &cfg,
    )
    .unwrap();
    let perm = [3, 0, 4, 1, 2];
    let c1p = c1.select(&perm, &perm);
    let pip = entropic_gw(&cost(c1p), &cost(c2), &uniform(5), &uniform(5), &cfg).unwrap();
    assert!(pip.values().max_abs_diff(&pi.values().select_rows(&perm)) < 1e-9);
}

#[test]
fn fgw_reductions_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
    let ys: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
    let cxx = cost(line_distances(&xs));
    let cyy = cost(line_distances(&ys));
    let cxy = random_cost(&mut rng, 8, 6);
    let (a, b) = (uniform(8), uniform(6));
    let cfg = OTConfig::default().with_epsilon(0.05);

    let f0 = fgw(&cxx, &cyy, &cxy, &a, &b, &cfg.with_alpha(0.0)).unwrap();
    let s = sinkhorn(&a, &b, &cost(cxy.squared()), &cfg).unwrap();
    assert!(f0.values().max_abs_diff(s.values()) <= 1e-10);

    let f1 = fgw(&cxx, &cyy, &cxy, &a, &b, &cfg.with_alpha(1.0)).unwrap();
    let g = entropic_gw(&cxx, &cyy, &a, &b, &cfg).unwrap();
    assert!(f1.values().max_abs_diff(g.values()) <= 1e-10);
}

#[test]
fn fgw_four_points_beats_permutations_and_independent() {
    let c1 = line_distances(&[0.0, 1.0, 2.5, 2.9]);
    let c2 = line_distances(&[0.2, 1.1, 2.4, 3.3]);
    let cxy = Matrix::from_fn(4, 4, |i, j| {
        if i == j {
            0.1
        } else {
            0.6 + 0.1 * (i + j) as f64
        }
    });
    let (eps, alpha) = (0.01, 0.5);
    let cfg = OTConfig::default().with_epsilon(eps).with_alpha(alpha);
    let pi = fgw(
        &cost(c1.clone()),
        &cost(c2.clone()),
        &cost(cxy.clone()),
        &uniform(4),
        &uniform(4),
        &cfg,
    )
    .unwrap();
    let objective = |t: &Matrix| {
        let lin: f64 = cxy
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(c, p)| c * c * p)
            .sum();
        alpha * brute_gw(&c1, &c2, t) + (1.0 - alpha) * lin + eps * plogp(t)
    };
    let obj = objective(pi.values());
    let tol = 1e-6;
    for p in permutations(4) {
        assert!(obj <= objective(&perm_coupling(&p)) + tol);
    }
    assert!(obj <= objective(&Matrix::filled(4, 4, 1.0 / 16.0)) + tol);
    assert!(pi.report.objective_trace.len() >= 2);
}

fn coupling_from(values: Matrix) -> Coupling {
    let (a, b) = (values.row_sums(), values.col_sums());
    Coupling::new(values, a, b, SolverReport::default()).unwrap()
}

#[test]
fn uniform_two_by_two_sampling_frequencies() {
    let pi = coupling_from(Matrix::filled(2, 2, 0.25));
    let draws = sample_pairs(&pi, 100_000, 42).unwrap();
    let mut counts = [[0usize; 2]; 2];
    for (i, j) in &draws {
        counts[*i][*j] += 1;
    }
    for row in counts {
        for c in row {
            let f = c as f64 / 100_000.0;
            assert!((0.24..=0.26).contains(&f), "{f}");
        }
    }
    assert_eq!(draws, sample_pairs(&pi, 100_000, 42).unwrap());
}

#[test]
fn sampling_passes_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = Matrix::from_fn(3, 4, |_, _| rng.gen_range(0.05..1.0));
    let total = v.sum();
    let pi = coupling_from(v.clone());
    let n = 200_000;
    let mut counts = [0usize; 12];
    for (i, j) in sample_pairs(&pi, n, 7).unwrap() {
        counts[i * 4 + j] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(v.as_slice())
        .map(|(&c, &p)| {
            let e = n as f64 * p / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 11 degrees of freedom; the 0.999 quantile is about 31.3.
    assert!(chi2 < 31.3, "chi2 = {chi2}");
}

#[test]
fn matching_accuracy_against_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = Matrix::from_fn(5, 5, |_, _| rng.gen_range(0.0..1.0));
    let pi = coupling_from(v);
    let truth = PairedSet::new(vec![(0, 2), (1, 0), (2, 4), (3, 1), (4, 3)], 5, 5).unwrap();
    let exact = expected_matching_accuracy(&pi, &truth).unwrap();
    let samples = 1_000_000;
    let mc = monte_carlo_matching_accuracy(&pi, &truth, samples, 3).unwrap();
    let sigma = (exact * (1.0 - exact) / samples as f64).sqrt();
    assert!((mc - exact).abs() <= 3.0 * sigma, "{mc} vs {exact}");

    let t = true_coupling(&truth, 5, 5).unwrap();
    assert_eq!(expected_matching_accuracy(&t, &truth).unwrap(), 1.0);
}
