use lanekeep_core::optim::{solve_lp, LinearProgram, LpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum of `cᵀx` over `Ax ≤ b` by enumerating every vertex: each choice of
/// `n` rows whose square system is nonsingular and whose solution is feasible.
fn brute_force_min(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<f64> {
    let n = c.len();
    let m = a.nrows();
    let mut best: Option<f64> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let sub = a.select_rows(idx.iter());
        let rhs = DVector::from_iterator(n, idx.iter().map(|&i| b[i]));
        if let Some(x) = sub.lu().solve(&rhs) {
            if x.iter().all(|v| v.is_finite()) {
                let feasible = (a * &x - b).iter().all(|r| *r <= 1e-9);
                if feasible {
                    let v = c.dot(&x);
                    best = Some(best.map_or(v, |bv: f64| bv.min(v)));
                }
            }
        }
        // next combination
        let mut k = n;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] < m - n + k {
                idx[k] += 1;
                for j in k + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn random_feasible_lp(rng: &mut ChaCha8Rng) -> (LinearProgram, DMatrix<f64>, DVector<f64>) {
    let n = rng.gen_range(1..=8);
    let k = if n > 4 {
        rng.gen_range(1..=5)
    } else {
        rng.gen_range(1..=8)
    };
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let mut a = DMatrix::zeros(k + 2 * n, n);
    let mut b = DVector::zeros(k + 2 * n);
    for i in 0..k {
        let mut dot = 0.0;
        for j in 0..n {
            let v: f64 = rng.gen_range(-1.0..1.0);
            a[(i, j)] = v;
            dot += v * x0[j];
        }
        b[i] = dot + rng.gen_range(0.0..2.0);
    }
    for j in 0..n {
        a[(k + 2 * j, j)] = 1.0;
        b[k + 2 * j] = 5.0;
        a[(k + 2 * j + 1, j)] = -1.0;
        b[k + 2 * j + 1] = 5.0;
    }
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    (LinearProgram::new(c, a.clone(), b.clone()), a, b)
}

#[test]
fn matches_vertex_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..120 {
        let (lp, a, b) = random_feasible_lp(&mut rng);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal, "trial {trial}");
        let oracle = brute_force_min(&lp.objective, &a, &b).expect("bounded feasible LP has a vertex");
        assert!(
            (sol.objective_value - oracle).abs() <= 1e-7,
            "trial {trial}: solver {} vs oracle {oracle}",
            sol.objective_value
        );
        let residual = (&a * &sol.primal - &b).max();
        assert!(residual <= 1e-9, "trial {trial}: residual {residual}");
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (lp, _, _) = random_feasible_lp(&mut rng);
        let s1 = solve_lp(&lp).unwrap();
        let s2 = solve_lp(&lp).unwrap();
        assert_eq!(s1.primal.as_slice(), s2.primal.as_slice());
        assert_eq!(s1.objective_value.to_bits(), s2.objective_value.to_bits());
    }
}

proptest! {
    #[test]
    fn duals_bound_the_optimum(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lp, _, _) = random_feasible_lp(&mut rng);
        let sol = solve_lp(&lp).unwrap();
        prop_assert_eq!(sol.status, LpStatus::Optimal);
        let y = sol.dual.unwrap();
        prop_assert!(y.iter().all(|v| *v <= 1e-12));
        prop_assert!(lp.constraint_rhs.dot(&y) >= sol.objective_value - 1e-8);
    }
}
