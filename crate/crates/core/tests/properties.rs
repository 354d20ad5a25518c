//! Property tests for the structural invariants: pseudo-inverse projection
//! identities, conjugate-gradient exactness, oracle symmetry, descent
//! monotonicity, and lossless serialization.

use bgs_core::linalg::{
    cg_solve, dot, gaussian_vec, norm, pinv_psd_apply, rand_spd_with_spectrum_eig, range_project,
    seeded_rng, sub, sym_eig, DEFAULT_RANK_TOL,
};
use bgs_core::problems::{
    problem_from_text, problem_to_text, quadratic_generate, MexicanHatProblem, Problem,
    ProblemMeta, ProblemOracle,
};
use bgs_core::unroll::unroll;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// A · (A†v) is the orthogonal projection of v onto range(A).
    #[test]
    fn pinv_application_projects_onto_range(
        seed in 0u64..1000,
        d in 2usize..10,
        cond in 1.0f64..50.0,
    ) {
        let mut rng = seeded_rng(seed);
        let rank = 1 + (seed as usize % d);
        let (a, _) = rand_spd_with_spectrum_eig(d, rank, cond, 1.0, &mut rng).unwrap();
        let eig = sym_eig(&a).unwrap();
        let v = gaussian_vec(&mut rng, d);
        let pinv_v = pinv_psd_apply(&eig, &v, DEFAULT_RANK_TOL).unwrap();
        let a_pinv_v = a.matvec(&pinv_v);
        let proj = range_project(&eig, &v, DEFAULT_RANK_TOL);
        prop_assert!(norm(&sub(&a_pinv_v, &proj)) <= 1e-9 * norm(&v).max(1.0));
    }

    /// CG solves SPD systems to 1e-10 within d iterations.
    #[test]
    fn cg_is_exact_on_spd_systems(seed in 0u64..1000, d in 1usize..12) {
        let mut rng = seeded_rng(seed);
        let (a, _) = rand_spd_with_spectrum_eig(d, d, 20.0, 1.0, &mut rng).unwrap();
        let rhs = gaussian_vec(&mut rng, d);
        let out = cg_solve(|v| a.matvec(v), &rhs, &vec![0.0; d], d, 1e-10).unwrap();
        prop_assert!(out.iters <= d);
        prop_assert!(out.residual_norm <= 1e-10);
    }

    /// ⟨u, ∂²_yy g v⟩ = ⟨v, ∂²_yy g u⟩ on random probes of both families.
    #[test]
    fn hessian_vector_products_are_symmetric(seed in 0u64..1000) {
        let q = quadratic_generate(5, 4, 1, 8.0, 0.9, seed).unwrap();
        let hat = MexicanHatProblem::new([0.5, 0.3]);
        let mut rng = seeded_rng(seed ^ 0xabcd);
        let x = gaussian_vec(&mut rng, 5);
        let y = gaussian_vec(&mut rng, 4);
        let u = gaussian_vec(&mut rng, 4);
        let v = gaussian_vec(&mut rng, 4);
        let lhs = dot(&u, &q.hvp_yy(&x, &y, &v));
        let rhs = dot(&v, &q.hvp_yy(&x, &y, &u));
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));

        let xh = gaussian_vec(&mut rng, 2);
        let yh = gaussian_vec(&mut rng, 2);
        let u2 = gaussian_vec(&mut rng, 2);
        let v2 = gaussian_vec(&mut rng, 2);
        let lhs = dot(&u2, &hat.hvp_yy(&xh, &yh, &v2));
        let rhs = dot(&v2, &hat.hvp_yy(&xh, &yh, &u2));
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    /// The lower objective never increases along unrolled descent when the
    /// step respects the smoothness bound.
    #[test]
    fn unrolled_descent_is_monotone(seed in 0u64..1000, steps in 1usize..40) {
        let q = quadratic_generate(4, 4, 1, 10.0, 0.99, seed).unwrap();
        let mut rng = seeded_rng(seed ^ 0x77);
        let x = gaussian_vec(&mut rng, 4);
        let y = gaussian_vec(&mut rng, 4);
        let alpha = 1.0 / q.smoothness_bound();
        let out = unroll(&q, &x, &y, steps, alpha).unwrap();
        let mut prev = f64::INFINITY;
        for point in &out.trajectory {
            let val = q.lower_value(&x, point);
            prop_assert!(val <= prev + 1e-12);
            prev = val;
        }
    }

    /// Serialized problems reparse to bit-identical data.
    #[test]
    fn serialization_is_lossless(seed in 0u64..1000) {
        let q = quadratic_generate(3, 4, 1, 5.0, 0.9, seed).unwrap();
        let meta = ProblemMeta {
            seed: Some(seed),
            cond: Some(5.0),
            null_dim: Some(1),
            lambda_max: Some(0.9),
        };
        let text = problem_to_text(&Problem::Quadratic(q.clone()), &meta);
        let (parsed, meta2) = problem_from_text(&text).unwrap();
        prop_assert_eq!(meta, meta2);
        match parsed {
            Problem::Quadratic(q2) => {
                prop_assert_eq!(q.a_f.data(), q2.a_f.data());
                prop_assert_eq!(q.a_g.data(), q2.a_g.data());
                prop_assert_eq!(q.b_g.data(), q2.b_g.data());
                prop_assert_eq!(&q.c_f, &q2.c_f);
            }
            _ => prop_assert!(false, "family changed"),
        }
    }

    /// Selection axioms hold at the closed-form selection for random
    /// instances and points.
    #[test]
    fn selection_axioms(seed in 0u64..1000) {
        let q = quadratic_generate(5, 6, 2, 10.0, 0.95, seed).unwrap();
        let mut rng = seeded_rng(seed ^ 0x1234);
        let x = gaussian_vec(&mut rng, 5);
        let y = gaussian_vec(&mut rng, 6);
        let phi = q.selection(&x, &y);
        prop_assert!(norm(&q.grad_lower_y(&x, &phi)) <= 1e-10);
        // Self-consistency at (numerically) critical points.
        let phi2 = q.selection(&x, &phi);
        prop_assert!(norm(&sub(&phi2, &phi)) <= 1e-10);
    }
}
