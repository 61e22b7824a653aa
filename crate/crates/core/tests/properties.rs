use nalgebra::DMatrix;
use proptest::prelude::*;

use qlmm::lasso::{kkt_residual, lasso_fit, objective_value, LassoOptions};
use qlmm::model::Basis;
use qlmm::proxy::transform_dataset;
use qlmm::sim::{generate_dataset, run_mc, McOptions, PsiKind, Scenario};
use qlmm::varcomp::{project_onto_basis, psi_from_eta};

fn small(seed: u64, q: usize, psi: PsiKind) -> Scenario {
    Scenario {
        n: 10,
        m: 3,
        p: 15,
        q,
        psi,
        seed,
        ..Scenario::default()
    }
}

fn psi_kind() -> impl Strategy<Value = PsiKind> {
    prop_oneof![Just(PsiKind::PositiveDefinite), Just(PsiKind::Singular)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn effective_size_is_nonincreasing_in_a(seed in 0u64..1000, q in 1usize..4, psi in psi_kind(), a in 0.0f64..20.0, da in 0.0f64..20.0) {
        let (ds, _) = generate_dataset(&small(seed, q, psi)).unwrap();
        let t1 = transform_dataset(&ds, a).unwrap().effective_sample_size();
        let t2 = transform_dataset(&ds, a + da).unwrap().effective_sample_size();
        prop_assert!(t2 <= t1 * (1.0 + 1e-12), "T({}) = {t1} < T({}) = {t2}", a, a + da);
        prop_assert!((t1 - ds.total_obs() as f64).abs() < 1e-9 || a > 0.0);
        prop_assert!(t2 > 0.0);
    }

    #[test]
    fn lasso_solution_satisfies_kkt(
        seed in 0u64..1000,
        a in 0.0f64..8.0,
        lambda in 0.01f64..0.5,
        weights in prop::collection::vec(0.0f64..2.0, 15),
        standardize in any::<bool>(),
    ) {
        let (ds, _) = generate_dataset(&small(seed, 2, PsiKind::PositiveDefinite)).unwrap();
        let tr = transform_dataset(&ds, a).unwrap();
        let opts = LassoOptions { weights: Some(weights), standardize, ..LassoOptions::with_lambda(lambda) };
        let fit = lasso_fit(&tr, &opts).unwrap();
        prop_assert!(kkt_residual(&tr, &fit) < 1e-6);
        // no coordinate move lowers the objective
        let base = objective_value(&tr, &fit);
        for j in 0..15 {
            for step in [-1e-3, 1e-3] {
                let mut moved = fit.clone();
                moved.beta[j] += step;
                prop_assert!(objective_value(&tr, &moved) >= base - 1e-9);
            }
        }
    }

    #[test]
    fn eta_coordinates_round_trip(eta in prop::collection::vec(-3.0f64..3.0, 2), q in 2usize..6) {
        let basis = Basis::diagonal_halves(q).unwrap();
        let psi: DMatrix<f64> = psi_from_eta(&eta, &basis).unwrap();
        let back = project_onto_basis(&psi, &basis).unwrap();
        for (x, y) in eta.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let sc = Scenario { n: 8, m: 3, p: 20, ..Scenario::default() };
    let opts = McOptions { a_grid: vec![2.0], ..McOptions::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_mc(&sc, 6, &opts).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&three).unwrap());
}
