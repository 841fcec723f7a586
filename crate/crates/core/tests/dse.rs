mod common;

use dataflow_hls::dse::{check_feasible, optimize, solve, Constraint, DseError, Objective};
use dataflow_hls::resource_model::{CostTable, ResourceBudget};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{exhaustive_best, load, random_problem, BENCHMARKS};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn solve_matches_exhaustive_enumeration(seed in any::<u64>()) {
        let problem = random_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        match (solve(&problem), exhaustive_best(&problem)) {
            (Ok(sol), Some(best)) => {
                prop_assert_eq!(sol.cycles, best);
                prop_assert!(sol.optimal);
                prop_assert!(check_feasible(&sol, &problem).is_empty());
            }
            (Err(DseError::Infeasible { .. }), None) => {}
            (got, want) => prop_assert!(false, "solve {:?} vs exhaustive {:?}", got, want),
        }
    }

    #[test]
    fn larger_budgets_never_hurt(seed in any::<u64>(), extra_dsp in 0u64..64, extra_bram in 0u64..8) {
        let problem = random_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut relaxed = problem.clone();
        relaxed.budget.dsp += extra_dsp;
        relaxed.budget.bram += extra_bram;
        if let Ok(tight) = solve(&problem) {
            let loose = solve(&relaxed).expect("relaxing a feasible budget stays feasible");
            prop_assert!(loose.cycles <= tight.cycles);
        }
    }

    #[test]
    fn solve_is_deterministic(seed in any::<u64>()) {
        let problem = random_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(solve(&problem), solve(&problem));
    }
}

#[test]
fn benchmark_solutions_respect_budgets() {
    for name in BENCHMARKS {
        let (_, graph) = load(name);
        for dsp in [1248, 250, 50] {
            let budget = ResourceBudget { dsp, bram: 288 };
            let (fin, sol) = optimize(&graph, budget, CostTable::default(), Objective::Sum).unwrap();
            assert!(sol.dsp <= dsp && sol.bram <= 288, "{name} at {dsp}");
            assert!(fin.finalized);
            assert!(fin.violations().is_empty(), "{name}: {:?}", fin.violations());
            for ch in &fin.channels {
                assert!(ch.depth >= 2);
            }
        }
    }
}

#[test]
fn zero_dsp_names_the_dsp_constraint() {
    let (_, graph) = load("feed_forward_64x16");
    let err = optimize(&graph, ResourceBudget { dsp: 0, bram: 288 }, CostTable::default(), Objective::Sum).unwrap_err();
    match err {
        DseError::Infeasible { constraint, .. } => assert_eq!(constraint, Constraint::Dsp),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("DSP Constr"));
}

#[test]
fn zero_bram_names_the_bram_constraint() {
    // The line buffer of a 3x3 conv on 224-wide rows needs BRAM at every
    // partitioning.
    let (_, graph) = load("conv_relu_224");
    let err = optimize(&graph, ResourceBudget { dsp: 1248, bram: 0 }, CostTable::default(), Objective::Sum).unwrap_err();
    assert!(matches!(err, DseError::Infeasible { constraint: Constraint::Bram, .. }), "{err:?}");
}

#[test]
fn max_objective_bounds_the_slowest_node() {
    let (_, graph) = load("cascade_conv_32");
    let budget = ResourceBudget { dsp: 300, bram: 288 };
    let (_, sum) = optimize(&graph, budget, CostTable::default(), Objective::Sum).unwrap();
    let (_, max) = optimize(&graph, budget, CostTable::default(), Objective::Max).unwrap();
    let slowest = |s: &dataflow_hls::dse::DseSolution| s.nodes.iter().map(|n| n.estimate.cycles).max().unwrap();
    assert_eq!(max.cycles, slowest(&max));
    assert!(slowest(&max) <= slowest(&sum));
}
