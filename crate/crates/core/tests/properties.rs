use proptest::prelude::*;

use stochknap::diffusion::DiffusionSpec;
use stochknap::dp::{extract_policy, solve_value_table, ValueTable};
use stochknap::model::{parse_instance, random_instance, write_instance, Instance};
use stochknap::policy::{switchover_decision, PolicyState, SwitchoverSchedule};
use stochknap::sim::{simulate_policy, simulate_revenues, AdmissionPolicy};
use stochknap::structure::{check_properties, Property, DEFAULT_TOLERANCE};

fn instance() -> impl Strategy<Value = Instance> {
    (any::<u64>(), 2usize..=4, 1usize..=8, 1usize..=3, 0usize..=10)
        .prop_map(|(seed, classes, horizon, batch, inventory)| {
            random_instance(seed, classes, horizon, batch, inventory).unwrap()
        })
}

/// An instance together with a valid schedule for it. `w = None` stands for −∞.
fn scheduled() -> impl Strategy<Value = (Instance, Vec<(f64, Option<f64>)>)> {
    instance().prop_flat_map(|inst| {
        let n = inst.horizon() as f64;
        let w = inst.initial_inventory() as f64;
        let pairs = prop::collection::vec((0.0..=n, prop::option::of(-3.0..=w + 3.0)), inst.num_classes() - 1);
        (Just(inst), pairs)
    })
}

fn build(inst: &Instance, pairs: &[(f64, Option<f64>)]) -> SwitchoverSchedule {
    let mut times: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    times.sort_by(f64::total_cmp);
    let pairs: Vec<(f64, f64)> =
        times.iter().zip(pairs).map(|(&t, p)| (t, p.1.unwrap_or(f64::NEG_INFINITY))).collect();
    SwitchoverSchedule::new(inst, &pairs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn instance_text_round_trips(inst in instance()) {
        let back = parse_instance(&write_instance(&inst)).unwrap();
        prop_assert_eq!(back, inst);
    }

    #[test]
    fn value_table_text_round_trips(inst in instance()) {
        // The export carries 15 significant digits.
        let vt = solve_value_table(&inst);
        let back = ValueTable::parse(&vt.export()).unwrap();
        prop_assert_eq!((back.horizon(), back.inventory()), (vt.horizon(), vt.inventory()));
        for n in 1..=vt.horizon() + 1 {
            for (a, b) in back.row(n).iter().zip(vt.row(n)) {
                prop_assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn unit_demand_tables_are_monotone_concave_in_d_and_submodular(
        seed in any::<u64>(),
        classes in 2usize..=5,
        horizon in 1usize..=12,
        inventory in 0usize..=12,
    ) {
        // Concavity in n is not among these: it fails on random unit-demand
        // instances and is asserted, failing, by the acceptance suite instead.
        let inst = random_instance(seed, classes, horizon, 1, inventory).unwrap();
        let report = check_properties(&solve_value_table(&inst), DEFAULT_TOLERANCE);
        for p in Property::ALL.into_iter().filter(|&p| p != Property::ConcaveN) {
            prop_assert!(report.passed(p), "{}", report.export());
        }
    }

    #[test]
    fn simulation_is_reproducible(inst in instance(), seed in any::<u64>()) {
        let policy = extract_policy(&inst, &solve_value_table(&inst)).unwrap();
        prop_assert_eq!(simulate_policy(&inst, &policy, 64, seed), simulate_policy(&inst, &policy, 64, seed));
    }

    #[test]
    fn schedule_text_round_trips((inst, pairs) in scheduled()) {
        let sched = build(&inst, &pairs);
        let back = SwitchoverSchedule::parse(&inst, &sched.export()).unwrap();
        prop_assert_eq!(back.stages().len(), sched.stages().len());
        for (a, b) in back.stages().iter().zip(sched.stages()) {
            prop_assert_eq!((a.time, a.level), (b.time, b.level));
        }
    }

    #[test]
    fn stage_never_decreases_along_a_path(
        (inst, pairs) in scheduled(),
        requests in prop::collection::vec((1usize..=4, 1usize..=3), 8),
    ) {
        let sched = build(&inst, &pairs);
        let mut state = PolicyState::initial(&inst);
        for &(class, size) in requests.iter().take(inst.horizon()) {
            let class = class.min(inst.num_classes());
            let (accepted, next) = switchover_decision(&sched, state, class, size);
            prop_assert!(next.stage >= state.stage);
            prop_assert!(next.stage <= inst.num_classes());
            prop_assert_eq!(accepted, class <= next.stage && size <= state.inventory);
            state = next;
        }
    }

    #[test]
    fn lower_inventory_never_closes_classes((inst, pairs) in scheduled(), period in 1usize..=8) {
        let sched = build(&inst, &pairs);
        let period = period.min(inst.horizon());
        for d in 1..=inst.initial_inventory() {
            prop_assert!(sched.stage_at(period, d - 1) >= sched.stage_at(period, d));
        }
    }

    #[test]
    fn policies_never_oversell((inst, pairs) in scheduled(), seed in any::<u64>()) {
        let sched = build(&inst, &pairs);
        let cap = inst.price(1) * inst.initial_inventory() as f64;
        for r in simulate_revenues(&inst, &sched, 200, seed) {
            prop_assert!(r >= 0.0 && r <= cap + 1e-9);
        }
        for memory in 1..=inst.num_classes() {
            prop_assert!(!sched.admits(memory, 1, 0, 1, 1));
        }
    }

    #[test]
    fn infinite_levels_reduce_to_the_time_only_policy((inst, pairs) in scheduled(), seed in any::<u64>()) {
        let mut times: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        times.sort_by(f64::total_cmp);
        let lifted: Vec<(f64, f64)> = times.iter().map(|&t| (t, f64::NEG_INFINITY)).collect();
        let two = SwitchoverSchedule::new(&inst, &lifted).unwrap();
        let one = SwitchoverSchedule::time_only(&inst, &times).unwrap();
        prop_assert!(two.is_time_only());
        for n in 1..=inst.horizon() {
            for d in 0..=inst.initial_inventory() {
                prop_assert_eq!(two.stage_at(n, d), one.stage_at(n, d));
            }
        }
        prop_assert_eq!(simulate_revenues(&inst, &two, 100, seed), simulate_revenues(&inst, &one, 100, seed));
    }

    #[test]
    fn refining_knots_preserves_cumulants(
        drift in prop::collection::vec(0.0f64..5.0, 1..8),
        variance in prop::collection::vec(0.1f64..5.0, 8),
        t in -1.0f64..10.0,
    ) {
        let variance = variance[..drift.len()].to_vec();
        let spec = DiffusionSpec::from_anchors(drift, variance).unwrap();
        let fine = spec.refine();
        prop_assert!((fine.cum_drift(t) - spec.cum_drift(t)).abs() <= 1e-9 * (1.0 + spec.cum_drift(t).abs()));
        prop_assert!((fine.cum_variance(t) - spec.cum_variance(t)).abs() <= 1e-9 * (1.0 + spec.cum_variance(t).abs()));
        prop_assert!((fine.drift(t) - spec.drift(t)).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn optimal_policy_dominates_switchover((inst, pairs) in scheduled(), seed in any::<u64>()) {
        let reps = 4000;
        let table = solve_value_table(&inst);
        let optimal = extract_policy(&inst, &table).unwrap();
        let sched = build(&inst, &pairs);
        // Common random numbers: the paired difference has a much smaller SE.
        let a = simulate_revenues(&inst, &optimal, reps, seed);
        let b = simulate_revenues(&inst, &sched, reps, seed);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = diffs.iter().sum::<f64>() / reps as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        prop_assert!(mean >= -4.0 * se - 1e-9, "mean diff {mean}, se {se}");

        let result = simulate_policy(&inst, &sched, reps, seed);
        let value = table.get(1, inst.initial_inventory());
        prop_assert!(result.mean <= value + 4.0 * result.std_error + 1e-9, "{} > {value}", result.mean);
    }
}
