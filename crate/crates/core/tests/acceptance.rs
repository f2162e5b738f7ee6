//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use stochknap::bounds::BoundTable;
use stochknap::cli::{run_benchmark, BenchmarkConfig};
use stochknap::diffusion::{first_passage_density, mc_first_passage, DiffusionSpec, PassageProblem};
use stochknap::dp::{extract_policy, solve_value_table};
use stochknap::model::{random_instance, validate_instance, write_instance, Instance, RawInstance};
use stochknap::numeric::integrate;
use stochknap::sim::simulate_policy;
use stochknap::structure::{check_properties, find_counterexample, Property, DEFAULT_SEED, DEFAULT_TOLERANCE};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> (Verdict, Duration) {
    let start = Instant::now();
    let mut v = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            v.passed = false;
            v.detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
        }
    }
    (v, elapsed)
}

/// Expected revenue of the best history-dependent policy, by explicit
/// expectimax over every outcome sequence. Accumulates revenue along the
/// path instead of reusing any value table.
fn history_tree_optimum(inst: &Instance, period: usize, inventory: usize, earned: f64) -> f64 {
    if period > inst.horizon() {
        return earned;
    }
    let mut total = inst.no_arrival(period) * history_tree_optimum(inst, period + 1, inventory, earned);
    for i in 1..=inst.num_classes() {
        for j in 1..=inst.max_batch() {
            let mass = inst.theta(period, i, j);
            if mass == 0.0 {
                continue;
            }
            let reject = history_tree_optimum(inst, period + 1, inventory, earned);
            let best = if j <= inventory {
                let accept = history_tree_optimum(inst, period + 1, inventory - j, earned + inst.price(i) * j as f64);
                accept.max(reject)
            } else {
                reject
            };
            total += mass * best;
        }
    }
    total
}

fn small_instance(rng: &mut ChaCha8Rng, horizon: usize, classes: usize, batch: usize, inventory: usize) -> Instance {
    let prices = if classes == 1 { vec![1.0] } else { vec![1.0, rng.random_range(0.05..0.95)] };
    let mut raw = RawInstance::empty(horizon, prices, batch, inventory);
    for n in 1..=horizon {
        let weights: Vec<f64> = (0..=classes * batch)
            .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.01..1.0) })
            .collect();
        let total: f64 = weights.iter().sum::<f64>().max(1e-9);
        for i in 1..=classes {
            for j in 1..=batch {
                raw.set(n, i, j, weights[(i - 1) * batch + j - 1] / total);
            }
        }
    }
    validate_instance(raw).unwrap()
}

fn c1_dp_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for _round in 0..8 {
        for horizon in 1..=4 {
            for inventory in 1..=4 {
                for classes in 1..=2 {
                    for batch in 1..=2 {
                        let inst = small_instance(&mut rng, horizon, classes, batch, inventory);
                        let table = solve_value_table(&inst);
                        for n in 1..=horizon {
                            for d in 0..=inventory {
                                let oracle = history_tree_optimum(&inst, n, d, 0.0);
                                worst = worst.max((table.get(n, d) - oracle).abs());
                            }
                        }
                        count += 1;
                    }
                }
            }
        }
    }
    verdict(count >= 500 && worst <= 1e-9, format!("{count} instances, max |V - oracle| = {worst:.3e}"))
}

fn c2_unit_structure() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 7];
    let mut failing_instances = 0;
    for k in 0..200u64 {
        let classes = rng.random_range(2..=5);
        let horizon = rng.random_range(1..=30);
        let inventory = rng.random_range(0..=30);
        let inst = random_instance(10_000 + k, classes, horizon, 1, inventory).unwrap();
        let report = check_properties(&solve_value_table(&inst), DEFAULT_TOLERANCE);
        for (slot, p) in Property::ALL.iter().enumerate() {
            counts[slot] += report.check(*p).violations.len();
        }
        failing_instances += usize::from(!report.all_passed());
    }
    let cells: Vec<String> = Property::ALL.iter().zip(counts).map(|(p, c)| format!("{}={c}", p.name())).collect();
    verdict(
        counts.iter().all(|&c| c == 0),
        format!("200 unit-demand instances, {failing_instances} with violations; {}", cells.join(" ")),
    )
}

fn c3_counterexample() -> Verdict {
    let ce = match find_counterexample(DEFAULT_SEED) {
        Ok(ce) => ce,
        Err(e) => return verdict(false, e.to_string()),
    };
    let inst = &ce.instance;
    let uniform = inst.num_classes() == 2
        && inst.max_batch() == 4
        && (1..=inst.horizon()).all(|n| (1..=2).all(|i| (1..=4).all(|j| inst.theta(n, i, j) == 0.125)));
    let unit = inst.truncate_to_unit();
    let unit_violations =
        check_properties(&solve_value_table(&unit), DEFAULT_TOLERANCE).check(Property::ConcaveD).violations.len();
    verdict(
        uniform && !ce.violations.is_empty() && unit_violations == 0,
        format!(
            "N={} W={}: {} concave-in-d violations, {} after truncation to unit demand",
            inst.horizon(),
            inst.initial_inventory(),
            ce.violations.len(),
            unit_violations
        ),
    )
}

fn c4_dominance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failed = Vec::new();
    let mut states = 0;
    for k in 0..200u64 {
        let batch = rng.random_range(2..=4);
        let classes = rng.random_range(2..=4);
        let horizon = rng.random_range(1..=10);
        let inventory = rng.random_range(0..=15);
        let inst = random_instance(20_000 + k, classes, horizon, batch, inventory).unwrap();
        let table = BoundTable::new(&inst);
        states += horizon * (inventory + 1);
        let failures = table.dominance_failures(1e-9);
        if !failures.is_empty() {
            failed.push((inst, failures));
        }
    }
    for (inst, failures) in &failed {
        let (n, d, v, bound) = failures[0];
        println!("# dominance failure at n={n} d={d}: V={v} > v={bound}");
        for line in write_instance(inst).lines() {
            println!("#   {line}");
        }
    }
    verdict(failed.is_empty(), format!("200 batch instances, {states} states, {} instances violate", failed.len()))
}

/// Inverse-Gaussian CDF of the first passage of `γt + σB(t)` to `a`.
fn passage_cdf(gamma: f64, variance: f64, a: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let phi = Normal::standard();
    let s = (variance * t).sqrt();
    phi.cdf((gamma * t - a) / s) + (2.0 * gamma * a / variance).exp() * phi.cdf((-gamma * t - a) / s)
}

fn c5_passage_density() -> Verdict {
    let (gamma, variance, level) = (0.5, 1.0, 5.0);
    let prob = PassageProblem { spec: DiffusionSpec::constant(gamma, variance).unwrap(), start: 0.0, level };
    let sample = mc_first_passage(&prob, 100_000, 1e-3, 1, 40.0);
    let hist = sample.histogram(2.0);
    let mut outside = Vec::new();
    let mut worst_z: f64 = 0.0;
    let mut eq_mode_sup: f64 = 0.0;
    for (k, (&est, &se)) in hist.density.iter().zip(&hist.std_error).enumerate() {
        let (lo, hi) = hist.edges(k);
        let exact = (passage_cdf(gamma, variance, level, hi) - passage_cdf(gamma, variance, level, lo)) / 2.0;
        let diff = (est - exact).abs();
        if diff > 3.0 * se {
            outside.push(k);
        }
        if se > 0.0 {
            worst_z = worst_z.max(diff / se);
        }
        let closed = integrate(|t| first_passage_density(&prob, t).unwrap_or(0.0), lo.max(1e-12), hi, 1e-10)
            .map(|m| m / 2.0)
            .unwrap_or(f64::NAN);
        eq_mode_sup = eq_mode_sup.max((closed - exact).abs());
    }
    println!("# density=paper curve sup-norm deviation from the closed form on 2-wide bins: {eq_mode_sup:.6}");
    verdict(
        outside.is_empty(),
        format!(
            "{} bins, max |mc - exact|/se = {worst_z:.3}, bins outside 3 se: {outside:?}; density=paper sup-norm {eq_mode_sup:.4}",
            hist.density.len()
        ),
    )
}

fn c6_simulation_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for k in 0..20u64 {
        let classes = rng.random_range(2..=4);
        let horizon = rng.random_range(5..=20);
        let batch = rng.random_range(1..=4);
        let inventory = rng.random_range(5..=20);
        let inst = random_instance(30_000 + k, classes, horizon, batch, inventory).unwrap();
        let table = solve_value_table(&inst);
        let policy = extract_policy(&inst, &table).unwrap();
        let result = simulate_policy(&inst, &policy, 100_000, k + 1);
        let z = (result.mean - table.get(1, inventory)).abs() / result.std_error;
        worst = worst.max(z);
        bad += usize::from(z > 4.0);
    }
    verdict(bad == 0, format!("20 instances, max |mean - V|/se = {worst:.3}"))
}

fn c7_c8_benchmark() -> (Verdict, Verdict) {
    let report = match run_benchmark(&BenchmarkConfig::default()) {
        Ok(r) => r,
        Err(e) => return (verdict(false, e.to_string()), verdict(false, e.to_string())),
    };
    let gaps: Vec<f64> = report.systems.iter().map(|s| s.relative_gap()).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let distinct = report.systems.iter().filter(|s| s.schedule_2d.stages() != s.schedule_1d.stages()).count();
    let ge = report.two_d_at_least_one_d();
    let median = report.median_gap();
    let c7 = verdict(
        ge >= 0.60 && median >= 0.0,
        format!(
            "{} systems, 2D >= 1D on {:.1}%, median gap {:.4}%, mean gap {:.4}%, 2D schedule differs from 1D on {distinct}",
            report.systems.len(),
            100.0 * ge,
            100.0 * median,
            100.0 * mean_gap
        ),
    );
    let counts = report.class_counts(true);
    let within = report.within_95_fraction();
    let c8 = verdict(
        within >= 0.80 - 0.10,
        format!(
            "within 95th band {:.1}% (threshold 80% with 10-point tolerance); 2D counts 85/90/95/97.5/above = {:?}, 1D = {:?}",
            100.0 * within,
            counts,
            report.class_counts(false)
        ),
    );
    for line in report.render().lines().filter(|l| l.starts_with("# ")) {
        println!("#{line}");
    }
    (c7, c8)
}

fn c9_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let inst = d.join("instance.txt");
    fs::write(&inst, write_instance(&random_instance(99, 3, 8, 3, 10).unwrap())).unwrap();
    let objective = d.join("objective.txt");
    fs::write(&objective, "grid_t 11\ngrid_w 11\nmc_paths 300\nrefine_iters 40\n").unwrap();
    let bench = d.join("bench.txt");
    fs::write(
        &bench,
        "parameter_sets 3\ninstances 2\nhorizons 5 8\ninventory 8\nreps 2000\ngrid_t 9\ngrid_w 9\nmc_paths 200\nrefine_iters 30\n",
    )
    .unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let schedule = d.join("fixed_schedule.txt");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("solve", vec!["--instance".into(), p(&inst)]),
        ("check-structure", vec!["--instance".into(), p(&inst), "--tol".into(), "1e-9".into()]),
        ("bound", vec!["--instance".into(), p(&inst)]),
        ("optimize-policy", vec!["--instance".into(), p(&inst), "--config".into(), p(&objective), "--seed".into(), "5".into()]),
        (
            "optimize-policy",
            vec!["--instance".into(), p(&inst), "--config".into(), p(&objective), "--density".into(), "paper".into()],
        ),
        ("optimize-policy", vec!["--instance".into(), p(&inst), "--config".into(), p(&objective), "--time-only".into()]),
        ("simulate", vec!["--instance".into(), p(&inst), "--reps".into(), "20000".into(), "--seed".into(), "3".into()]),
        ("simulate", vec!["--instance".into(), p(&inst), "--policy".into(), "accept-all".into(), "--reps".into(), "5000".into()]),
        ("simulate", vec!["--instance".into(), p(&inst), "--schedule".into(), p(&schedule), "--reps".into(), "5000".into()]),
        ("benchmark", vec!["--config".into(), p(&bench), "--seed".into(), "4".into()]),
        ("counterexample", vec!["--seed".into(), "1".into()]),
    ];
    let exe = env!("CARGO_BIN_EXE_stochknap");
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    for (k, (cmd, args)) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for round in 0..2 {
            let out = d.join(format!("out_{k}_{round}.txt"));
            let status = Command::new(exe).arg(cmd).args(args).arg("--out").arg(&out).status().unwrap();
            if !status.success() {
                failed.push(format!("{cmd}#{k}"));
            }
            outputs.push(fs::read(&out).unwrap_or_default());
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            mismatched.push(format!("{cmd}#{k}"));
        }
        if k == 3 {
            fs::copy(d.join("out_3_0.txt"), &schedule).unwrap();
        }
    }
    verdict(
        mismatched.is_empty() && failed.is_empty(),
        format!("{} command lines run twice; differing: {mismatched:?}; failing: {failed:?}", commands.len()),
    )
}

fn main() {
    let minute = Duration::from_secs(60);
    let mut results: Vec<(u32, &str, Verdict, Duration)> = Vec::new();
    let mut record = |id, name, (v, t): (Verdict, Duration)| results.push((id, name, v, t));

    record(1, "DP-oracle equivalence", timed(Some(minute), c1_dp_oracle));
    record(2, "unit-demand structure", timed(Some(minute), c2_unit_structure));
    record(3, "concavity counterexample", timed(Some(Duration::from_secs(10)), c3_counterexample));
    record(4, "relaxation dominance", timed(Some(2 * minute), c4_dominance));
    record(5, "passage density", timed(Some(2 * minute), c5_passage_density));
    record(6, "simulation oracle", timed(Some(2 * minute), c6_simulation_oracle));
    let start = Instant::now();
    let (c7, c8) = c7_c8_benchmark();
    let shared = start.elapsed();
    let over = shared > 30 * minute;
    let budget = |mut v: Verdict| {
        if over {
            v.passed = false;
            v.detail.push_str("; over the 1800s budget");
        }
        v
    };
    record(7, "1D-vs-2D gap", (budget(c7), shared));
    record(8, "percentile distribution", (budget(c8), shared));
    record(9, "determinism", timed(None, c9_determinism));

    let mut failures = 0;
    for (id, name, v, t) in &results {
        failures += usize::from(!v.passed);
        println!(
            "{} criterion {id} ({name}): {} [{:.1}s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            t.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failures, results.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
