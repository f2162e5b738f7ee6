//! Switch-over admission policies and the recursive schedule construction.
//!
//! Time is measured in elapsed periods: the decision of period `n` happens at
//! epoch `e = n − 1`. Stage `m` (which opens class `m + 1`) fires at the first
//! epoch with `e ≥ t_m` or `inventory ≤ c_m(e)`, where
//! `c_m(e) = w_m + Σ_{s=e+1..N} E[Q_{m..I}(s)]` is `w_m` plus the expected
//! demand still to come from the classes the stage model aggregates.

use thiserror::Error;

use crate::model::Instance;
use crate::sim::AdmissionPolicy;
use crate::textfmt::{format_sig, tokenized_lines};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("a switch-over schedule needs at least two classes")]
    TooFewClasses,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("switch-point optimizer failed at stage {stage}: {reason}")]
    OptimizerFailure { stage: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Time trigger `t_m` in elapsed periods.
    pub time: f64,
    /// Inventory offset `w_m`; `−∞` disables the inventory trigger.
    pub level: f64,
    /// Stage objective reported by the solver, if the stage was optimized.
    pub objective: Option<f64>,
    /// Revenue-weighted price of the aggregated lower group.
    pub pseudo_price: Option<f64>,
    /// `remaining[e] = Σ_{s=e+1..N} E[Q_{m..I}(s)]` for `e = 0..=N`.
    remaining: Vec<f64>,
}

impl Stage {
    /// `c_m(e)`; epochs past the horizon see no remaining demand.
    pub fn threshold(&self, epoch: usize) -> f64 {
        self.level + self.remaining.get(epoch).copied().unwrap_or(0.0)
    }

    pub fn is_time_only(&self) -> bool {
        self.level == f64::NEG_INFINITY
    }

    fn fires(&self, epoch: usize, inventory: usize) -> bool {
        epoch as f64 >= self.time || inventory as f64 <= self.threshold(epoch)
    }
}

/// Ordered `(t_m, w_m)` pairs, `m = 1..I−1`, with their threshold curves.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchoverSchedule {
    horizon: usize,
    classes: usize,
    stages: Vec<Stage>,
}

impl SwitchoverSchedule {
    pub fn new(inst: &Instance, pairs: &[(f64, f64)]) -> Result<SwitchoverSchedule, PolicyError> {
        let classes = inst.num_classes();
        if classes < 2 {
            return Err(PolicyError::TooFewClasses);
        }
        if pairs.len() != classes - 1 {
            return Err(PolicyError::InvalidSchedule(format!(
                "{} stages given, {} classes need {}",
                pairs.len(),
                classes,
                classes - 1
            )));
        }
        let horizon = inst.horizon();
        let mut previous = 0.0;
        let mut stages = Vec::with_capacity(pairs.len());
        for (m, &(time, level)) in pairs.iter().enumerate() {
            if !(time >= previous && time <= horizon as f64) {
                return Err(PolicyError::InvalidSchedule(format!(
                    "stage {} time {time} outside [{previous}, {horizon}]",
                    m + 1
                )));
            }
            if level.is_nan() || level == f64::INFINITY {
                return Err(PolicyError::InvalidSchedule(format!("stage {} level {level}", m + 1)));
            }
            previous = time;
            stages.push(Stage {
                time,
                level,
                objective: None,
                pseudo_price: None,
                remaining: remaining_demand(inst, m + 1..=classes),
            });
        }
        Ok(SwitchoverSchedule { horizon, classes, stages })
    }

    /// The one-dimensional policy: every inventory trigger disabled.
    pub fn time_only(inst: &Instance, times: &[f64]) -> Result<SwitchoverSchedule, PolicyError> {
        let pairs: Vec<(f64, f64)> = times.iter().map(|&t| (t, f64::NEG_INFINITY)).collect();
        SwitchoverSchedule::new(inst, &pairs)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn is_time_only(&self) -> bool {
        self.stages.iter().all(Stage::is_time_only)
    }

    /// Highest admissible class implied by `(period, inventory)` alone: one
    /// plus the number of leading stages whose trigger has fired.
    pub fn stage_at(&self, period: usize, inventory: usize) -> usize {
        let epoch = period - 1;
        1 + self.stages.iter().take_while(|s| s.fires(epoch, inventory)).count()
    }

    /// `switch t_m w_m` lines, then the curves sampled at every epoch as
    /// `curve m e c_m(e)`.
    pub fn export(&self) -> String {
        let mut out = format!("horizon {}\nclasses {}\n", self.horizon, self.classes);
        for (m, s) in self.stages.iter().enumerate() {
            out.push_str(&format!("switch {} {} {}\n", m + 1, format_sig(s.time, 17), format_sig(s.level, 17)));
            if let Some(v) = s.objective {
                out.push_str(&format!("# stage {} objective {}\n", m + 1, format_sig(v, 15)));
            }
            if let Some(p) = s.pseudo_price {
                out.push_str(&format!("# stage {} pseudo_price {}\n", m + 1, format_sig(p, 15)));
            }
        }
        for (m, s) in self.stages.iter().enumerate() {
            for e in 0..=self.horizon {
                out.push_str(&format!("curve {} {e} {}\n", m + 1, format_sig(s.threshold(e), 15)));
            }
        }
        out
    }

    /// Reads the `switch` lines of [`export`](Self::export); curves are
    /// rebuilt from the instance.
    pub fn parse(inst: &Instance, text: &str) -> Result<SwitchoverSchedule, PolicyError> {
        let mut pairs: Vec<Option<(f64, f64)>> = vec![None; inst.num_classes().saturating_sub(1)];
        for (line, tokens) in tokenized_lines(text) {
            let syntax = |message: String| PolicyError::Syntax { line, message };
            match tokens[0] {
                "horizon" | "classes" => {
                    let expected = if tokens[0] == "horizon" { inst.horizon() } else { inst.num_classes() };
                    let value: Option<usize> = tokens.get(1).and_then(|t| t.parse().ok());
                    if tokens.len() != 2 || value != Some(expected) {
                        return Err(syntax(format!("{} does not match the instance ({expected})", tokens[0])));
                    }
                }
                "switch" => {
                    if tokens.len() != 4 {
                        return Err(syntax("expected `switch m t w`".into()));
                    }
                    let m: usize = tokens[1].parse().map_err(|_| syntax("bad stage index".into()))?;
                    let t: f64 = tokens[2].parse().map_err(|_| syntax("bad time".into()))?;
                    let w: f64 = tokens[3].parse().map_err(|_| syntax("bad level".into()))?;
                    match pairs.get_mut(m.wrapping_sub(1)) {
                        Some(slot @ None) => *slot = Some((t, w)),
                        Some(Some(_)) => return Err(syntax(format!("duplicate stage {m}"))),
                        None => return Err(syntax(format!("stage {m} out of range"))),
                    }
                }
                "curve" => {}
                other => return Err(syntax(format!("unknown key `{other}`"))),
            }
        }
        let pairs: Option<Vec<(f64, f64)>> = pairs.into_iter().collect();
        let pairs = pairs.ok_or_else(|| PolicyError::Syntax { line: 0, message: "missing stage".into() })?;
        SwitchoverSchedule::new(inst, &pairs)
    }
}

/// `Σ_{s=e+1..N} Σ_{i∈classes} E[Q_i(s)]` for `e = 0..=N`.
fn remaining_demand(inst: &Instance, classes: std::ops::RangeInclusive<usize>) -> Vec<f64> {
    let horizon = inst.horizon();
    let mut remaining = vec![0.0; horizon + 1];
    for e in (0..horizon).rev() {
        let mean: f64 = classes.clone().map(|i| inst.class_mean(e + 1, i)).sum();
        remaining[e] = remaining[e + 1] + mean;
    }
    remaining
}

/// Per-path state: classes `1..=stage` are admissible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyState {
    pub stage: usize,
    pub period: usize,
    pub inventory: usize,
}

impl PolicyState {
    pub fn initial(inst: &Instance) -> PolicyState {
        PolicyState { stage: 1, period: 1, inventory: inst.initial_inventory() }
    }
}

/// Re-evaluates the stage for the state's period, then decides `(class, size)`.
/// The returned state is positioned at the next period.
pub fn switchover_decision(
    sched: &SwitchoverSchedule,
    state: PolicyState,
    class: usize,
    size: usize,
) -> (bool, PolicyState) {
    let stage = state.stage.max(sched.stage_at(state.period, state.inventory));
    let accept = class <= stage && size <= state.inventory;
    let inventory = if accept { state.inventory - size } else { state.inventory };
    (accept, PolicyState { stage, period: state.period + 1, inventory })
}

impl AdmissionPolicy for SwitchoverSchedule {
    fn advance(&self, memory: &mut usize, period: usize, inventory: usize) {
        *memory = (*memory).max(self.stage_at(period, inventory));
    }

    fn admits(&self, memory: usize, _period: usize, inventory: usize, class: usize, size: usize) -> bool {
        class <= memory && size <= inventory
    }

    fn name(&self) -> String {
        if self.is_time_only() { "switchover-1d" } else { "switchover-2d" }.to_string()
    }
}

/// One two-group subproblem of the recursive construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProblem {
    pub stage: usize,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub start_time: f64,
    pub start_inventory: f64,
    /// Revenue-weighted price of `low` over `[start_time, N]`.
    pub low_price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchPoint {
    pub time: f64,
    /// `−∞` when the inventory trigger is disabled.
    pub level: f64,
    pub objective: f64,
}

/// Chooses `(t, w)` for one stage.
pub trait SwitchPointSolver {
    fn solve(&self, inst: &Instance, problem: &StageProblem) -> Result<SwitchPoint, String>;
}

/// Expected volume of `class` over the time window `(from, to]`, with period
/// `s` occupying `(s−1, s]` at a constant rate.
pub fn window_volume(inst: &Instance, class: usize, from: f64, to: f64) -> f64 {
    (1..=inst.horizon())
        .map(|s| {
            let overlap = (to.min(s as f64) - from.max(s as f64 - 1.0)).max(0.0);
            overlap * inst.class_mean(s, class)
        })
        .sum()
}

/// `Σ p_i·vol_i / Σ vol_i` over `(from, N]`; the plain mean price when the
/// group has no remaining volume.
pub fn revenue_weighted_price(inst: &Instance, classes: &[usize], from: f64) -> f64 {
    let to = inst.horizon() as f64;
    let volumes: Vec<f64> = classes.iter().map(|&i| window_volume(inst, i, from, to)).collect();
    let total: f64 = volumes.iter().sum();
    if total > 0.0 {
        classes.iter().zip(&volumes).map(|(&i, v)| inst.price(i) * v).sum::<f64>() / total
    } else {
        classes.iter().map(|&i| inst.price(i)).sum::<f64>() / classes.len() as f64
    }
}

/// Splits `{k}` from `{k+1..I}` for `k = 1..I−1`, solving each stage from the
/// previous stage's time and a start inventory reduced by class `k−1`'s
/// expected volume over the previous window (clamped at zero).
pub fn build_schedule(inst: &Instance, solver: &dyn SwitchPointSolver) -> Result<SwitchoverSchedule, PolicyError> {
    let classes = inst.num_classes();
    if classes < 2 {
        return Err(PolicyError::TooFewClasses);
    }
    let mut start_time = 0.0;
    let mut start_inventory = inst.initial_inventory() as f64;
    let mut points = Vec::with_capacity(classes - 1);
    let mut prices = Vec::with_capacity(classes - 1);
    for k in 1..classes {
        let low: Vec<usize> = (k + 1..=classes).collect();
        let low_price = revenue_weighted_price(inst, &low, start_time);
        let problem = StageProblem { stage: k, high: vec![k], low, start_time, start_inventory, low_price };
        let point = solver
            .solve(inst, &problem)
            .map_err(|reason| PolicyError::OptimizerFailure { stage: k, reason })?;
        let time = point.time.clamp(start_time, inst.horizon() as f64);
        start_inventory = (start_inventory - window_volume(inst, k, start_time, time)).max(0.0);
        start_time = time;
        points.push(SwitchPoint { time, ..point });
        prices.push(low_price);
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.time, p.level)).collect();
    let mut schedule = SwitchoverSchedule::new(inst, &pairs)?;
    for ((stage, point), price) in schedule.stages.iter_mut().zip(&points).zip(prices) {
        stage.objective = Some(point.objective);
        stage.pseudo_price = Some(price);
    }
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_instance, validate_instance, RawInstance};
    use std::cell::RefCell;

    fn two_class(horizon: usize, inventory: usize) -> Instance {
        let mut raw = RawInstance::empty(horizon, vec![1.0, 0.5], 1, inventory);
        for n in 1..=horizon {
            raw.set(n, 1, 1, 0.3);
            raw.set(n, 2, 1, 0.5);
        }
        validate_instance(raw).unwrap()
    }

    #[test]
    fn stage_one_admits_only_the_top_class() {
        let inst = two_class(10, 20);
        let sched = SwitchoverSchedule::new(&inst, &[(5.0, 2.0)]).unwrap();
        // Period 3 is epoch 2 < 5; c(2) = 2 + 8·0.8 = 8.4 < 20.
        let state = PolicyState { stage: 1, period: 3, inventory: 20 };
        let (accept, next) = switchover_decision(&sched, state, 2, 1);
        assert!(!accept);
        assert_eq!(next, PolicyState { stage: 1, period: 4, inventory: 20 });
        let (accept, next) = switchover_decision(&sched, state, 1, 1);
        assert!(accept);
        assert_eq!(next.inventory, 19);
    }

    #[test]
    fn time_trigger_opens_the_second_class() {
        let inst = two_class(10, 20);
        let sched = SwitchoverSchedule::new(&inst, &[(5.0, f64::NEG_INFINITY)]).unwrap();
        // Epoch 5 is period 6.
        let (accept, _) = switchover_decision(&sched, PolicyState { stage: 1, period: 6, inventory: 20 }, 2, 1);
        assert!(accept);
        let (accept, _) = switchover_decision(&sched, PolicyState { stage: 1, period: 5, inventory: 20 }, 2, 1);
        assert!(!accept);
    }

    #[test]
    fn inventory_trigger_opens_the_second_class_early() {
        let inst = two_class(10, 20);
        let sched = SwitchoverSchedule::new(&inst, &[(8.0, 2.0)]).unwrap();
        assert!((sched.stages()[0].threshold(2) - 8.4).abs() < 1e-12);
        let at = |inventory| switchover_decision(&sched, PolicyState { stage: 1, period: 3, inventory }, 2, 1).0;
        assert!(at(8));
        assert!(!at(9));
        // Infeasible fulfilment is a reject.
        let (accept, next) =
            switchover_decision(&sched, PolicyState { stage: 2, period: 3, inventory: 0 }, 2, 1);
        assert!(!accept && next.stage == 2);
    }

    #[test]
    fn stage_never_regresses() {
        let inst = two_class(10, 20);
        let sched = SwitchoverSchedule::new(&inst, &[(9.0, 0.0)]).unwrap();
        // Inventory 5 is at or below c(3) = 5.6; inventory 4 is above c(6) = 3.2.
        let state = PolicyState { stage: 1, period: 4, inventory: 5 };
        let (accept, mut state) = switchover_decision(&sched, state, 2, 1);
        assert!(accept);
        assert_eq!(state.stage, 2);
        state.period = 7;
        assert_eq!(sched.stage_at(7, 4), 1);
        assert_eq!(switchover_decision(&sched, state, 2, 1), (true, PolicyState { stage: 2, period: 8, inventory: 3 }));
    }

    #[test]
    fn time_only_ignores_inventory() {
        let inst = random_instance(3, 3, 8, 2, 10).unwrap();
        let sched = SwitchoverSchedule::time_only(&inst, &[2.0, 5.0]).unwrap();
        assert!(sched.is_time_only());
        for period in 1..=8 {
            let expected = 1 + usize::from(period > 2) + usize::from(period > 5);
            for d in 0..=10 {
                assert_eq!(sched.stage_at(period, d), expected);
            }
        }
    }

    #[test]
    fn schedule_validation() {
        let inst = random_instance(3, 3, 8, 2, 10).unwrap();
        assert!(SwitchoverSchedule::new(&inst, &[(1.0, 0.0)]).is_err());
        assert!(SwitchoverSchedule::new(&inst, &[(3.0, 0.0), (2.0, 0.0)]).is_err());
        assert!(SwitchoverSchedule::new(&inst, &[(3.0, 0.0), (9.0, 0.0)]).is_err());
        assert!(SwitchoverSchedule::new(&inst, &[(3.0, f64::NAN), (4.0, 0.0)]).is_err());
        let one = validate_instance(RawInstance::empty(8, vec![1.0], 2, 10)).unwrap();
        assert_eq!(SwitchoverSchedule::new(&one, &[]), Err(PolicyError::TooFewClasses));
    }

    #[test]
    fn export_parse_round_trip() {
        let inst = random_instance(5, 3, 6, 2, 9).unwrap();
        let sched = SwitchoverSchedule::new(&inst, &[(1.25, 0.7), (4.0, f64::NEG_INFINITY)]).unwrap();
        let text = sched.export();
        assert!(text.lines().any(|l| l.starts_with("switch 2 ") && l.ends_with(" -inf")));
        assert_eq!(SwitchoverSchedule::parse(&inst, &text).unwrap(), sched);
        assert!(matches!(
            SwitchoverSchedule::parse(&inst, "switch 1 1 0\n"),
            Err(PolicyError::Syntax { line: 0, .. })
        ));
        assert!(matches!(
            SwitchoverSchedule::parse(&inst, "switch 3 1 0\n"),
            Err(PolicyError::Syntax { line: 1, .. })
        ));
    }

    /// Records every problem it sees and answers from a fixed list.
    struct Scripted {
        answers: Vec<SwitchPoint>,
        seen: RefCell<Vec<StageProblem>>,
    }

    impl SwitchPointSolver for Scripted {
        fn solve(&self, _inst: &Instance, problem: &StageProblem) -> Result<SwitchPoint, String> {
            let k = self.seen.borrow().len();
            self.seen.borrow_mut().push(problem.clone());
            self.answers.get(k).copied().ok_or_else(|| "no answer".to_string())
        }
    }

    fn point(time: f64, level: f64) -> SwitchPoint {
        SwitchPoint { time, level, objective: 1.0 }
    }

    #[test]
    fn two_classes_take_one_solver_call() {
        let inst = random_instance(8, 2, 6, 2, 10).unwrap();
        let solver = Scripted { answers: vec![point(3.0, 1.0)], seen: RefCell::new(vec![]) };
        let sched = build_schedule(&inst, &solver).unwrap();
        assert_eq!(solver.seen.borrow().len(), 1);
        assert_eq!((sched.stages()[0].time, sched.stages()[0].level), (3.0, 1.0));
        let problem = &solver.seen.borrow()[0];
        assert_eq!((problem.high.clone(), problem.low.clone()), (vec![1], vec![2]));
        assert_eq!(problem.low_price, inst.price(2));
    }

    #[test]
    fn three_classes_chain_start_time_and_inventory() {
        let inst = random_instance(8, 3, 6, 2, 10).unwrap();
        let solver = Scripted { answers: vec![point(2.5, 1.0), point(4.0, 0.5)], seen: RefCell::new(vec![]) };
        let sched = build_schedule(&inst, &solver).unwrap();
        let seen = solver.seen.borrow();
        assert_eq!(seen[1].start_time, 2.5);
        assert_eq!((seen[1].high.clone(), seen[1].low.clone()), (vec![2], vec![3]));
        let consumed = inst.class_mean(1, 1) + inst.class_mean(2, 1) + 0.5 * inst.class_mean(3, 1);
        assert!((seen[1].start_inventory - (10.0 - consumed)).abs() < 1e-12);
        let low_price = revenue_weighted_price(&inst, &[2, 3], 0.0);
        assert!(seen[0].low_price < inst.price(2) && seen[0].low_price > inst.price(3));
        assert_eq!(seen[0].low_price, low_price);
        assert_eq!(sched.stages().len(), 2);
    }

    #[test]
    fn start_inventory_is_clamped_at_zero() {
        let inst = random_instance(8, 3, 6, 2, 0).unwrap();
        let solver = Scripted { answers: vec![point(6.0, 0.0), point(6.0, 0.0)], seen: RefCell::new(vec![]) };
        build_schedule(&inst, &solver).unwrap();
        assert_eq!(solver.seen.borrow()[1].start_inventory, 0.0);
    }

    #[test]
    fn solver_failure_names_the_stage() {
        let inst = random_instance(8, 3, 6, 2, 10).unwrap();
        let solver = Scripted { answers: vec![point(2.0, 0.0)], seen: RefCell::new(vec![]) };
        assert_eq!(
            build_schedule(&inst, &solver),
            Err(PolicyError::OptimizerFailure { stage: 2, reason: "no answer".into() })
        );
    }
}
