//! Structural checks on solved value tables: monotonicity, concavity in time
//! and inventory, submodularity, the submodular-plus cross inequality, and
//! multimodularity; plus the batch-demand concavity counterexample search.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dp::{solve_value_table, ValueTable};
use crate::model::{validate_instance, Instance, RawInstance};
use crate::textfmt::format_sig;

/// Tolerance on differences of values used when none is given.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    MonotoneN,
    MonotoneD,
    ConcaveN,
    ConcaveD,
    Submodular,
    SubmodularPlus,
    Multimodular,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::MonotoneN,
        Property::MonotoneD,
        Property::ConcaveN,
        Property::ConcaveD,
        Property::Submodular,
        Property::SubmodularPlus,
        Property::Multimodular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::MonotoneN => "monotone_n",
            Property::MonotoneD => "monotone_d",
            Property::ConcaveN => "concave_n",
            Property::ConcaveD => "concave_d",
            Property::Submodular => "submodular",
            Property::SubmodularPlus => "submodular_plus",
            Property::Multimodular => "multimodular",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failed inequality `lhs <= rhs` at anchor `(n, d)`; `gap = lhs - rhs > tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureViolation {
    pub n: usize,
    pub d: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub property: Property,
    pub violations: Vec<StructureViolation>,
}

impl PropertyCheck {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub tolerance: f64,
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn check(&self, property: Property) -> &PropertyCheck {
        self.checks.iter().find(|c| c.property == property).expect("every property is checked")
    }

    pub fn passed(&self, property: Property) -> bool {
        self.check(property).passed()
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(PropertyCheck::passed)
    }

    /// `property n d lhs rhs gap` lines followed by one summary line per property.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            for v in &check.violations {
                out.push_str(&format!(
                    "{} {} {} {} {} {}\n",
                    check.property,
                    v.n,
                    v.d,
                    format_sig(v.lhs, 15),
                    format_sig(v.rhs, 15),
                    format_sig(v.gap, 15)
                ));
            }
        }
        for check in &self.checks {
            out.push_str(&format!(
                "# {} {} violations={} tol={}\n",
                check.property,
                if check.passed() { "pass" } else { "fail" },
                check.violations.len(),
                self.tolerance
            ));
        }
        out
    }
}

struct Collector<'a> {
    vt: &'a ValueTable,
    tol: f64,
    out: Vec<StructureViolation>,
}

impl Collector<'_> {
    fn push(&mut self, n: usize, d: usize, lhs: f64, rhs: f64) {
        let gap = lhs - rhs;
        if gap > self.tol {
            self.out.push(StructureViolation { n, d, lhs, rhs, gap });
        }
    }

    fn v(&self, n: usize, d: usize) -> f64 {
        self.vt.get(n, d)
    }
}

fn scan(vt: &ValueTable, tol: f64, body: impl Fn(&mut Collector<'_>)) -> Vec<StructureViolation> {
    let mut c = Collector { vt, tol, out: Vec::new() };
    body(&mut c);
    c.out
}

/// Evaluates every property over all index ranges available in the table,
/// including the zero row `N + 1`. A violation needs `gap > tol`.
pub fn check_properties(vt: &ValueTable, tol: f64) -> PropertyReport {
    let big_n = vt.horizon();
    let big_w = vt.inventory();

    // (i) V(n+1,d) <= V(n,d)
    let monotone_n = scan(vt, tol, |c| {
        for n in 1..=big_n {
            for d in 0..=big_w {
                c.push(n, d, c.v(n + 1, d), c.v(n, d));
            }
        }
    });
    // (i) V(n,d) <= V(n,d+1)
    let monotone_d = scan(vt, tol, |c| {
        for n in 1..=big_n {
            for d in 0..big_w {
                c.push(n, d, c.v(n, d), c.v(n, d + 1));
            }
        }
    });
    // (ii) V(n-1,d) - V(n,d) <= V(n,d) - V(n+1,d)
    let concave_n = scan(vt, tol, |c| {
        for n in 2..=big_n {
            for d in 0..=big_w {
                c.push(n, d, c.v(n - 1, d) - c.v(n, d), c.v(n, d) - c.v(n + 1, d));
            }
        }
    });
    // (iii) V(n,d+1) - V(n,d) <= V(n,d) - V(n,d-1)
    let concave_d = scan(vt, tol, |c| {
        for n in 1..=big_n {
            for d in 1..big_w {
                c.push(n, d, c.v(n, d + 1) - c.v(n, d), c.v(n, d) - c.v(n, d - 1));
            }
        }
    });
    // (iv) V(n+1,d) - V(n+1,d-1) <= V(n,d) - V(n,d-1)
    let submodular = scan(vt, tol, |c| {
        for n in 1..=big_n {
            for d in 1..=big_w {
                c.push(n, d, c.v(n + 1, d) - c.v(n + 1, d - 1), c.v(n, d) - c.v(n, d - 1));
            }
        }
    });
    // (v) V(n,d+1) - V(n,d) <= V(n+1,d) - V(n+1,d-1)
    let submodular_plus = scan(vt, tol, |c| {
        for n in 1..=big_n {
            for d in 1..big_w {
                c.push(n, d, c.v(n, d + 1) - c.v(n, d), c.v(n + 1, d) - c.v(n + 1, d - 1));
            }
        }
    });
    let multimodular: Vec<_> = concave_d.iter().chain(&submodular).chain(&submodular_plus).copied().collect();

    let checks = vec![
        PropertyCheck { property: Property::MonotoneN, violations: monotone_n },
        PropertyCheck { property: Property::MonotoneD, violations: monotone_d },
        PropertyCheck { property: Property::ConcaveN, violations: concave_n },
        PropertyCheck { property: Property::ConcaveD, violations: concave_d },
        PropertyCheck { property: Property::Submodular, violations: submodular },
        PropertyCheck { property: Property::SubmodularPlus, violations: submodular_plus },
        PropertyCheck { property: Property::Multimodular, violations: multimodular },
    ];
    PropertyReport { tolerance: tol, checks }
}

/// A pair of coordinates of the lifted function `f̃(x₀,x₁,x₂) = f(x₁−x₀, x₂−x₁)`.
/// Unit moves `e₀, e₁, e₂` act on `(n, d)` as `(−1,0)`, `(1,−1)`, `(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftedPair {
    /// `(x₀, x₁)`: `V(n−1,d) + V(n+1,d−1) <= V(n,d) + V(n,d−1)`.
    X0X1,
    /// `(x₀, x₂)`: equivalent to submodularity (iv).
    X0X2,
    /// `(x₁, x₂)`: equivalent to submodular-plus (v).
    X1X2,
}

impl LiftedPair {
    pub const ALL: [LiftedPair; 3] = [LiftedPair::X0X1, LiftedPair::X0X2, LiftedPair::X1X2];

    fn moves(self) -> ((i64, i64), (i64, i64)) {
        match self {
            LiftedPair::X0X1 => ((-1, 0), (1, -1)),
            LiftedPair::X0X2 => ((-1, 0), (0, 1)),
            LiftedPair::X1X2 => ((1, -1), (0, 1)),
        }
    }
}

/// Submodularity of the lifted function for `f = −V`, checked on every unit
/// square of `pair` whose four corners lie inside the table (rows `1..=N+1`).
/// A violation is `f(x+a+b) + f(x) > f(x+a) + f(x+b) + tol`, anchored at `x`.
pub fn lifted_submodularity(vt: &ValueTable, pair: LiftedPair, tol: f64) -> Vec<StructureViolation> {
    let big_n = vt.horizon() as i64;
    let big_w = vt.inventory() as i64;
    let inside = |(n, d): (i64, i64)| n >= 1 && n <= big_n + 1 && d >= 0 && d <= big_w;
    let f = |(n, d): (i64, i64)| -vt.get(n as usize, d as usize);
    let (a, b) = pair.moves();
    let mut out = Vec::new();
    for n in 1..=big_n + 1 {
        for d in 0..=big_w {
            let pa = (n + a.0, d + a.1);
            let pb = (n + b.0, d + b.1);
            let pab = (n + a.0 + b.0, d + a.1 + b.1);
            if !(inside(pa) && inside(pb) && inside(pab)) {
                continue;
            }
            let lhs = f(pab) + f((n, d));
            let rhs = f(pa) + f(pb);
            if lhs - rhs > tol {
                out.push(StructureViolation { n: n as usize, d: d as usize, lhs, rhs, gap: lhs - rhs });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("no concavity-in-d violation found for seed {seed} on the searched horizon/inventory grid")]
    NoViolationFound { seed: u64 },
}

/// A solved batch-demand instance whose value function is not concave in `d`.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub instance: Instance,
    pub table: ValueTable,
    pub violations: Vec<StructureViolation>,
}

/// Two classes, sizes `{1,2,3,4}`, mass `1/8` on every `(class, size)` cell in
/// every period; prices `1` and a seeded lower price in `(0,1)`.
pub fn uniform_batch_instance(seed: u64, horizon: usize, inventory: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let mut raw = RawInstance::empty(horizon, vec![1.0, low], 4, inventory);
    for n in 1..=horizon {
        for i in 1..=2 {
            for j in 1..=4 {
                raw.set(n, i, j, 0.125);
            }
        }
    }
    validate_instance(raw).expect("uniform batch instance is valid")
}

/// Seed used by `find_counterexample` when none is given.
pub const DEFAULT_SEED: u64 = 1;

/// Searches `N ∈ 5..=15`, `W ∈ 5..=25` (in that order) for the first table
/// violating concavity in `d`.
pub fn find_counterexample(seed: u64) -> Result<Counterexample, StructureError> {
    for horizon in 5..=15 {
        for inventory in 5..=25 {
            let instance = uniform_batch_instance(seed, horizon, inventory);
            let table = solve_value_table(&instance);
            let report = check_properties(&table, DEFAULT_TOLERANCE);
            let violations = report.check(Property::ConcaveD).violations.clone();
            if !violations.is_empty() {
                return Ok(Counterexample { instance, table, violations });
            }
        }
    }
    Err(StructureError::NoViolationFound { seed })
}
