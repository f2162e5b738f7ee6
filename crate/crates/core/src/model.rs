//! Problem instances: validation, per-period demand moments, seeded random
//! generation and the line-oriented instance file format.
//!
//! Periods, price classes and batch sizes are 1-based throughout the public
//! API, matching the instance file format. In every period exactly one
//! `(class, size)` cell realizes, or nothing arrives; demands in different
//! periods are independent.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::textfmt::{format_sig, tokenized_lines};

/// Slack allowed when checking that a period's mass does not exceed one.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// A single broken instance invariant, with the offending index.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyHorizon,
    EmptyPrices,
    ZeroMaxBatch,
    /// `prices[class-1] >= prices[class-2]`, i.e. not strictly decreasing at `class`.
    NonDecreasingPrices { class: usize },
    NonPositivePrice { class: usize },
    NonFinite { what: &'static str },
    NegativeMass { period: usize, class: usize, size: usize },
    MassExceedsOne { period: usize, total: f64 },
    ShapeMismatch { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyHorizon => write!(f, "EmptyHorizon: horizon must be at least 1"),
            Violation::EmptyPrices => write!(f, "EmptyPrices: at least one price class required"),
            Violation::ZeroMaxBatch => write!(f, "ZeroMaxBatch: max_batch must be at least 1"),
            Violation::NonDecreasingPrices { class } => {
                write!(f, "NonDecreasingPrices: price of class {class} is not below class {}", class - 1)
            }
            Violation::NonPositivePrice { class } => {
                write!(f, "NonPositivePrice: price of class {class} must be > 0")
            }
            Violation::NonFinite { what } => write!(f, "NonFinite: {what} contains a non-finite value"),
            Violation::NegativeMass { period, class, size } => {
                write!(f, "NegativeMass: theta[{period}][{class}][{size}] < 0")
            }
            Violation::MassExceedsOne { period, total } => {
                write!(f, "MassExceedsOne({period}): total mass {total} > 1")
            }
            Violation::ShapeMismatch { expected, found } => {
                write!(f, "ShapeMismatch: expected {expected} theta cells, found {found}")
            }
        }
    }
}

/// Every violation found while validating a candidate instance.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid instance: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError(pub Vec<Violation>);

impl ValidationError {
    pub fn violations(&self) -> &[Violation] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("period {period} out of range 1..={horizon}")]
    PeriodOutOfRange { period: usize, horizon: usize },
    #[error("class {class} out of range 1..={classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("batch size {size} out of range 1..={max_batch}")]
    SizeOutOfRange { size: usize, max_batch: usize },
    #[error("class set is empty")]
    EmptyClassSet,
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Unvalidated instance data. `theta` is period-major: cell `(n, i, j)` lives
/// at `((n-1) * classes + (i-1)) * max_batch + (j-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub horizon: usize,
    pub prices: Vec<f64>,
    pub max_batch: usize,
    pub initial_inventory: usize,
    pub theta: Vec<f64>,
}

impl RawInstance {
    /// All-zero demand (no arrivals) for the given dimensions.
    pub fn empty(horizon: usize, prices: Vec<f64>, max_batch: usize, initial_inventory: usize) -> Self {
        let cells = horizon * prices.len() * max_batch;
        RawInstance { horizon, prices, max_batch, initial_inventory, theta: vec![0.0; cells] }
    }

    /// Sets cell `(period, class, size)`; indices are 1-based and must be in range.
    pub fn set(&mut self, period: usize, class: usize, size: usize, mass: f64) {
        let idx = ((period - 1) * self.prices.len() + (class - 1)) * self.max_batch + (size - 1);
        self.theta[idx] = mass;
    }
}

/// A validated, immutable stochastic knapsack instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    horizon: usize,
    prices: Vec<f64>,
    max_batch: usize,
    initial_inventory: usize,
    theta: Vec<f64>,
}

/// Mean and variance of the total demanded quantity of a class subset in one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Checks every invariant and returns either the instance or all violations.
pub fn validate_instance(raw: RawInstance) -> Result<Instance, ValidationError> {
    let mut violations = Vec::new();
    if raw.horizon == 0 {
        violations.push(Violation::EmptyHorizon);
    }
    if raw.prices.is_empty() {
        violations.push(Violation::EmptyPrices);
    }
    if raw.max_batch == 0 {
        violations.push(Violation::ZeroMaxBatch);
    }
    if raw.prices.iter().any(|p| !p.is_finite()) {
        violations.push(Violation::NonFinite { what: "prices" });
    }
    for (k, &p) in raw.prices.iter().enumerate() {
        if p <= 0.0 {
            violations.push(Violation::NonPositivePrice { class: k + 1 });
        }
        if k > 0 && p >= raw.prices[k - 1] {
            violations.push(Violation::NonDecreasingPrices { class: k + 1 });
        }
    }
    let classes = raw.prices.len();
    let expected = raw.horizon * classes * raw.max_batch;
    if raw.theta.len() != expected {
        violations.push(Violation::ShapeMismatch { expected, found: raw.theta.len() });
    } else if raw.theta.iter().any(|x| !x.is_finite()) {
        violations.push(Violation::NonFinite { what: "theta" });
    } else if classes > 0 && raw.max_batch > 0 {
        let per_period = classes * raw.max_batch;
        for (p, block) in raw.theta.chunks(per_period).enumerate() {
            for (c, &mass) in block.iter().enumerate() {
                if mass < 0.0 {
                    violations.push(Violation::NegativeMass {
                        period: p + 1,
                        class: c / raw.max_batch + 1,
                        size: c % raw.max_batch + 1,
                    });
                }
            }
            let total: f64 = block.iter().sum();
            if total > 1.0 + MASS_TOLERANCE {
                violations.push(Violation::MassExceedsOne { period: p + 1, total });
            }
        }
    }
    if violations.is_empty() {
        Ok(Instance {
            horizon: raw.horizon,
            prices: raw.prices,
            max_batch: raw.max_batch,
            initial_inventory: raw.initial_inventory,
            theta: raw.theta,
        })
    } else {
        Err(ValidationError(violations))
    }
}

impl Instance {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_classes(&self) -> usize {
        self.prices.len()
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn initial_inventory(&self) -> usize {
        self.initial_inventory
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    /// Price of class `class` (1-based).
    pub fn price(&self, class: usize) -> f64 {
        self.prices[class - 1]
    }

    /// `θ[n][i][j]`, all indices 1-based.
    pub fn theta(&self, period: usize, class: usize, size: usize) -> f64 {
        self.theta[self.cell(period, class, size)]
    }

    /// The `I·M` cell masses of one period, class-major.
    pub fn period_masses(&self, period: usize) -> &[f64] {
        let width = self.num_classes() * self.max_batch;
        &self.theta[(period - 1) * width..period * width]
    }

    /// Probability that nothing arrives in `period` (clamped at zero).
    pub fn no_arrival(&self, period: usize) -> f64 {
        (1.0 - self.period_masses(period).iter().sum::<f64>()).max(0.0)
    }

    /// Mass of arrivals in `period` whose size exceeds `inventory`.
    pub fn tail_mass(&self, period: usize, inventory: usize) -> f64 {
        let mut total = 0.0;
        for class in 1..=self.num_classes() {
            for size in (inventory + 1)..=self.max_batch {
                total += self.theta(period, class, size);
            }
        }
        total
    }

    /// Expected demanded quantity of a single class in `period`.
    pub fn class_mean(&self, period: usize, class: usize) -> f64 {
        (1..=self.max_batch).map(|j| j as f64 * self.theta(period, class, j)).sum()
    }

    /// The same instance with a different starting inventory.
    pub fn with_inventory(&self, inventory: usize) -> Instance {
        Instance { initial_inventory: inventory, ..self.clone() }
    }

    /// Keeps only the size-1 cells and sets `max_batch = 1`; the dropped mass
    /// becomes no-arrival mass.
    pub fn truncate_to_unit(&self) -> Instance {
        let mut theta = Vec::with_capacity(self.horizon * self.num_classes());
        for n in 1..=self.horizon {
            for i in 1..=self.num_classes() {
                theta.push(self.theta(n, i, 1));
            }
        }
        Instance { max_batch: 1, theta, ..self.clone() }
    }

    /// Back to unvalidated form, e.g. for editing.
    pub fn to_raw(&self) -> RawInstance {
        RawInstance {
            horizon: self.horizon,
            prices: self.prices.clone(),
            max_batch: self.max_batch,
            initial_inventory: self.initial_inventory,
            theta: self.theta.clone(),
        }
    }

    fn cell(&self, period: usize, class: usize, size: usize) -> usize {
        ((period - 1) * self.num_classes() + (class - 1)) * self.max_batch + (size - 1)
    }

    pub(crate) fn check_classes(&self, classes: &[usize]) -> Result<(), ModelError> {
        if classes.is_empty() {
            return Err(ModelError::EmptyClassSet);
        }
        for &c in classes {
            if c == 0 || c > self.num_classes() {
                return Err(ModelError::ClassOutOfRange { class: c, classes: self.num_classes() });
            }
        }
        Ok(())
    }
}

/// Moments of `Q_S(t)`, the total size demanded in period `period` by the
/// classes in `classes`. Classes are components of the same single draw, so
/// `E[Q_S²] = Σ_{i∈S} Σ_j j² θ[t][i][j]`.
pub fn demand_moments(inst: &Instance, classes: &[usize], period: usize) -> Result<ClassMoments, ModelError> {
    if period == 0 || period > inst.horizon() {
        return Err(ModelError::PeriodOutOfRange { period, horizon: inst.horizon() });
    }
    inst.check_classes(classes)?;
    let mut mean = 0.0;
    let mut second = 0.0;
    for &i in classes {
        for j in 1..=inst.max_batch() {
            let mass = inst.theta(period, i, j);
            let size = j as f64;
            mean += size * mass;
            second += size * size * mass;
        }
    }
    Ok(ClassMoments { mean, variance: (second - mean * mean).max(0.0) })
}

/// Draws a random instance: `p₁ = 1`, the other prices uniform on (0,1) and
/// sorted strictly decreasing, and for each period `I·M + 1` uniform weights
/// normalized to one (the last weight is the no-arrival mass).
pub fn random_instance(
    seed: u64,
    classes: usize,
    horizon: usize,
    max_batch: usize,
    inventory: usize,
) -> Result<Instance, ModelError> {
    if classes < 2 || horizon < 1 || max_batch < 1 {
        return Err(ModelError::BadDimensions(format!(
            "need classes >= 2, horizon >= 1, max_batch >= 1 (got {classes}, {horizon}, {max_batch})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prices = vec![1.0];
    loop {
        let mut lower: Vec<f64> = (1..classes).map(|_| open_unit(&mut rng)).collect();
        lower.sort_by(|a, b| b.partial_cmp(a).expect("finite draws"));
        if lower.windows(2).all(|w| w[0] > w[1]) {
            prices.extend(lower);
            break;
        }
    }
    let cells = classes * max_batch;
    let mut theta = Vec::with_capacity(horizon * cells);
    for _ in 0..horizon {
        let weights: Vec<f64> = (0..=cells).map(|_| open_unit(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        theta.extend(weights[..cells].iter().map(|w| w / total));
    }
    let raw = RawInstance { horizon, prices, max_batch, initial_inventory: inventory, theta };
    Ok(validate_instance(raw)?)
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Serializes an instance; only nonzero cells are written.
pub fn write_instance(inst: &Instance) -> String {
    let mut out = String::new();
    out.push_str(&format!("horizon {}\n", inst.horizon()));
    out.push_str(&format!("inventory {}\n", inst.initial_inventory()));
    out.push_str(&format!("max_batch {}\n", inst.max_batch()));
    let prices: Vec<String> = inst.prices().iter().map(|&p| format_sig(p, 17)).collect();
    out.push_str(&format!("prices {}\n", prices.join(" ")));
    for n in 1..=inst.horizon() {
        for i in 1..=inst.num_classes() {
            for j in 1..=inst.max_batch() {
                let mass = inst.theta(n, i, j);
                if mass != 0.0 {
                    out.push_str(&format!("theta {n} {i} {j} {}\n", format_sig(mass, 17)));
                }
            }
        }
    }
    out
}

/// Parses and validates an instance document.
pub fn parse_instance(text: &str) -> Result<Instance, ModelError> {
    let mut horizon: Option<usize> = None;
    let mut inventory: Option<usize> = None;
    let mut max_batch: Option<usize> = None;
    let mut prices: Option<Vec<f64>> = None;
    let mut cells: Vec<(usize, usize, usize, usize, f64)> = Vec::new();

    for (line, tokens) in tokenized_lines(text) {
        let syntax = |message: String| ModelError::Syntax { line, message };
        match tokens[0] {
            "horizon" | "inventory" | "max_batch" => {
                if tokens.len() != 2 {
                    return Err(syntax(format!("`{}` takes exactly one integer", tokens[0])));
                }
                let value: usize = tokens[1]
                    .parse()
                    .map_err(|_| syntax(format!("`{}` is not a non-negative integer", tokens[1])))?;
                let slot = match tokens[0] {
                    "horizon" => &mut horizon,
                    "inventory" => &mut inventory,
                    _ => &mut max_batch,
                };
                if slot.replace(value).is_some() {
                    return Err(syntax(format!("duplicate `{}`", tokens[0])));
                }
            }
            "prices" => {
                if prices.is_some() {
                    return Err(syntax("duplicate `prices`".into()));
                }
                let parsed: Result<Vec<f64>, _> = tokens[1..].iter().map(|t| t.parse::<f64>()).collect();
                prices = Some(parsed.map_err(|_| syntax("malformed price".into()))?);
            }
            "theta" => {
                if tokens.len() != 5 {
                    return Err(syntax("`theta` takes `n i j prob`".into()));
                }
                let index = |t: &str| t.parse::<usize>().map_err(|_| syntax(format!("bad index `{t}`")));
                let (n, i, j) = (index(tokens[1])?, index(tokens[2])?, index(tokens[3])?);
                let prob: f64 = tokens[4].parse().map_err(|_| syntax(format!("bad probability `{}`", tokens[4])))?;
                cells.push((line, n, i, j, prob));
            }
            other => return Err(syntax(format!("unknown key `{other}`"))),
        }
    }

    let missing = |key: &str| ModelError::Syntax { line: 0, message: format!("missing `{key}`") };
    let horizon = horizon.ok_or_else(|| missing("horizon"))?;
    let inventory = inventory.ok_or_else(|| missing("inventory"))?;
    let max_batch = max_batch.ok_or_else(|| missing("max_batch"))?;
    let prices = prices.ok_or_else(|| missing("prices"))?;

    let mut raw = RawInstance::empty(horizon, prices, max_batch, inventory);
    let classes = raw.prices.len();
    let mut seen = std::collections::HashSet::new();
    for (line, n, i, j, prob) in cells {
        if n == 0 || n > horizon {
            return Err(ModelError::PeriodOutOfRange { period: n, horizon });
        }
        if i == 0 || i > classes {
            return Err(ModelError::ClassOutOfRange { class: i, classes });
        }
        if j == 0 || j > max_batch {
            return Err(ModelError::SizeOutOfRange { size: j, max_batch });
        }
        if !seen.insert((n, i, j)) {
            return Err(ModelError::Syntax { line, message: format!("duplicate theta cell ({n}, {i}, {j})") });
        }
        raw.set(n, i, j, prob);
    }
    Ok(validate_instance(raw)?)
}
