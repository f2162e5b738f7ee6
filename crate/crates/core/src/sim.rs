//! Seeded Monte Carlo evaluation of admission policies.
//!
//! Each replication owns an independent ChaCha stream selected by its index,
//! so results do not depend on how replications are scheduled across threads.
//! Demand draws never depend on decisions: one uniform per period picks the
//! `(class, size)` cell or no arrival. Two policies simulated with the same
//! seed therefore face identical demand paths.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dp::OptimalPolicy;
use crate::model::Instance;
use crate::textfmt::format_sig;

/// A deterministic accept/reject rule over `(period, inventory, class, size)`.
///
/// `memory` is per-path state owned by the caller, starting at 0. It is
/// updated by `advance` at the start of every period, before demand is seen.
pub trait AdmissionPolicy: Sync {
    fn advance(&self, _memory: &mut usize, _period: usize, _inventory: usize) {}

    fn admits(&self, memory: usize, period: usize, inventory: usize, class: usize, size: usize) -> bool;

    fn name(&self) -> String {
        "policy".to_string()
    }
}

impl AdmissionPolicy for OptimalPolicy {
    fn admits(&self, _memory: usize, period: usize, inventory: usize, class: usize, size: usize) -> bool {
        self.accepts(period, inventory, class, size)
    }

    fn name(&self) -> String {
        "optimal".to_string()
    }
}

/// Accepts every request that fits in the remaining inventory.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl AdmissionPolicy for AcceptAll {
    fn admits(&self, _memory: usize, _period: usize, inventory: usize, _class: usize, size: usize) -> bool {
        size <= inventory
    }

    fn name(&self) -> String {
        "accept-all".to_string()
    }
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub policy: String,
    pub replications: usize,
    pub mean: f64,
    pub stdev: f64,
    pub std_error: f64,
    /// Revenue quantiles at [`QUANTILE_LEVELS`].
    pub quantiles: [f64; 5],
    pub seed: u64,
}

impl SimResult {
    /// `policy mean stdev se q05 q25 q50 q75 q95 reps seed`
    pub fn export(&self) -> String {
        let q: Vec<String> = self.quantiles.iter().map(|&x| format_sig(x, 15)).collect();
        format!(
            "{} {} {} {} {} {} {}\n",
            self.policy,
            format_sig(self.mean, 15),
            format_sig(self.stdev, 15),
            format_sig(self.std_error, 15),
            q.join(" "),
            self.replications,
            self.seed
        )
    }
}

/// Per-period cumulative cell masses used to turn one uniform into an outcome.
struct OutcomeSampler {
    max_batch: usize,
    cumulative: Vec<Vec<f64>>,
}

impl OutcomeSampler {
    fn new(inst: &Instance) -> Self {
        let cumulative = (1..=inst.horizon())
            .map(|n| {
                let mut acc = 0.0;
                inst.period_masses(n)
                    .iter()
                    .map(|&m| {
                        acc += m;
                        acc
                    })
                    .collect()
            })
            .collect();
        OutcomeSampler { max_batch: inst.max_batch(), cumulative }
    }

    /// `(class, size)` for period `n`, or `None` when nothing arrives.
    fn draw(&self, period: usize, u: f64) -> Option<(usize, usize)> {
        let cells = &self.cumulative[period - 1];
        let k = cells.partition_point(|&c| c <= u);
        (k < cells.len()).then(|| (k / self.max_batch + 1, k % self.max_batch + 1))
    }
}

/// Revenue of one replication.
fn replicate(inst: &Instance, sampler: &OutcomeSampler, policy: &dyn AdmissionPolicy, seed: u64, rep: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    let mut inventory = inst.initial_inventory();
    let mut revenue = 0.0;
    let mut memory = 0;
    for n in 1..=inst.horizon() {
        policy.advance(&mut memory, n, inventory);
        let u: f64 = rng.random();
        if let Some((class, size)) = sampler.draw(n, u) {
            if size <= inventory && policy.admits(memory, n, inventory, class, size) {
                inventory -= size;
                revenue += inst.price(class) * size as f64;
            }
        }
    }
    revenue
}

/// Per-replication revenues in replication order.
pub fn simulate_revenues(inst: &Instance, policy: &dyn AdmissionPolicy, reps: usize, seed: u64) -> Vec<f64> {
    let sampler = OutcomeSampler::new(inst);
    (0..reps as u64).into_par_iter().map(|rep| replicate(inst, &sampler, policy, seed, rep)).collect()
}

pub fn simulate_policy(inst: &Instance, policy: &dyn AdmissionPolicy, reps: usize, seed: u64) -> SimResult {
    assert!(reps >= 1, "at least one replication is required");
    let revenues = simulate_revenues(inst, policy, reps, seed);
    summarize(policy.name(), &revenues, seed)
}

/// Sample statistics over replication revenues, accumulated in index order.
pub fn summarize(policy: String, revenues: &[f64], seed: u64) -> SimResult {
    let reps = revenues.len();
    let mean = revenues.iter().sum::<f64>() / reps as f64;
    let ss: f64 = revenues.iter().map(|r| (r - mean) * (r - mean)).sum();
    let stdev = if reps > 1 { (ss / (reps - 1) as f64).sqrt() } else { 0.0 };
    let mut sorted = revenues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = QUANTILE_LEVELS.map(|q| quantile_sorted(&sorted, q));
    SimResult { policy, replications: reps, mean, stdev, std_error: stdev / (reps as f64).sqrt(), quantiles, seed }
}

/// Linear interpolation between order statistics (Hyndman–Fan type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bands used by the benchmark report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PercentileClass {
    P85,
    P90,
    P95,
    P97_5,
    Above,
}

impl PercentileClass {
    /// Bands from tightest to widest.
    pub const BANDS: [PercentileClass; 4] =
        [PercentileClass::P85, PercentileClass::P90, PercentileClass::P95, PercentileClass::P97_5];

    pub fn level(self) -> Option<f64> {
        match self {
            PercentileClass::P85 => Some(85.0),
            PercentileClass::P90 => Some(90.0),
            PercentileClass::P95 => Some(95.0),
            PercentileClass::P97_5 => Some(97.5),
            PercentileClass::Above => None,
        }
    }

    /// Standard normal quantile at the band's level.
    pub fn z(self) -> Option<f64> {
        let normal = Normal::standard();
        self.level().map(|c| normal.inverse_cdf(c / 100.0))
    }

    pub fn label(self) -> &'static str {
        match self {
            PercentileClass::P85 => "85",
            PercentileClass::P90 => "90",
            PercentileClass::P95 => "95",
            PercentileClass::P97_5 => "97.5",
            PercentileClass::Above => "above",
        }
    }
}

impl fmt::Display for PercentileClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `(value − mean) / SE`; infinite when the standard error is zero and the
/// value differs from the mean.
pub fn standardized_gap(result: &SimResult, value: f64) -> f64 {
    let diff = value - result.mean;
    if result.std_error > 0.0 {
        diff / result.std_error
    } else if diff.abs() <= 1e-12 * value.abs().max(1.0) {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Whether `value <= mean + z_c·SE` for the band's level `c`.
pub fn within_band(result: &SimResult, value: f64, band: PercentileClass) -> bool {
    match band.z() {
        Some(z) => standardized_gap(result, value) <= z,
        None => true,
    }
}

/// The tightest band whose upper limit `mean + z_c·SE` (with `z_c` the
/// standard normal quantile at level `c`) still covers `value`, or `Above`.
pub fn classify_percentile(result: &SimResult, value: f64) -> PercentileClass {
    PercentileClass::BANDS
        .into_iter()
        .find(|&band| within_band(result, value, band))
        .unwrap_or(PercentileClass::Above)
}
