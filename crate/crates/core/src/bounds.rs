//! Unit-demand relaxation and the resulting upper bound on `V(n, d)`.
//!
//! Each original period `n` is split into `M` unit-demand sub-periods
//! `α(n) .. α(n)+M−1` with `α(n) = (n−1)·M + 1`. In every sub-period class `i`
//! arrives with probability `r[n][i] = (1/M)·Σ_j j·θ[n][i][j]`, so the expected
//! volume of each class over the `M` sub-periods equals its expected volume
//! in the original period.

use thiserror::Error;

use crate::dp::{solve_value_table, ValueTable};
use crate::model::{validate_instance, Instance, RawInstance};
use crate::textfmt::format_sig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("state (n={period}, d={inventory}) outside 1..={horizon} x 0..={max_inventory}")]
    IndexOutOfRange { period: usize, inventory: usize, horizon: usize, max_inventory: usize },
}

#[derive(Debug, Clone)]
pub struct Relaxation {
    pub unit_instance: Instance,
    batch: usize,
}

impl Relaxation {
    /// Expanded period where original period `period` starts.
    pub fn alpha(&self, period: usize) -> usize {
        (period - 1) * self.batch + 1
    }

    /// Sub-periods per original period (the original `max_batch`).
    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub fn unit_relaxation(inst: &Instance) -> Relaxation {
    let m = inst.max_batch();
    let classes = inst.num_classes();
    let mut raw = RawInstance::empty(inst.horizon() * m, inst.prices().to_vec(), 1, inst.initial_inventory());
    for n in 1..=inst.horizon() {
        for i in 1..=classes {
            let rate = inst.class_mean(n, i) / m as f64;
            for k in 0..m {
                raw.set((n - 1) * m + 1 + k, i, 1, rate);
            }
        }
    }
    let unit_instance = validate_instance(raw).expect("relaxed sub-period mass never exceeds the original mass");
    Relaxation { unit_instance, batch: m }
}

/// Original and relaxed value tables side by side.
#[derive(Debug, Clone)]
pub struct BoundTable {
    pub relaxation: Relaxation,
    pub original: ValueTable,
    pub relaxed: ValueTable,
}

impl BoundTable {
    pub fn new(inst: &Instance) -> BoundTable {
        let relaxation = unit_relaxation(inst);
        let relaxed = solve_value_table(&relaxation.unit_instance);
        BoundTable { original: solve_value_table(inst), relaxation, relaxed }
    }

    /// `v(α(n), d)`.
    pub fn bound(&self, period: usize, inventory: usize) -> Result<f64, BoundsError> {
        if period == 0 || period > self.original.horizon() || inventory > self.original.inventory() {
            return Err(BoundsError::IndexOutOfRange {
                period,
                inventory,
                horizon: self.original.horizon(),
                max_inventory: self.original.inventory(),
            });
        }
        Ok(self.relaxed.get(self.relaxation.alpha(period), inventory))
    }

    /// States where `V(n,d) > v(α(n),d) + tol`, as `(n, d, V, v)`.
    pub fn dominance_failures(&self, tol: f64) -> Vec<(usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for n in 1..=self.original.horizon() {
            for d in 0..=self.original.inventory() {
                let v = self.original.get(n, d);
                let ub = self.relaxed.get(self.relaxation.alpha(n), d);
                if v > ub + tol {
                    out.push((n, d, v, ub));
                }
            }
        }
        out
    }

    /// `n d V v_alpha gap` lines, `gap = v_alpha − V`.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for n in 1..=self.original.horizon() {
            for d in 0..=self.original.inventory() {
                let v = self.original.get(n, d);
                let ub = self.relaxed.get(self.relaxation.alpha(n), d);
                out.push_str(&format!(
                    "{n} {d} {} {} {}\n",
                    format_sig(v, 15),
                    format_sig(ub, 15),
                    format_sig(ub - v, 15)
                ));
            }
        }
        out
    }
}

/// `v(α(n), d)` from the solved relaxation.
pub fn upper_bound(inst: &Instance, period: usize, inventory: usize) -> Result<f64, BoundsError> {
    if period == 0 || period > inst.horizon() || inventory > inst.initial_inventory() {
        return Err(BoundsError::IndexOutOfRange {
            period,
            inventory,
            horizon: inst.horizon(),
            max_inventory: inst.initial_inventory(),
        });
    }
    let relaxation = unit_relaxation(inst);
    let relaxed = solve_value_table(&relaxation.unit_instance);
    Ok(relaxed.get(relaxation.alpha(period), inventory))
}
