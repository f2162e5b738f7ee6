//! Exact backward induction for the value function `V(n, d)` and the
//! induced accept/reject rule.

use thiserror::Error;

use crate::model::Instance;
use crate::textfmt::{format_sig, tokenized_lines};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("value table is {table_horizon}x{table_inventory} but instance is {horizon}x{inventory}")]
    DimensionMismatch { table_horizon: usize, table_inventory: usize, horizon: usize, inventory: usize },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

/// Dense table of `V(n, d)` for `n = 1..=N+1` and `d = 0..=W`.
/// Row `N + 1` is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    horizon: usize,
    inventory: usize,
    values: Vec<f64>,
}

impl ValueTable {
    /// Builds a table from rows `n = 1..=N`; row `N + 1` is appended as zeros.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> ValueTable {
        let horizon = rows.len();
        let width = rows.first().map_or(1, Vec::len);
        let mut values = Vec::with_capacity((horizon + 1) * width);
        for row in rows {
            assert_eq!(row.len(), width, "ragged value table");
            values.extend(row);
        }
        values.extend(std::iter::repeat_n(0.0, width));
        ValueTable { horizon, inventory: width - 1, values }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn inventory(&self) -> usize {
        self.inventory
    }

    /// `V(n, d)` for `1 <= n <= N + 1`, `0 <= d <= W`.
    #[inline]
    pub fn get(&self, period: usize, inventory: usize) -> f64 {
        debug_assert!(period >= 1 && period <= self.horizon + 1 && inventory <= self.inventory);
        self.values[(period - 1) * (self.inventory + 1) + inventory]
    }

    pub fn row(&self, period: usize) -> &[f64] {
        let w = self.inventory + 1;
        &self.values[(period - 1) * w..period * w]
    }

    /// One `n d value` line per entry of rows `1..=N`, 15 significant digits.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for n in 1..=self.horizon {
            for d in 0..=self.inventory {
                out.push_str(&format!("{n} {d} {}\n", format_sig(self.get(n, d), 15)));
            }
        }
        out
    }

    /// Reads the `export` format back.
    pub fn parse(text: &str) -> Result<ValueTable, DpError> {
        let mut entries = Vec::new();
        for (line, tokens) in tokenized_lines(text) {
            let syntax = |message: &str| DpError::Syntax { line, message: message.to_string() };
            if tokens.len() != 3 {
                return Err(syntax("expected `n d value`"));
            }
            let n: usize = tokens[0].parse().map_err(|_| syntax("bad period"))?;
            let d: usize = tokens[1].parse().map_err(|_| syntax("bad inventory"))?;
            let v: f64 = tokens[2].parse().map_err(|_| syntax("bad value"))?;
            entries.push((line, n, d, v));
        }
        let horizon = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let inventory = entries.iter().map(|e| e.2).max().unwrap_or(0);
        if horizon == 0 || entries.len() != horizon * (inventory + 1) {
            return Err(DpError::Syntax { line: 0, message: "table is not a full rectangle".into() });
        }
        let mut rows = vec![vec![f64::NAN; inventory + 1]; horizon];
        for (line, n, d, v) in entries {
            if n == 0 || !rows[n - 1][d].is_nan() {
                return Err(DpError::Syntax { line, message: "duplicate or zero index".into() });
            }
            rows[n - 1][d] = v;
        }
        Ok(ValueTable::from_rows(rows))
    }
}

/// Backward recursion
/// `V(n,d) = V(n+1,d)·[Θ₀(n) + Θ_n(d)] + Σ_i Σ_{j≤d} θ[n][i][j]·max{p_i·j + V(n+1,d−j), V(n+1,d)}`
/// from `n = N` down to `1`, starting from the zero row `V(N+1, ·) = 0`.
pub fn solve_value_table(inst: &Instance) -> ValueTable {
    let horizon = inst.horizon();
    let inventory = inst.initial_inventory();
    let width = inventory + 1;
    let mut values = vec![0.0; (horizon + 1) * width];
    for n in (1..=horizon).rev() {
        let (head, tail) = values.split_at_mut(n * width);
        let next = &tail[..width];
        let current = &mut head[(n - 1) * width..];
        let idle = inst.no_arrival(n);
        for d in 0..=inventory {
            let keep = next[d];
            let mut value = keep * (idle + inst.tail_mass(n, d));
            for i in 1..=inst.num_classes() {
                let price = inst.price(i);
                for j in 1..=d.min(inst.max_batch()) {
                    let mass = inst.theta(n, i, j);
                    if mass > 0.0 {
                        value += mass * (price * j as f64 + next[d - j]).max(keep);
                    }
                }
            }
            current[d] = value;
        }
    }
    ValueTable { horizon, inventory, values }
}

/// Accept/reject decision for every `(n, d, i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPolicy {
    horizon: usize,
    inventory: usize,
    classes: usize,
    max_batch: usize,
    accept: Vec<bool>,
}

impl OptimalPolicy {
    /// Whether to accept class `class` with size `size` in `period` holding
    /// `inventory` units. Sizes beyond the inventory are always rejected.
    pub fn accepts(&self, period: usize, inventory: usize, class: usize, size: usize) -> bool {
        if size > inventory || size == 0 || size > self.max_batch {
            return false;
        }
        self.accept[self.index(period, inventory, class, size)]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn inventory(&self) -> usize {
        self.inventory
    }

    fn index(&self, period: usize, inventory: usize, class: usize, size: usize) -> usize {
        (((period - 1) * (self.inventory + 1) + inventory) * self.classes + (class - 1)) * self.max_batch + (size - 1)
    }
}

/// Accept iff `j <= d` and `p_i·j + V(n+1, d−j) >= V(n+1, d)`; ties accept.
pub fn extract_policy(inst: &Instance, vt: &ValueTable) -> Result<OptimalPolicy, DpError> {
    if vt.horizon() != inst.horizon() || vt.inventory() != inst.initial_inventory() {
        return Err(DpError::DimensionMismatch {
            table_horizon: vt.horizon(),
            table_inventory: vt.inventory(),
            horizon: inst.horizon(),
            inventory: inst.initial_inventory(),
        });
    }
    let (classes, max_batch) = (inst.num_classes(), inst.max_batch());
    let mut accept = Vec::with_capacity(inst.horizon() * (vt.inventory() + 1) * classes * max_batch);
    for n in 1..=inst.horizon() {
        for d in 0..=vt.inventory() {
            let keep = vt.get(n + 1, d);
            for i in 1..=classes {
                for j in 1..=max_batch {
                    accept.push(j <= d && inst.price(i) * j as f64 + vt.get(n + 1, d - j) >= keep);
                }
            }
        }
    }
    Ok(OptimalPolicy { horizon: inst.horizon(), inventory: vt.inventory(), classes, max_batch, accept })
}
