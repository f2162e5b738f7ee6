//! Diffusion approximation of demand, first-passage laws and the two-phase
//! revenue objective used to choose switch-over parameters.
//!
//! Drift and variance are piecewise linear between anchors at `t = 1..N`
//! (the period moments) and constant outside them, so `Λ` and `Σ` are exact
//! per-piece integrals.
//!
//! Two objective modes exist. `Paper` integrates the closed-form density of
//! [`first_passage_density`], with its `a + Λ` sign and `4Σ` scale. `Mc`
//! simulates the diffusions themselves on a fixed path ensemble and is the
//! default.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{demand_moments, Instance, ModelError};
use crate::numeric::{integrate, nelder_mead_max, QuadratureError};
use crate::policy::{revenue_weighted_price, StageProblem, SwitchPoint, SwitchPointSolver};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cumulative variance vanishes at t={t}")]
    DegenerateVariance { t: f64 },
    #[error("passage density needs t > 0, got {t}")]
    InvalidTime { t: f64 },
    #[error("invalid diffusion coefficients: {0}")]
    InvalidSpec(String),
    #[error("quadrature did not converge: error {achieved:.3e} vs requested {requested:.3e}")]
    QuadratureNonConvergence { achieved: f64, requested: f64 },
    #[error("every objective evaluation failed: {0}")]
    OptimizerFailure(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<QuadratureError> for DiffusionError {
    fn from(e: QuadratureError) -> Self {
        DiffusionError::QuadratureNonConvergence { achieved: e.achieved, requested: e.requested }
    }
}

/// A continuous piecewise-linear function, constant before the first knot and
/// after the last, with closed-form integral from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// `∫_0^{knots[k]}`.
    cumulative: Vec<f64>,
}

impl PiecewiseLinear {
    /// Knots must be strictly increasing and non-negative.
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<PiecewiseLinear, DiffusionError> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(DiffusionError::InvalidSpec("knot and value counts differ or are zero".into()));
        }
        if knots[0] < 0.0 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DiffusionError::InvalidSpec("knots must be increasing from t >= 0".into()));
        }
        if knots.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(DiffusionError::InvalidSpec("non-finite knot or value".into()));
        }
        let mut cumulative = Vec::with_capacity(knots.len());
        cumulative.push(values[0] * knots[0]);
        for k in 1..knots.len() {
            let piece = 0.5 * (values[k - 1] + values[k]) * (knots[k] - knots[k - 1]);
            cumulative.push(cumulative[k - 1] + piece);
        }
        Ok(PiecewiseLinear { knots, values, cumulative })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            self.values[0]
        } else if k == self.knots.len() {
            self.values[k - 1]
        } else {
            let (t0, t1) = (self.knots[k - 1], self.knots[k]);
            let (v0, v1) = (self.values[k - 1], self.values[k]);
            v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        }
    }

    /// `∫_0^t`, zero for `t ≤ 0`.
    pub fn integral(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            return self.values[0] * t;
        }
        let last = k - 1;
        let h = t - self.knots[last];
        if k == self.knots.len() {
            return self.cumulative[last] + self.values[last] * h;
        }
        let slope = (self.values[k] - self.values[last]) / (self.knots[k] - self.knots[last]);
        self.cumulative[last] + self.values[last] * h + 0.5 * slope * h * h
    }

    /// Pointwise sum over the union of both knot sets.
    pub fn add(&self, other: &PiecewiseLinear) -> PiecewiseLinear {
        let mut knots: Vec<f64> = self.knots.iter().chain(&other.knots).copied().collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let values = knots.iter().map(|&t| self.value(t) + other.value(t)).collect();
        PiecewiseLinear::new(knots, values).expect("union of valid knot sets is valid")
    }

    /// Inserts the midpoint of every piece; the function itself is unchanged.
    pub fn refine(&self) -> PiecewiseLinear {
        let mut knots = Vec::with_capacity(2 * self.knots.len());
        for w in self.knots.windows(2) {
            knots.extend([w[0], 0.5 * (w[0] + w[1])]);
        }
        knots.push(*self.knots.last().expect("at least one knot"));
        let values = knots.iter().map(|&t| self.value(t)).collect();
        PiecewiseLinear::new(knots, values).expect("refinement keeps knots increasing")
    }
}

/// Drift `γ(t)` and variance `σ²(t)` of one diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    drift: PiecewiseLinear,
    variance: PiecewiseLinear,
}

impl DiffusionSpec {
    pub fn new(drift: PiecewiseLinear, variance: PiecewiseLinear) -> Result<DiffusionSpec, DiffusionError> {
        if variance.values.iter().any(|&v| v < 0.0) {
            return Err(DiffusionError::InvalidSpec("negative variance".into()));
        }
        Ok(DiffusionSpec { drift, variance })
    }

    /// Anchors at `t = 1..=N`.
    pub fn from_anchors(drift: Vec<f64>, variance: Vec<f64>) -> Result<DiffusionSpec, DiffusionError> {
        let knots: Vec<f64> = (1..=drift.len()).map(|k| k as f64).collect();
        DiffusionSpec::new(PiecewiseLinear::new(knots.clone(), drift)?, PiecewiseLinear::new(knots, variance)?)
    }

    /// Constant coefficients on `[0, ∞)`.
    pub fn constant(drift: f64, variance: f64) -> Result<DiffusionSpec, DiffusionError> {
        DiffusionSpec::from_anchors(vec![drift], vec![variance])
    }

    pub fn drift(&self, t: f64) -> f64 {
        self.drift.value(t)
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.variance.value(t)
    }

    /// `Λ(t)`.
    pub fn cum_drift(&self, t: f64) -> f64 {
        self.drift.integral(t)
    }

    /// `Σ(t)`.
    pub fn cum_variance(&self, t: f64) -> f64 {
        self.variance.integral(t)
    }

    /// Sum of two independent diffusions: drifts and variances add.
    pub fn superpose(&self, other: &DiffusionSpec) -> DiffusionSpec {
        DiffusionSpec { drift: self.drift.add(&other.drift), variance: self.variance.add(&other.variance) }
    }

    pub fn refine(&self) -> DiffusionSpec {
        DiffusionSpec { drift: self.drift.refine(), variance: self.variance.refine() }
    }
}

/// Anchors `γ(k)`, `σ²(k)` from the per-period demand moments of `classes`.
pub fn fit_diffusion(inst: &Instance, classes: &[usize]) -> Result<DiffusionSpec, DiffusionError> {
    let mut drift = Vec::with_capacity(inst.horizon());
    let mut variance = Vec::with_capacity(inst.horizon());
    for n in 1..=inst.horizon() {
        let m = demand_moments(inst, classes, n)?;
        drift.push(m.mean);
        variance.push(m.variance.max(0.0));
    }
    DiffusionSpec::from_anchors(drift, variance)
}

/// First passage of `X(start + ·) − X(start)` to `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageProblem {
    pub spec: DiffusionSpec,
    pub start: f64,
    pub level: f64,
}

impl PassageProblem {
    /// `Λ` relative to the start time.
    pub fn cum_drift(&self, t: f64) -> f64 {
        self.spec.cum_drift(self.start + t) - self.spec.cum_drift(self.start)
    }

    /// `Σ` relative to the start time.
    pub fn cum_variance(&self, t: f64) -> f64 {
        self.spec.cum_variance(self.start + t) - self.spec.cum_variance(self.start)
    }

    /// `T_max = (N − start) + sigmas·√Σ(N − start)`, with `N` the last anchor.
    pub fn time_limit(&self, sigmas: f64) -> f64 {
        let horizon = self.spec.drift.knots.last().copied().unwrap_or(0.0);
        let span = (horizon - self.start).max(0.0);
        span + sigmas * self.cum_variance(span).sqrt()
    }
}

/// `σ²(t)·(a + Λ(t)) / √(4π Σ(t)³) · exp(−(a + Λ(t))² / (4 Σ(t)))`.
pub fn first_passage_density(prob: &PassageProblem, t: f64) -> Result<f64, DiffusionError> {
    if !(t > 0.0) {
        return Err(DiffusionError::InvalidTime { t });
    }
    let sigma = prob.cum_variance(t);
    if !(sigma > 0.0) {
        return Err(DiffusionError::DegenerateVariance { t });
    }
    let shifted = prob.level + prob.cum_drift(t);
    let scale = prob.spec.variance(prob.start + t) * shifted / (4.0 * std::f64::consts::PI * sigma.powi(3)).sqrt();
    Ok(scale * (-shifted * shifted / (4.0 * sigma)).exp())
}

/// `∫_0^T f_τ` for the closed-form density.
pub fn passage_mass(prob: &PassageProblem, upto: f64, tol: f64) -> Result<f64, DiffusionError> {
    quad_density(prob, 0.0, upto, tol, |_| 1.0)
}

/// `∫_lo^hi g(t)·f_τ(t) dt`; density errors abort the integration.
fn quad_density<G: FnMut(f64) -> f64>(
    prob: &PassageProblem,
    lo: f64,
    hi: f64,
    tol: f64,
    mut g: G,
) -> Result<f64, DiffusionError> {
    if hi <= lo {
        return Ok(0.0);
    }
    let mut failure = None;
    let value = integrate(
        |t| match first_passage_density(prob, t) {
            Ok(f) => g(t) * f,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        lo,
        hi,
        tol,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(value?),
    }
}

/// Crossing times from a seeded path simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageSample {
    /// Observed crossing times, sorted.
    pub times: Vec<f64>,
    /// Paths that had not crossed by `t_max`.
    pub censored: usize,
    pub paths: usize,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// Estimated density per bin `((k)·w, (k+1)·w]`.
    pub density: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl Histogram {
    pub fn edges(&self, bin: usize) -> (f64, f64) {
        (bin as f64 * self.bin_width, (bin + 1) as f64 * self.bin_width)
    }
}

impl PassageSample {
    /// Fraction of all paths that crossed by `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.times.partition_point(|&x| x <= t) as f64 / self.paths as f64
    }

    /// Density histogram over `(0, t_max]` with binomial standard errors.
    pub fn histogram(&self, bin_width: f64) -> Histogram {
        let bins = (self.t_max / bin_width).ceil() as usize;
        let n = self.paths as f64;
        let mut density = Vec::with_capacity(bins);
        let mut std_error = Vec::with_capacity(bins);
        for k in 0..bins {
            let lo = k as f64 * bin_width;
            let hi = lo + bin_width;
            let count = self.times.partition_point(|&x| x <= hi) - self.times.partition_point(|&x| x <= lo);
            let p = count as f64 / n;
            density.push(p / bin_width);
            std_error.push((p * (1.0 - p) / n).sqrt() / bin_width);
        }
        Histogram { bin_width, density, std_error }
    }
}

/// Simulates `paths` trajectories on a grid of width `step` up to `t_max`.
///
/// Increments are exact Gaussians with mean `ΔΛ` and variance `ΔΣ` over each
/// step. A crossing inside a step that ends below the level is detected with
/// the Brownian-bridge probability `exp(−2(a−x₀)(a−x₁)/ΔΣ)` and placed at the
/// step midpoint; a step that ends above the level crosses at the linear
/// interpolation point. Path `k` uses ChaCha stream `k` of `seed`.
pub fn mc_first_passage(prob: &PassageProblem, paths: usize, step: f64, seed: u64, t_max: f64) -> PassageSample {
    assert!(paths >= 1 && step > 0.0 && t_max > 0.0, "paths >= 1, step > 0 and t_max > 0 are required");
    let steps = (t_max / step).ceil() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| (k as f64 * step).min(t_max)).collect();
    let moments: Vec<(f64, f64)> = grid
        .windows(2)
        .map(|w| {
            let mean = prob.cum_drift(w[1]) - prob.cum_drift(w[0]);
            let var = (prob.cum_variance(w[1]) - prob.cum_variance(w[0])).max(0.0);
            (mean, var)
        })
        .collect();
    let level = prob.level;
    let crossings: Vec<Option<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|path| {
            if level <= 0.0 {
                return Some(0.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path);
            let mut x = 0.0;
            for (k, &(mean, var)) in moments.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let next = x + mean + var.sqrt() * z;
                if next >= level {
                    let frac = (level - x) / (next - x);
                    return Some(grid[k] + frac * (grid[k + 1] - grid[k]));
                }
                if var > 0.0 {
                    let exponent = 2.0 * (level - x) * (level - next) / var;
                    if exponent < 40.0 && rng.random::<f64>() < (-exponent).exp() {
                        return Some(0.5 * (grid[k] + grid[k + 1]));
                    }
                }
                x = next;
            }
            None
        })
        .collect();
    let mut times: Vec<f64> = crossings.iter().flatten().copied().collect();
    times.sort_by(f64::total_cmp);
    PassageSample { censored: paths - times.len(), times, paths, t_max }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMode {
    Paper,
    Mc,
}

impl FromStr for DensityMode {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(DensityMode::Paper),
            "mc" => Ok(DensityMode::Mc),
            other => Err(DiffusionError::InvalidConfig(format!("density must be paper or mc, got `{other}`"))),
        }
    }
}

impl fmt::Display for DensityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityMode::Paper => "paper",
            DensityMode::Mc => "mc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub density: DensityMode,
    pub grid_t: usize,
    pub grid_w: usize,
    pub quad_tol: f64,
    pub tmax_sigmas: f64,
    pub mc_paths: usize,
    pub mc_step: f64,
    pub seed: u64,
    pub refine_iters: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            density: DensityMode::Mc,
            grid_t: 41,
            grid_w: 41,
            quad_tol: 1e-8,
            tmax_sigmas: 10.0,
            mc_paths: 2000,
            mc_step: 0.05,
            seed: 1,
            refine_iters: 200,
        }
    }
}

impl ObjectiveConfig {
    /// Applies one `key value` pair; `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, DiffusionError> {
        let bad = || DiffusionError::InvalidConfig(format!("bad value `{value}` for `{key}`"));
        match key {
            "density" => self.density = value.parse()?,
            "grid_t" => self.grid_t = value.parse().map_err(|_| bad())?,
            "grid_w" => self.grid_w = value.parse().map_err(|_| bad())?,
            "quad_tol" => self.quad_tol = value.parse().map_err(|_| bad())?,
            "tmax_sigmas" => self.tmax_sigmas = value.parse().map_err(|_| bad())?,
            "mc_paths" => self.mc_paths = value.parse().map_err(|_| bad())?,
            "mc_step" => self.mc_step = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "refine_iters" => self.refine_iters = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let problem = if self.grid_t < 2 || self.grid_w < 2 {
            Some("grid_t and grid_w must be at least 2")
        } else if !(self.quad_tol > 0.0) {
            Some("quad_tol must be positive")
        } else if !(self.tmax_sigmas >= 0.0) {
            Some("tmax_sigmas must be non-negative")
        } else if self.mc_paths == 0 || !(self.mc_step > 0.0) {
            Some("mc_paths and mc_step must be positive")
        } else {
            None
        };
        problem.map_or(Ok(()), |p| Err(DiffusionError::InvalidConfig(p.into())))
    }

    /// `key value` lines in a fixed order.
    pub fn describe(&self) -> String {
        format!(
            "density {}\ngrid_t {}\ngrid_w {}\nquad_tol {:e}\ntmax_sigmas {}\nmc_paths {}\nmc_step {}\nseed {}\nrefine_iters {}\n",
            self.density,
            self.grid_t,
            self.grid_w,
            self.quad_tol,
            self.tmax_sigmas,
            self.mc_paths,
            self.mc_step,
            self.seed,
            self.refine_iters
        )
    }
}

/// Paths of the high-group and combined diffusions on a common grid.
struct PathEnsemble {
    /// Grid times `t0 = u_0 < … < u_K = N`.
    grid: Vec<f64>,
    paths: usize,
    /// `X_H(u_k) − X_H(t0)`, path-major.
    high: Vec<f64>,
    /// `X_C(u_k) − X_C(t0)`, path-major.
    combined: Vec<f64>,
    /// Running maximum of `high`.
    high_max: Vec<f64>,
    /// Running maximum of `high − (Λ_C(u_k) − Λ_C(t0))`.
    trigger_max: Vec<f64>,
    /// `Λ_C(u_k) − Λ_C(t0)`.
    combined_drift: Vec<f64>,
    /// Maximum of `combined` over blocks of `BLOCK` grid points, path-major.
    block_max: Vec<f64>,
}

const BLOCK: usize = 32;

impl PathEnsemble {
    fn new(high: &DiffusionSpec, low: &DiffusionSpec, start: f64, horizon: f64, config: &ObjectiveConfig) -> Self {
        let steps = ((horizon - start) / config.mc_step).ceil().max(0.0) as usize;
        let grid: Vec<f64> = (0..=steps).map(|k| (start + k as f64 * config.mc_step).min(horizon)).collect();
        let width = grid.len();
        let increments = |spec: &DiffusionSpec| -> Vec<(f64, f64)> {
            grid.windows(2)
                .map(|w| {
                    let mean = spec.cum_drift(w[1]) - spec.cum_drift(w[0]);
                    let var = (spec.cum_variance(w[1]) - spec.cum_variance(w[0])).max(0.0);
                    (mean, var.sqrt())
                })
                .collect()
        };
        let (inc_high, inc_low) = (increments(high), increments(low));
        let combined_spec = high.superpose(low);
        let combined_drift: Vec<f64> =
            grid.iter().map(|&u| combined_spec.cum_drift(u) - combined_spec.cum_drift(start)).collect();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..config.mc_paths as u64)
            .into_par_iter()
            .map(|path| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(path);
                let mut h = Vec::with_capacity(width);
                let mut c = Vec::with_capacity(width);
                let (mut xh, mut xl) = (0.0, 0.0);
                h.push(0.0);
                c.push(0.0);
                for (&(mh, sh), &(ml, sl)) in inc_high.iter().zip(&inc_low) {
                    let zh: f64 = rng.sample(StandardNormal);
                    let zl: f64 = rng.sample(StandardNormal);
                    xh += mh + sh * zh;
                    xl += ml + sl * zl;
                    h.push(xh);
                    c.push(xh + xl);
                }
                (h, c)
            })
            .collect();
        let mut ensemble = PathEnsemble {
            grid,
            paths: config.mc_paths,
            high: Vec::with_capacity(width * config.mc_paths),
            combined: Vec::with_capacity(width * config.mc_paths),
            high_max: Vec::with_capacity(width * config.mc_paths),
            trigger_max: Vec::with_capacity(width * config.mc_paths),
            combined_drift,
            block_max: Vec::new(),
        };
        for (h, c) in rows {
            let (mut hm, mut tm) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for k in 0..width {
                hm = hm.max(h[k]);
                tm = tm.max(h[k] - ensemble.combined_drift[k]);
                ensemble.high_max.push(hm);
                ensemble.trigger_max.push(tm);
            }
            for chunk in c.chunks(BLOCK) {
                ensemble.block_max.push(chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            ensemble.high.extend(h);
            ensemble.combined.extend(c);
        }
        ensemble
    }

    fn width(&self) -> usize {
        self.grid.len()
    }

    /// Value of `row` at time `t`, linear between grid points.
    fn at(&self, row: &[f64], t: f64) -> f64 {
        let k = self.grid.partition_point(|&u| u <= t);
        if k == 0 {
            return row[0];
        }
        if k == self.grid.len() {
            return row[k - 1];
        }
        let frac = (t - self.grid[k - 1]) / (self.grid[k] - self.grid[k - 1]);
        row[k - 1] + frac * (row[k] - row[k - 1])
    }

    /// Time at which `values` first reaches `level` given that index `k` is the
    /// first grid point at or above it; linear between `k−1` and `k`.
    fn crossing(&self, values: impl Fn(usize) -> f64, k: usize, level: f64) -> f64 {
        if k == 0 {
            return self.grid[0];
        }
        let (a, b) = (values(k - 1), values(k));
        let frac = if b > a { ((level - a) / (b - a)).clamp(0.0, 1.0) } else { 1.0 };
        self.grid[k - 1] + frac * (self.grid[k] - self.grid[k - 1])
    }

    /// First grid index `>= from` with `combined >= level` on path `p`.
    fn first_combined_at_least(&self, p: usize, from: usize, level: f64) -> Option<usize> {
        let width = self.width();
        let row = &self.combined[p * width..(p + 1) * width];
        let blocks = &self.block_max[p * width.div_ceil(BLOCK)..(p + 1) * width.div_ceil(BLOCK)];
        let mut k = from;
        while k < width {
            let b = k / BLOCK;
            if blocks[b] < level {
                k = (b + 1) * BLOCK;
                continue;
            }
            let end = ((b + 1) * BLOCK).min(width);
            if let Some(off) = row[k..end].iter().position(|&x| x >= level) {
                return Some(k + off);
            }
            k = end;
        }
        None
    }
}

/// One stage's two-group diffusion model.
pub struct StageModel {
    horizon: f64,
    start: f64,
    inventory: f64,
    high: DiffusionSpec,
    combined: DiffusionSpec,
    price_high: f64,
    price_low: f64,
    low: DiffusionSpec,
    config: ObjectiveConfig,
    ensemble: Option<PathEnsemble>,
}

impl StageModel {
    pub fn new(inst: &Instance, problem: &StageProblem, config: &ObjectiveConfig) -> Result<StageModel, DiffusionError> {
        config.validate()?;
        let high = fit_diffusion(inst, &problem.high)?;
        let low = fit_diffusion(inst, &problem.low)?;
        let horizon = inst.horizon() as f64;
        let start = problem.start_time.clamp(0.0, horizon);
        let price_high = revenue_weighted_price(inst, &problem.high, start);
        let ensemble = (config.density == DensityMode::Mc)
            .then(|| PathEnsemble::new(&high, &low, start, horizon, config));
        Ok(StageModel {
            horizon,
            start,
            inventory: problem.start_inventory.max(0.0),
            combined: high.superpose(&low),
            high,
            low,
            price_high,
            price_low: problem.low_price,
            config: config.clone(),
            ensemble,
        })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn inventory(&self) -> f64 {
        self.inventory
    }

    /// Cumulative revenue rate of the high group.
    fn revenue_high(&self, t: f64) -> f64 {
        self.price_high * self.high.cum_drift(t)
    }

    /// Cumulative revenue rate once both groups are admitted.
    fn revenue_combined(&self, t: f64) -> f64 {
        self.price_high * self.high.cum_drift(t) + self.price_low * self.low.cum_drift(t)
    }

    /// `Λ_C(N) − Λ_C(t0)`: the expected combined demand still to come.
    fn remaining_combined(&self) -> f64 {
        self.combined.cum_drift(self.horizon) - self.combined.cum_drift(self.start)
    }

    /// `(V₁, V₂)` for switch time `t` and inventory offset `w` (`−∞` disables
    /// the inventory trigger). The time trigger acts at the first whole epoch
    /// `⌈t⌉`, as the executed policy does.
    pub fn phase_revenues(&self, t: f64, w: f64) -> Result<(f64, f64), DiffusionError> {
        let t = effective_epoch(t).clamp(self.start, self.horizon);
        match &self.ensemble {
            Some(ensemble) => Ok(self.phase_revenues_mc(ensemble, t, w)),
            None => self.phase_revenues_paper(t, w),
        }
    }

    pub fn objective(&self, t: f64, w: f64) -> Result<f64, DiffusionError> {
        self.phase_revenues(t, w).map(|(v1, v2)| v1 + v2)
    }

    fn phase_revenues_mc(&self, ens: &PathEnsemble, t: f64, w: f64) -> (f64, f64) {
        let width = ens.width();
        let base_high = self.revenue_high(self.start);
        let level = self.inventory - w - self.remaining_combined();
        let (mut v1, mut v2) = (0.0, 0.0);
        for p in 0..ens.paths {
            let row = p * width..(p + 1) * width;
            let (high, combined) = (&ens.high[row.clone()], &ens.combined[row.clone()]);
            let (high_max, trigger_max) = (&ens.high_max[row.clone()], &ens.trigger_max[row]);
            let tau1 = if level <= 0.0 {
                self.start
            } else {
                let k = trigger_max.partition_point(|&z| z < level);
                if k == width {
                    f64::INFINITY
                } else {
                    ens.crossing(|j| high[j] - ens.combined_drift[j], k, level)
                }
            };
            let depletion = if self.inventory <= 0.0 {
                self.start
            } else {
                let k = high_max.partition_point(|&x| x < self.inventory);
                if k == width {
                    f64::INFINITY
                } else {
                    ens.crossing(|j| high[j], k, self.inventory)
                }
            };
            let switch = tau1.min(t);
            if depletion <= switch {
                v1 += self.revenue_high(depletion) - base_high;
                continue;
            }
            v1 += self.revenue_high(switch) - base_high;
            let residual = self.inventory - ens.at(high, switch);
            let base = ens.at(combined, switch);
            let from = ens.grid.partition_point(|&u| u <= switch);
            let tau2 = match ens.first_combined_at_least(p, from, base + residual) {
                None => self.horizon,
                Some(k) if k == from => {
                    let (a, b) = (base, combined[k]);
                    let frac = if b > a { (residual / (b - a)).clamp(0.0, 1.0) } else { 1.0 };
                    switch + frac * (ens.grid[k] - switch)
                }
                Some(k) => ens.crossing(|j| combined[j], k, base + residual),
            };
            v2 += self.revenue_combined(tau2.min(self.horizon)) - self.revenue_combined(switch);
        }
        let n = ens.paths as f64;
        (v1 / n, v2 / n)
    }

    /// Closed-form passage densities as printed. Phase 1 ends at the passage
    /// of `Y` (drift `γ_H + γ_C`, variance `σ_H²`) to
    /// `W̃ = W₀ − w − (Λ_C(N) − Λ_C(t₀))`, or at `t`. Phase 2 starts with
    /// level `W₀ − (Λ_H(s) − Λ_H(t₀))`. Integrands are constant after their
    /// stopping kink, so the mass beyond it is added in closed form.
    fn phase_revenues_paper(&self, t: f64, w: f64) -> Result<(f64, f64), DiffusionError> {
        let tol = self.config.quad_tol;
        let window = t - self.start;
        let g1 = |tau: f64| self.revenue_high(self.start + tau.min(window)) - self.revenue_high(self.start);
        let g2 = |tau: f64| -> Result<f64, DiffusionError> {
            let s = self.start + tau.min(window);
            let level = self.inventory - (self.high.cum_drift(s) - self.high.cum_drift(self.start));
            self.phase_two_paper(s, level)
        };
        let tilde = self.inventory - w - self.remaining_combined();
        if w != f64::NEG_INFINITY && tilde <= 0.0 {
            return Ok((0.0, g2(0.0)?));
        }
        let prob = if w == f64::NEG_INFINITY {
            // Without an inventory trigger phase 1 can only end by depletion.
            PassageProblem { spec: self.high.clone(), start: self.start, level: self.inventory }
        } else {
            let drift = self.high.drift.add(&self.combined.drift);
            PassageProblem {
                spec: DiffusionSpec::new(drift, self.high.variance.clone())?,
                start: self.start,
                level: tilde,
            }
        };
        if window <= 0.0 {
            return Ok((0.0, g2(0.0)?));
        }
        let mass = passage_mass(&prob, window, tol)?;
        let survive = 1.0 - mass;
        let v1 = quad_density(&prob, 0.0, window, tol, g1)? + survive * g1(window);
        let mut failure = None;
        let v2_early = quad_density(&prob, 0.0, window, tol, |tau| {
            if w == f64::NEG_INFINITY {
                return 0.0;
            }
            g2(tau).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            })
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok((v1, v2_early + survive * g2(window)?))
    }

    /// Expected combined revenue from `s` until the combined diffusion
    /// consumes `level` or the horizon ends.
    fn phase_two_paper(&self, s: f64, level: f64) -> Result<f64, DiffusionError> {
        let span = self.horizon - s;
        if level <= 0.0 || span <= 0.0 {
            return Ok(0.0);
        }
        let prob = PassageProblem { spec: self.combined.clone(), start: s, level };
        let tol = self.config.quad_tol;
        let g = |u: f64| self.revenue_combined(s + u.min(span)) - self.revenue_combined(s);
        let mass = passage_mass(&prob, span, tol)?;
        Ok(quad_density(&prob, 0.0, span, tol, g)? + (1.0 - mass) * g(span))
    }
}

/// `⌈t⌉` with a tolerance so that `t = k + ε` from floating-point noise
/// stays at `k`.
fn effective_epoch(t: f64) -> f64 {
    (t - 1e-9).ceil().max(0.0)
}

/// `(V₁, V₂)` for the two-group split `{1}` vs `{2..I}` over the whole horizon.
pub fn phase_revenues(inst: &Instance, t1: f64, w1: f64, config: &ObjectiveConfig) -> Result<(f64, f64), DiffusionError> {
    let model = StageModel::new(inst, &whole_horizon_problem(inst, &[1], &(2..=inst.num_classes()).collect::<Vec<_>>()), config)?;
    model.phase_revenues(t1, w1)
}

fn whole_horizon_problem(inst: &Instance, high: &[usize], low: &[usize]) -> StageProblem {
    StageProblem {
        stage: 1,
        high: high.to_vec(),
        low: low.to_vec(),
        start_time: 0.0,
        start_inventory: inst.initial_inventory() as f64,
        low_price: revenue_weighted_price(inst, low, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchSpace {
    /// `(t, w)` including the disabled-inventory line.
    TwoDimensional,
    /// `t` only, inventory trigger disabled.
    TimeOnly,
}

/// Grid search over `t ∈ [t₀, N]` and `w ∈ [0, W₀]` (plus `w = −∞`), then
/// Nelder–Mead from the best cell. Ties go to the smaller `t`, then the
/// smaller `w`. The result is never worse than any grid point.
pub fn optimize_stage(model: &StageModel, space: SearchSpace) -> Result<SwitchPoint, DiffusionError> {
    let cfg = &model.config;
    let (t0, n, w0) = (model.start, model.horizon, model.inventory);
    let t_pitch = (n - t0) / (cfg.grid_t - 1) as f64;
    let w_pitch = w0 / (cfg.grid_w - 1) as f64;
    let levels: Vec<f64> = match space {
        SearchSpace::TwoDimensional => std::iter::once(f64::NEG_INFINITY)
            .chain((0..cfg.grid_w).map(|b| b as f64 * w_pitch))
            .collect(),
        SearchSpace::TimeOnly => vec![f64::NEG_INFINITY],
    };
    let cells: Vec<(f64, f64)> = (0..cfg.grid_t)
        .flat_map(|a| {
            let t = if a + 1 == cfg.grid_t { n } else { t0 + a as f64 * t_pitch };
            levels.iter().map(move |&w| (t, w))
        })
        .collect();
    let values: Vec<Result<f64, DiffusionError>> = cells.par_iter().map(|&(t, w)| model.objective(t, w)).collect();

    let mut best: Option<SwitchPoint> = None;
    let mut last_error = None;
    for (&(t, w), value) in cells.iter().zip(values) {
        match value {
            Ok(v) if best.is_none_or(|b| v > b.objective) => {
                best = Some(SwitchPoint { time: t, level: w, objective: v })
            }
            Ok(_) => {}
            Err(e) => last_error = Some(e),
        }
    }
    let Some(mut best) = best else {
        let reason = last_error.map_or_else(|| "empty grid".to_string(), |e| e.to_string());
        return Err(DiffusionError::OptimizerFailure(reason));
    };

    if cfg.refine_iters > 0 && t_pitch > 0.0 {
        let refined = if best.level == f64::NEG_INFINITY {
            nelder_mead_max(
                |x| model.objective(x[0], f64::NEG_INFINITY).ok(),
                &[best.time],
                &[t_pitch],
                &[t0],
                &[n],
                cfg.refine_iters,
            )
            .map(|(x, v)| SwitchPoint { time: x[0], level: f64::NEG_INFINITY, objective: v })
        } else {
            nelder_mead_max(
                |x| model.objective(x[0], x[1]).ok(),
                &[best.time, best.level],
                &[t_pitch, w_pitch.max(f64::MIN_POSITIVE)],
                &[t0, 0.0],
                &[n, w0],
                cfg.refine_iters,
            )
            .map(|(x, v)| SwitchPoint { time: x[0], level: x[1], objective: v })
        };
        if let Some(point) = refined.filter(|p| p.objective > best.objective) {
            best = point;
        }
    }
    Ok(best)
}

/// Optimizes `(t₁, w₁)` for `high` versus `low` over the whole horizon.
pub fn optimize_switchover(
    inst: &Instance,
    high: &[usize],
    low: &[usize],
    config: &ObjectiveConfig,
) -> Result<SwitchPoint, DiffusionError> {
    if high.iter().any(|i| low.contains(i)) {
        return Err(DiffusionError::InvalidConfig("class groups overlap".into()));
    }
    let model = StageModel::new(inst, &whole_horizon_problem(inst, high, low), config)?;
    optimize_stage(&model, SearchSpace::TwoDimensional)
}

/// The diffusion objective as a switch-point solver for `build_schedule`.
#[derive(Debug, Clone)]
pub struct DiffusionSolver {
    pub config: ObjectiveConfig,
    pub space: SearchSpace,
}

impl SwitchPointSolver for DiffusionSolver {
    fn solve(&self, inst: &Instance, problem: &StageProblem) -> Result<SwitchPoint, String> {
        let model = StageModel::new(inst, problem, &self.config).map_err(|e| e.to_string())?;
        optimize_stage(&model, self.space).map_err(|e| e.to_string())
    }
}
