//! Command-line surface and the percentile benchmark.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::bounds::BoundTable;
use crate::diffusion::{DensityMode, DiffusionError, DiffusionSolver, ObjectiveConfig, SearchSpace};
use crate::dp::{extract_policy, solve_value_table, DpError};
use crate::model::{parse_instance, random_instance, write_instance, Instance, ModelError};
use crate::policy::{build_schedule, PolicyError, SwitchoverSchedule};
use crate::sim::{classify_percentile, simulate_policy, AcceptAll, PercentileClass, SimResult};
use crate::structure::{check_properties, find_counterexample, StructureError, DEFAULT_SEED, DEFAULT_TOLERANCE};
use crate::textfmt::{format_sig, tokenized_lines};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Instance { path: PathBuf, source: ModelError },
    #[error("{path}: line {line}: {message}")]
    Config { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("system {system}: {message}")]
    System { system: usize, message: String },
}

#[derive(Debug, Parser)]
#[command(name = "stochknap", version, about = "Stochastic knapsack with time-varying random batch demand")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Value table `n d V(n,d)`.
    Solve(InstanceArgs),
    /// Structural property checks of the value function.
    CheckStructure(StructureArgs),
    /// Unit-demand relaxation bound next to the exact values.
    Bound(InstanceArgs),
    /// Builds a switch-over schedule with the diffusion objective.
    OptimizePolicy(OptimizeArgs),
    /// Simulates a policy and classifies `V(1,W)` against the result.
    Simulate(SimulateArgs),
    /// Runs the regenerated benchmark described by a config file.
    Benchmark(BenchmarkArgs),
    /// Searches for a batch instance whose value function is not concave in inventory.
    Counterexample(CounterexampleArgs),
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StructureArgs {
    #[command(flatten)]
    pub io: InstanceArgs,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ObjectiveArgs {
    /// Key-value file with objective settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub density: Option<DensityArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DensityArg {
    Paper,
    Mc,
}

impl From<DensityArg> for DensityMode {
    fn from(d: DensityArg) -> Self {
        match d {
            DensityArg::Paper => DensityMode::Paper,
            DensityArg::Mc => DensityMode::Mc,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub io: InstanceArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Disable the inventory trigger (one-dimensional policy).
    #[arg(long)]
    pub time_only: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BuiltinPolicy {
    Optimal,
    AcceptAll,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub io: InstanceArgs,
    /// Schedule written by `optimize-policy`.
    #[arg(long, conflicts_with = "policy")]
    pub schedule: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "optimal")]
    pub policy: BuiltinPolicy,
    #[arg(long, default_value_t = 100_000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_enum)]
    pub density: Option<DensityArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CounterexampleArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn load_instance(path: &Path) -> Result<Instance, CliError> {
    parse_instance(&read(path)?).map_err(|source| CliError::Instance { path: path.to_path_buf(), source })
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|source| CliError::Io { path: path.clone(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Solve(a) => {
            let inst = load_instance(&a.instance)?;
            emit(&a.out, &solve_value_table(&inst).export())
        }
        Command::CheckStructure(a) => {
            let inst = load_instance(&a.io.instance)?;
            emit(&a.io.out, &check_properties(&solve_value_table(&inst), a.tol).export())
        }
        Command::Bound(a) => {
            let inst = load_instance(&a.instance)?;
            emit(&a.out, &BoundTable::new(&inst).export())
        }
        Command::OptimizePolicy(a) => {
            let inst = load_instance(&a.io.instance)?;
            let config = objective_config(&a.objective)?;
            let space = if a.time_only { SearchSpace::TimeOnly } else { SearchSpace::TwoDimensional };
            let schedule = build_schedule(&inst, &DiffusionSolver { config: config.clone(), space })?;
            let mut text = String::new();
            for line in config.describe().lines() {
                writeln!(text, "# {line}").unwrap();
            }
            text.push_str(&schedule.export());
            emit(&a.io.out, &text)
        }
        Command::Simulate(a) => {
            let inst = load_instance(&a.io.instance)?;
            let table = solve_value_table(&inst);
            let result = match (&a.schedule, a.policy) {
                (Some(path), _) => {
                    let schedule = SwitchoverSchedule::parse(&inst, &read(path)?)?;
                    simulate_policy(&inst, &schedule, a.reps, a.seed)
                }
                (None, BuiltinPolicy::Optimal) => {
                    simulate_policy(&inst, &extract_policy(&inst, &table)?, a.reps, a.seed)
                }
                (None, BuiltinPolicy::AcceptAll) => simulate_policy(&inst, &AcceptAll, a.reps, a.seed),
            };
            let value = table.get(1, inst.initial_inventory());
            let text = format!(
                "{}# value {}\n# class {}\n",
                result.export(),
                format_sig(value, 15),
                classify_percentile(&result, value)
            );
            emit(&a.io.out, &text)
        }
        Command::Benchmark(a) => {
            let mut config = match &a.config {
                Some(path) => BenchmarkConfig::parse(&read(path)?)
                    .map_err(|(line, message)| CliError::Config { path: path.clone(), line, message })?,
                None => BenchmarkConfig::default(),
            };
            if let Some(seed) = a.seed {
                config.set_seed(seed);
            }
            if let Some(reps) = a.reps {
                config.reps = reps;
            }
            if let Some(d) = a.density {
                config.objective.density = d.into();
            }
            emit(&a.out, &run_benchmark(&config)?.render())
        }
        Command::Counterexample(a) => {
            let ce = find_counterexample(a.seed)?;
            let truncated = check_properties(&solve_value_table(&ce.instance.truncate_to_unit()), a.tol);
            let mut text = format!(
                "# seed {} horizon {} inventory {}\n",
                a.seed,
                ce.instance.horizon(),
                ce.instance.initial_inventory()
            );
            text.push_str(&write_instance(&ce.instance));
            for v in &ce.violations {
                writeln!(
                    text,
                    "# violation concave_d {} {} {} {} {}",
                    v.n,
                    v.d,
                    format_sig(v.lhs, 15),
                    format_sig(v.rhs, 15),
                    format_sig(v.gap, 15)
                )
                .unwrap();
            }
            let unit = truncated.check(crate::structure::Property::ConcaveD).violations.len();
            writeln!(text, "# unit_truncation concave_d violations {unit}").unwrap();
            emit(&a.out, &text)
        }
    }
}

fn objective_config(args: &ObjectiveArgs) -> Result<ObjectiveConfig, CliError> {
    let mut config = ObjectiveConfig::default();
    if let Some(path) = &args.config {
        for (line, tokens) in tokenized_lines(&read(path)?) {
            let err = |message: String| CliError::Config { path: path.clone(), line, message };
            if tokens.len() != 2 {
                return Err(err("expected `key value`".into()));
            }
            if !config.set(tokens[0], tokens[1]).map_err(|e| err(e.to_string()))? {
                return Err(err(format!("unknown key `{}`", tokens[0])));
            }
        }
    }
    if let Some(d) = args.density {
        config.density = d.into();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Regenerated benchmark: `parameter_sets × instances` random systems, with
/// set `s` using `horizons[s mod len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub horizons: Vec<usize>,
    pub inventory: usize,
    pub max_batch: usize,
    pub parameter_sets: usize,
    pub instances: usize,
    pub reps: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            classes: 2,
            horizons: vec![10, 20, 30],
            inventory: 20,
            max_batch: 4,
            parameter_sets: 25,
            instances: 5,
            reps: 10_000,
            seed: 1,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    /// `seed` drives instance generation, simulation and the objective's paths.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.objective.seed = seed;
    }

    /// Key-value lines; objective keys are accepted alongside benchmark keys.
    pub fn parse(text: &str) -> Result<BenchmarkConfig, (usize, String)> {
        let mut config = BenchmarkConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (line, tokens) in tokenized_lines(text) {
            let key = tokens[0];
            if !seen.insert(key.to_string()) {
                return Err((line, format!("duplicate key `{key}`")));
            }
            let values = &tokens[1..];
            let single = || -> Result<&str, (usize, String)> {
                match values {
                    [v] => Ok(v),
                    _ => Err((line, format!("`{key}` takes exactly one value"))),
                }
            };
            let number = |v: &str| -> Result<usize, (usize, String)> {
                v.parse().map_err(|_| (line, format!("`{v}` is not a non-negative integer")))
            };
            match key {
                "classes" => config.classes = number(single()?)?,
                "inventory" => config.inventory = number(single()?)?,
                "max_batch" => config.max_batch = number(single()?)?,
                "parameter_sets" => config.parameter_sets = number(single()?)?,
                "instances" => config.instances = number(single()?)?,
                "reps" => config.reps = number(single()?)?,
                "horizons" => {
                    config.horizons = values.iter().map(|v| number(v)).collect::<Result<_, _>>()?;
                }
                "seed" => {
                    let v = single()?;
                    config.set_seed(v.parse().map_err(|_| (line, format!("`{v}` is not a seed")))?);
                }
                _ => match config.objective.set(key, single()?) {
                    Ok(true) => {}
                    Ok(false) => return Err((line, format!("unknown key `{key}`"))),
                    Err(e) => return Err((line, e.to_string())),
                },
            }
        }
        if config.classes < 2 || config.horizons.is_empty() || config.horizons.contains(&0) {
            return Err((0, "need classes >= 2 and non-empty positive horizons".into()));
        }
        if config.max_batch == 0 || config.reps < 2 || config.parameter_sets == 0 || config.instances == 0 {
            return Err((0, "max_batch, parameter_sets and instances must be positive; reps at least 2".into()));
        }
        config.objective.validate().map_err(|e| (0, e.to_string()))?;
        Ok(config)
    }

    pub fn systems(&self) -> usize {
        self.parameter_sets * self.instances
    }

    /// `(set, horizon, instance seed)` of system `index` (0-based).
    pub fn system(&self, index: usize) -> (usize, usize, u64) {
        let set = index / self.instances;
        let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64;
        (set, self.horizons[set % self.horizons.len()], seed)
    }

    fn header(&self) -> String {
        let horizons: Vec<String> = self.horizons.iter().map(usize::to_string).collect();
        let mut out = format!(
            "# classes {}\n# horizons {}\n# inventory {}\n# max_batch {}\n# parameter_sets {}\n# instances {}\n# reps {}\n",
            self.classes,
            horizons.join(" "),
            self.inventory,
            self.max_batch,
            self.parameter_sets,
            self.instances,
            self.reps
        );
        for line in self.objective.describe().lines() {
            writeln!(out, "# {line}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SystemOutcome {
    pub index: usize,
    pub set: usize,
    pub horizon: usize,
    pub seed: u64,
    pub value: f64,
    pub optimal: SimResult,
    pub two_d: SimResult,
    pub one_d: SimResult,
    pub schedule_2d: SwitchoverSchedule,
    pub schedule_1d: SwitchoverSchedule,
    pub class_2d: PercentileClass,
    pub class_1d: PercentileClass,
}

impl SystemOutcome {
    /// `(mean_2d − mean_1d) / mean_1d`, zero when the 1D mean is zero.
    pub fn relative_gap(&self) -> f64 {
        if self.one_d.mean != 0.0 {
            (self.two_d.mean - self.one_d.mean) / self.one_d.mean
        } else {
            0.0
        }
    }
}

/// Solves, builds both schedules and simulates all three policies on common
/// random numbers (one seed for every policy).
pub fn run_system(
    inst: &Instance,
    objective: &ObjectiveConfig,
    reps: usize,
    seed: u64,
) -> Result<(f64, [SimResult; 3], [SwitchoverSchedule; 2]), CliError> {
    let table = solve_value_table(inst);
    let value = table.get(1, inst.initial_inventory());
    let optimal = extract_policy(inst, &table)?;
    let two = build_schedule(inst, &DiffusionSolver { config: objective.clone(), space: SearchSpace::TwoDimensional })?;
    let one = build_schedule(inst, &DiffusionSolver { config: objective.clone(), space: SearchSpace::TimeOnly })?;
    let results = [
        simulate_policy(inst, &optimal, reps, seed),
        simulate_policy(inst, &two, reps, seed),
        simulate_policy(inst, &one, reps, seed),
    ];
    Ok((value, results, [two, one]))
}

/// Systems run in parallel; rows come back in system order.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport, CliError> {
    let systems = (0..config.systems())
        .into_par_iter()
        .map(|index| {
            let (set, horizon, seed) = config.system(index);
            let wrap = |e: CliError| CliError::System { system: index + 1, message: e.to_string() };
            let inst = random_instance(seed, config.classes, horizon, config.max_batch, config.inventory)
                .map_err(|e| wrap(e.into()))?;
            let (value, [optimal, two_d, one_d], [schedule_2d, schedule_1d]) =
                run_system(&inst, &config.objective, config.reps, seed).map_err(wrap)?;
            Ok(SystemOutcome {
                index: index + 1,
                set: set + 1,
                horizon,
                seed,
                value,
                class_2d: classify_percentile(&two_d, value),
                class_1d: classify_percentile(&one_d, value),
                optimal,
                two_d,
                one_d,
                schedule_2d,
                schedule_1d,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(BenchmarkReport { config: config.clone(), systems })
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub systems: Vec<SystemOutcome>,
}

const CLASSES: [PercentileClass; 5] = [
    PercentileClass::P85,
    PercentileClass::P90,
    PercentileClass::P95,
    PercentileClass::P97_5,
    PercentileClass::Above,
];

impl BenchmarkReport {
    pub fn class_counts(&self, two_d: bool) -> [usize; 5] {
        CLASSES.map(|c| {
            self.systems.iter().filter(|s| if two_d { s.class_2d } else { s.class_1d } == c).count()
        })
    }

    /// Share of systems whose 2D classification is 95 or tighter.
    pub fn within_95_fraction(&self) -> f64 {
        let n = self.systems.iter().filter(|s| s.class_2d <= PercentileClass::P95).count();
        n as f64 / self.systems.len() as f64
    }

    /// Share of systems where the 2D mean is at least the 1D mean.
    pub fn two_d_at_least_one_d(&self) -> f64 {
        let n = self.systems.iter().filter(|s| s.two_d.mean >= s.one_d.mean).count();
        n as f64 / self.systems.len() as f64
    }

    pub fn median_gap(&self) -> f64 {
        let mut gaps: Vec<f64> = self.systems.iter().map(SystemOutcome::relative_gap).collect();
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len();
        if m % 2 == 1 {
            gaps[m / 2]
        } else {
            0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# benchmark\n");
        out.push_str(&self.config.header());
        out.push_str(
            "system set horizon seed value opt_mean opt_se sw2d_mean sw2d_se sw1d_mean sw1d_se class_2d class_1d gap schedule_2d schedule_1d\n",
        );
        let sched = |s: &SwitchoverSchedule| -> String {
            let parts: Vec<String> =
                s.stages().iter().map(|st| format!("{}:{}", format_sig(st.time, 10), format_sig(st.level, 10))).collect();
            parts.join(",")
        };
        for s in &self.systems {
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                s.index,
                s.set,
                s.horizon,
                s.seed,
                format_sig(s.value, 12),
                format_sig(s.optimal.mean, 12),
                format_sig(s.optimal.std_error, 6),
                format_sig(s.two_d.mean, 12),
                format_sig(s.two_d.std_error, 6),
                format_sig(s.one_d.mean, 12),
                format_sig(s.one_d.std_error, 6),
                s.class_2d,
                s.class_1d,
                format_sig(s.relative_gap(), 6),
                sched(&s.schedule_2d),
                sched(&s.schedule_1d)
            )
            .unwrap();
        }
        let n = self.systems.len();
        out.push_str("# summary\n");
        for (label, two_d) in [("2d", true), ("1d", false)] {
            let counts = self.class_counts(two_d);
            let cells: Vec<String> = CLASSES.iter().zip(counts).map(|(c, k)| format!("{c}={k}")).collect();
            writeln!(out, "# classes_{label} {}", cells.join(" ")).unwrap();
        }
        writeln!(out, "# within_95_2d {}", format_sig(self.within_95_fraction(), 6)).unwrap();
        writeln!(out, "# sw2d_ge_sw1d {}", format_sig(self.two_d_at_least_one_d(), 6)).unwrap();
        writeln!(out, "# median_gap {}", format_sig(self.median_gap(), 6)).unwrap();
        writeln!(out, "# systems {n}").unwrap();
        out
    }
}
