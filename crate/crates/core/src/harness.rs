//! Instance sets, training iterations, incumbent evaluation, the
//! Knuth-versus-full-tree efficiency experiment and benchmarking.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{Formula, Literal, Satisfiability, SubproblemState};
use crate::config::RunConfig;
use crate::dimacs::{parse_dimacs, DimacsError};
use crate::dpll::{dpll_solve, hybrid_solve, BranchingPolicy, DpllError, JwPolicy, PolicySpec, ProofTreeStats};
use crate::generator::{gen_r3sat, GenError};
use crate::mcfs::{run_episode, Engine, McfsError, RolloutVariant};
use crate::model::{
    fit_table, LinearValueModel, ModelError, ModelPolicy, PriorModel, TableModel, TrainingRecord, ValueModel,
};
use crate::subsolver::SubsolverError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("found {} of {requested} UNSAT instances in {attempts} attempts", partial.len())]
    VerificationBudget {
        requested: usize,
        attempts: u64,
        partial: Box<InstanceSet>,
    },
    #[error("{failed} of {total} episodes failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("{path}: {source}")]
    Dimacs { path: PathBuf, source: DimacsError },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dpll(#[from] DpllError),
    #[error(transparent)]
    Mcfs(#[from] McfsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subsolver(#[from] SubsolverError),
}

/// A formula with its provenance and verified outcome.
#[derive(Clone, Debug)]
pub struct Instance {
    pub name: String,
    pub seed: Option<u64>,
    pub num_vars: u32,
    pub outcome: Satisfiability,
    pub formula: Arc<Formula>,
}

impl Instance {
    pub fn root(&self, config: &RunConfig) -> SubproblemState {
        SubproblemState::root(self.formula.clone(), config.propagation())
    }
}

#[derive(Clone, Debug, Default)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
    pub attempts: u64,
    pub rejected: u64,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Fraction of candidates rejected as satisfiable.
    pub fn rejection_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.rejected as f64 / self.attempts as f64
        }
    }

    /// Loads every `.cnf` file in `dir` (sorted by name), keeping the
    /// unsatisfiable ones.
    pub fn from_dimacs_dir(dir: &Path) -> Result<Self, HarnessError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "cnf"))
            .collect();
        paths.sort();
        let mut set = InstanceSet::default();
        for path in paths {
            let formula = parse_dimacs(&std::fs::read_to_string(&path)?).map_err(|source| HarnessError::Dimacs {
                path: path.clone(),
                source,
            })?;
            set.attempts += 1;
            let outcome = verify(&formula)?;
            if outcome == Satisfiability::Satisfiable {
                set.rejected += 1;
                continue;
            }
            set.instances.push(Instance {
                name: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                seed: None,
                num_vars: formula.num_vars(),
                outcome,
                formula: Arc::new(formula),
            });
        }
        Ok(set)
    }
}

/// Decides satisfiability with JW-branching DPLL.
pub fn verify(formula: &Formula) -> Result<Satisfiability, DpllError> {
    let root = SubproblemState::root(Arc::new(formula.clone()), Default::default());
    Ok(dpll_solve(&root, &mut JwPolicy, None)?.outcome)
}

fn default_attempts(count: usize) -> u64 {
    20 * count as u64 + 100
}

/// Generates random 3-SAT formulas until `count` are verified UNSAT.
pub fn make_training_set(num_vars: u32, count: usize, seed: u64) -> Result<InstanceSet, HarnessError> {
    make_training_set_with_budget(num_vars, count, seed, default_attempts(count))
}

pub fn make_training_set_with_budget(
    num_vars: u32,
    count: usize,
    seed: u64,
    max_attempts: u64,
) -> Result<InstanceSet, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = InstanceSet::default();
    while set.len() < count {
        if set.attempts >= max_attempts {
            return Err(HarnessError::VerificationBudget {
                requested: count,
                attempts: set.attempts,
                partial: Box::new(set),
            });
        }
        let instance_seed: u64 = rng.gen();
        let formula = gen_r3sat(num_vars, instance_seed)?;
        set.attempts += 1;
        let outcome = verify(&formula)?;
        if outcome == Satisfiability::Satisfiable {
            set.rejected += 1;
            continue;
        }
        set.instances.push(Instance {
            name: format!("r3sat-v{num_vars}-{instance_seed:016x}"),
            seed: Some(instance_seed),
            num_vars,
            outcome,
            formula: Arc::new(formula),
        });
    }
    Ok(set)
}

/// Per-instance seed derived from a run seed.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).gen()
}

/// Exact outcome of one (policy, instance) run; `None` fields mark a
/// failed cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub instance: String,
    pub policy: String,
    pub tree_size: Option<u64>,
    pub decisions: Option<u64>,
    pub subsolver_calls: Option<u64>,
    pub wall_ms: f64,
    pub outcome: Option<Satisfiability>,
    pub error: Option<String>,
}

/// Column order of bench CSV files.
pub const BENCH_HEADER: [&str; 8] = [
    "instance",
    "policy",
    "tree_size",
    "decisions",
    "subsolver_calls",
    "wall_ms",
    "outcome",
    "error",
];

/// Column order of bench summary CSV files.
pub const SUMMARY_HEADER: [&str; 5] = ["policy", "completed", "failed", "mean_tree_size", "reduction_ratio"];

/// A top policy for the hybrid solver.
#[derive(Clone)]
pub enum TopPolicy {
    Spec(PolicySpec),
    Model(Arc<dyn PriorModel>),
}

#[derive(Clone)]
pub struct BenchPolicy {
    pub name: String,
    pub policy: TopPolicy,
}

impl BenchPolicy {
    pub fn spec(name: impl Into<String>, spec: PolicySpec) -> Self {
        BenchPolicy {
            name: name.into(),
            policy: TopPolicy::Spec(spec),
        }
    }

    pub fn model(name: impl Into<String>, model: Arc<dyn PriorModel>) -> Self {
        BenchPolicy {
            name: name.into(),
            policy: TopPolicy::Model(model),
        }
    }

    fn build(&self, root: &SubproblemState, seed: u64) -> Box<dyn BranchingPolicy> {
        match &self.policy {
            TopPolicy::Spec(PolicySpec::Uniform { seed: s }) => PolicySpec::Uniform { seed: seed ^ s }.build_for(root),
            TopPolicy::Spec(spec) => spec.build_for(root),
            TopPolicy::Model(model) => Box::new(ModelPolicy::new(model.clone(), seed)),
        }
    }
}

fn run_cell(policy: &BenchPolicy, instance: &Instance, config: &RunConfig) -> BenchRecord {
    let root = instance.root(config);
    let mut top = policy.build(&root, config.seed);
    let start = Instant::now();
    let result: Result<ProofTreeStats, DpllError> = hybrid_solve(&root, top.as_mut(), &config.subsolver, config.ell);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(stats) => BenchRecord {
            instance: instance.name.clone(),
            policy: policy.name.clone(),
            tree_size: Some(stats.tree_size),
            decisions: Some(stats.decisions),
            subsolver_calls: Some(stats.subsolver_calls),
            wall_ms,
            outcome: Some(stats.outcome),
            error: None,
        },
        Err(e) => BenchRecord {
            instance: instance.name.clone(),
            policy: policy.name.clone(),
            tree_size: None,
            decisions: None,
            subsolver_calls: None,
            wall_ms,
            outcome: None,
            error: Some(e.to_string()),
        },
    }
}

/// Hybrid solve with the model's argmax policy above `ell` and the
/// configured subsolver below.
pub fn evaluate_incumbent(model: Arc<dyn PriorModel>, instances: &InstanceSet, config: &RunConfig) -> Vec<BenchRecord> {
    let policy = BenchPolicy::model(model.name(), model);
    instances
        .instances
        .par_iter()
        .map(|inst| run_cell(&policy, inst, config))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub completed: usize,
    pub failed: usize,
    pub mean_tree_size: Option<f64>,
    /// Baseline mean divided by this policy's mean.
    pub reduction_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub summary: Vec<SummaryRow>,
}

pub fn mean_tree_size(records: &[BenchRecord]) -> Option<f64> {
    let sizes: Vec<f64> = records.iter().filter_map(|r| r.tree_size).map(|s| s as f64).collect();
    (!sizes.is_empty()).then(|| sizes.iter().sum::<f64>() / sizes.len() as f64)
}

/// Runs every policy on every instance. Records are ordered by policy, then
/// instance.
pub fn bench(policies: &[BenchPolicy], instances: &InstanceSet, config: &RunConfig) -> BenchReport {
    let mut records = Vec::new();
    for policy in policies {
        let rows: Vec<BenchRecord> = instances
            .instances
            .par_iter()
            .map(|inst| run_cell(policy, inst, config))
            .collect();
        records.extend(rows);
    }
    let mut summary: Vec<SummaryRow> = policies
        .iter()
        .map(|p| {
            let rows: Vec<BenchRecord> = records.iter().filter(|r| r.policy == p.name).cloned().collect();
            let completed = rows.iter().filter(|r| r.tree_size.is_some()).count();
            SummaryRow {
                policy: p.name.clone(),
                completed,
                failed: rows.len() - completed,
                mean_tree_size: mean_tree_size(&rows),
                reduction_ratio: None,
            }
        })
        .collect();
    let baseline = summary
        .iter()
        .find(|r| r.policy == config.baseline)
        .and_then(|r| r.mean_tree_size);
    for row in &mut summary {
        row.reduction_ratio = baseline.zip(row.mean_tree_size).map(|(b, m)| b / m);
    }
    BenchReport { records, summary }
}

/// The default bench line-up: uniform (the baseline), JW and fixed order,
/// each above the subsolver.
pub fn default_policies() -> Vec<BenchPolicy> {
    vec![
        BenchPolicy::spec("uniform", PolicySpec::Uniform { seed: 0 }),
        BenchPolicy::spec("jw", PolicySpec::Jw),
        BenchPolicy::spec("fixed", PolicySpec::Fixed),
    ]
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_bench_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in records {
        w.write_record([
            r.instance.clone(),
            r.policy.clone(),
            opt(&r.tree_size),
            opt(&r.decisions),
            opt(&r.subsolver_calls),
            format!("{:.3}", r.wall_ms),
            r.outcome.map(|o| format!("{o:?}").to_lowercase()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: W, summary: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in summary {
        w.write_record([
            r.policy.clone(),
            r.completed.to_string(),
            r.failed.to_string(),
            r.mean_tree_size.map(|m| format!("{m:.3}")).unwrap_or_default(),
            r.reduction_ratio.map(|m| format!("{m:.2}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub instance: String,
    pub tree_size: Option<u64>,
    pub commitments: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainMetrics {
    pub episodes: Vec<EpisodeSummary>,
    pub before: Vec<BenchRecord>,
    pub after: Vec<BenchRecord>,
    pub failures: usize,
}

pub struct TrainOutcome {
    pub model: TableModel,
    pub records: Vec<TrainingRecord>,
    pub metrics: TrainMetrics,
}

/// One episode per instance with `incumbent` as prior (and `value` as value
/// model), then a table fitted to all records. The table falls back to the
/// incumbent at unseen states.
pub fn train_iteration(
    instances: &InstanceSet,
    config: &RunConfig,
    incumbent: Arc<dyn PriorModel>,
    value: Option<Arc<dyn ValueModel>>,
) -> Result<TrainOutcome, HarnessError> {
    let mcfs = config.mcfs();
    let results: Vec<Result<crate::mcfs::Episode, McfsError>> = instances
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            run_episode(
                &inst.root(config),
                incumbent.as_ref(),
                value.as_deref(),
                &config.subsolver,
                &mcfs,
                instance_seed(config.seed, i),
            )
        })
        .collect();

    let mut records = Vec::new();
    let mut episodes = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (inst, result) in instances.instances.iter().zip(results) {
        match result {
            Ok(ep) => {
                episodes.push(EpisodeSummary {
                    instance: inst.name.clone(),
                    tree_size: Some(ep.tree_size),
                    commitments: ep.trace.len(),
                    error: None,
                });
                records.extend(ep.records);
            }
            Err(e) => {
                failures += 1;
                episodes.push(EpisodeSummary {
                    instance: inst.name.clone(),
                    tree_size: None,
                    commitments: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if failures * 2 > instances.len() {
        return Err(HarnessError::TooManyFailures {
            failed: failures,
            total: instances.len(),
        });
    }
    let model = fit_table(&records, incumbent.clone())?;
    let before = evaluate_incumbent(incumbent, instances, config);
    let after = evaluate_incumbent(Arc::new(model.clone()), instances, config);
    Ok(TrainOutcome {
        model,
        records,
        metrics: TrainMetrics {
            episodes,
            before,
            after,
            failures,
        },
    })
}

/// Labelled states for value fitting: `per_instance` random descendants of
/// each root at depths up to `config.ell`, each paired with the log2 of its
/// subsolver tree size.
pub fn value_samples(
    instances: &InstanceSet,
    config: &RunConfig,
    per_instance: usize,
) -> Result<Vec<(SubproblemState, f64)>, HarnessError> {
    let per: Vec<Result<Vec<(SubproblemState, f64)>, HarnessError>> = instances
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(config.seed, i));
            let mut out = Vec::with_capacity(per_instance);
            for _ in 0..per_instance {
                let mut state = inst.root(config);
                let depth = rng.gen_range(0..=config.ell);
                for _ in 0..depth {
                    let vars = state.candidate_vars();
                    if !state.is_open() || vars.is_empty() {
                        break;
                    }
                    let var = vars[rng.gen_range(0..vars.len())];
                    state = state
                        .transition(Literal::new(var, rng.gen()))
                        .map_err(McfsError::from)?;
                }
                if state.is_open() {
                    let size = config.subsolver.tree_size(&state)?;
                    out.push((state, (size as f64).log2()));
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for p in per {
        all.extend(p?);
    }
    Ok(all)
}

/// Fits a [`LinearValueModel`] to [`value_samples`].
pub fn fit_value_model(
    instances: &InstanceSet,
    config: &RunConfig,
    per_instance: usize,
    ridge: f64,
) -> Result<LinearValueModel, HarnessError> {
    Ok(LinearValueModel::fit(
        &value_samples(instances, config, per_instance)?,
        ridge,
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Cumulative expanded nodes when the incumbent was measured.
    pub budget: u64,
    pub tree_size: u64,
}

/// Incumbent tree size against expanded-node budget for one variant. The
/// first point is the incumbent before any rollout; afterwards a point is
/// taken each time the budget crosses a multiple of `config.cadence`.
pub fn convergence_curve(
    root: &SubproblemState,
    variant: RolloutVariant,
    prior: &dyn PriorModel,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<CurvePoint>, McfsError> {
    let mut mcfs = config.mcfs();
    mcfs.variant = variant;
    let mut engine = Engine::new(mcfs, prior, None, config.subsolver.clone(), seed);
    let mut points = vec![CurvePoint {
        budget: 0,
        tree_size: engine.incumbent_tree_size(root)?,
    }];
    if !(root.is_open() && root.decision_depth() < config.ell) {
        return Ok(points);
    }
    engine.prepare_root(root)?;
    let mut next = config.cadence;
    while engine.stats().expanded < config.budget {
        engine.rollout(root)?;
        let spent = engine.stats().expanded;
        if spent >= next || spent >= config.budget {
            points.push(CurvePoint {
                budget: spent,
                tree_size: engine.incumbent_tree_size(root)?,
            });
            while next <= spent {
                next += config.cadence;
            }
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceCurves {
    pub instance: String,
    pub knuth: Vec<CurvePoint>,
    pub full: Vec<CurvePoint>,
    pub min: u64,
    pub max: u64,
}

/// Level the normalized curves are compared at.
pub const REACH_LEVEL: f64 = 0.5;

impl InstanceCurves {
    pub fn new(instance: String, knuth: Vec<CurvePoint>, full: Vec<CurvePoint>) -> Self {
        let sizes = knuth.iter().chain(&full).map(|p| p.tree_size);
        let min = sizes.clone().min().unwrap_or(0);
        let max = sizes.max().unwrap_or(0);
        InstanceCurves {
            instance,
            knuth,
            full,
            min,
            max,
        }
    }

    /// `(size - min) / (max - min)`, zero when the two coincide.
    pub fn normalize(&self, size: u64) -> f64 {
        if self.max == self.min {
            0.0
        } else {
            (size - self.min) as f64 / (self.max - self.min) as f64
        }
    }

    pub fn normalized(&self, variant: RolloutVariant) -> Vec<(u64, f64)> {
        self.points(variant)
            .iter()
            .map(|p| (p.budget, self.normalize(p.tree_size)))
            .collect()
    }

    fn points(&self, variant: RolloutVariant) -> &[CurvePoint] {
        match variant {
            RolloutVariant::Knuth => &self.knuth,
            RolloutVariant::FullTree => &self.full,
        }
    }

    /// Budget at which the variant's normalized size first drops to
    /// [`REACH_LEVEL`].
    pub fn reach(&self, variant: RolloutVariant) -> Option<u64> {
        self.normalized(variant)
            .into_iter()
            .find(|&(_, v)| v <= REACH_LEVEL)
            .map(|(b, _)| b)
    }

    /// Whether the two variants started from different sizes, i.e. the
    /// normalization is informative.
    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    /// Knuth reaches the level within `ratio` times the full variant's
    /// budget (any budget counts when the full variant never gets there).
    pub fn knuth_within(&self, ratio: f64) -> bool {
        match (self.reach(RolloutVariant::Knuth), self.reach(RolloutVariant::FullTree)) {
            (Some(k), Some(f)) => k as f64 <= ratio * f as f64,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }

    /// Normalized value in effect at `budget` (last point at or before it).
    pub fn value_at(&self, variant: RolloutVariant, budget: u64) -> f64 {
        let pts = self.points(variant);
        let p = pts.iter().take_while(|p| p.budget <= budget).last().unwrap_or(&pts[0]);
        self.normalize(p.tree_size)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveBand {
    pub budget: u64,
    pub mean: f64,
    /// Half-width of the normal 95% interval of the mean.
    pub half_width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub instances: Vec<InstanceCurves>,
    pub knuth: Vec<CurveBand>,
    pub full: Vec<CurveBand>,
}

impl EfficiencyReport {
    /// Fraction of instances on which Knuth reaches the level within `ratio`
    /// times the full variant's budget.
    pub fn knuth_win_rate(&self, ratio: f64) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().filter(|c| c.knuth_within(ratio)).count() as f64 / self.instances.len() as f64
    }
}

fn band(curves: &[InstanceCurves], variant: RolloutVariant, grid: &[u64]) -> Vec<CurveBand> {
    grid.iter()
        .map(|&b| {
            let xs: Vec<f64> = curves.iter().map(|c| c.value_at(variant, b)).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            CurveBand {
                budget: b,
                mean,
                half_width: 1.96 * (var / n).sqrt(),
            }
        })
        .collect()
}

/// Runs both variants on every instance with the uniform prior and
/// normalizes each instance's curves by their joint min and max.
pub fn knuth_efficiency_experiment(
    instances: &InstanceSet,
    config: &RunConfig,
    prior: &dyn PriorModel,
) -> Result<EfficiencyReport, HarnessError> {
    let curves: Vec<Result<InstanceCurves, McfsError>> = instances
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let root = inst.root(config);
            let seed = instance_seed(config.seed, i);
            let knuth = convergence_curve(&root, RolloutVariant::Knuth, prior, config, seed)?;
            let full = convergence_curve(&root, RolloutVariant::FullTree, prior, config, seed)?;
            Ok(InstanceCurves::new(inst.name.clone(), knuth, full))
        })
        .collect();
    let curves = curves.into_iter().collect::<Result<Vec<_>, _>>()?;
    let grid: Vec<u64> = (0..=config.budget / config.cadence)
        .map(|i| i * config.cadence)
        .collect();
    Ok(EfficiencyReport {
        knuth: band(&curves, RolloutVariant::Knuth, &grid),
        full: band(&curves, RolloutVariant::FullTree, &grid),
        instances: curves,
    })
}

/// Column order of efficiency curve CSV files.
pub const CURVE_HEADER: [&str; 5] = ["variant", "budget", "mean", "ci_low", "ci_high"];

pub fn write_curves_csv<W: Write>(out: W, report: &EfficiencyReport) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for (name, bands) in [("knuth", &report.knuth), ("full_tree", &report.full)] {
        for b in bands {
            w.write_record([
                name.to_string(),
                b.budget.to_string(),
                format!("{:.6}", b.mean),
                format!("{:.6}", b.mean - b.half_width),
                format!("{:.6}", b.mean + b.half_width),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
