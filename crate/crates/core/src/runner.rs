//! Monte-Carlo experiments: repeated simulated audits, budget and agent-count
//! sweeps, and closed-form comparisons, all with deterministic seeding.
//!
//! Every repetition owns independent random streams derived from the base seed, so
//! results do not depend on how repetitions are scheduled across threads. Within a
//! repetition the no-collaboration and a-posteriori strategies (and, for uniform
//! sampling, the a-priori strategy) are evaluated on the same simulated queries,
//! since their plans are identical; this common-random-numbers design sharpens the
//! comparison between strategies.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, AllocationPlan, CollabStrategy, SamplingMethod};
use crate::bounds::{
    closed_form_agent_errors, estimator_sd, verify_relations, BoundsOptions, NeymanCoordinated,
    RelationReport,
};
use crate::datamodel::{BudgetSpec, WeightModel};
use crate::dataset::{ingest_path, DatasetSchema, Population, QueryModel, QuerySampler};
use crate::error::{Error, Result};
use crate::estimation::{evaluate_audit, AuditOutcome, QueryLog};

fn default_methods() -> Vec<SamplingMethod> {
    SamplingMethod::ALL.to_vec()
}

fn default_strategies() -> Vec<CollabStrategy> {
    CollabStrategy::ALL.to_vec()
}

fn default_budgets() -> Vec<u64> {
    vec![250]
}

fn default_reps() -> usize {
    300
}

fn default_true() -> bool {
    true
}

/// Everything an experiment needs; loadable from TOML, with CLI flags layered on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV file holding the dataset.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Bundled schema name or path to a schema TOML file.
    #[serde(default)]
    pub schema: Option<String>,
    /// Audited attribute names, in agent order; all schema attributes when absent.
    #[serde(default)]
    pub attrs: Option<Vec<String>>,
    #[serde(default = "default_methods")]
    pub methods: Vec<SamplingMethod>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<CollabStrategy>,
    /// Per-agent budgets `R`; single audits use the first.
    #[serde(default = "default_budgets")]
    pub budgets: Vec<u64>,
    /// Agent counts; empty means "as many agents as audited attributes".
    #[serde(default)]
    pub agents: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub weights: WeightModel,
    #[serde(default)]
    pub query_model: QueryModel,
    #[serde(default)]
    pub neyman_coordinated: NeymanCoordinated,
    /// Sweeps average over every attribute subset of the requested size; when
    /// false they use the first `m` attributes only.
    #[serde(default = "default_true")]
    pub combinations: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            schema: None,
            attrs: None,
            methods: default_methods(),
            strategies: default_strategies(),
            budgets: default_budgets(),
            agents: Vec::new(),
            reps: default_reps(),
            seed: 0,
            out: None,
            weights: WeightModel::default(),
            query_model: QueryModel::default(),
            neyman_coordinated: NeymanCoordinated::default(),
            combinations: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read '{}': {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::Config("budgets must be a non-empty list of positive integers".into()));
        }
        if self.agents.contains(&0) {
            return Err(Error::Config("agent counts must be positive".into()));
        }
        if self.methods.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("at least one method and one strategy are required".into()));
        }
        if let Some(attrs) = &self.attrs {
            if let Some(&m) = self.agents.iter().max() {
                if m > attrs.len() {
                    return Err(Error::Config(format!(
                        "{m} agents requested but only {} attributes selected",
                        attrs.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn bounds_options(&self) -> BoundsOptions {
        BoundsOptions {
            weights: self.weights,
            neyman_coordinated: self.neyman_coordinated,
        }
    }

    fn pairs(&self) -> Vec<(SamplingMethod, CollabStrategy)> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &strategy in &self.strategies {
                if !out.contains(&(method, strategy)) {
                    out.push((method, strategy));
                }
            }
        }
        out.sort();
        out
    }
}

/// Ingest the configured dataset and restrict it to the configured attributes.
pub fn load_population(config: &ExperimentConfig) -> Result<Population> {
    let dataset = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    let schema_ref = config
        .schema
        .as_ref()
        .ok_or_else(|| Error::Config("no schema given".into()))?;
    let schema = DatasetSchema::resolve(schema_ref)?;
    let population = ingest_path(dataset, &schema)?;
    select_attributes(&population, config.attrs.as_deref())
}

/// Project a population onto named attributes (in the given order).
pub fn select_attributes(population: &Population, names: Option<&[String]>) -> Result<Population> {
    let Some(names) = names else {
        return Ok(population.clone());
    };
    let indices = names
        .iter()
        .map(|n| {
            population.attribute_index(n).ok_or_else(|| {
                Error::Config(format!(
                    "unknown attribute '{n}' (available: {})",
                    population.attribute_names().join(", ")
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    population.project(&indices)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of repetition `rep`: `splitmix64(base ^ splitmix64(rep))`.
pub fn repetition_seed(base: u64, rep: u64) -> u64 {
    splitmix64(base ^ splitmix64(rep))
}

/// Independent stream for one simulated design inside a repetition.
fn design_rng(rep_seed: u64, method: SamplingMethod, coordinated: bool) -> ChaCha8Rng {
    let tag = (method as u64) << 1 | u64::from(coordinated);
    ChaCha8Rng::seed_from_u64(splitmix64(rep_seed ^ splitmix64(0xA0D1_7000 + tag)))
}

/// Send every query of a plan to the black box.
pub fn simulate_plan(
    sampler: &QuerySampler<'_>,
    plan: &AllocationPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QueryLog>> {
    let m = sampler.population().num_attributes();
    plan.cells
        .iter()
        .enumerate()
        .map(|(agent, cells)| {
            let mut log = QueryLog::new(m, Some(agent));
            for &(cell, count) in cells {
                for _ in 0..count {
                    let (k, y) = sampler.query(cell, rng)?;
                    log.record(k, y);
                }
            }
            Ok(log)
        })
        .collect()
}

/// One (repetition, pair) result; failures are kept rather than aborting the run.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRecord {
    pub repetition: usize,
    pub method: SamplingMethod,
    pub strategy: CollabStrategy,
    pub outcome: std::result::Result<AuditOutcome, String>,
}

/// Plans for every requested pair; a pair whose allocation fails carries the error.
struct Plans {
    entries: Vec<(SamplingMethod, CollabStrategy, std::result::Result<AllocationPlan, String>)>,
}

impl Plans {
    fn build(population: &Population, budget: BudgetSpec, config: &ExperimentConfig) -> Self {
        let gt = population.ground_truth();
        let entries = config
            .pairs()
            .into_iter()
            .map(|(method, strategy)| {
                let plan = allocate(method, strategy, gt, budget, config.weights)
                    .map_err(|e| format!("{method}/{strategy}: {e}"));
                (method, strategy, plan)
            })
            .collect();
        Self { entries }
    }
}

fn run_repetition(
    population: &Population,
    sampler: &QuerySampler<'_>,
    plans: &Plans,
    weights: WeightModel,
    rep_seed: u64,
    repetition: usize,
) -> Vec<AuditRecord> {
    let gt = population.ground_truth();
    // logs shared between pairs whose plans coincide: (method, coordinated) -> logs
    type SharedLogs = std::result::Result<Vec<QueryLog>, String>;
    let mut cache: Vec<((SamplingMethod, bool), SharedLogs)> = Vec::new();
    plans
        .entries
        .iter()
        .map(|(method, strategy, plan)| {
            let outcome = plan.as_ref().map_err(Clone::clone).and_then(|plan| {
                let coordinated =
                    *strategy == CollabStrategy::APriori && *method != SamplingMethod::Uniform;
                let key = (*method, coordinated);
                let logs = match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, logs)) => logs.clone(),
                    None => {
                        let mut rng = design_rng(rep_seed, *method, coordinated);
                        let logs = simulate_plan(sampler, plan, &mut rng)
                            .map_err(|e| format!("{method}/{strategy}: {e}"));
                        cache.push((key, logs.clone()));
                        logs
                    }
                }?;
                evaluate_audit(&logs, *method, *strategy, gt, weights)
                    .map_err(|e| format!("{method}/{strategy}: {e}"))
            });
            AuditRecord {
                repetition,
                method: *method,
                strategy: *strategy,
                outcome,
            }
        })
        .collect()
}

fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Repeated audits of one population at one per-agent budget, one agent per attribute.
///
/// Records come back ordered by repetition, then pair.
pub fn run_audit(
    population: &Population,
    per_agent: u64,
    config: &ExperimentConfig,
) -> Result<Vec<AuditRecord>> {
    config.validate()?;
    let budget = BudgetSpec::new(per_agent, population.num_attributes())?;
    let sampler = QuerySampler::new(population, config.query_model);
    let plans = Plans::build(population, budget, config);
    let reps: Vec<usize> = (0..config.reps).collect();
    let chunks = parallel_map(reps, |rep| {
        run_repetition(
            population,
            &sampler,
            &plans,
            config.weights,
            repetition_seed(config.seed, rep as u64),
            rep,
        )
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean average error of one pair over repetitions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairSummary {
    pub method: SamplingMethod,
    pub strategy: CollabStrategy,
    pub mean_error: f64,
    /// Standard error of `mean_error` across repetitions.
    pub std_error: f64,
    pub repetitions: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

pub fn summarize(records: &[AuditRecord]) -> Vec<PairSummary> {
    let mut pairs: Vec<(SamplingMethod, CollabStrategy)> =
        records.iter().map(|r| (r.method, r.strategy)).collect();
    pairs.sort();
    pairs.dedup();
    pairs
        .into_iter()
        .map(|(method, strategy)| {
            let mut errors = Vec::new();
            let mut failures = 0;
            let mut first_failure = None;
            for r in records.iter().filter(|r| r.method == method && r.strategy == strategy) {
                match &r.outcome {
                    Ok(o) => errors.push(o.average_error),
                    Err(e) => {
                        failures += 1;
                        first_failure.get_or_insert_with(|| e.clone());
                    }
                }
            }
            let (mean, se) = mean_and_se(&errors);
            PairSummary {
                method,
                strategy,
                mean_error: mean,
                std_error: se,
                repetitions: errors.len(),
                failures,
                first_failure,
            }
        })
        .collect()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Write per-agent audit rows in long format.
pub fn write_audit_csv<W: Write>(
    out: W,
    population: &Population,
    records: &[AuditRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "repetition",
        "method",
        "strategy",
        "agent",
        "attribute",
        "dp_true",
        "dp_estimate",
        "abs_error",
        "R_i",
        "R_i_bar",
    ])?;
    for r in records {
        if let Ok(outcome) = &r.outcome {
            for a in &outcome.agents {
                w.write_record([
                    r.repetition.to_string(),
                    r.method.to_string(),
                    r.strategy.to_string(),
                    a.agent.to_string(),
                    population.attribute_names()[a.agent].clone(),
                    format!("{:.12}", a.dp_true),
                    format!("{:.12}", a.dp_estimate),
                    format!("{:.12}", a.abs_error),
                    a.r1.to_string(),
                    a.r0.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: W, summaries: &[PairSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "strategy", "mean_error", "std_error", "repetitions", "failures"])?;
    for s in summaries {
        w.write_record([
            s.method.to_string(),
            s.strategy.to_string(),
            format!("{:.12}", s.mean_error),
            format!("{:.12}", s.std_error),
            s.repetitions.to_string(),
            s.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One point of a sweep curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// Per-agent budget `R`.
    pub budget: u64,
    /// Number of agents `m`.
    pub agents: usize,
    pub method: SamplingMethod,
    pub strategy: CollabStrategy,
    /// Mean over attribute subsets of the per-subset mean average error.
    pub mean_error: f64,
    /// Standard error of `mean_error` (subset means treated as independent).
    pub std_error: f64,
    pub subsets: usize,
    pub failures: usize,
}

/// All `k`-element index subsets of `0..n`, in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

fn subset_seed(base: u64, subset: &[usize], per_agent: u64) -> u64 {
    subset
        .iter()
        .fold(splitmix64(base ^ splitmix64(per_agent)), |acc, &i| {
            splitmix64(acc ^ (i as u64 + 1))
        })
}

/// Audit every requested subset size and budget, averaging over subsets.
fn sweep(population: &Population, config: &ExperimentConfig, budgets: &[u64], agent_counts: &[usize]) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let a = population.num_attributes();
    let mut rows = Vec::new();
    for &m in agent_counts {
        if m == 0 || m > a {
            return Err(Error::Config(format!(
                "{m} agents requested but {a} attributes available"
            )));
        }
        let subsets = if config.combinations {
            combinations(a, m)
        } else {
            vec![(0..m).collect()]
        };
        for &r in budgets {
            let mut per_pair: Vec<((SamplingMethod, CollabStrategy), Vec<f64>, usize)> = Vec::new();
            for subset in &subsets {
                let sub = population.project(subset)?;
                let sub_config = ExperimentConfig {
                    seed: subset_seed(config.seed, subset, r),
                    ..config.clone()
                };
                let records = run_audit(&sub, r, &sub_config)?;
                for s in summarize(&records) {
                    let key = (s.method, s.strategy);
                    let idx = match per_pair.iter().position(|(k, _, _)| *k == key) {
                        Some(i) => i,
                        None => {
                            per_pair.push((key, Vec::new(), 0));
                            per_pair.len() - 1
                        }
                    };
                    if s.repetitions > 0 {
                        per_pair[idx].1.push(s.mean_error);
                    }
                    per_pair[idx].2 += s.failures;
                }
            }
            for ((method, strategy), means, failures) in per_pair {
                let (mean, se) = mean_and_se(&means);
                rows.push(SweepRow {
                    budget: r,
                    agents: m,
                    method,
                    strategy,
                    mean_error: mean,
                    std_error: se,
                    subsets: means.len(),
                    failures,
                });
            }
        }
    }
    Ok(rows)
}

/// Error curves over per-agent budgets at a fixed agent count (the first of
/// `config.agents`, or all attributes).
pub fn sweep_budget(population: &Population, config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let m = config.agents.first().copied().unwrap_or(population.num_attributes());
    sweep(population, config, &config.budgets, &[m])
}

/// Error curves over agent counts at a fixed budget (the first of `config.budgets`).
pub fn sweep_agents(population: &Population, config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let agents: Vec<usize> = if config.agents.is_empty() {
        (1..=population.num_attributes()).collect()
    } else {
        config.agents.clone()
    };
    sweep(population, config, &config.budgets[..1], &agents)
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "budget",
        "agents",
        "method",
        "strategy",
        "mean_error",
        "std_error",
        "subsets",
        "failures",
    ])?;
    for r in rows {
        w.write_record([
            r.budget.to_string(),
            r.agents.to_string(),
            r.method.to_string(),
            r.strategy.to_string(),
            format!("{:.12}", r.mean_error),
            format!("{:.12}", r.std_error),
            r.subsets.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Closed-form error of a pair next to its Monte-Carlo counterparts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalComparison {
    pub method: SamplingMethod,
    pub strategy: CollabStrategy,
    /// Closed-form `eps(I)`.
    pub closed_form: f64,
    /// Mean over agents of the closed-form standard deviation of `D_hat_i`.
    pub closed_form_sd: f64,
    /// Mean over agents of the standard deviation of `D_hat_i` across repetitions.
    pub empirical_sd: f64,
    /// Mean average absolute error across repetitions.
    pub empirical_mean_abs: f64,
    /// `empirical_sd / closed_form_sd - 1`.
    pub relative_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsCheck {
    pub report: RelationReport,
    pub closed_form: Vec<(SamplingMethod, CollabStrategy, f64)>,
    pub empirical: Vec<EmpiricalComparison>,
}

/// Relations on the population's own ground truth, plus (when `config.reps > 0`)
/// the empirical spread of the simulator against the closed forms.
pub fn bounds_check(population: &Population, config: &ExperimentConfig) -> Result<BoundsCheck> {
    config.validate()?;
    let per_agent = config.budgets[0];
    let budget = BudgetSpec::new(per_agent, population.num_attributes())?;
    let gt = population.ground_truth();
    let options = config.bounds_options();
    let report = verify_relations(gt, budget, options)?;
    let closed_form = crate::bounds::closed_form_table(gt, budget, options)?;
    let records = run_audit(population, per_agent, config)?;
    let mut empirical = Vec::new();
    for s in summarize(&records) {
        let agent_eps =
            closed_form_agent_errors(s.method, s.strategy, gt, budget, options)?;
        let outcomes: Vec<&AuditOutcome> = records
            .iter()
            .filter(|r| r.method == s.method && r.strategy == s.strategy)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        if outcomes.len() < 2 {
            continue;
        }
        let m = agent_eps.len();
        let sd = (0..m)
            .map(|i| {
                let estimates: Vec<f64> = outcomes.iter().map(|o| o.agents[i].dp_estimate).collect();
                let (_, se) = mean_and_se(&estimates);
                se * (estimates.len() as f64).sqrt()
            })
            .sum::<f64>()
            / m as f64;
        let cf = agent_eps.iter().sum::<f64>() / m as f64;
        let cf_sd = estimator_sd(s.method, s.strategy, gt, budget, options)?
            .iter()
            .sum::<f64>()
            / m as f64;
        empirical.push(EmpiricalComparison {
            method: s.method,
            strategy: s.strategy,
            closed_form: cf,
            closed_form_sd: cf_sd,
            empirical_sd: sd,
            empirical_mean_abs: s.mean_error,
            relative_gap: sd / cf_sd - 1.0,
        });
    }
    Ok(BoundsCheck {
        report,
        closed_form,
        empirical,
    })
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[EmpiricalComparison]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "strategy",
        "closed_form_error",
        "closed_form_sd",
        "empirical_sd",
        "empirical_mean_abs_error",
        "relative_gap",
    ])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.strategy.to_string(),
            format!("{:.12}", r.closed_form),
            format!("{:.12}", r.closed_form_sd),
            format!("{:.12}", r.empirical_sd),
            format!("{:.12}", r.empirical_mean_abs),
            format!("{:.6}", r.relative_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}
