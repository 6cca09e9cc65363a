//! Acceptance criteria, one pass/fail line each.
//!
//! Runs as a plain binary (`harness = false`) so that every criterion is
//! evaluated and reported even when an earlier one fails; the process exits
//! non-zero if any criterion fails. Tolerances are fixed here and must not be
//! loosened to turn a line green.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fairaudit::allocation::{neyman_joint, neyman_two_group, CollabStrategy, SamplingMethod};
use fairaudit::bounds::{
    asymptotic_scan, closed_form_error, estimator_sd, BoundsOptions, NeymanCoordinated,
    SyntheticTemplate,
};
use fairaudit::datamodel::{BudgetSpec, GroundTruth, WeightModel};
use fairaudit::dataset::{ingest_path, DatasetSchema, Population};
use fairaudit::runner::{run_audit, summarize, sweep_budget, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use CollabStrategy::{APosteriori, APriori, NoCollab};
use SamplingMethod::{Neyman, Stratified, Uniform};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn load(dataset: &str, schema: &str) -> Result<Population, String> {
    let path = data_dir().join(dataset);
    if !path.is_file() {
        return Err(format!("dataset not present at {}", path.display()));
    }
    let schema = DatasetSchema::bundled(schema).map_err(|e| e.to_string())?;
    ingest_path(&path, &schema).map_err(|e| e.to_string())
}

fn ensure(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

/// Random instance: `m` independent attributes with random marginals and an
/// independent random positive rate per stratum.
fn random_instance(rng: &mut ChaCha8Rng, m: usize) -> GroundTruth {
    let marginals: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..0.9)).collect();
    let rates: Vec<f64> = (0..1usize << m).map(|_| rng.gen_range(0.05..0.95)).collect();
    GroundTruth::synthetic(&marginals, &rates).expect("valid synthetic instance")
}

fn eps(method: SamplingMethod, strategy: CollabStrategy, gt: &GroundTruth, budget: BudgetSpec, options: BoundsOptions) -> f64 {
    closed_form_error(method, strategy, gt, budget, options).expect("closed form")
}

// 1 -----------------------------------------------------------------------

const PUBLISHED_PROPUBLICA: [(SamplingMethod, CollabStrategy, f64); 9] = [
    (Uniform, NoCollab, 0.054),
    (Uniform, APosteriori, 0.024),
    (Uniform, APriori, 0.024),
    (Stratified, NoCollab, 0.048),
    (Stratified, APosteriori, 0.023),
    (Stratified, APriori, 0.032),
    (Neyman, NoCollab, 0.048),
    (Neyman, APosteriori, 0.023),
    (Neyman, APriori, 0.022),
];
const PUBLISHED_TOL: f64 = 0.006;
const PUBLISHED_RUNTIME: Duration = Duration::from_secs(120);

fn propublica_published_errors() -> Outcome {
    let population = load("propublica/compas-scores-two-years.csv", "propublica")?;
    let config = ExperimentConfig::default();
    let start = Instant::now();
    let records = run_audit(&population, 250, &config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summaries = summarize(&records);
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    let mut failures = 0;
    for (method, strategy, expected) in PUBLISHED_PROPUBLICA {
        let s = summaries
            .iter()
            .find(|s| s.method == method && s.strategy == strategy)
            .ok_or_else(|| format!("{method}/{strategy} missing"))?;
        failures += s.failures;
        worst = worst.max((s.mean_error - expected).abs());
        cells.push(format!("{method}/{strategy}={:.4}", s.mean_error));
    }
    let mean = |m, s| summaries.iter().find(|x| x.method == m && x.strategy == s).unwrap().mean_error;
    let ordering = mean(Stratified, APosteriori) < mean(Stratified, APriori);
    let detail = format!(
        "{} reps in {:.1}s, max |diff| {worst:.4} (tol {PUBLISHED_TOL}), stratified aposteriori<apriori: {ordering}; {}",
        config.reps,
        elapsed.as_secs_f64(),
        cells.join(" ")
    );
    ensure(
        worst <= PUBLISHED_TOL && ordering && failures == 0 && elapsed < PUBLISHED_RUNTIME,
        detail.clone(),
        format!("{detail}; failed repetitions {failures}"),
    )
}

// 2 -----------------------------------------------------------------------

fn uniform_pooling_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let options = BoundsOptions::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.gen_range(1..=8);
        let gt = random_instance(&mut rng, m);
        let budget = BudgetSpec::new(rng.gen_range(10..=1000), m).unwrap();
        let nc = eps(Uniform, NoCollab, &gt, budget, options);
        let post = eps(Uniform, APosteriori, &gt, budget, options);
        let prio = eps(Uniform, APriori, &gt, budget, options);
        let target = nc / (m as f64).sqrt();
        worst = worst
            .max((prio - post).abs() / post)
            .max((post - target).abs() / target);
    }
    let gt = random_instance(&mut rng, 4);
    let budget = BudgetSpec::new(250, 4).unwrap();
    let factor = eps(Uniform, APriori, &gt, budget, options) / eps(Uniform, NoCollab, &gt, budget, options);
    let detail = format!("100 instances, max relative deviation {worst:.2e} (tol 1e-9); m=4 factor {factor:.15}");
    ensure(worst <= 1e-9 && (factor - 0.5).abs() <= 1e-9, detail.clone(), detail)
}

// 3 -----------------------------------------------------------------------

struct SlackTally {
    name: &'static str,
    violations: usize,
    min_slack: f64,
}

impl SlackTally {
    fn new(name: &'static str) -> Self {
        Self { name, violations: 0, min_slack: f64::INFINITY }
    }
    fn record(&mut self, lhs: f64, rhs: f64) {
        let slack = (rhs - lhs) / rhs.abs().max(f64::MIN_POSITIVE);
        // Exactly tight relations (a single agent, or m=1 scaled) are evaluated
        // in floating point; allow for the last few ulps.
        if slack < -1e-12 {
            self.violations += 1;
        }
        self.min_slack = self.min_slack.min(slack);
    }
    fn render(&self) -> String {
        format!("{} {} violations (min rel. slack {:+.2e})", self.name, self.violations, self.min_slack)
    }
}

fn inequality_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let joint = BoundsOptions::default();
    let scaled = BoundsOptions { neyman_coordinated: NeymanCoordinated::ScaledPerAgent, ..joint };
    let mut neyman_coord = SlackTally::new("neyman/apriori<=neyman/nocollab/sqrt(m)");
    let mut neyman_right = SlackTally::new("neyman/nocollab/sqrt(m)<=uniform/nocollab");
    let mut neyman_pool = SlackTally::new("neyman/aposteriori<=neyman/nocollab");
    let mut strat_pool = SlackTally::new("stratified/aposteriori<=stratified/nocollab");
    let mut scaled_coord = SlackTally::new("[per-agent scaled variant] neyman/apriori<=neyman/nocollab/sqrt(m)");
    let mut dominance_s = SlackTally::new("[joint optimum] neyman/apriori<=stratified/apriori");
    let mut dominance_u = SlackTally::new("[joint optimum] neyman/apriori<=uniform/apriori");
    for _ in 0..1000 {
        let m = rng.gen_range(2..=6);
        let gt = random_instance(&mut rng, m);
        let budget = BudgetSpec::new(rng.gen_range(50..=1000), m).unwrap();
        let sqrt_m = (m as f64).sqrt();
        let n_nc = eps(Neyman, NoCollab, &gt, budget, joint);
        let n_prio = eps(Neyman, APriori, &gt, budget, joint);
        neyman_coord.record(n_prio, n_nc / sqrt_m);
        neyman_right.record(n_nc / sqrt_m, eps(Uniform, NoCollab, &gt, budget, joint));
        neyman_pool.record(eps(Neyman, APosteriori, &gt, budget, joint), n_nc);
        strat_pool.record(eps(Stratified, APosteriori, &gt, budget, joint), eps(Stratified, NoCollab, &gt, budget, joint));
        scaled_coord.record(eps(Neyman, APriori, &gt, budget, scaled), n_nc / sqrt_m);
        dominance_s.record(n_prio, eps(Stratified, APriori, &gt, budget, joint));
        dominance_u.record(n_prio, eps(Uniform, APriori, &gt, budget, joint));
    }
    let required = [&neyman_coord, &neyman_right, &neyman_pool, &strat_pool];
    let ok = required.iter().all(|t| t.violations == 0);
    let detail = [&neyman_coord, &neyman_right, &neyman_pool, &strat_pool, &scaled_coord, &dominance_s, &dominance_u]
        .iter()
        .map(|t| t.render())
        .collect::<Vec<_>>()
        .join("; ");
    ensure(ok, format!("1000 instances: {detail}"), format!("1000 instances: {detail}"))
}

// 4 -----------------------------------------------------------------------

fn fair_model_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let options = BoundsOptions::default();
    let mut worst: f64 = 0.0;
    let mut split_ok = true;
    for _ in 0..200 {
        let m = rng.gen_range(1..=6);
        let marginals: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..0.9)).collect();
        let rate = rng.gen_range(0.05..0.95);
        let gt = GroundTruth::synthetic(&marginals, &vec![rate; 1 << m]).unwrap();
        let r = rng.gen_range(2..=1000);
        let budget = BudgetSpec::new(r, m).unwrap();
        let s = eps(Stratified, NoCollab, &gt, budget, options);
        let n = eps(Neyman, NoCollab, &gt, budget, options);
        worst = worst.max((s - n).abs() / s);
        let sigma = gt.stratum_sigma(0);
        let split = neyman_two_group(sigma, sigma, r).unwrap();
        split_ok &= split.r1 + split.r0 == r && split.r1.abs_diff(split.r0) == r % 2;
    }
    let detail = format!("200 instances, max relative gap {worst:.2e} (tol 1e-9), equal-sigma split R/2 per side: {split_ok}");
    ensure(worst <= 1e-9 && split_ok, detail.clone(), detail)
}

// 5 -----------------------------------------------------------------------

const SCAN_BUDGET: u64 = 250;

fn divergence_trend() -> Outcome {
    let options = BoundsOptions::default();
    let skewed = asymptotic_scan(&SyntheticTemplate::new(0.8, 0.2, 0.8).unwrap(), 1..=12, SCAN_BUDGET, options)
        .map_err(|e| e.to_string())?;
    let balanced = asymptotic_scan(&SyntheticTemplate::new(0.5, 0.2, 0.8).unwrap(), 1..=12, SCAN_BUDGET, options)
        .map_err(|e| e.to_string())?;
    let spr = |scan: &fairaudit::bounds::AsymptoticScan, m| scan.error(m, Stratified, APriori).unwrap();
    let sap = |scan: &fairaudit::bounds::AsymptoticScan, m| scan.error(m, Stratified, APosteriori).unwrap();
    let increasing = (6..12).all(|m| spr(&skewed, m + 1) > spr(&skewed, m));
    let overtakes = (8..=12).all(|m| spr(&skewed, m) > sap(&skewed, m));
    let balanced_flat = (1..12).all(|m| spr(&balanced, m + 1) <= spr(&balanced, m) * (1.0 + 1e-12));
    let detail = format!(
        "P=0.8: stratified/apriori {:.4}(m=6) -> {:.4}(m=12) strictly increasing: {increasing}, above aposteriori from m=8: {overtakes} ({:.4} vs {:.4}); P=0.5: never increases: {balanced_flat} ({:.4} -> {:.4})",
        spr(&skewed, 6),
        spr(&skewed, 12),
        spr(&skewed, 8),
        sap(&skewed, 8),
        spr(&balanced, 1),
        spr(&balanced, 12),
    );
    ensure(increasing && overtakes && balanced_flat, detail.clone(), detail)
}

// 6 -----------------------------------------------------------------------

fn asymptotic_equivalence() -> Outcome {
    let options = BoundsOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (p, y0, y1) in [(0.8, 0.2, 0.8), (0.5, 0.2, 0.8), (0.3, 0.1, 0.6)] {
        let scan = asymptotic_scan(&SyntheticTemplate::new(p, y0, y1).unwrap(), 1..=12, SCAN_BUDGET, options)
            .map_err(|e| e.to_string())?;
        for method in [Neyman, Stratified] {
            let ratios = scan.pooled_ratio(method);
            let at = |m: usize| ratios.iter().find(|(k, _)| *k == m).unwrap().1;
            let last = at(12);
            let in_band = (0.95..=1.0 + 1e-12).contains(&last);
            let monotone = (3..12).all(|m| at(m + 1) >= at(m) - 1e-12);
            ok &= in_band && monotone;
            parts.push(format!("P={p} {method}: {last:.4} monotone={monotone}"));
        }
    }
    let detail = format!("ratio to uniform/aposteriori at m=12 in [0.95,1]: {}", parts.join(", "));
    ensure(ok, detail.clone(), detail)
}

// 7 -----------------------------------------------------------------------

fn two_group_objective(s1: f64, s0: f64, r1: f64, r0: f64) -> f64 {
    s1 / r1.sqrt() + s0 / r0.sqrt()
}

/// Average stratified standard error, evaluated independently of the library
/// from conditional weights and stratum deviations.
fn joint_objective(gt: &GroundTruth, counts: &[f64]) -> f64 {
    let m = gt.num_attributes();
    let mut total = 0.0;
    for attr in 0..m {
        for value in [false, true] {
            let var: f64 = gt
                .group_weights(attr, value, WeightModel::Empirical)
                .unwrap()
                .into_iter()
                .map(|(k, w)| (w * gt.stratum_sigma(k)).powi(2) / counts[k])
                .sum();
            total += var.sqrt();
        }
    }
    total / m as f64
}

fn optimizer_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut two_group_bad = 0;
    for _ in 0..500 {
        let s1 = rng.gen_range(0.01..0.5);
        let s0 = rng.gen_range(0.01..0.5);
        let r: u64 = rng.gen_range(2..=200);
        let split = neyman_two_group(s1, s0, r).unwrap();
        let value = two_group_objective(s1, s0, split.r1 as f64, split.r0 as f64);
        let grid = (1..r)
            .map(|a| two_group_objective(s1, s0, a as f64, (r - a) as f64))
            .fold(f64::INFINITY, f64::min);
        let x = fairaudit::allocation::neyman_two_group_real(s1, s0, r as f64);
        let lo = x.floor().clamp(1.0, (r - 1) as f64);
        let hi = x.ceil().clamp(1.0, (r - 1) as f64);
        let gap = two_group_objective(s1, s0, lo, r as f64 - lo)
            .max(two_group_objective(s1, s0, hi, r as f64 - hi))
            - grid;
        if value - grid > gap + 1e-12 {
            two_group_bad += 1;
        }
    }

    let mut joint_bad = 0;
    let mut worst_count_gap: f64 = 0.0;
    let instances = 20;
    for _ in 0..instances {
        let gt = random_instance(&mut rng, 2);
        let r: u64 = rng.gen_range(5..=50);
        let total = 2 * r;
        let joint = neyman_joint(&gt, BudgetSpec::new(r, 2).unwrap(), WeightModel::Empirical).unwrap();
        let mut best = (f64::INFINITY, [0u64; 4]);
        for a in 1..total {
            for b in 1..total - a {
                for c in 1..total - a - b {
                    let n = [a, b, c, total - a - b - c];
                    let v = joint_objective(&gt, &n.map(|x| x as f64));
                    if v < best.0 {
                        best = (v, n);
                    }
                }
            }
        }
        let gap = (0..4)
            .map(|k| (joint.counts[k] - best.1[k] as f64).abs())
            .fold(0.0, f64::max);
        worst_count_gap = worst_count_gap.max(gap);
        if gap > 1.0 || joint_objective(&gt, &joint.counts) > best.0 + 1e-12 {
            joint_bad += 1;
        }
    }
    let detail = format!(
        "two-group: {two_group_bad}/500 beyond rounding gap; joint m=2: {joint_bad}/{instances} off grid (max per-stratum gap {worst_count_gap:.3})"
    );
    ensure(two_group_bad == 0 && joint_bad == 0, detail.clone(), detail)
}

// 8 -----------------------------------------------------------------------

fn toy_population() -> Population {
    Population::from_counts(
        "toy",
        vec!["a".into(), "b".into(), "c".into()],
        vec![120, 80, 60, 140, 90, 110, 70, 130],
        vec![30, 40, 18, 98, 27, 66, 42, 117],
    )
    .unwrap()
}

fn estimator_unbiasedness() -> Outcome {
    const REPS: usize = 10_000;
    const R: u64 = 120;
    let population = toy_population();
    let gt = population.ground_truth();
    let config = ExperimentConfig { reps: REPS, seed: 8, ..ExperimentConfig::default() };
    let records = run_audit(&population, R, &config).map_err(|e| e.to_string())?;
    let budget = BudgetSpec::new(R, 3).unwrap();
    let mut worst_z: f64 = 0.0;
    let mut failures = 0;
    let mut outside = Vec::new();
    for method in SamplingMethod::ALL {
        for strategy in CollabStrategy::ALL {
            let sd = estimator_sd(method, strategy, gt, budget, config.bounds_options()).map_err(|e| e.to_string())?;
            let mut sums = [0.0; 3];
            for rec in records.iter().filter(|r| r.method == method && r.strategy == strategy) {
                match &rec.outcome {
                    Ok(o) => o.agents.iter().for_each(|a| sums[a.agent] += a.dp_estimate),
                    Err(_) => failures += 1,
                }
            }
            for i in 0..3 {
                let z = (sums[i] / REPS as f64 - gt.true_dp()[i]).abs() / (sd[i] / (REPS as f64).sqrt());
                worst_z = worst_z.max(z);
                if z > 3.0 {
                    outside.push(format!("{method}/{strategy} agent {i} z={z:.2}"));
                }
            }
        }
    }
    let detail = format!(
        "27 (pair, agent) means over {REPS} reps, max |bias| {worst_z:.2} closed-form SEs (tol 3), failed reps {failures}{}",
        if outside.is_empty() { String::new() } else { format!("; outside: {}", outside.join(", ")) }
    );
    ensure(outside.is_empty() && failures == 0, detail.clone(), detail)
}

// 9 -----------------------------------------------------------------------

fn marginals_match(population: &Population, expected: &[(&str, f64)]) -> (bool, String) {
    let gt = population.ground_truth();
    let mut ok = true;
    let parts: Vec<String> = expected
        .iter()
        .map(|&(name, want)| {
            let got = population
                .attribute_index(name)
                .map(|i| gt.attr_marginal()[i])
                .unwrap_or(f64::NAN);
            let matches = (got * 100.0).round() / 100.0 == want;
            ok &= matches;
            format!("{name} {got:.4}{}", if matches { "" } else { " (MISMATCH)" })
        })
        .collect();
    (ok, parts.join(", "))
}

const FOLKTABLES_CSV: &str = "folktables/public_coverage.csv";

fn dataset_ground_truth() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    match load("propublica/compas-scores-two-years.csv", "propublica") {
        Ok(p) => {
            let (m, d) = marginals_match(&p, &[("female", 0.19), ("african_american", 0.51), ("priors", 0.66)]);
            ok &= m;
            parts.push(format!("propublica {} rows: {d}", p.report().rows_used));
        }
        Err(e) => {
            ok = false;
            parts.push(format!("propublica: {e}"));
        }
    }
    match load(FOLKTABLES_CSV, "folktables_public_coverage") {
        Ok(p) => {
            let (m, d) = marginals_match(
                &p,
                &[("SEX", 0.43), ("NATIVITY", 0.85), ("MIG", 0.82), ("AGEP", 0.66), ("MAR", 0.37)],
            );
            ok &= m;
            parts.push(format!("folktables {} rows: {d}", p.report().rows_used));
        }
        Err(e) => {
            ok = false;
            parts.push(format!("folktables: {e}"));
        }
    }
    let detail = parts.join("; ");
    ensure(ok, detail.clone(), detail)
}

// 10 ----------------------------------------------------------------------

fn subsampled_folktables() -> Outcome {
    const MIN_ROWS: u64 = 100_000;
    let population = load(FOLKTABLES_CSV, "folktables_public_coverage")?;
    let rows = population.report().rows_used;
    if rows < MIN_ROWS {
        return Err(format!("only {rows} rows (need {MIN_ROWS})"));
    }
    let config = ExperimentConfig {
        budgets: vec![100, 200, 300, 400, 500],
        reps: 100,
        combinations: false,
        ..ExperimentConfig::default()
    };
    let sweep = sweep_budget(&population, &config).map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    for row in sweep.iter().filter(|r| r.strategy != NoCollab) {
        let alone = sweep
            .iter()
            .find(|x| x.budget == row.budget && x.method == row.method && x.strategy == NoCollab)
            .unwrap();
        if row.mean_error >= alone.mean_error {
            bad.push(format!("{}/{} at R={}", row.method, row.strategy, row.budget));
        }
    }
    let detail = format!("{rows} rows, collaboration below no-collaboration at every budget: {}", bad.is_empty());
    ensure(bad.is_empty(), detail.clone(), format!("{detail}; not below: {}", bad.join(", ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("published Propublica error table", propublica_published_errors),
        ("uniform pooling and coordination exactness", uniform_pooling_exactness),
        ("closed-form inequality suite", inequality_suite),
        ("fair-model identity", fair_model_identity),
        ("stratified coordination divergence trend", divergence_trend),
        ("pooled-to-uniform asymptotic equivalence", asymptotic_equivalence),
        ("optimizer oracle equivalence", optimizer_oracles),
        ("estimator unbiasedness", estimator_unbiasedness),
        ("dataset ground-truth marginals", dataset_ground_truth),
        ("subsampled Folktables budget sweep", subsampled_folktables),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} [{secs:.1}s]: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
