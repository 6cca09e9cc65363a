//! `fairaudit` command-line interface.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairaudit::allocation::{CollabStrategy, SamplingMethod};
use fairaudit::bounds::{asymptotic_scan, verify_relations, NeymanCoordinated, SyntheticTemplate};
use fairaudit::datamodel::{BudgetSpec, WeightModel};
use fairaudit::dataset::{ground_truth_sigma, Population, QueryModel};
use fairaudit::runner::{self, ExperimentConfig};
use fairaudit::Error;

/// Exit status for runs where some (repetition, pair) audits failed.
const EXIT_PARTIAL: u8 = 13;
/// Exit status for `bounds-check --strict` when a relation fails.
const EXIT_RELATION: u8 = 14;

#[derive(Parser, Debug)]
#[command(name = "fairaudit", version, about = "Simulate collaborative black-box fairness audits")]
struct Cli {
    /// TOML experiment configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a dataset against a schema and print its ground truth.
    Ingest(Common),
    /// Run repeated audits at one budget and write per-agent rows.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Also write per-pair mean errors to this CSV file.
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
    /// Error curves over per-agent budgets.
    SweepBudget(Common),
    /// Error curves over the number of collaborating agents.
    SweepAgents(Common),
    /// Closed-form errors and the relations between strategies.
    BoundsCheck {
        #[command(flatten)]
        common: Common,
        /// Synthetic template `P,Y0,Y1` instead of a dataset.
        #[arg(long, value_delimiter = ',')]
        template: Option<Vec<f64>>,
        /// Write the simulated-vs-closed-form comparison to this CSV file.
        #[arg(long)]
        comparison_out: Option<PathBuf>,
        /// Write the agent-count scan of the summarising template to this CSV file.
        #[arg(long)]
        scan_out: Option<PathBuf>,
        /// Exit non-zero when any relation fails.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Dataset CSV file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Bundled schema name (propublica, german_credit, folktables_public_coverage) or TOML path.
    #[arg(long)]
    schema: Option<String>,
    /// Comma-separated attribute names to audit, in agent order.
    #[arg(long, value_delimiter = ',')]
    attrs: Option<Vec<String>>,
    /// Sampling methods (uniform, stratified, neyman) or `all`.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Collaboration strategies (nocollab, aposteriori, apriori) or `all`.
    #[arg(long = "strategy", value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Per-agent query budget(s).
    #[arg(long = "budgets", visible_alias = "budget", value_delimiter = ',')]
    budgets: Option<Vec<u64>>,
    /// Number(s) of collaborating agents.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<usize>>,
    /// Monte-Carlo repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV file (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stratum weights of the stratified estimator: empirical or independent.
    #[arg(long)]
    weights: Option<WeightModel>,
    /// How unpinned attribute bits of a query are drawn: joint or independent.
    #[arg(long)]
    query_model: Option<QueryModel>,
    /// Evaluate coordinated Neyman per agent (`m` times the two-group optimum)
    /// instead of the joint optimum.
    #[arg(long)]
    scaled_neyman: bool,
    /// Sweeps use the first `m` attributes instead of averaging over all subsets.
    #[arg(long)]
    no_combinations: bool,
}

fn parse_all<T>(values: &[String], all: &[T]) -> Result<Vec<T>, Error>
where
    T: std::str::FromStr<Err = Error> + Copy,
{
    if values.iter().any(|v| v.eq_ignore_ascii_case("all")) {
        return Ok(all.to_vec());
    }
    values.iter().map(|v| v.parse()).collect()
}

impl Common {
    /// Layer command-line values over the configuration file (or defaults).
    fn resolve(&self, file: Option<&PathBuf>) -> Result<ExperimentConfig, Error> {
        let mut c = match file {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = Some(v.clone());
        }
        if let Some(v) = &self.schema {
            c.schema = Some(v.clone());
        }
        if let Some(v) = &self.attrs {
            c.attrs = Some(v.clone());
        }
        if let Some(v) = &self.methods {
            c.methods = parse_all(v, &SamplingMethod::ALL)?;
        }
        if let Some(v) = &self.strategies {
            c.strategies = parse_all(v, &CollabStrategy::ALL)?;
        }
        if let Some(v) = &self.budgets {
            c.budgets = v.clone();
        }
        if let Some(v) = &self.agents {
            c.agents = v.clone();
        }
        if let Some(v) = self.reps {
            c.reps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        if let Some(v) = self.weights {
            c.weights = v;
        }
        if let Some(v) = self.query_model {
            c.query_model = v;
        }
        if self.scaled_neyman {
            c.neyman_coordinated = NeymanCoordinated::ScaledPerAgent;
        }
        if self.no_combinations {
            c.combinations = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            Error::Config(format!("cannot create '{}': {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "config" => 3,
        "schema" => 4,
        "ingest" => 5,
        "oracle" => 6,
        "domain" => 7,
        "allocation" => 8,
        "optimizer" => 9,
        "estimation" => 10,
        "contract" => 11,
        _ => 12,
    }
}

fn print_ground_truth(population: &Population) -> Result<(), Error> {
    let gt = population.ground_truth();
    let r = population.report();
    let mut err = io::stderr().lock();
    let _ = writeln!(
        err,
        "dataset {}: {} rows read, {} filtered, {} with missing values, {} used",
        population.name(),
        r.rows_read,
        r.rows_filtered,
        r.rows_missing,
        r.rows_used
    );
    let _ = writeln!(
        err,
        "{:<20} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8}",
        "attribute", "P(X=1)", "Y|X=1", "Y|X=0", "DP", "sigma1", "sigma0"
    );
    for (i, name) in population.attribute_names().iter().enumerate() {
        let _ = writeln!(
            err,
            "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>8.4}",
            name,
            gt.attr_marginal()[i],
            gt.group_rate(i, true)?,
            gt.group_rate(i, false)?,
            gt.true_dp()[i],
            ground_truth_sigma(gt, i, true)?,
            ground_truth_sigma(gt, i, false)?,
        );
    }
    let empty = population.empty_strata();
    if !empty.is_empty() {
        let _ = writeln!(err, "{} of {} strata are empty: {empty:?}", empty.len(), gt.num_strata());
    }
    Ok(())
}

fn write_strata(out: impl Write, population: &Population) -> Result<(), Error> {
    let m = population.num_attributes();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["stratum_index".to_string()];
    header.extend(population.attribute_names().iter().cloned());
    header.extend(["count", "positives", "probability", "positive_rate"].map(String::from));
    w.write_record(&header)?;
    let gt = population.ground_truth();
    for k in 0..gt.num_strata() {
        let mut row = vec![k.to_string()];
        row.extend((0..m).map(|j| ((k >> j) & 1).to_string()));
        row.push(population.counts()[k].to_string());
        row.push(population.positives()[k].to_string());
        row.push(format!("{:.12}", gt.stratum_prob()[k]));
        row.push(format!("{:.12}", gt.stratum_positive_rate()[k]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn print_summaries(summaries: &[runner::PairSummary]) {
    let mut err = io::stderr().lock();
    let _ = writeln!(err, "{:<11} {:<12} {:>10} {:>10} {:>6}", "method", "strategy", "mean_err", "std_err", "fails");
    for s in summaries {
        let _ = writeln!(
            err,
            "{:<11} {:<12} {:>10.5} {:>10.5} {:>6}",
            s.method.to_string(),
            s.strategy.to_string(),
            s.mean_error,
            s.std_error,
            s.failures
        );
        if let Some(f) = &s.first_failure {
            let _ = writeln!(err, "  first failure: {f}");
        }
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let file = cli.config.as_ref();
    match cli.command {
        Command::Ingest(common) => {
            let config = common.resolve(file)?;
            let population = runner::load_population(&config)?;
            print_ground_truth(&population)?;
            if config.out.is_some() {
                write_strata(output(config.out.as_ref())?, &population)?;
            }
            Ok(0)
        }
        Command::Audit { common, summary_out } => {
            let config = common.resolve(file)?;
            let mut population = runner::load_population(&config)?;
            if let Some(&m) = config.agents.first() {
                let first: Vec<usize> = (0..m.min(population.num_attributes())).collect();
                population = population.project(&first)?;
            }
            let records = runner::run_audit(&population, config.budgets[0], &config)?;
            runner::write_audit_csv(output(config.out.as_ref())?, &population, &records)?;
            let summaries = runner::summarize(&records);
            print_summaries(&summaries);
            if let Some(path) = summary_out {
                runner::write_summary_csv(output(Some(&path))?, &summaries)?;
            }
            Ok(if summaries.iter().any(|s| s.failures > 0) { EXIT_PARTIAL } else { 0 })
        }
        Command::SweepBudget(common) => {
            let config = common.resolve(file)?;
            let population = runner::load_population(&config)?;
            let rows = runner::sweep_budget(&population, &config)?;
            runner::write_sweep_csv(output(config.out.as_ref())?, &rows)?;
            Ok(if rows.iter().any(|r| r.failures > 0) { EXIT_PARTIAL } else { 0 })
        }
        Command::SweepAgents(common) => {
            let config = common.resolve(file)?;
            let population = runner::load_population(&config)?;
            let rows = runner::sweep_agents(&population, &config)?;
            runner::write_sweep_csv(output(config.out.as_ref())?, &rows)?;
            Ok(if rows.iter().any(|r| r.failures > 0) { EXIT_PARTIAL } else { 0 })
        }
        Command::BoundsCheck {
            common,
            template,
            comparison_out,
            scan_out,
            strict,
        } => {
            let config = common.resolve(file)?;
            let options = config.bounds_options();
            let per_agent = config.budgets[0];
            let (report, scan_template) = match template {
                Some(t) => {
                    if t.len() != 3 {
                        return Err(Error::Config(format!(
                            "--template expects P,Y0,Y1 but got {} values",
                            t.len()
                        )));
                    }
                    let template = SyntheticTemplate::new(t[0], t[1], t[2])?;
                    let m = config.agents.first().copied().unwrap_or(5);
                    let gt = template.instantiate(m)?;
                    let report = verify_relations(&gt, BudgetSpec::new(per_agent, m)?, options)?;
                    (report, template)
                }
                None => {
                    let population = runner::load_population(&config)?;
                    let check = runner::bounds_check(&population, &config)?;
                    let mut err = io::stderr().lock();
                    let _ = writeln!(err, "{:<11} {:<12} {:>12} {:>12} {:>12} {:>9}", "method", "strategy", "closed_form", "cf_sd", "emp_sd", "gap");
                    for c in &check.empirical {
                        let _ = writeln!(
                            err,
                            "{:<11} {:<12} {:>12.6} {:>12.6} {:>12.6} {:>8.1}%",
                            c.method.to_string(),
                            c.strategy.to_string(),
                            c.closed_form,
                            c.closed_form_sd,
                            c.empirical_sd,
                            100.0 * c.relative_gap
                        );
                    }
                    if let Some(path) = &comparison_out {
                        runner::write_comparison_csv(output(Some(path))?, &check.empirical)?;
                    }
                    let template = SyntheticTemplate::summarising(population.ground_truth())?;
                    (check.report, template)
                }
            };
            print!("{}", report.render());
            if let Some(path) = &config.out {
                report.write_csv(output(Some(path))?)?;
            }
            if let Some(path) = &scan_out {
                let scan = asymptotic_scan(&scan_template, 1..=12, per_agent, options)?;
                scan.write_csv(output(Some(path))?)?;
            }
            Ok(if strict && report.failures().next().is_some() { EXIT_RELATION } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error [{}]: {err}", err.category());
            ExitCode::from(exit_code(&err))
        }
    }
}
