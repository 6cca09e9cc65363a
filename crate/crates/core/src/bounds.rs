//! Closed-form audit errors for every (method, strategy) pair and numeric checks of
//! the relations between them.
//!
//! Group-level designs use `sigma_1 / sqrt(R_1) + sigma_0 / sqrt(R_0)` with the
//! real-valued (unrounded) group counts each design gives an agent's estimator.
//! Coordinated stratified and Neyman designs use the stratified standard error
//! `sum_v sqrt(sum_k w_k^2 sigma_k^2 / n_k)` at their per-stratum counts.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::allocation::{
    neyman_joint, neyman_two_group_real, stratified_terms, CollabStrategy, SamplingMethod,
};
use crate::datamodel::{stratum_bit, BudgetSpec, GroundTruth, WeightModel, MAX_ATTRIBUTES};
use crate::dataset::ground_truth_sigma;
use crate::error::{Error, Result};
use crate::estimation::standard_error;

/// Relative tolerance for equality relations.
pub const EQUALITY_TOL: f64 = 1e-9;
/// Inequalities must hold with at least this (negative) slack.
pub const INEQUALITY_TOL: f64 = 1e-12;
/// Attributes more unbalanced than this make coordinated stratified sampling diverge.
pub const DIVERGENCE_THRESHOLD: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// How the coordinated Neyman design is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeymanCoordinated {
    /// One stratum allocation minimising the average error of all agents.
    #[default]
    Joint,
    /// Each agent's estimator sees `m` times its own two-group optimum.
    ScaledPerAgent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundsOptions {
    #[serde(default)]
    pub weights: WeightModel,
    #[serde(default)]
    pub neyman_coordinated: NeymanCoordinated,
}

/// Real-valued `(R_1, R_0)` available to each agent's estimator under a
/// group-level design, or `None` for designs evaluated per stratum.
pub fn group_counts(
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    budget: BudgetSpec,
    neyman_coordinated: NeymanCoordinated,
) -> Result<Option<Vec<(f64, f64)>>> {
    check_instance(gt, budget)?;
    let m = budget.agents as f64;
    let r = budget.per_agent as f64;
    let rows = (0..budget.agents)
        .map(|i| {
            let p = gt.attr_marginal()[i];
            let neyman = || -> Result<f64> {
                let s1 = ground_truth_sigma(gt, i, true)?;
                let s0 = ground_truth_sigma(gt, i, false)?;
                Ok(neyman_two_group_real(s1, s0, r))
            };
            Ok(match (method, strategy) {
                (SamplingMethod::Uniform, CollabStrategy::NoCollab) => Some((p * r, (1.0 - p) * r)),
                (SamplingMethod::Uniform, _) => Some((m * p * r, m * (1.0 - p) * r)),
                (SamplingMethod::Stratified, CollabStrategy::NoCollab) => Some((r / 2.0, r / 2.0)),
                (SamplingMethod::Stratified, CollabStrategy::APosteriori) => Some((
                    r / 2.0 + (m - 1.0) * p * r,
                    r / 2.0 + (m - 1.0) * (1.0 - p) * r,
                )),
                (SamplingMethod::Stratified, CollabStrategy::APriori) => None,
                (SamplingMethod::Neyman, CollabStrategy::NoCollab) => {
                    let r1 = neyman()?;
                    Some((r1, r - r1))
                }
                (SamplingMethod::Neyman, CollabStrategy::APosteriori) => {
                    let r1 = neyman()?;
                    Some((r1 + (m - 1.0) * p * r, r - r1 + (m - 1.0) * (1.0 - p) * r))
                }
                (SamplingMethod::Neyman, CollabStrategy::APriori) => match neyman_coordinated {
                    NeymanCoordinated::Joint => None,
                    NeymanCoordinated::ScaledPerAgent => {
                        let r1 = neyman()?;
                        Some((m * r1, m * (r - r1)))
                    }
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().collect())
}

fn check_instance(gt: &GroundTruth, budget: BudgetSpec) -> Result<()> {
    if gt.num_attributes() != budget.agents {
        return Err(Error::Config(format!(
            "{} agents need a {}-attribute instance, got {} attributes",
            budget.agents,
            budget.agents,
            gt.num_attributes()
        )));
    }
    Ok(())
}

/// Stratified standard error of each side `(X_i = 1, X_i = 0)` per agent at real
/// per-stratum counts.
fn stratified_side_errors(
    gt: &GroundTruth,
    counts: &[f64],
    weights: WeightModel,
) -> Result<Vec<(f64, f64)>> {
    let side_error = |side: &Vec<(usize, f64)>| -> Result<f64> {
        side.iter()
            .filter(|&&(_, a)| a > 0.0)
            .map(|&(k, a)| {
                if counts[k] > 0.0 {
                    Ok(a / counts[k])
                } else {
                    Err(Error::Domain(format!(
                        "stratum {k} has positive variance but no queries"
                    )))
                }
            })
            .sum::<Result<f64>>()
            .map(f64::sqrt)
    };
    stratified_terms(gt, weights)?
        .iter()
        .map(|[zero, one]| Ok((side_error(one)?, side_error(zero)?)))
        .collect()
}

/// Per-agent standard errors of the two group estimates, `(se_1, se_0)`.
pub fn closed_form_side_errors(
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    budget: BudgetSpec,
    options: BoundsOptions,
) -> Result<Vec<(f64, f64)>> {
    let context = |e: Error| match e {
        Error::Domain(msg) => Error::Domain(format!("{method}/{strategy}: {msg}")),
        other => other,
    };
    match group_counts(method, strategy, gt, budget, options.neyman_coordinated).map_err(context)? {
        Some(counts) => counts
            .iter()
            .enumerate()
            .map(|(i, &(r1, r0))| {
                let s1 = ground_truth_sigma(gt, i, true)?;
                let s0 = ground_truth_sigma(gt, i, false)?;
                standard_error(s1, s0, r1, r0)?;
                Ok((s1 / r1.sqrt(), s0 / r0.sqrt()))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(context),
        None => {
            let counts = match method {
                SamplingMethod::Neyman => neyman_joint(gt, budget, options.weights)?.counts,
                _ => {
                    let populated = gt.populated_strata().count() as f64;
                    let share = budget.total() as f64 / populated;
                    (0..gt.num_strata())
                        .map(|k| if gt.is_populated(k) { share } else { 0.0 })
                        .collect()
                }
            };
            stratified_side_errors(gt, &counts, options.weights).map_err(context)
        }
    }
}

/// Closed-form per-agent error `eps(i) = se_1 + se_0` for one pair.
pub fn closed_form_agent_errors(
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    budget: BudgetSpec,
    options: BoundsOptions,
) -> Result<Vec<f64>> {
    Ok(closed_form_side_errors(method, strategy, gt, budget, options)?
        .into_iter()
        .map(|(a, b)| a + b)
        .collect())
}

/// Standard deviation of each agent's estimate, `sqrt(se_1^2 + se_0^2)`.
///
/// The error `eps(i)` adds the two group standard errors and so bounds this from
/// above; this is the quantity a Monte-Carlo spread of estimates converges to.
pub fn estimator_sd(
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    budget: BudgetSpec,
    options: BoundsOptions,
) -> Result<Vec<f64>> {
    Ok(closed_form_side_errors(method, strategy, gt, budget, options)?
        .into_iter()
        .map(|(a, b)| a.hypot(b))
        .collect())
}

/// Closed-form average error `eps(I)` for one pair.
pub fn closed_form_error(
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    budget: BudgetSpec,
    options: BoundsOptions,
) -> Result<f64> {
    let errors = closed_form_agent_errors(method, strategy, gt, budget, options)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// `eps(I)` for all nine pairs, in `SamplingMethod::ALL x CollabStrategy::ALL` order.
pub fn closed_form_table(
    gt: &GroundTruth,
    budget: BudgetSpec,
    options: BoundsOptions,
) -> Result<Vec<(SamplingMethod, CollabStrategy, f64)>> {
    let mut out = Vec::with_capacity(9);
    for method in SamplingMethod::ALL {
        for strategy in CollabStrategy::ALL {
            out.push((method, strategy, closed_form_error(method, strategy, gt, budget, options)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Equality,
    Inequality,
    Asymptotic,
    Existence,
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Equality => "equality",
            Self::Inequality => "inequality",
            Self::Asymptotic => "asymptotic",
            Self::Existence => "existence",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// An existence relation is witnessed by this instance.
    Witnessed,
    /// An existence relation is not witnessed here (not a failure).
    NotWitnessed,
    /// The relation's precondition does not hold on this instance.
    NotApplicable,
}

impl Verdict {
    pub fn is_failure(self) -> bool {
        self == Verdict::Fail
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pass => "pass",
            Self::Fail => "FAIL",
            Self::Witnessed => "witnessed",
            Self::NotWitnessed => "not witnessed",
            Self::NotApplicable => "n/a",
        })
    }
}

/// One evaluated relation: `lhs (relation) rhs` with its slack.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationCheck {
    pub name: &'static str,
    pub statement: &'static str,
    pub kind: RelationKind,
    pub lhs: f64,
    pub rhs: f64,
    /// For inequalities `rhs - lhs`; for equalities `-|lhs - rhs| / |rhs|`; for
    /// asymptotic checks the distance of the final ratio from its limit.
    pub slack: f64,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RelationReport {
    pub checks: Vec<RelationCheck>,
}

impl RelationReport {
    pub fn get(&self, name: &str) -> Option<&RelationCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RelationCheck> {
        self.checks.iter().filter(|c| c.verdict.is_failure())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["relation", "statement", "kind", "lhs", "rhs", "slack", "verdict", "note"])?;
        for c in &self.checks {
            w.write_record([
                c.name.to_string(),
                c.statement.to_string(),
                c.kind.to_string(),
                format!("{:.12e}", c.lhs),
                format!("{:.12e}", c.rhs),
                format!("{:.6e}", c.slack),
                c.verdict.to_string(),
                c.note.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width table for terminal output.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<40} {:<11} {:>12} {:>12} {:>12}  {}\n",
            "relation", "kind", "lhs", "rhs", "slack", "verdict"
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{:<40} {:<11} {:>12.6} {:>12.6} {:>12.3e}  {}{}\n",
                c.name,
                c.kind.to_string(),
                c.lhs,
                c.rhs,
                c.slack,
                c.verdict,
                if c.note.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", c.note)
                }
            ));
        }
        s
    }
}

fn equality(name: &'static str, statement: &'static str, lhs: f64, rhs: f64) -> RelationCheck {
    let rel = (lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE);
    RelationCheck {
        name,
        statement,
        kind: RelationKind::Equality,
        lhs,
        rhs,
        slack: -rel,
        verdict: if rel <= EQUALITY_TOL || lhs == rhs {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        note: String::new(),
    }
}

fn inequality(name: &'static str, statement: &'static str, lhs: f64, rhs: f64) -> RelationCheck {
    let slack = rhs - lhs;
    RelationCheck {
        name,
        statement,
        kind: RelationKind::Inequality,
        lhs,
        rhs,
        slack,
        verdict: if slack >= -INEQUALITY_TOL {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        note: String::new(),
    }
}

/// Whether a synthetic instance has every stratum responding at the same rate.
pub fn is_fair(gt: &GroundTruth) -> bool {
    let mut rates = gt.populated_strata().map(|k| gt.stratum_positive_rate()[k]);
    match rates.next() {
        Some(first) => rates.all(|y| (y - first).abs() <= 1e-15),
        None => true,
    }
}

/// `max(P_i, 1 - P_i) > 1/sqrt(2)` for every attribute.
pub fn divergence_predicate(marginals: &[f64]) -> bool {
    !marginals.is_empty() && marginals.iter().all(|&p| p.max(1.0 - p) > DIVERGENCE_THRESHOLD)
}

/// Evaluate the closed-form relations on one instance, plus the asymptotic trends
/// on a synthetic template summarising it.
pub fn verify_relations(
    gt: &GroundTruth,
    budget: BudgetSpec,
    options: BoundsOptions,
) -> Result<RelationReport> {
    use CollabStrategy::*;
    use SamplingMethod::*;
    let eps = |m, s| closed_form_error(m, s, gt, budget, options);
    let sqrt_m = (budget.agents as f64).sqrt();
    let u_nc = eps(Uniform, NoCollab)?;
    let u_post = eps(Uniform, APosteriori)?;
    let u_prio = eps(Uniform, APriori)?;
    let s_nc = eps(Stratified, NoCollab)?;
    let s_post = eps(Stratified, APosteriori)?;
    let s_prio = eps(Stratified, APriori)?;
    let n_nc = eps(Neyman, NoCollab)?;
    let n_post = eps(Neyman, APosteriori)?;
    let n_prio = eps(Neyman, APriori)?;
    let scaled = BoundsOptions {
        neyman_coordinated: NeymanCoordinated::ScaledPerAgent,
        ..options
    };
    let n_prio_scaled = closed_form_error(Neyman, APriori, gt, budget, scaled)?;

    let mut checks = vec![
        equality(
            "uniform_coordination_equals_pooling",
            "uniform/apriori = uniform/aposteriori",
            u_prio,
            u_post,
        ),
        equality(
            "uniform_pooling_sqrt_m_gain",
            "uniform/apriori = uniform/nocollab / sqrt(m)",
            u_prio,
            u_nc / sqrt_m,
        ),
        inequality(
            "neyman_coordination_sqrt_m_gain",
            "neyman/apriori <= neyman/nocollab / sqrt(m)",
            n_prio,
            n_nc / sqrt_m,
        ),
        inequality(
            "neyman_coordination_sqrt_m_gain_scaled",
            "neyman/apriori (per-agent scaled) <= neyman/nocollab / sqrt(m)",
            n_prio_scaled,
            n_nc / sqrt_m,
        ),
        inequality(
            "neyman_pooled_below_uniform_alone",
            "neyman/nocollab / sqrt(m) <= uniform/nocollab",
            n_nc / sqrt_m,
            u_nc,
        ),
        inequality(
            "neyman_pooling_helps",
            "neyman/aposteriori <= neyman/nocollab",
            n_post,
            n_nc,
        ),
        inequality(
            "stratified_pooling_helps",
            "stratified/aposteriori <= stratified/nocollab",
            s_post,
            s_nc,
        ),
    ];

    let mut fair = equality(
        "fair_model_stratified_is_neyman",
        "fair model: stratified/nocollab = neyman/nocollab",
        s_nc,
        n_nc,
    );
    if !is_fair(gt) {
        fair.verdict = Verdict::NotApplicable;
        fair.note = "strata respond at different rates".into();
    }
    checks.push(fair);

    checks.push(RelationCheck {
        name: "coordination_can_hurt_stratified",
        statement: "exists: stratified/aposteriori < stratified/apriori",
        kind: RelationKind::Existence,
        lhs: s_post,
        rhs: s_prio,
        slack: s_prio - s_post,
        verdict: if s_post < s_prio {
            Verdict::Witnessed
        } else {
            Verdict::NotWitnessed
        },
        note: String::new(),
    });

    let template = SyntheticTemplate::summarising(gt)?;
    let scan = asymptotic_scan(&template, 1..=12, budget.per_agent, options)?;
    checks.extend(scan.checks());
    Ok(RelationReport { checks })
}

/// A one-attribute instance `(P, Y_0, Y_1)` extended to `m` i.i.d. attributes:
/// every attribute has marginal `P` and stratum `k` responds at
/// `Y_0 + (Y_1 - Y_0) * popcount(k) / m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTemplate {
    pub marginal: f64,
    pub rate0: f64,
    pub rate1: f64,
}

impl SyntheticTemplate {
    pub fn new(marginal: f64, rate0: f64, rate1: f64) -> Result<Self> {
        for (name, v) in [("marginal", marginal), ("rate0", rate0), ("rate1", rate1)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("template {name} {v} is not a probability")));
            }
        }
        Ok(Self {
            marginal,
            rate0,
            rate1,
        })
    }

    /// Average marginal and average group rates of an instance.
    pub fn summarising(gt: &GroundTruth) -> Result<Self> {
        let m = gt.num_attributes() as f64;
        let marginal = gt.attr_marginal().iter().sum::<f64>() / m;
        let mut r0 = 0.0;
        let mut r1 = 0.0;
        for i in 0..gt.num_attributes() {
            r0 += gt.group_rate(i, false)?;
            r1 += gt.group_rate(i, true)?;
        }
        Self::new(marginal, r0 / m, r1 / m)
    }

    pub fn instantiate(&self, m: usize) -> Result<GroundTruth> {
        if m == 0 || m > MAX_ATTRIBUTES {
            return Err(Error::Config(format!(
                "template size {m} outside 1..={MAX_ATTRIBUTES}"
            )));
        }
        let rates: Vec<f64> = (0..1usize << m)
            .map(|k| {
                let ones = (0..m).filter(|&j| stratum_bit(k, j)).count() as f64;
                self.rate0 + (self.rate1 - self.rate0) * ones / m as f64
            })
            .collect();
        GroundTruth::synthetic(&vec![self.marginal; m], &rates)
    }
}

/// One row of an asymptotic scan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanRow {
    pub m: usize,
    pub method: SamplingMethod,
    pub strategy: CollabStrategy,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymptoticScan {
    pub template: SyntheticTemplate,
    pub per_agent: u64,
    pub rows: Vec<ScanRow>,
}

/// Largest agent count for which the coordinated Neyman optimum is computed in a
/// scan; it is also skipped when the pool cannot give every stratum a query.
pub const SCAN_JOINT_CAP: usize = 12;

/// Tabulate `eps(I)` of every pair for `m` i.i.d. copies of a template.
pub fn asymptotic_scan(
    template: &SyntheticTemplate,
    m_range: std::ops::RangeInclusive<usize>,
    per_agent: u64,
    options: BoundsOptions,
) -> Result<AsymptoticScan> {
    if *m_range.end() > MAX_ATTRIBUTES || *m_range.start() == 0 {
        return Err(Error::Config(format!(
            "scan range {m_range:?} outside 1..={MAX_ATTRIBUTES}"
        )));
    }
    let per_m = |m: usize| -> Result<Vec<ScanRow>> {
        let gt = template.instantiate(m)?;
        let budget = BudgetSpec::new(per_agent, m)?;
        let mut rows = Vec::with_capacity(9);
        for method in SamplingMethod::ALL {
            for strategy in CollabStrategy::ALL {
                if method == SamplingMethod::Neyman
                    && strategy == CollabStrategy::APriori
                    && options.neyman_coordinated == NeymanCoordinated::Joint
                    && (m > SCAN_JOINT_CAP || budget.total() < gt.num_strata() as u64)
                {
                    continue;
                }
                let error = closed_form_error(method, strategy, &gt, budget, options)?;
                rows.push(ScanRow {
                    m,
                    method,
                    strategy,
                    error,
                });
            }
        }
        Ok(rows)
    };
    let ms: Vec<usize> = m_range.collect();
    #[cfg(feature = "parallel")]
    let chunks: Vec<Result<Vec<ScanRow>>> = {
        use rayon::prelude::*;
        ms.par_iter().map(|&m| per_m(m)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Result<Vec<ScanRow>>> = ms.iter().map(|&m| per_m(m)).collect();
    let mut rows = Vec::new();
    for chunk in chunks {
        rows.extend(chunk?);
    }
    Ok(AsymptoticScan {
        template: *template,
        per_agent,
        rows,
    })
}

/// Burn-in after which asymptotic ratios must approach their limit monotonically.
pub const RATIO_BURN_IN: usize = 3;
/// Final ratios must lie within this distance below their limit of one.
pub const RATIO_BAND: f64 = 0.05;
/// Divergence is checked as strict growth over agent counts from this value on.
pub const DIVERGENCE_FROM: usize = 6;
/// ... and must overtake pooled stratified sampling by this agent count.
pub const OVERTAKE_BY: usize = 8;

impl AsymptoticScan {
    pub fn error(&self, m: usize, method: SamplingMethod, strategy: CollabStrategy) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.m == m && r.method == method && r.strategy == strategy)
            .map(|r| r.error)
    }

    pub fn agent_counts(&self) -> Vec<usize> {
        let mut ms: Vec<usize> = self.rows.iter().map(|r| r.m).collect();
        ms.dedup();
        ms
    }

    /// `(m, eps(method/aposteriori) / eps(uniform/aposteriori))` for every m.
    pub fn pooled_ratio(&self, method: SamplingMethod) -> Vec<(usize, f64)> {
        self.agent_counts()
            .into_iter()
            .filter_map(|m| {
                let num = self.error(m, method, CollabStrategy::APosteriori)?;
                let den = self.error(m, SamplingMethod::Uniform, CollabStrategy::APosteriori)?;
                Some((m, num / den))
            })
            .collect()
    }

    fn ratio_check(&self, name: &'static str, statement: &'static str, method: SamplingMethod) -> RelationCheck {
        let ratios = self.pooled_ratio(method);
        let (last_m, last) = *ratios.last().expect("scan has rows");
        let monotone = ratios
            .windows(2)
            .filter(|w| w[0].0 >= RATIO_BURN_IN)
            .all(|w| w[1].1 >= w[0].1 - 1e-12);
        let in_band = (1.0 - RATIO_BAND..=1.0 + 1e-12).contains(&last);
        RelationCheck {
            name,
            statement,
            kind: RelationKind::Asymptotic,
            lhs: last,
            rhs: 1.0,
            slack: RATIO_BAND - (1.0 - last).abs(),
            verdict: if monotone && in_band { Verdict::Pass } else { Verdict::Fail },
            note: format!(
                "ratio at m={last_m}; monotone beyond m={RATIO_BURN_IN}: {monotone}"
            ),
        }
    }

    /// Whether coordinated stratified error grows strictly from `DIVERGENCE_FROM` on.
    pub fn stratified_coordinated_grows(&self) -> bool {
        let series: Vec<f64> = self
            .agent_counts()
            .into_iter()
            .filter(|&m| m >= DIVERGENCE_FROM)
            .filter_map(|m| self.error(m, SamplingMethod::Stratified, CollabStrategy::APriori))
            .collect();
        series.len() >= 2 && series.windows(2).all(|w| w[1] > w[0])
    }

    /// Whether coordinated stratified error ever increases with m in the scan.
    pub fn stratified_coordinated_ever_grows(&self) -> bool {
        let series: Vec<f64> = self
            .agent_counts()
            .into_iter()
            .filter_map(|m| self.error(m, SamplingMethod::Stratified, CollabStrategy::APriori))
            .collect();
        series.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12))
    }

    fn divergence_check(&self) -> RelationCheck {
        use CollabStrategy::*;
        use SamplingMethod::*;
        let predicate = divergence_predicate(&[self.template.marginal]);
        let last_m = *self.agent_counts().last().expect("scan has rows");
        let prio = self.error(last_m, Stratified, APriori).unwrap_or(f64::NAN);
        let post = self.error(last_m, Stratified, APosteriori).unwrap_or(f64::NAN);
        let overtaken = self
            .error(OVERTAKE_BY, Stratified, APriori)
            .zip(self.error(OVERTAKE_BY, Stratified, APosteriori))
            .map(|(a, b)| a > b);
        let (verdict, note) = if predicate {
            let grows = self.stratified_coordinated_grows();
            let ok = grows && overtaken.unwrap_or(false);
            (
                if ok { Verdict::Pass } else { Verdict::Fail },
                format!(
                    "unbalanced template: grows from m={DIVERGENCE_FROM}: {grows}; above pooled at m={OVERTAKE_BY}: {overtaken:?}"
                ),
            )
        } else {
            let grows = self.stratified_coordinated_ever_grows();
            (
                if grows { Verdict::Fail } else { Verdict::NotApplicable },
                format!("balanced enough template; error grows with m: {grows}"),
            )
        };
        RelationCheck {
            name: "stratified_coordination_diverges",
            statement: "max(P, 1-P) > 1/sqrt(2): stratified/apriori grows without bound in m",
            kind: RelationKind::Asymptotic,
            lhs: prio,
            rhs: post,
            slack: prio - post,
            verdict,
            note,
        }
    }

    pub fn checks(&self) -> Vec<RelationCheck> {
        vec![
            self.ratio_check(
                "neyman_pooling_tends_to_uniform",
                "neyman/aposteriori ~ uniform/aposteriori as m grows",
                SamplingMethod::Neyman,
            ),
            self.ratio_check(
                "stratified_pooling_tends_to_uniform",
                "stratified/aposteriori ~ uniform/aposteriori as m grows",
                SamplingMethod::Stratified,
            ),
            self.divergence_check(),
        ]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "method", "strategy", "closed_form_error"])?;
        for r in &self.rows {
            w.write_record([
                r.m.to_string(),
                r.method.to_string(),
                r.strategy.to_string(),
                format!("{:.12e}", r.error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_gt(m: usize, seed: u64) -> GroundTruth {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let marginals: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.95)).collect();
        let rates: Vec<f64> = (0..1 << m).map(|_| rng.gen_range(0.0..1.0)).collect();
        GroundTruth::synthetic(&marginals, &rates).unwrap()
    }

    #[test]
    fn four_agents_halve_the_uniform_error() {
        let gt = random_gt(4, 11);
        let budget = BudgetSpec::new(300, 4).unwrap();
        let o = BoundsOptions::default();
        let nc = closed_form_error(SamplingMethod::Uniform, CollabStrategy::NoCollab, &gt, budget, o).unwrap();
        let prio = closed_form_error(SamplingMethod::Uniform, CollabStrategy::APriori, &gt, budget, o).unwrap();
        let post = closed_form_error(SamplingMethod::Uniform, CollabStrategy::APosteriori, &gt, budget, o).unwrap();
        assert!((prio / nc - 0.5).abs() < 1e-12);
        assert_eq!(prio, post);
    }

    #[test]
    fn fair_model_stratified_equals_neyman_alone() {
        let gt = GroundTruth::synthetic(&[0.3, 0.7, 0.6], &[0.35; 8]).unwrap();
        let budget = BudgetSpec::new(200, 3).unwrap();
        let report = verify_relations(&gt, budget, BoundsOptions::default()).unwrap();
        assert_eq!(report.get("fair_model_stratified_is_neyman").unwrap().verdict, Verdict::Pass);
    }

    #[test]
    fn single_attribute_strategies_coincide() {
        let gt = random_gt(1, 4);
        let budget = BudgetSpec::new(100, 1).unwrap();
        for method in SamplingMethod::ALL {
            let values: Vec<f64> = CollabStrategy::ALL
                .iter()
                .map(|&s| closed_form_error(method, s, &gt, budget, BoundsOptions::default()).unwrap())
                .collect();
            for v in &values {
                assert!((v - values[0]).abs() <= 1e-9 * values[0], "{method}: {values:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn group_level_relations_hold(m in 2usize..6, r in 50u64..1000, seed in any::<u64>()) {
            let gt = random_gt(m, seed);
            let budget = BudgetSpec::new(r, m).unwrap();
            let report = verify_relations(&gt, budget, BoundsOptions::default()).unwrap();
            for name in [
                "uniform_coordination_equals_pooling",
                "uniform_pooling_sqrt_m_gain",
                "neyman_coordination_sqrt_m_gain_scaled",
                "neyman_pooled_below_uniform_alone",
                "neyman_pooling_helps",
                "stratified_pooling_helps",
            ] {
                let c = report.get(name).unwrap();
                prop_assert_eq!(c.verdict, Verdict::Pass, "{}: {:?}", name, c);
            }
        }
    }

    #[test]
    fn coordinated_neyman_dominates_other_coordinated_designs() {
        for seed in 0..10 {
            let gt = random_gt(3, seed);
            let budget = BudgetSpec::new(150, 3).unwrap();
            let o = BoundsOptions::default();
            let n = closed_form_error(SamplingMethod::Neyman, CollabStrategy::APriori, &gt, budget, o).unwrap();
            let s = closed_form_error(SamplingMethod::Stratified, CollabStrategy::APriori, &gt, budget, o).unwrap();
            assert!(n <= s + 1e-12);
        }
    }

    #[test]
    fn template_instantiation_matches_at_one_attribute() {
        let t = SyntheticTemplate::new(0.8, 0.2, 0.8).unwrap();
        let gt = t.instantiate(1).unwrap();
        assert_eq!(gt.stratum_positive_rate(), &[0.2, 0.8]);
        assert!((gt.attr_marginal()[0] - 0.8).abs() < 1e-15);
        assert!(SyntheticTemplate::new(1.2, 0.0, 0.0).is_err());
        assert!(t.instantiate(0).is_err());
    }

    #[test]
    fn divergence_predicate_examples() {
        assert!(divergence_predicate(&[0.8, 0.2, 0.75]));
        assert!(!divergence_predicate(&[0.8, 0.5]));
        assert!(!divergence_predicate(&[0.7]));
    }

    #[test]
    fn balanced_template_does_not_diverge() {
        let t = SyntheticTemplate::new(0.5, 0.2, 0.8).unwrap();
        let scan = asymptotic_scan(&t, 1..=8, 250, BoundsOptions::default()).unwrap();
        assert!(!scan.stratified_coordinated_ever_grows());
        for (_, r) in scan.pooled_ratio(SamplingMethod::Stratified) {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_renders_and_serialises() {
        let gt = random_gt(2, 3);
        let report = verify_relations(&gt, BudgetSpec::new(100, 2).unwrap(), BoundsOptions::default()).unwrap();
        assert!(report.render().contains("uniform_pooling_sqrt_m_gain"));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), report.checks.len() + 1);
    }
}
