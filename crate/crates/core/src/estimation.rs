//! Demographic-parity estimators, standard errors and the average audit error.

use serde::Serialize;

use crate::allocation::{CollabStrategy, SamplingMethod};
use crate::datamodel::{stratum_bit, GroundTruth, WeightModel};
use crate::error::{Error, Result};

/// Half-width of the compliance band: a model respects demographic parity on an
/// attribute when `|D| <= 0.2`.
pub const PARITY_BAND: f64 = 0.2;

/// Queries sent and positive responses observed, per stratum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryLog {
    m: usize,
    /// Agent that collected the log, or `None` for a pooled log.
    owner: Option<usize>,
    sent: Vec<u64>,
    positives: Vec<u64>,
}

impl QueryLog {
    pub fn new(m: usize, owner: Option<usize>) -> Self {
        Self {
            m,
            owner,
            sent: vec![0; 1 << m],
            positives: vec![0; 1 << m],
        }
    }

    pub fn from_counts(m: usize, sent: Vec<u64>, positives: Vec<u64>) -> Result<Self> {
        if sent.len() != 1 << m || positives.len() != 1 << m {
            return Err(Error::Contract(format!(
                "query log over {m} attributes needs {} strata",
                1usize << m
            )));
        }
        if let Some(k) = (0..sent.len()).find(|&k| positives[k] > sent[k]) {
            return Err(Error::Contract(format!(
                "stratum {k} has more positives than queries"
            )));
        }
        Ok(Self {
            m,
            owner: None,
            sent,
            positives,
        })
    }

    pub fn record(&mut self, stratum: usize, positive: bool) {
        self.sent[stratum] += 1;
        self.positives[stratum] += u64::from(positive);
    }

    /// Pool several logs into one shared log.
    pub fn pooled<'a>(logs: impl IntoIterator<Item = &'a QueryLog>) -> Result<Self> {
        let mut iter = logs.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Contract("cannot pool zero logs".into()))?;
        let mut out = Self::new(first.m, None);
        for log in std::iter::once(first).chain(iter) {
            if log.m != out.m {
                return Err(Error::Contract("pooled logs disagree on attribute count".into()));
            }
            for k in 0..out.sent.len() {
                out.sent[k] += log.sent[k];
                out.positives[k] += log.positives[k];
            }
        }
        Ok(out)
    }

    pub fn num_attributes(&self) -> usize {
        self.m
    }

    pub fn owner(&self) -> Option<usize> {
        self.owner
    }

    pub fn is_pooled(&self) -> bool {
        self.owner.is_none()
    }

    pub fn sent(&self) -> &[u64] {
        &self.sent
    }

    pub fn positives(&self) -> &[u64] {
        &self.positives
    }

    pub fn total(&self) -> u64 {
        self.sent.iter().sum()
    }

    /// `(queries, positives)` with `X_attr = value`.
    pub fn group_totals(&self, attr: usize, value: bool) -> (u64, u64) {
        (0..self.sent.len())
            .filter(|&k| stratum_bit(k, attr) == value)
            .fold((0, 0), |(n, p), k| (n + self.sent[k], p + self.positives[k]))
    }

    /// Realised `(R_i, R_i_bar)` for an attribute.
    pub fn group_counts(&self, attr: usize) -> (u64, u64) {
        (self.group_totals(attr, true).0, self.group_totals(attr, false).0)
    }

    fn check_attr(&self, attr: usize) -> Result<()> {
        if attr >= self.m {
            return Err(Error::Config(format!(
                "attribute {attr} out of range for {} attributes",
                self.m
            )));
        }
        Ok(())
    }
}

/// Difference of pooled group means: `Y_hat(X_i = 1) - Y_hat(X_i = 0)`.
pub fn estimate_dp_simple(log: &QueryLog, attr: usize) -> Result<f64> {
    log.check_attr(attr)?;
    let mut means = [0.0; 2];
    for value in [false, true] {
        let (n, p) = log.group_totals(attr, value);
        if n == 0 {
            return Err(Error::Estimation(format!(
                "no queries in group X_{attr}={}",
                u8::from(value)
            )));
        }
        means[usize::from(value)] = p as f64 / n as f64;
    }
    Ok(means[1] - means[0])
}

/// What the stratified estimator does with a weighted stratum that received no queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum MissingStratumPolicy {
    /// Fail, naming the strata (the design guaranteed they would be queried).
    #[default]
    Error,
    /// Drop them and renormalise the remaining weights of that group.
    Renormalize,
}

/// Weighted difference of per-stratum response rates, with weights
/// `P(S_k | X_attr = value)` over populated strata.
pub fn estimate_dp_stratified(
    log: &QueryLog,
    attr: usize,
    gt: &GroundTruth,
    weights: WeightModel,
    policy: MissingStratumPolicy,
) -> Result<f64> {
    log.check_attr(attr)?;
    if gt.num_attributes() != log.num_attributes() {
        return Err(Error::Contract(format!(
            "log over {} attributes, ground truth over {}",
            log.num_attributes(),
            gt.num_attributes()
        )));
    }
    let mut means = [0.0; 2];
    for value in [false, true] {
        let w = gt.group_weights(attr, value, weights)?;
        let missing: Vec<usize> = w
            .iter()
            .filter(|&&(k, _)| log.sent[k] == 0)
            .map(|&(k, _)| k)
            .collect();
        if !missing.is_empty() && policy == MissingStratumPolicy::Error {
            return Err(Error::Estimation(format!(
                "weighted strata without queries for X_{attr}={}: {missing:?}",
                u8::from(value)
            )));
        }
        let (mass, acc) = w
            .iter()
            .filter(|&&(k, _)| log.sent[k] > 0)
            .fold((0.0, 0.0), |(mass, acc), &(k, wk)| {
                let rate = log.positives[k] as f64 / log.sent[k] as f64;
                (mass + wk, acc + wk * rate)
            });
        if mass <= 0.0 {
            return Err(Error::Estimation(format!(
                "no queried stratum in group X_{attr}={}",
                u8::from(value)
            )));
        }
        means[usize::from(value)] = acc / mass;
    }
    Ok(means[1] - means[0])
}

/// `sigma1 / sqrt(r1) + sigma0 / sqrt(r0)`.
pub fn standard_error(sigma1: f64, sigma0: f64, r1: f64, r0: f64) -> Result<f64> {
    if !(r1 > 0.0 && r0 > 0.0) {
        return Err(Error::Domain(format!(
            "standard error needs positive group counts, got ({r1}, {r0})"
        )));
    }
    if !(sigma1 >= 0.0 && sigma0 >= 0.0) {
        return Err(Error::Domain(format!(
            "standard deviations must be non-negative, got ({sigma1}, {sigma0})"
        )));
    }
    Ok(sigma1 / r1.sqrt() + sigma0 / r0.sqrt())
}

/// Arithmetic mean of per-agent errors.
pub fn average_dp_error(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Domain("average of zero errors".into()));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Plug-in Bernoulli deviation `sqrt(p (1 - p))` of an observed rate.
pub fn empirical_sigma(positives: u64, n: u64) -> Option<f64> {
    (n > 0).then(|| crate::datamodel::bernoulli_sigma(positives as f64 / n as f64))
}

/// Which estimator an agent uses for a (method, strategy) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EstimatorKind {
    /// Difference of group means; the within-group composition is IID.
    Simple,
    /// Post-stratified weighted difference.
    Stratified(MissingStratumPolicy),
}

/// Uniform sampling and unpooled per-agent designs keep every group IID, so the
/// simple estimator is unbiased there. Pooling other agents' stratified or Neyman
/// queries skews the composition of each group, so those logs are post-stratified;
/// coordinated designs query every stratum by construction.
pub fn estimator_for(method: SamplingMethod, strategy: CollabStrategy) -> EstimatorKind {
    match (method, strategy) {
        (SamplingMethod::Uniform, _) | (_, CollabStrategy::NoCollab) => EstimatorKind::Simple,
        (_, CollabStrategy::APosteriori) => {
            EstimatorKind::Stratified(MissingStratumPolicy::Renormalize)
        }
        (_, CollabStrategy::APriori) => EstimatorKind::Stratified(MissingStratumPolicy::Error),
    }
}

/// One agent's result within an audit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentOutcome {
    pub agent: usize,
    pub dp_true: f64,
    pub dp_estimate: f64,
    pub signed_error: f64,
    pub abs_error: f64,
    pub r1: u64,
    pub r0: u64,
    /// Whether the estimate falls inside the parity band.
    pub estimate_compliant: bool,
}

/// Per-agent estimates and the averaged absolute error of one audit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditOutcome {
    pub agents: Vec<AgentOutcome>,
    pub average_error: f64,
}

/// Estimate every agent's parity from its (possibly pooled) view of the logs.
///
/// `logs[i]` is what agent `i` collected itself; under pooled strategies every
/// agent's estimator sees the union of all logs.
pub fn evaluate_audit(
    logs: &[QueryLog],
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    weights: WeightModel,
) -> Result<AuditOutcome> {
    let m = gt.num_attributes();
    if logs.len() != m {
        return Err(Error::Contract(format!("{m} agents but {} logs", logs.len())));
    }
    let pooled = if strategy.is_pooled() {
        Some(QueryLog::pooled(logs)?)
    } else {
        None
    };
    let kind = estimator_for(method, strategy);
    let agents = (0..m)
        .map(|i| {
            let view = pooled.as_ref().unwrap_or(&logs[i]);
            let estimate = match kind {
                EstimatorKind::Simple => estimate_dp_simple(view, i)?,
                EstimatorKind::Stratified(policy) => {
                    estimate_dp_stratified(view, i, gt, weights, policy)?
                }
            };
            let (r1, r0) = view.group_counts(i);
            let truth = gt.true_dp()[i];
            Ok(AgentOutcome {
                agent: i,
                dp_true: truth,
                dp_estimate: estimate,
                signed_error: estimate - truth,
                abs_error: (estimate - truth).abs(),
                r1,
                r0,
                estimate_compliant: estimate.abs() <= PARITY_BAND,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average_error = average_dp_error(&agents.iter().map(|a| a.abs_error).collect::<Vec<_>>())?;
    Ok(AuditOutcome {
        agents,
        average_error,
    })
}
