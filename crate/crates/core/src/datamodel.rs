//! Shared domain types: strata over binary protected attributes, query budgets and
//! the population ground truth every other module scores against.
//!
//! Stratum encoding: attribute `j` is bit `j` of the stratum index, so attribute 0
//! is the least-significant bit. With `m` attributes there are `2^m` strata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of audited attributes; the `2^m` stratum tables must fit in memory.
pub const MAX_ATTRIBUTES: usize = 20;

/// Tolerance for identities that hold exactly in real arithmetic.
pub const EXACT_TOL: f64 = 1e-12;

fn check_attribute_count(m: usize) -> Result<()> {
    if m == 0 || m > MAX_ATTRIBUTES {
        return Err(Error::Config(format!(
            "number of attributes must be in 1..={MAX_ATTRIBUTES}, got {m}"
        )));
    }
    Ok(())
}

/// One cell of the `2^m` lattice formed by intersecting all attribute groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StratumId {
    index: usize,
    m: usize,
}

impl StratumId {
    pub fn new(index: usize, m: usize) -> Result<Self> {
        check_attribute_count(m)?;
        if index >= 1 << m {
            return Err(Error::Config(format!(
                "stratum index {index} out of range for {m} attributes"
            )));
        }
        Ok(Self { index, m })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        check_attribute_count(bits.len())?;
        let index = bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (j, &b)| acc | (usize::from(b) << j));
        Ok(Self {
            index,
            m: bits.len(),
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_attributes(&self) -> usize {
        self.m
    }

    /// Value of attribute `attr` inside this stratum.
    pub fn bit(&self, attr: usize) -> bool {
        stratum_bit(self.index, attr)
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.m).map(|j| self.bit(j)).collect()
    }
}

#[inline]
pub(crate) fn stratum_bit(index: usize, attr: usize) -> bool {
    (index >> attr) & 1 == 1
}

/// All `2^m` strata in index order.
pub fn enumerate_strata(m: usize) -> Result<Vec<StratumId>> {
    check_attribute_count(m)?;
    Ok((0..1usize << m).map(|index| StratumId { index, m }).collect())
}

/// The half of the lattice where attribute `attr` takes `value`.
pub fn group_strata(m: usize, attr: usize, value: bool) -> Result<Vec<StratumId>> {
    check_attribute_count(m)?;
    if attr >= m {
        return Err(Error::Config(format!(
            "attribute {attr} out of range for {m} attributes"
        )));
    }
    Ok((0..1usize << m)
        .filter(|&k| stratum_bit(k, attr) == value)
        .map(|index| StratumId { index, m })
        .collect())
}

/// Per-agent query budget `R` and agent count `m`; the auditor's total is `m * R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub per_agent: u64,
    pub agents: usize,
}

impl BudgetSpec {
    pub fn new(per_agent: u64, agents: usize) -> Result<Self> {
        if per_agent == 0 {
            return Err(Error::Config("per-agent budget must be positive".into()));
        }
        if agents == 0 {
            return Err(Error::Config("number of agents must be positive".into()));
        }
        Ok(Self { per_agent, agents })
    }

    pub fn total(&self) -> u64 {
        self.per_agent * self.agents as u64
    }
}

/// Where a single query lands before the other attribute bits are filled in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryCell {
    /// Any input, drawn from the population distribution.
    Population,
    /// An input with `X_attr = value`; the other bits are drawn conditionally.
    Group { attr: usize, value: bool },
    /// A fully specified stratum.
    Stratum(usize),
}

/// How the conditional stratum weights `P(S_k | X_i = v)` are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightModel {
    /// Joint stratum frequencies observed in the population.
    #[default]
    Empirical,
    /// Product of attribute marginals, as if attributes were independent.
    Independent,
}

impl std::str::FromStr for WeightModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "empirical" => Ok(Self::Empirical),
            "independent" => Ok(Self::Independent),
            other => Err(Error::Config(format!("unknown weight model '{other}'"))),
        }
    }
}

/// Population-level statistics per stratum and per attribute.
///
/// Built once from counts (or from synthetic marginals and rates) and never mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    m: usize,
    stratum_prob: Vec<f64>,
    stratum_positive_rate: Vec<f64>,
    stratum_count: Vec<u64>,
    attr_marginal: Vec<f64>,
    true_dp: Vec<f64>,
}

impl GroundTruth {
    /// Ground truth of a finite population given row and positive-label counts per stratum.
    pub fn from_counts(m: usize, counts: &[u64], positives: &[u64]) -> Result<Self> {
        check_attribute_count(m)?;
        let n_strata = 1usize << m;
        if counts.len() != n_strata || positives.len() != n_strata {
            return Err(Error::Contract(format!(
                "expected {n_strata} stratum counts, got {} counts and {} positives",
                counts.len(),
                positives.len()
            )));
        }
        if let Some(k) = (0..n_strata).find(|&k| positives[k] > counts[k]) {
            return Err(Error::Contract(format!(
                "stratum {k} has more positives than rows"
            )));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Ingest("population has no rows".into()));
        }
        let stratum_prob = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let stratum_positive_rate = counts
            .iter()
            .zip(positives)
            .map(|(&c, &p)| if c == 0 { 0.0 } else { p as f64 / c as f64 })
            .collect();

        let mut attr_marginal = Vec::with_capacity(m);
        let mut true_dp = Vec::with_capacity(m);
        for attr in 0..m {
            let mut rows = [0u64; 2];
            let mut pos = [0u64; 2];
            for k in 0..n_strata {
                let side = usize::from(stratum_bit(k, attr));
                rows[side] += counts[k];
                pos[side] += positives[k];
            }
            attr_marginal.push(rows[1] as f64 / total as f64);
            let rate = |side: usize| {
                if rows[side] == 0 {
                    0.0
                } else {
                    pos[side] as f64 / rows[side] as f64
                }
            };
            true_dp.push(rate(1) - rate(0));
        }

        Ok(Self {
            m,
            stratum_prob,
            stratum_positive_rate,
            stratum_count: counts.to_vec(),
            attr_marginal,
            true_dp,
        })
    }

    /// Synthetic instance with independent attributes: `p_k` is the product of the
    /// marginals and `rates[k]` is the positive-response probability of stratum `k`.
    pub fn synthetic(marginals: &[f64], rates: &[f64]) -> Result<Self> {
        let m = marginals.len();
        check_attribute_count(m)?;
        let n_strata = 1usize << m;
        if rates.len() != n_strata {
            return Err(Error::Contract(format!(
                "expected {n_strata} stratum rates, got {}",
                rates.len()
            )));
        }
        if let Some(p) = marginals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("marginal {p} is not a probability")));
        }
        if let Some(y) = rates.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::Domain(format!("rate {y} is not a probability")));
        }
        let stratum_prob: Vec<f64> = (0..n_strata)
            .map(|k| product_weight(marginals, k, None))
            .collect();
        let mut gt = Self {
            m,
            stratum_prob,
            stratum_positive_rate: rates.to_vec(),
            stratum_count: vec![0; n_strata],
            attr_marginal: marginals.to_vec(),
            true_dp: vec![0.0; m],
        };
        for attr in 0..m {
            let fav = gt.group_rate(attr, true).unwrap_or(0.0);
            let unfav = gt.group_rate(attr, false).unwrap_or(0.0);
            gt.true_dp[attr] = fav - unfav;
        }
        Ok(gt)
    }

    pub fn num_attributes(&self) -> usize {
        self.m
    }

    pub fn num_strata(&self) -> usize {
        1 << self.m
    }

    pub fn stratum_prob(&self) -> &[f64] {
        &self.stratum_prob
    }

    pub fn stratum_positive_rate(&self) -> &[f64] {
        &self.stratum_positive_rate
    }

    /// Rows per stratum; all zero for synthetic instances.
    pub fn stratum_count(&self) -> &[u64] {
        &self.stratum_count
    }

    pub fn attr_marginal(&self) -> &[f64] {
        &self.attr_marginal
    }

    pub fn true_dp(&self) -> &[f64] {
        &self.true_dp
    }

    pub fn is_populated(&self, k: usize) -> bool {
        self.stratum_prob[k] > 0.0
    }

    pub fn populated_strata(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_strata()).filter(|&k| self.is_populated(k))
    }

    /// `sqrt(Y_k (1 - Y_k))`.
    pub fn stratum_sigma(&self, k: usize) -> f64 {
        bernoulli_sigma(self.stratum_positive_rate[k])
    }

    /// `P(X_attr = value)`.
    pub fn group_prob(&self, attr: usize, value: bool) -> f64 {
        let p = self.attr_marginal[attr];
        if value {
            p
        } else {
            1.0 - p
        }
    }

    /// `P(Y = 1 | X_attr = value)` under the population's own joint distribution.
    pub fn group_rate(&self, attr: usize, value: bool) -> Result<f64> {
        let (mass, weighted) = (0..self.num_strata())
            .filter(|&k| stratum_bit(k, attr) == value)
            .fold((0.0, 0.0), |(m, w), k| {
                let p = self.stratum_prob[k];
                (m + p, w + p * self.stratum_positive_rate[k])
            });
        if mass <= 0.0 {
            return Err(Error::Domain(format!(
                "group X_{attr}={} has zero probability",
                u8::from(value)
            )));
        }
        Ok(weighted / mass)
    }

    /// Conditional weights `P(S_k | X_attr = value)` over populated strata of the group.
    ///
    /// Returned as `(stratum, weight)` pairs summing to one.
    pub fn group_weights(
        &self,
        attr: usize,
        value: bool,
        model: WeightModel,
    ) -> Result<Vec<(usize, f64)>> {
        let raw: Vec<(usize, f64)> = (0..self.num_strata())
            .filter(|&k| stratum_bit(k, attr) == value && self.is_populated(k))
            .map(|k| {
                let w = match model {
                    WeightModel::Empirical => self.stratum_prob[k],
                    WeightModel::Independent => {
                        product_weight(&self.attr_marginal, k, Some(attr))
                    }
                };
                (k, w)
            })
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let mass: f64 = raw.iter().map(|&(_, w)| w).sum();
        if mass <= 0.0 {
            return Err(Error::Domain(format!(
                "group X_{attr}={} has no populated stratum",
                u8::from(value)
            )));
        }
        Ok(raw.into_iter().map(|(k, w)| (k, w / mass)).collect())
    }

    /// Within-stratum variance of the stratified group-mean estimator per query,
    /// `sum_k w_k^2 sigma_k^2 / n_k` needs these `(stratum, w_k^2 sigma_k^2)` terms.
    pub(crate) fn stratified_variance_terms(
        &self,
        attr: usize,
        value: bool,
        model: WeightModel,
    ) -> Result<Vec<(usize, f64)>> {
        Ok(self
            .group_weights(attr, value, model)?
            .into_iter()
            .map(|(k, w)| {
                let s = self.stratum_sigma(k);
                (k, w * w * s * s)
            })
            .collect())
    }

    /// Restrict to a subset of attributes, marginalising the others out.
    ///
    /// Only meaningful for count-backed instances; synthetic ones are projected by
    /// probability mass with counts left at zero.
    pub fn project(&self, attrs: &[usize]) -> Result<Self> {
        let sub_m = attrs.len();
        check_attribute_count(sub_m)?;
        if let Some(&a) = attrs.iter().find(|&&a| a >= self.m) {
            return Err(Error::Config(format!(
                "attribute {a} out of range for {} attributes",
                self.m
            )));
        }
        let mut counts = vec![0u64; 1 << sub_m];
        let mut positives = vec![0u64; 1 << sub_m];
        let mut prob = vec![0.0; 1 << sub_m];
        let mut pos_mass = vec![0.0; 1 << sub_m];
        for k in 0..self.num_strata() {
            let sub = project_index(k, attrs);
            counts[sub] += self.stratum_count[k];
            positives[sub] +=
                (self.stratum_positive_rate[k] * self.stratum_count[k] as f64).round() as u64;
            prob[sub] += self.stratum_prob[k];
            pos_mass[sub] += self.stratum_prob[k] * self.stratum_positive_rate[k];
        }
        if counts.iter().any(|&c| c > 0) {
            return Self::from_counts(sub_m, &counts, &positives);
        }
        let rates: Vec<f64> = prob
            .iter()
            .zip(&pos_mass)
            .map(|(&p, &y)| if p > 0.0 { y / p } else { 0.0 })
            .collect();
        let marginals: Vec<f64> = attrs.iter().map(|&a| self.attr_marginal[a]).collect();
        let mut gt = Self {
            m: sub_m,
            stratum_prob: prob,
            stratum_positive_rate: rates,
            stratum_count: counts,
            attr_marginal: marginals,
            true_dp: vec![0.0; sub_m],
        };
        for attr in 0..sub_m {
            gt.true_dp[attr] = gt.group_rate(attr, true)? - gt.group_rate(attr, false)?;
        }
        Ok(gt)
    }
}

pub(crate) fn project_index(k: usize, attrs: &[usize]) -> usize {
    attrs
        .iter()
        .enumerate()
        .fold(0, |acc, (j, &a)| acc | (usize::from(stratum_bit(k, a)) << j))
}

/// `prod_j P(X_j = bit_j)`, optionally skipping one attribute.
pub(crate) fn product_weight(marginals: &[f64], k: usize, skip: Option<usize>) -> f64 {
    marginals
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != skip)
        .map(|(j, &p)| if stratum_bit(k, j) { p } else { 1.0 - p })
        .product()
}

/// Standard deviation of a Bernoulli response with success probability `q`.
pub fn bernoulli_sigma(q: f64) -> f64 {
    (q * (1.0 - q)).max(0.0).sqrt()
}
