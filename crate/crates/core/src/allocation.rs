//! Query allocation: how many queries each agent sends, and where.
//!
//! A plan is expressed in [`QueryCell`]s. Uniform sampling sends population-wide
//! queries, per-agent stratified and Neyman sampling pin only the agent's own
//! attribute, and coordinated (a-priori) stratified and Neyman sampling pin full
//! strata. A-posteriori plans are identical to no-collaboration plans; pooling
//! only happens when estimating.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{stratum_bit, BudgetSpec, GroundTruth, QueryCell, WeightModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    Uniform,
    Stratified,
    Neyman,
}

impl SamplingMethod {
    pub const ALL: [SamplingMethod; 3] = [Self::Uniform, Self::Stratified, Self::Neyman];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Stratified => "stratified",
            Self::Neyman => "neyman",
        }
    }
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown sampling method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CollabStrategy {
    #[serde(rename = "nocollab")]
    NoCollab,
    #[serde(rename = "aposteriori")]
    APosteriori,
    #[serde(rename = "apriori")]
    APriori,
}

impl CollabStrategy {
    pub const ALL: [CollabStrategy; 3] = [Self::NoCollab, Self::APosteriori, Self::APriori];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoCollab => "nocollab",
            Self::APosteriori => "aposteriori",
            Self::APriori => "apriori",
        }
    }

    /// Whether an agent's estimator sees every agent's responses.
    pub fn is_pooled(self) -> bool {
        self != Self::NoCollab
    }
}

impl fmt::Display for CollabStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollabStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "nocollab" | "none" => Ok(Self::NoCollab),
            "aposteriori" | "posteriori" => Ok(Self::APosteriori),
            "apriori" | "priori" => Ok(Self::APriori),
            _ => Err(Error::Config(format!("unknown collaboration strategy '{s}'"))),
        }
    }
}

impl fmt::Display for QueryCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            QueryCell::Population => f.write_str("population"),
            QueryCell::Group { attr, value } => write!(f, "x{attr}={}", u8::from(value)),
            QueryCell::Stratum(k) => write!(f, "stratum{k}"),
        }
    }
}

/// Integer query counts per agent for one (method, strategy) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationPlan {
    pub method: SamplingMethod,
    pub strategy: CollabStrategy,
    pub budget: BudgetSpec,
    /// `cells[agent]` lists `(cell, count)` with counts summing to the per-agent budget.
    pub cells: Vec<Vec<(QueryCell, u64)>>,
    /// Agents whose two-group Neyman split fell back to halves because both groups
    /// have zero response variance.
    pub degenerate_agents: Vec<usize>,
}

impl AllocationPlan {
    pub fn agent_total(&self, agent: usize) -> u64 {
        self.cells[agent].iter().map(|&(_, c)| c).sum()
    }

    /// Per-stratum counts `[agent][stratum]` when every cell is a full stratum.
    pub fn stratum_counts(&self, num_strata: usize) -> Option<Vec<Vec<u64>>> {
        self.cells
            .iter()
            .map(|cells| {
                let mut row = vec![0u64; num_strata];
                for &(cell, c) in cells {
                    match cell {
                        QueryCell::Stratum(k) if k < num_strata => row[k] += c,
                        _ => return None,
                    }
                }
                Some(row)
            })
            .collect()
    }

    /// Expected number of queries with `X_attr = 1` and `X_attr = 0` that the
    /// estimator of agent `attr` sees, under the population's joint distribution.
    pub fn expected_group_counts(&self, gt: &GroundTruth, attr: usize) -> Result<(f64, f64)> {
        let owners: Vec<usize> = if self.strategy.is_pooled() {
            (0..self.cells.len()).collect()
        } else {
            vec![attr]
        };
        let p1 = gt.group_prob(attr, true);
        let mut ones = 0.0;
        let mut total = 0.0;
        for a in owners {
            for &(cell, c) in &self.cells[a] {
                let c = c as f64;
                total += c;
                ones += c * match cell {
                    QueryCell::Population => p1,
                    QueryCell::Stratum(k) => f64::from(u8::from(stratum_bit(k, attr))),
                    QueryCell::Group { attr: j, value } if j == attr => f64::from(u8::from(value)),
                    QueryCell::Group { attr: j, value } => {
                        conditional_prob(gt, attr, j, value)?
                    }
                };
            }
        }
        Ok((ones, total - ones))
    }

    /// Long-format plan rows: `agent,cell,stratum_index,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["agent", "cell", "stratum_index", "count"])?;
        for (agent, cells) in self.cells.iter().enumerate() {
            for &(cell, count) in cells {
                let index = match cell {
                    QueryCell::Stratum(k) => k.to_string(),
                    _ => String::new(),
                };
                w.write_record([
                    agent.to_string(),
                    cell.to_string(),
                    index,
                    count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `P(X_i = 1 | X_j = value)` under the instance's joint stratum distribution.
fn conditional_prob(gt: &GroundTruth, i: usize, j: usize, value: bool) -> Result<f64> {
    let (mass, hit) = (0..gt.num_strata())
        .filter(|&k| stratum_bit(k, j) == value)
        .fold((0.0, 0.0), |(m, h), k| {
            let p = gt.stratum_prob()[k];
            (m + p, if stratum_bit(k, i) { h + p } else { h })
        });
    if mass <= 0.0 {
        return Err(Error::Domain(format!(
            "group X_{j}={} has zero probability",
            u8::from(value)
        )));
    }
    Ok(hit / mass)
}

fn check_groups(gt: &GroundTruth) -> Result<()> {
    for attr in 0..gt.num_attributes() {
        for value in [true, false] {
            if gt.group_prob(attr, value) <= 0.0 {
                return Err(Error::Allocation(format!(
                    "attribute {attr}: group X_{attr}={} has zero probability",
                    u8::from(value)
                )));
            }
        }
    }
    Ok(())
}

/// Build the plan for one (method, strategy) pair.
///
/// Agent `i` audits attribute `i`, so `gt` must have exactly `budget.agents` attributes.
pub fn allocate(
    method: SamplingMethod,
    strategy: CollabStrategy,
    gt: &GroundTruth,
    budget: BudgetSpec,
    weights: WeightModel,
) -> Result<AllocationPlan> {
    let m = budget.agents;
    if gt.num_attributes() != m {
        return Err(Error::Config(format!(
            "{m} agents need a {m}-attribute instance, got {} attributes",
            gt.num_attributes()
        )));
    }
    check_groups(gt)?;
    let r = budget.per_agent;
    let mut degenerate_agents = Vec::new();

    let cells = match (method, strategy) {
        (SamplingMethod::Uniform, _) => vec![vec![(QueryCell::Population, r)]; m],
        (SamplingMethod::Stratified, CollabStrategy::APriori) => {
            let populated: Vec<usize> = gt.populated_strata().collect();
            let total = budget.total();
            let share = total as f64 / populated.len() as f64;
            let counts = round_allocation(&vec![share; populated.len()], total)?;
            split_pool(&populated, &counts, r, m)
        }
        (SamplingMethod::Neyman, CollabStrategy::APriori) => {
            let joint = neyman_joint(gt, budget, weights)?;
            let populated: Vec<usize> = gt.populated_strata().collect();
            let real: Vec<f64> = populated.iter().map(|&k| joint.counts[k]).collect();
            let counts = round_allocation(&real, budget.total())?;
            split_pool(&populated, &counts, r, m)
        }
        (SamplingMethod::Stratified, _) => {
            let halves = round_allocation(&[r as f64 / 2.0; 2], r)?;
            (0..m).map(|attr| group_cells(attr, halves[1], halves[0])).collect()
        }
        (SamplingMethod::Neyman, _) => (0..m)
            .map(|attr| {
                let s1 = crate::dataset::ground_truth_sigma(gt, attr, true)?;
                let s0 = crate::dataset::ground_truth_sigma(gt, attr, false)?;
                let split = neyman_two_group(s1, s0, r)?;
                if split.degenerate {
                    degenerate_agents.push(attr);
                }
                Ok(group_cells(attr, split.r1, split.r0))
            })
            .collect::<Result<_>>()?,
    };

    Ok(AllocationPlan {
        method,
        strategy,
        budget,
        cells,
        degenerate_agents,
    })
}

fn group_cells(attr: usize, r1: u64, r0: u64) -> Vec<(QueryCell, u64)> {
    vec![
        (QueryCell::Group { attr, value: true }, r1),
        (QueryCell::Group { attr, value: false }, r0),
    ]
}

/// Deal a coordinated pool of stratum counts out to agents in stratum order,
/// `per_agent` queries each.
fn split_pool(strata: &[usize], counts: &[u64], per_agent: u64, m: usize) -> Vec<Vec<(QueryCell, u64)>> {
    let mut agents = vec![Vec::new(); m];
    let mut agent = 0;
    let mut room = per_agent;
    for (&k, &count) in strata.iter().zip(counts) {
        let mut left = count;
        while left > 0 {
            let take = left.min(room);
            agents[agent].push((QueryCell::Stratum(k), take));
            left -= take;
            room -= take;
            if room == 0 && agent + 1 < m {
                agent += 1;
                room = per_agent;
            }
        }
    }
    agents
}

/// Largest-remainder rounding of non-negative reals to integers summing to `total`.
///
/// Ties in the fractional part go to the lowest index.
pub fn round_allocation(real: &[f64], total: u64) -> Result<Vec<u64>> {
    if let Some(x) = real.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Contract(format!("cannot round negative or non-finite count {x}")));
    }
    let sum: f64 = real.iter().sum();
    if (sum - total as f64).abs() > 1e-6 * (total as f64).max(1.0) {
        return Err(Error::Contract(format!(
            "real counts sum to {sum}, expected {total}"
        )));
    }
    let mut out: Vec<u64> = real.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let missing = total.saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..real.len()).collect();
    // stable sort keeps the lowest index first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = real[a] - real[a].floor();
        let rb = real[b] - real[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(missing) {
        out[i] += 1;
    }
    Ok(out)
}

/// Result of the two-group Neyman split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TwoGroupSplit {
    pub r1: u64,
    pub r0: u64,
    /// Both deviations were zero; the split fell back to halves.
    pub degenerate: bool,
}

/// Continuous minimiser of `s1/sqrt(x) + s0/sqrt(R - x)`: `x = R s1^(2/3) / (s1^(2/3) + s0^(2/3))`.
pub fn neyman_two_group_real(s1: f64, s0: f64, r: f64) -> f64 {
    let a = s1.powf(2.0 / 3.0);
    let b = s0.powf(2.0 / 3.0);
    if a + b == 0.0 {
        r / 2.0
    } else {
        r * a / (a + b)
    }
}

/// Integer split of `r` queries between the two groups of one attribute minimising
/// `s1/sqrt(r1) + s0/sqrt(r0)` with at least one query per group.
pub fn neyman_two_group(s1: f64, s0: f64, r: u64) -> Result<TwoGroupSplit> {
    if r < 2 {
        return Err(Error::Allocation(format!(
            "two-group split needs at least 2 queries, got {r}"
        )));
    }
    if !(s1 >= 0.0 && s0 >= 0.0 && s1.is_finite() && s0.is_finite()) {
        return Err(Error::Domain(format!("invalid deviations ({s1}, {s0})")));
    }
    if s1 == 0.0 && s0 == 0.0 {
        return Ok(TwoGroupSplit {
            r1: r / 2,
            r0: r - r / 2,
            degenerate: true,
        });
    }
    let cont = neyman_two_group_real(s1, s0, r as f64);
    let cost = |r1: u64| s1 / (r1 as f64).sqrt() + s0 / ((r - r1) as f64).sqrt();
    let clamp = |x: f64| (x.max(1.0) as u64).clamp(1, r - 1);
    let lo = clamp(cont.floor());
    let hi = clamp(cont.ceil());
    let r1 = if cost(hi) < cost(lo) { hi } else { lo };
    Ok(TwoGroupSplit {
        r1,
        r0: r - r1,
        degenerate: false,
    })
}

/// `(stratum, w_k^2 sigma_k^2)` pairs of one attribute side.
pub(crate) type VarianceTerms = Vec<(usize, f64)>;

/// Per-group stratified variance terms for every attribute and side:
/// `terms[attr][value]`.
pub(crate) fn stratified_terms(
    gt: &GroundTruth,
    weights: WeightModel,
) -> Result<Vec<[VarianceTerms; 2]>> {
    (0..gt.num_attributes())
        .map(|attr| {
            Ok([
                gt.stratified_variance_terms(attr, false, weights)?,
                gt.stratified_variance_terms(attr, true, weights)?,
            ])
        })
        .collect()
}

/// Average over agents of the stratified-estimator standard error
/// `sum_v sqrt(sum_k w_k^2 sigma_k^2 / n_k)` for real per-stratum counts `n`.
pub fn stratified_error(gt: &GroundTruth, counts: &[f64], weights: WeightModel) -> Result<f64> {
    if counts.len() != gt.num_strata() {
        return Err(Error::Contract(format!(
            "expected {} stratum counts, got {}",
            gt.num_strata(),
            counts.len()
        )));
    }
    let terms = stratified_terms(gt, weights)?;
    let mut total = 0.0;
    for sides in &terms {
        for side in sides {
            let mut var = 0.0;
            for &(k, a) in side {
                if a > 0.0 {
                    if counts[k] <= 0.0 {
                        return Err(Error::Domain(format!(
                            "stratum {k} has positive variance but no queries"
                        )));
                    }
                    var += a / counts[k];
                }
            }
            total += var.sqrt();
        }
    }
    Ok(total / terms.len() as f64)
}

/// Continuous coordinated Neyman allocation over strata.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointAllocation {
    /// Real-valued queries per stratum (zero for empty strata); sums to `m R`.
    pub counts: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Relative KKT stationarity residual at the returned point.
    pub residual: f64,
}

pub const JOINT_TOLERANCE: f64 = 1e-9;
pub const JOINT_MAX_ITERATIONS: usize = 100_000;

/// Minimise the average stratified standard error over all agents subject to
/// `sum_k n_k = m R` and `n_k >= 1` on every populated stratum.
///
/// The objective is convex; it is minimised by projected gradient descent with
/// Barzilai-Borwein steps and a non-monotone backtracking line search.
pub fn neyman_joint(gt: &GroundTruth, budget: BudgetSpec, weights: WeightModel) -> Result<JointAllocation> {
    if gt.num_attributes() != budget.agents {
        return Err(Error::Config(format!(
            "{} agents need a {}-attribute instance, got {} attributes",
            budget.agents,
            budget.agents,
            gt.num_attributes()
        )));
    }
    let populated: Vec<usize> = gt.populated_strata().collect();
    let total = budget.total() as f64;
    if (populated.len() as f64) > total {
        return Err(Error::Allocation(format!(
            "total budget {} cannot cover {} populated strata",
            budget.total(),
            populated.len()
        )));
    }
    let mut position = vec![usize::MAX; gt.num_strata()];
    for (d, &k) in populated.iter().enumerate() {
        position[k] = d;
    }
    let groups: Vec<Vec<(usize, f64)>> = stratified_terms(gt, weights)?
        .into_iter()
        .flat_map(|sides| sides.into_iter())
        .map(|side| {
            side.into_iter()
                .filter(|&(_, a)| a > 0.0)
                .map(|(k, a)| (position[k], a))
                .collect::<Vec<_>>()
        })
        .filter(|side| !side.is_empty())
        .collect();
    let problem = JointProblem {
        groups,
        dim: populated.len(),
        scale: 1.0 / budget.agents as f64,
        total,
        lower: 1.0,
    };
    let solution = problem.solve()?;
    let mut counts = vec![0.0; gt.num_strata()];
    for (d, &k) in populated.iter().enumerate() {
        counts[k] = solution.x[d];
    }
    Ok(JointAllocation {
        counts,
        objective: solution.objective,
        iterations: solution.iterations,
        residual: solution.residual,
    })
}

struct JointProblem {
    /// Each group contributes `sqrt(sum a / x_d)` over its `(d, a)` terms.
    groups: Vec<Vec<(usize, f64)>>,
    dim: usize,
    scale: f64,
    total: f64,
    lower: f64,
}

struct JointSolution {
    x: Vec<f64>,
    objective: f64,
    iterations: usize,
    residual: f64,
}

impl JointProblem {
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for group in &self.groups {
            let var: f64 = group.iter().map(|&(d, a)| a / x[d]).sum();
            let se = var.sqrt();
            value += se;
            let coef = self.scale / (2.0 * se);
            for &(d, a) in group {
                grad[d] -= coef * a / (x[d] * x[d]);
            }
        }
        value * self.scale
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&(d, a)| a / x[d]).sum::<f64>().sqrt())
            .sum::<f64>()
            * self.scale
    }

    /// Euclidean projection onto `{x >= lower, sum x = total}`.
    fn project(&self, y: &[f64], out: &mut [f64]) {
        let budget = self.total - self.lower * self.dim as f64;
        let mut u: Vec<f64> = y.iter().map(|v| v - self.lower).collect();
        u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let mut cumulative = 0.0;
        let mut theta = 0.0;
        for (j, &uj) in u.iter().enumerate() {
            cumulative += uj;
            let t = (cumulative - budget) / (j + 1) as f64;
            if uj - t > 0.0 {
                theta = t;
            }
        }
        for (o, v) in out.iter_mut().zip(y) {
            *o = self.lower + (v - self.lower - theta).max(0.0);
        }
    }

    /// Relative KKT residual: spread of the gradient over free coordinates plus
    /// any bound coordinate whose gradient is below the free-coordinate multiplier.
    fn residual(&self, x: &[f64], grad: &[f64]) -> f64 {
        let free: Vec<f64> = x
            .iter()
            .zip(grad)
            .filter(|&(&xi, _)| xi > self.lower)
            .map(|(_, &g)| g)
            .collect();
        if free.is_empty() {
            return 0.0;
        }
        let lambda = free.iter().sum::<f64>() / free.len() as f64;
        if lambda == 0.0 {
            return 0.0;
        }
        let spread = free.iter().map(|g| (g - lambda).abs()).fold(0.0, f64::max);
        let bound = x
            .iter()
            .zip(grad)
            .filter(|&(&xi, _)| xi <= self.lower)
            .map(|(_, &g)| (lambda - g).max(0.0))
            .fold(0.0, f64::max);
        spread.max(bound) / lambda.abs()
    }

    fn solve(&self) -> Result<JointSolution> {
        let n = self.dim;
        let uniform = vec![self.total / n as f64; n];
        if self.groups.is_empty() {
            return Ok(JointSolution {
                x: uniform,
                objective: 0.0,
                iterations: 0,
                residual: 0.0,
            });
        }
        // Start from the fixed point of the stationarity condition at the uniform
        // allocation: x_d proportional to sqrt(-grad_d).
        let mut grad = vec![0.0; n];
        self.value_and_gradient(&uniform, &mut grad);
        let mut x = vec![0.0; n];
        let weights: Vec<f64> = grad.iter().map(|g| (-g).max(0.0).sqrt()).collect();
        let wsum: f64 = weights.iter().sum();
        let start: Vec<f64> = weights.iter().map(|w| self.total * w / wsum).collect();
        self.project(&start, &mut x);

        let mut f = self.value_and_gradient(&x, &mut grad);
        const MEMORY: usize = 10;
        let mut history = std::collections::VecDeque::from(vec![f]);
        let mut step = self.total / grad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-300) * 1e-3;
        let mut trial = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut trial_grad = vec![0.0; n];
        let mut residual = self.residual(&x, &grad);

        for iteration in 0..JOINT_MAX_ITERATIONS {
            if residual <= JOINT_TOLERANCE {
                return Ok(JointSolution {
                    x,
                    objective: f,
                    iterations: iteration,
                    residual,
                });
            }
            let reference = history.iter().cloned().fold(f64::MIN, f64::max);
            let mut alpha = step;
            let mut accepted = false;
            for _ in 0..60 {
                for d in 0..n {
                    y[d] = x[d] - alpha * grad[d];
                }
                self.project(&y, &mut trial);
                let decrease: f64 = (0..n).map(|d| grad[d] * (trial[d] - x[d])).sum();
                let ft = self.value(&trial);
                // slack absorbs rounding once the objective has converged to machine precision
                if ft <= reference + 1e-4 * decrease + 4.0 * f64::EPSILON * reference.abs() {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            let ft = self.value_and_gradient(&trial, &mut trial_grad);
            let (mut ss, mut sy) = (0.0, 0.0);
            for d in 0..n {
                let s = trial[d] - x[d];
                let yd = trial_grad[d] - grad[d];
                ss += s * s;
                sy += s * yd;
            }
            step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e30) } else { alpha * 2.0 };
            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut grad, &mut trial_grad);
            f = ft;
            history.push_back(f);
            if history.len() > MEMORY {
                history.pop_front();
            }
            residual = self.residual(&x, &grad);
        }
        if residual <= JOINT_TOLERANCE {
            return Ok(JointSolution {
                x,
                objective: f,
                iterations: JOINT_MAX_ITERATIONS,
                residual,
            });
        }
        Err(Error::Optimizer {
            iterations: JOINT_MAX_ITERATIONS,
            residual,
            objective: f,
        })
    }
}
