//! Browser bindings for three closed-form views of collaborative audits:
//! the error table of every (method, strategy) pair, error curves over the
//! number of agents, and the two-group Neyman split of one agent's budget.
//!
//! Every entry point takes plain numbers and returns a JSON string, so the
//! pure functions are testable natively and the page needs no bundler.

use fairaudit::allocation::{neyman_two_group, neyman_two_group_real};
use fairaudit::bounds::{
    asymptotic_scan, closed_form_table, BoundsOptions, NeymanCoordinated, SyntheticTemplate,
};
use fairaudit::datamodel::{bernoulli_sigma, BudgetSpec};
use fairaudit::estimation::standard_error;
use fairaudit::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest agent count the page may request; the joint optimum grows as `2^m`.
pub const MAX_DEMO_AGENTS: usize = 12;

#[derive(Serialize)]
struct TableRow {
    method: String,
    strategy: String,
    error: f64,
}

#[derive(Serialize)]
struct SplitResult {
    sigma1: f64,
    sigma0: f64,
    r1: u64,
    r0: u64,
    r1_continuous: f64,
    degenerate: bool,
    neyman_error: f64,
    even_error: f64,
}

fn options(scaled_neyman: bool) -> BoundsOptions {
    BoundsOptions {
        neyman_coordinated: if scaled_neyman {
            NeymanCoordinated::ScaledPerAgent
        } else {
            NeymanCoordinated::Joint
        },
        ..BoundsOptions::default()
    }
}

fn check_agents(m: usize) -> Result<()> {
    if m == 0 || m > MAX_DEMO_AGENTS {
        return Err(fairaudit::Error::Config(format!(
            "agent count {m} outside 1..={MAX_DEMO_AGENTS}"
        )));
    }
    Ok(())
}

/// Closed-form average error of all nine pairs on the synthetic population in
/// which every attribute has marginal `marginal` and the positive rate rises
/// linearly from `rate0` (no attribute set) to `rate1` (all set).
pub fn error_table(
    marginal: f64,
    rate0: f64,
    rate1: f64,
    agents: usize,
    per_agent: u64,
    scaled_neyman: bool,
) -> Result<String> {
    check_agents(agents)?;
    let gt = SyntheticTemplate::new(marginal, rate0, rate1)?.instantiate(agents)?;
    let rows: Vec<TableRow> = closed_form_table(&gt, BudgetSpec::new(per_agent, agents)?, options(scaled_neyman))?
        .into_iter()
        .map(|(method, strategy, error)| TableRow {
            method: method.to_string(),
            strategy: strategy.to_string(),
            error,
        })
        .collect();
    Ok(serde_json::to_string(&rows).expect("table rows serialise"))
}

/// Closed-form errors of every pair for `1..=max_agents` agents.
pub fn agent_scan(
    marginal: f64,
    rate0: f64,
    rate1: f64,
    max_agents: usize,
    per_agent: u64,
    scaled_neyman: bool,
) -> Result<String> {
    check_agents(max_agents)?;
    let template = SyntheticTemplate::new(marginal, rate0, rate1)?;
    let scan = asymptotic_scan(&template, 1..=max_agents, per_agent, options(scaled_neyman))?;
    Ok(serde_json::to_string(&scan.rows).expect("scan rows serialise"))
}

/// Neyman split of `per_agent` queries between two groups with positive
/// rates `rate1` and `rate0`, compared with an even split.
pub fn two_group_split(rate1: f64, rate0: f64, per_agent: u64) -> Result<String> {
    for rate in [rate1, rate0] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(fairaudit::Error::Domain(format!("rate {rate} is not a probability")));
        }
    }
    let s1 = bernoulli_sigma(rate1);
    let s0 = bernoulli_sigma(rate0);
    let split = neyman_two_group(s1, s0, per_agent)?;
    let half = per_agent as f64 / 2.0;
    let result = SplitResult {
        sigma1: s1,
        sigma0: s0,
        r1: split.r1,
        r0: split.r0,
        r1_continuous: neyman_two_group_real(s1, s0, per_agent as f64),
        degenerate: split.degenerate,
        neyman_error: standard_error(s1, s0, split.r1 as f64, split.r0 as f64)?,
        even_error: standard_error(s1, s0, half, half)?,
    };
    Ok(serde_json::to_string(&result).expect("split serialises"))
}

fn js(result: Result<String>) -> std::result::Result<String, JsValue> {
    result.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = errorTable)]
pub fn error_table_js(
    marginal: f64,
    rate0: f64,
    rate1: f64,
    agents: usize,
    per_agent: u32,
    scaled_neyman: bool,
) -> std::result::Result<String, JsValue> {
    js(error_table(marginal, rate0, rate1, agents, per_agent.into(), scaled_neyman))
}

#[wasm_bindgen(js_name = agentScan)]
pub fn agent_scan_js(
    marginal: f64,
    rate0: f64,
    rate1: f64,
    max_agents: usize,
    per_agent: u32,
    scaled_neyman: bool,
) -> std::result::Result<String, JsValue> {
    js(agent_scan(marginal, rate0, rate1, max_agents, per_agent.into(), scaled_neyman))
}

#[wasm_bindgen(js_name = twoGroupSplit)]
pub fn two_group_split_js(rate1: f64, rate0: f64, per_agent: u32) -> std::result::Result<String, JsValue> {
    js(two_group_split(rate1, rate0, per_agent.into()))
}
