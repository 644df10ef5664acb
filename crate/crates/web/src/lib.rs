//! Browser bindings for three interactive views: a 1F1B pipeline timeline,
//! a packing-policy comparison and a routing-balance curve. Each export takes
//! plain numbers and returns a JSON string for the page to draw.

use std::collections::BTreeMap;

use omnisched::moe::{simulate_routing_with, LogitSource, RouterConfig, RouterState};
use omnisched::packing::{pack, PackingPolicy};
use omnisched::pipeline::{bubble_fraction_analytic, simulate_schedule, EventKind};
use omnisched::workload::{generate_trace, LengthDist, Modality, ModalityMix, SyntheticTraceSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Event {
    stage: usize,
    kind: &'static str,
    start: f64,
    end: f64,
    mb: Option<usize>,
}

#[derive(Serialize)]
struct TimelineView {
    stages: usize,
    microbatches: usize,
    makespan: f64,
    bubble_fraction: f64,
    idle_fraction: f64,
    uniform_bubble: f64,
    events: Vec<Event>,
}

fn parse_costs(text: &str) -> Result<Vec<f64>, String> {
    let costs: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect::<Result<_, _>>()?;
    if costs.is_empty() || costs.len() > 16 {
        return Err("give between 1 and 16 stage costs".into());
    }
    if costs.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err("stage costs must be positive".into());
    }
    Ok(costs)
}

/// Simulates 1F1B with one forward cost per stage (backward is `beta` times
/// forward) over `m` equal microbatches.
pub fn timeline(stage_costs: &str, m: usize, beta: f64, latency: f64) -> Result<String, String> {
    let costs = parse_costs(stage_costs)?;
    if !(1..=64).contains(&m) {
        return Err("microbatches must be between 1 and 64".into());
    }
    if !(beta > 0.0 && beta.is_finite()) || !(latency >= 0.0 && latency.is_finite()) {
        return Err("beta must be positive and latency non-negative".into());
    }
    let forward: Vec<Vec<f64>> = costs.iter().map(|&c| vec![c; m]).collect();
    let backward: Vec<Vec<f64>> = costs.iter().map(|&c| vec![beta * c; m]).collect();
    let r = simulate_schedule(&forward, &backward, latency).map_err(|e| e.to_string())?;
    let events = r
        .timeline
        .iter()
        .map(|e| Event {
            stage: e.stage,
            kind: match e.kind {
                EventKind::F => "F",
                EventKind::B => "B",
                EventKind::Idle => "idle",
            },
            start: e.start,
            end: e.end,
            mb: e.microbatch,
        })
        .collect();
    let view = TimelineView {
        stages: r.stages,
        microbatches: m,
        makespan: r.makespan,
        bubble_fraction: r.bubble_fraction,
        idle_fraction: r.idle_fraction,
        uniform_bubble: bubble_fraction_analytic(costs.len(), m),
        events,
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[derive(Serialize)]
struct PolicyView {
    policy: &'static str,
    batch_count: u64,
    fill_fraction: f64,
    padding_tokens: u64,
    /// Per-batch used tokens for the first batches, for drawing.
    used: Vec<u64>,
}

#[derive(Serialize)]
struct PackingView {
    samples: usize,
    total_tokens: u64,
    capacity: u64,
    policies: Vec<PolicyView>,
}

/// Generates a seeded log-normal trace and packs it under every policy.
pub fn packing(seed: u64, samples: usize, capacity: u64, mu: f64, sigma: f64) -> Result<String, String> {
    if !(1..=20_000).contains(&samples) {
        return Err("samples must be between 1 and 20000".into());
    }
    if capacity == 0 {
        return Err("capacity must be positive".into());
    }
    let spec = SyntheticTraceSpec {
        name: "demo".into(),
        sample_count: samples,
        seed,
        modalities: BTreeMap::from([(
            Modality::Text,
            ModalityMix { weight: 1.0, length: LengthDist::LogNormal { mu, sigma, max_len: capacity }, cost_per_token: 1.0 },
        )]),
    };
    let trace = generate_trace(&spec).map_err(|e| e.to_string())?;
    let policies = PackingPolicy::ALL
        .iter()
        .map(|&p| {
            let packed = pack(&trace, capacity, p).map_err(|e| e.to_string())?;
            Ok(PolicyView {
                policy: p.as_str(),
                batch_count: packed.report.batch_count,
                fill_fraction: packed.report.fill_fraction,
                padding_tokens: packed.report.padding_tokens,
                used: packed.batches.iter().take(60).map(|b| b.used).collect(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let view = PackingView { samples, total_tokens: trace.total_tokens(), capacity, policies };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[derive(Serialize)]
struct RoutingView {
    cov: Vec<f64>,
    aux_loss: Vec<f64>,
    final_f: Vec<f64>,
    final_bias: Vec<f64>,
}

/// Routes `steps` batches of `tokens` tokens whose logits favor expert 0 by
/// `offset`, with the bias controller stepping by `bias_step`.
pub fn routing(
    experts: usize,
    top_k: usize,
    offset: f64,
    bias_step: f64,
    steps: usize,
    tokens: usize,
    seed: u64,
) -> Result<String, String> {
    if !(2..=64).contains(&experts) || steps == 0 || steps > 1000 || tokens == 0 || tokens > 8192 {
        return Err("need 2..=64 experts, 1..=1000 steps and 1..=8192 tokens".into());
    }
    let config = RouterConfig { num_experts: experts, top_k, aux_coefficient: 0.01, bias_step };
    let mut offsets = vec![0.0; experts];
    offsets[0] = offset;
    let mut state = RouterState::new(Modality::Text, experts);
    let source = LogitSource::new(offsets, seed);
    let reports = simulate_routing_with(&mut state, &config, &source, tokens, steps).map_err(|e| e.to_string())?;
    let last = reports.last().expect("at least one step");
    let view = RoutingView {
        cov: reports.iter().map(|r| r.cov).collect(),
        aux_loss: reports.iter().map(|r| r.aux_loss).collect(),
        final_f: last.f.clone(),
        final_bias: state.bias,
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[wasm_bindgen(js_name = timeline)]
pub fn timeline_js(stage_costs: &str, m: usize, beta: f64, latency: f64) -> Result<String, JsValue> {
    timeline(stage_costs, m, beta, latency).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = packing)]
pub fn packing_js(seed: u32, samples: usize, capacity: u32, mu: f64, sigma: f64) -> Result<String, JsValue> {
    packing(seed as u64, samples, capacity as u64, mu, sigma).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = routing)]
pub fn routing_js(
    experts: usize,
    top_k: usize,
    offset: f64,
    bias_step: f64,
    steps: usize,
    tokens: usize,
    seed: u32,
) -> Result<String, JsValue> {
    routing(experts, top_k, offset, bias_step, steps, tokens, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn uniform_timeline_matches_formula() {
        let v: Value = serde_json::from_str(&timeline("1,1,1,1", 8, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!(v["makespan"], 22.0);
        let b = v["bubble_fraction"].as_f64().unwrap();
        assert!((b - 3.0 / 11.0).abs() < 1e-12);
        assert_eq!(v["uniform_bubble"].as_f64().unwrap(), b);
        let busy = v["events"].as_array().unwrap().iter().filter(|e| e["kind"] != "idle").count();
        assert_eq!(busy, 2 * 4 * 8);
    }

    #[test]
    fn timeline_rejects_bad_input() {
        assert!(timeline("1,x", 4, 2.0, 0.0).is_err());
        assert!(timeline("1,0", 4, 2.0, 0.0).is_err());
        assert!(timeline("1,1", 0, 2.0, 0.0).is_err());
        assert!(timeline("1,1", 4, 0.0, 0.0).is_err());
    }

    #[test]
    fn packing_orders_policies() {
        let v: Value = serde_json::from_str(&packing(3, 500, 4096, 6.5, 0.8).unwrap()).unwrap();
        let p = v["policies"].as_array().unwrap();
        let fill: Vec<f64> = p.iter().map(|x| x["fill_fraction"].as_f64().unwrap()).collect();
        assert_eq!(p[0]["policy"], "padding");
        assert!(fill[2] >= fill[0] && fill[1] >= fill[0]);
        assert_eq!(p[0]["batch_count"], 500);
    }

    #[test]
    fn routing_balances_and_reports_next_bias() {
        let v: Value = serde_json::from_str(&routing(8, 2, 1.0, 0.01, 200, 1024, 1).unwrap()).unwrap();
        let cov: Vec<f64> = v["cov"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(cov.len(), 200);
        assert!(cov[199] < 0.5 * cov[0]);
        assert!(v["final_bias"][0].as_f64().unwrap() < -0.5);
        assert!(routing(8, 8, 1.0, 0.01, 10, 10, 1).is_err());
    }
}
