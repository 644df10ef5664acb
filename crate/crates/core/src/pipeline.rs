//! Discrete-event simulation of the non-interleaved 1F1B pipeline schedule,
//! throughput estimation and the packing x planning comparison matrix.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packing::{self, Packing, PackingError, PackingPolicy};
use crate::sharding::{self, CostModel, ParallelLayout, PlanPolicy, ShardingError, StagePlan};
use crate::workload::WorkloadTrace;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("no microbatches to schedule")]
    NoMicrobatches,
    #[error("plan has no pipeline stages")]
    NoStages,
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
    #[error("malformed cost table: {0}")]
    BadCosts(String),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error("layout {layout}, plan {plan}: {source}")]
    Sharding { layout: ParallelLayout, plan: PlanPolicy, source: ShardingError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Backward cost as a multiple of forward cost.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Fixed delay added to every cross-stage dependency.
    #[serde(default)]
    pub comm_latency: f64,
}

fn default_beta() -> f64 {
    2.0
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { beta: default_beta(), comm_latency: 0.0 }
    }
}

impl PipelineConfig {
    fn validate(&self) -> Result<(), PipelineError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PipelineError::BadConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.comm_latency >= 0.0 && self.comm_latency.is_finite()) {
            return Err(PipelineError::BadConfig(format!("comm_latency must be >= 0, got {}", self.comm_latency)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatch {
    pub index: usize,
    /// Tokens the stages compute on (padding included for padded batches).
    pub tokens: u64,
}

/// One microbatch per batch. Padded batches compute their full capacity.
pub fn microbatches(packing: &Packing) -> Vec<MicroBatch> {
    let padded = packing.policy() == PackingPolicy::Padding;
    packing
        .batches
        .iter()
        .enumerate()
        .map(|(index, b)| MicroBatch { index, tokens: if padded { b.capacity } else { b.used } })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    F,
    B,
    #[serde(rename = "idle")]
    Idle,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::F => "F",
            EventKind::B => "B",
            EventKind::Idle => "idle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub stage: usize,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
    pub microbatch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub stages: usize,
    pub microbatches: usize,
    pub makespan: f64,
    /// Busy time of the most loaded stage.
    pub ideal_time: f64,
    pub bubble_fraction: f64,
    /// Idle share of all stage-time, `1 - sum(busy) / (stages * makespan)`.
    pub idle_fraction: f64,
    pub stage_busy: Vec<f64>,
    pub dp: usize,
    pub tokens: u64,
    /// `dp * tokens / makespan`.
    pub throughput: f64,
    /// Per-stage busy and idle intervals, ordered by stage then start time.
    pub timeline: Vec<TimelineEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    F(usize),
    B(usize),
}

/// Operation order of one stage under non-interleaved 1F1B: `pp - stage - 1`
/// warmup forwards, then forward/backward pairs, then the remaining backwards.
fn one_f_one_b_order(stage: usize, stages: usize, m: usize) -> Vec<Op> {
    let warmup = (stages - stage - 1).min(m);
    let mut ops = Vec::with_capacity(2 * m);
    ops.extend((0..warmup).map(Op::F));
    for i in 0..m - warmup {
        ops.push(Op::F(warmup + i));
        ops.push(Op::B(i));
    }
    ops.extend((m - warmup..m).map(Op::B));
    ops
}

/// Simulates 1F1B given explicit per-(stage, microbatch) forward and
/// backward durations (`forward[stage][microbatch]`).
pub fn simulate_schedule(
    forward: &[Vec<f64>],
    backward: &[Vec<f64>],
    comm_latency: f64,
) -> Result<ScheduleResult, PipelineError> {
    let stages = forward.len();
    if stages == 0 {
        return Err(PipelineError::NoStages);
    }
    let m = forward[0].len();
    if m == 0 {
        return Err(PipelineError::NoMicrobatches);
    }
    if backward.len() != stages || forward.iter().chain(backward).any(|row| row.len() != m) {
        return Err(PipelineError::BadCosts("forward/backward tables must both be stages x microbatches".into()));
    }
    if forward.iter().chain(backward).flatten().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(PipelineError::BadCosts("durations must be finite and non-negative".into()));
    }

    let orders: Vec<Vec<Op>> = (0..stages).map(|s| one_f_one_b_order(s, stages, m)).collect();
    let mut cursor = vec![0usize; stages];
    let mut free_at = vec![0.0f64; stages];
    let mut f_end: Vec<Vec<Option<f64>>> = vec![vec![None; m]; stages];
    let mut b_end: Vec<Vec<Option<f64>>> = vec![vec![None; m]; stages];
    let mut busy: Vec<Vec<TimelineEvent>> = vec![Vec::with_capacity(2 * m); stages];
    let mut stage_busy = vec![0.0f64; stages];

    let total_ops = 2 * m * stages;
    for _ in 0..total_ops {
        // Pick the ready operation with the earliest start; ties go to the
        // lowest stage so event order is deterministic.
        let mut next: Option<(f64, usize)> = None;
        for s in 0..stages {
            let Some(&op) = orders[s].get(cursor[s]) else { continue };
            let dep = match op {
                Op::F(_) if s == 0 => Some(0.0),
                Op::F(i) => f_end[s - 1][i].map(|t| t + comm_latency),
                Op::B(i) if s + 1 == stages => f_end[s][i],
                Op::B(i) => match (b_end[s + 1][i], f_end[s][i]) {
                    (Some(down), Some(own)) => Some((down + comm_latency).max(own)),
                    _ => None,
                },
            };
            if let Some(dep) = dep {
                let start = dep.max(free_at[s]);
                if next.is_none_or(|(t, _)| start < t) {
                    next = Some((start, s));
                }
            }
        }
        let (start, s) = next.expect("1F1B order never deadlocks");
        let op = orders[s][cursor[s]];
        cursor[s] += 1;
        let (kind, i, dur) = match op {
            Op::F(i) => (EventKind::F, i, forward[s][i]),
            Op::B(i) => (EventKind::B, i, backward[s][i]),
        };
        let end = start + dur;
        match op {
            Op::F(i) => f_end[s][i] = Some(end),
            Op::B(i) => b_end[s][i] = Some(end),
        }
        free_at[s] = end;
        stage_busy[s] += dur;
        busy[s].push(TimelineEvent { stage: s, kind, start, end, microbatch: Some(i) });
    }

    let makespan = free_at.iter().copied().fold(0.0, f64::max);
    let ideal_time = stage_busy.iter().copied().fold(0.0, f64::max);
    let bubble_fraction = if makespan > 0.0 { 1.0 - ideal_time / makespan } else { 0.0 };
    let idle_fraction =
        if makespan > 0.0 { 1.0 - stage_busy.iter().sum::<f64>() / (stages as f64 * makespan) } else { 0.0 };

    let mut timeline = Vec::with_capacity(total_ops + stages);
    for (s, events) in busy.into_iter().enumerate() {
        let mut t = 0.0;
        for e in events {
            if e.start > t {
                timeline.push(TimelineEvent { stage: s, kind: EventKind::Idle, start: t, end: e.start, microbatch: None });
            }
            t = e.end;
            timeline.push(e);
        }
        if makespan > t {
            timeline.push(TimelineEvent { stage: s, kind: EventKind::Idle, start: t, end: makespan, microbatch: None });
        }
    }

    Ok(ScheduleResult {
        stages,
        microbatches: m,
        makespan,
        ideal_time,
        bubble_fraction,
        idle_fraction,
        stage_busy,
        dp: 1,
        tokens: 0,
        throughput: 0.0,
        timeline,
    })
}

/// Runs 1F1B over a stage plan: forward time is `stage_cost * tokens`,
/// backward is `beta` times forward.
pub fn simulate_1f1b(
    plan: &StagePlan,
    microbatches: &[MicroBatch],
    config: &PipelineConfig,
) -> Result<ScheduleResult, PipelineError> {
    config.validate()?;
    if plan.stage_cost.is_empty() {
        return Err(PipelineError::NoStages);
    }
    if microbatches.is_empty() {
        return Err(PipelineError::NoMicrobatches);
    }
    if let Some(mb) = microbatches.iter().find(|mb| mb.tokens == 0) {
        return Err(PipelineError::BadCosts(format!("microbatch {} has no tokens", mb.index)));
    }
    let forward: Vec<Vec<f64>> = plan
        .stage_cost
        .iter()
        .map(|&c| microbatches.iter().map(|mb| c * mb.tokens as f64).collect())
        .collect();
    let backward: Vec<Vec<f64>> =
        forward.iter().map(|row| row.iter().map(|f| config.beta * f).collect()).collect();
    let mut result = simulate_schedule(&forward, &backward, config.comm_latency)?;
    let tokens: u64 = microbatches.iter().map(|mb| mb.tokens).sum();
    result.dp = plan.layout.dp;
    result.tokens = tokens;
    result.throughput = estimate_throughput(&result, tokens, plan.layout.dp);
    Ok(result)
}

/// Uniform-stage 1F1B bubble fraction, `(pp - 1) / (m + pp - 1)`.
pub fn bubble_fraction_analytic(pp: usize, m: usize) -> f64 {
    assert!(pp >= 1 && m >= 1, "pp and m must be positive");
    (pp - 1) as f64 / (m + pp - 1) as f64
}

/// Useful tokens per unit time across all data-parallel replicas.
pub fn estimate_throughput(result: &ScheduleResult, useful_tokens: u64, dp: usize) -> f64 {
    if result.makespan <= 0.0 {
        return 0.0;
    }
    dp as f64 * useful_tokens as f64 / result.makespan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub layout: ParallelLayout,
    pub packing: PackingPolicy,
    pub plan: PlanPolicy,
    pub batch_count: u64,
    pub fill_fraction: f64,
    pub imbalance: f64,
    pub max_stage_cost: f64,
    pub makespan: f64,
    pub bubble_fraction: f64,
    pub idle_fraction: f64,
    pub useful_tokens: u64,
    pub throughput: f64,
    /// Throughput relative to the (padding, naive) cell of the same layout.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cells: Vec<CellResult>,
    /// Smallest (ffd, balanced) / (padding, naive) ratio over the layouts,
    /// when both policies are part of the sweep.
    pub headline_ratio: Option<f64>,
}

impl Comparison {
    pub fn cell(&self, layout: ParallelLayout, packing: PackingPolicy, plan: PlanPolicy) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.layout == layout && c.packing == packing && c.plan == plan)
    }
}

/// Packing -> planning -> simulation -> throughput for every (layout,
/// packing policy, plan policy) cell, in that nesting order.
pub fn compare_configs(
    trace: &WorkloadTrace,
    capacity: u64,
    cost_model: &CostModel,
    layouts: &[ParallelLayout],
    packings: &[PackingPolicy],
    plans: &[PlanPolicy],
    config: &PipelineConfig,
) -> Result<Comparison, PipelineError> {
    config.validate()?;
    let useful = trace.total_tokens();
    let mut packed: Vec<Packing> = Vec::new();
    let mut need = packings.to_vec();
    if !need.contains(&PackingPolicy::Padding) {
        need.push(PackingPolicy::Padding);
    }
    for &p in &need {
        packed.push(packing::pack(trace, capacity, p)?);
    }
    let packing_of = |p: PackingPolicy| packed.iter().find(|x| x.policy() == p).expect("packed above");

    let run_cell = |layout: ParallelLayout, pk: PackingPolicy, pl: PlanPolicy| -> Result<CellResult, PipelineError> {
        let plan = sharding::plan(cost_model, layout, pl)
            .map_err(|source| PipelineError::Sharding { layout, plan: pl, source })?;
        let packing = packing_of(pk);
        let mbs = microbatches(packing);
        let result = simulate_1f1b(&plan, &mbs, config)?;
        Ok(CellResult {
            layout,
            packing: pk,
            plan: pl,
            batch_count: packing.report.batch_count,
            fill_fraction: packing.report.fill_fraction,
            imbalance: sharding::plan_imbalance(&plan),
            max_stage_cost: plan.max_stage_cost(),
            makespan: result.makespan,
            bubble_fraction: result.bubble_fraction,
            idle_fraction: result.idle_fraction,
            useful_tokens: useful,
            throughput: estimate_throughput(&result, useful, layout.dp),
            ratio: f64::NAN,
        })
    };

    let mut keys = Vec::new();
    for &layout in layouts {
        keys.push((layout, PackingPolicy::Padding, PlanPolicy::Naive));
        for &pk in packings {
            for &pl in plans {
                if (pk, pl) != (PackingPolicy::Padding, PlanPolicy::Naive) {
                    keys.push((layout, pk, pl));
                }
            }
        }
    }

    #[cfg(feature = "parallel")]
    let results: Vec<Result<CellResult, PipelineError>> = {
        use rayon::prelude::*;
        keys.par_iter().map(|&(l, pk, pl)| run_cell(l, pk, pl)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<CellResult, PipelineError>> = keys.iter().map(|&(l, pk, pl)| run_cell(l, pk, pl)).collect();

    let computed: Vec<CellResult> = results.into_iter().collect::<Result<_, _>>()?;
    let mut cells = Vec::new();
    for &layout in layouts {
        let base = computed
            .iter()
            .find(|c| c.layout == layout && c.packing == PackingPolicy::Padding && c.plan == PlanPolicy::Naive)
            .expect("baseline cell computed")
            .throughput;
        for &pk in packings {
            for &pl in plans {
                let mut cell = computed
                    .iter()
                    .find(|c| c.layout == layout && c.packing == pk && c.plan == pl)
                    .expect("cell computed")
                    .clone();
                cell.ratio = cell.throughput / base;
                cells.push(cell);
            }
        }
    }
    let headline_ratio = if packings.contains(&PackingPolicy::Ffd) && plans.contains(&PlanPolicy::Balanced) {
        layouts
            .iter()
            .filter_map(|&l| {
                let best = computed.iter().find(|c| c.layout == l && c.packing == PackingPolicy::Ffd && c.plan == PlanPolicy::Balanced)?;
                let base = computed.iter().find(|c| c.layout == l && c.packing == PackingPolicy::Padding && c.plan == PlanPolicy::Naive)?;
                Some(best.throughput / base.throughput)
            })
            .reduce(f64::min)
    } else {
        None
    };
    Ok(Comparison { cells, headline_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(pp: usize, m: usize, f: f64, b: f64) -> ScheduleResult {
        simulate_schedule(&vec![vec![f; m]; pp], &vec![vec![b; m]; pp], 0.0).unwrap()
    }

    #[test]
    fn uniform_bubble_matches_formula() {
        let r = uniform(4, 8, 1.0, 1.0);
        assert!((r.bubble_fraction - 3.0 / 11.0).abs() < 1e-12);
        assert_eq!(r.makespan, 22.0);
        assert_eq!(bubble_fraction_analytic(4, 8), 3.0 / 11.0);
        assert_eq!(bubble_fraction_analytic(1, 5), 0.0);
        assert_eq!(bubble_fraction_analytic(4, 1), 0.75);
    }

    #[test]
    fn single_stage_has_no_bubble() {
        for m in [1, 3, 17] {
            assert_eq!(uniform(1, m, 1.5, 3.0).bubble_fraction, 0.0);
        }
    }

    #[test]
    fn two_stage_example() {
        // Hand-traced: F00[0,2] F01[2,4] F10[2,3] B10[3,5] F11[5,6] B00[5,9]
        // B11[6,8] B01[9,13].
        let r = simulate_schedule(&[vec![2.0; 2], vec![1.0; 2]], &[vec![4.0; 2], vec![2.0; 2]], 0.0).unwrap();
        assert_eq!(r.makespan, 13.0);
        assert_eq!(r.ideal_time, 12.0);
    }

    #[test]
    fn stage_warmup_respects_in_flight_limit() {
        for pp in 1..6 {
            for m in 1..9 {
                for s in 0..pp {
                    let order = one_f_one_b_order(s, pp, m);
                    let mut in_flight = 0i64;
                    for op in &order {
                        match op {
                            Op::F(_) => in_flight += 1,
                            Op::B(_) => in_flight -= 1,
                        }
                        assert!(in_flight <= (pp - s) as i64);
                        assert!(in_flight >= 0);
                    }
                    assert_eq!(order.len(), 2 * m);
                }
            }
        }
    }

    #[test]
    fn timeline_is_ordered_and_covers_makespan() {
        let r = simulate_schedule(&[vec![2.0, 1.0, 3.0], vec![1.0, 1.0, 1.0], vec![0.5; 3]], &[vec![4.0, 2.0, 6.0], vec![2.0; 3], vec![1.0; 3]], 0.25).unwrap();
        for s in 0..3 {
            let evs: Vec<_> = r.timeline.iter().filter(|e| e.stage == s).collect();
            assert_eq!(evs.first().unwrap().start, 0.0);
            assert_eq!(evs.last().unwrap().end, r.makespan);
            for w in evs.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                assert!(w[0].start <= w[0].end);
            }
        }
    }

    #[test]
    fn communication_latency_delays_dependents() {
        let base = uniform(3, 4, 1.0, 2.0).makespan;
        let with = simulate_schedule(&vec![vec![1.0; 4]; 3], &vec![vec![2.0; 4]; 3], 0.5).unwrap().makespan;
        assert!(with > base);
    }

    #[test]
    fn errors() {
        assert_eq!(simulate_schedule(&[], &[], 0.0).unwrap_err(), PipelineError::NoStages);
        assert_eq!(simulate_schedule(&[vec![]], &[vec![]], 0.0).unwrap_err(), PipelineError::NoMicrobatches);
        assert!(simulate_schedule(&[vec![1.0]], &[vec![1.0, 2.0]], 0.0).is_err());
        assert!(simulate_schedule(&[vec![f64::NAN]], &[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn throughput_arithmetic() {
        let mut r = uniform(1, 1, 25.0, 25.0);
        assert_eq!(r.makespan, 50.0);
        assert_eq!(estimate_throughput(&r, 1000, 1), 20.0);
        assert_eq!(estimate_throughput(&r, 1000, 4), 80.0);
        let full = estimate_throughput(&r, 40, 1);
        let half = estimate_throughput(&r, 20, 1);
        assert_eq!(half * 2.0, full);
        r.makespan = 0.0;
        assert_eq!(estimate_throughput(&r, 10, 1), 0.0);
    }
}
