//! CSV and JSON exports for packing, schedules, comparisons, routing and
//! allocator reports. CSV headers are part of the output contract.

use serde::Serialize;

use crate::memsim::{AllocPolicy, BufferShape, FragReport};
use crate::moe::LoadReport;
use crate::packing::PackingReport;
use crate::pipeline::{CellResult, ScheduleResult};
use crate::sharding::StagePlan;
use crate::workload::Modality;

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct PackingRow<'a> {
    policy: &'a str,
    batch_count: u64,
    fill_fraction: f64,
    padding_tokens: u64,
}

/// `policy,batch_count,fill_fraction,padding_tokens`
pub fn packing_csv(reports: &[PackingReport]) -> String {
    to_csv(reports.iter().map(|r| PackingRow {
        policy: r.policy.as_str(),
        batch_count: r.batch_count,
        fill_fraction: r.fill_fraction,
        padding_tokens: r.padding_tokens,
    }))
}

#[derive(Serialize)]
struct TimelineRow {
    stage: usize,
    kind: String,
    start: f64,
    end: f64,
    microbatch: Option<usize>,
}

/// `stage,kind,start,end,microbatch`; `microbatch` is empty for idle rows.
pub fn timeline_csv(result: &ScheduleResult) -> String {
    to_csv(result.timeline.iter().map(|e| TimelineRow {
        stage: e.stage,
        kind: e.kind.to_string(),
        start: e.start,
        end: e.end,
        microbatch: e.microbatch,
    }))
}

/// Summary of a schedule without the timeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleSummary {
    pub stages: usize,
    pub microbatches: usize,
    pub makespan: f64,
    pub ideal_time: f64,
    pub bubble_fraction: f64,
    pub idle_fraction: f64,
    pub stage_busy: Vec<f64>,
    pub dp: usize,
    pub tokens: u64,
    pub throughput: f64,
}

impl From<&ScheduleResult> for ScheduleSummary {
    fn from(r: &ScheduleResult) -> Self {
        ScheduleSummary {
            stages: r.stages,
            microbatches: r.microbatches,
            makespan: r.makespan,
            ideal_time: r.ideal_time,
            bubble_fraction: r.bubble_fraction,
            idle_fraction: r.idle_fraction,
            stage_busy: r.stage_busy.clone(),
            dp: r.dp,
            tokens: r.tokens,
            throughput: r.throughput,
        }
    }
}

#[derive(Serialize)]
struct CellRow {
    layout: String,
    packing: &'static str,
    plan: &'static str,
    batch_count: u64,
    fill_fraction: f64,
    imbalance: f64,
    max_stage_cost: f64,
    makespan: f64,
    bubble_fraction: f64,
    idle_fraction: f64,
    throughput: f64,
    ratio: f64,
}

pub fn comparison_csv(cells: &[CellResult]) -> String {
    to_csv(cells.iter().map(|c| CellRow {
        layout: c.layout.to_string(),
        packing: c.packing.as_str(),
        plan: c.plan.as_str(),
        batch_count: c.batch_count,
        fill_fraction: c.fill_fraction,
        imbalance: c.imbalance,
        max_stage_cost: c.max_stage_cost,
        makespan: c.makespan,
        bubble_fraction: c.bubble_fraction,
        idle_fraction: c.idle_fraction,
        throughput: c.throughput,
        ratio: c.ratio,
    }))
}

#[derive(Serialize)]
struct PlanRow {
    layout: String,
    policy: &'static str,
    stage: usize,
    first_unit: usize,
    unit_count: usize,
    stage_cost: f64,
}

pub fn plans_csv(plans: &[StagePlan]) -> String {
    to_csv(plans.iter().flat_map(|p| {
        (0..p.stage_cost.len()).map(move |s| PlanRow {
            layout: p.layout.to_string(),
            policy: p.policy.as_str(),
            stage: s,
            first_unit: p.boundaries[s],
            unit_count: p.stage_assignment[s].len(),
            stage_cost: p.stage_cost[s],
        })
    }))
}

#[derive(Serialize)]
struct RoutingRow {
    modality: &'static str,
    step: u64,
    expert: usize,
    f: f64,
    p_mean: f64,
    bias: f64,
    cov: f64,
    aux_loss: f64,
}

/// `modality,step,expert,f,p_mean,bias,cov,aux_loss`, one row per expert.
pub fn routing_csv(series: &[(Modality, Vec<LoadReport>)]) -> String {
    to_csv(series.iter().flat_map(|(m, reports)| {
        reports.iter().flat_map(move |r| {
            (0..r.f.len()).map(move |e| RoutingRow {
                modality: m.as_str(),
                step: r.step,
                expert: e,
                f: r.f[e],
                p_mean: r.p_mean[e],
                bias: r.bias[e],
                cov: r.cov,
                aux_loss: r.aux_loss,
            })
        })
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemScenario {
    pub scenario: String,
    pub shape: BufferShape,
    pub policy: AllocPolicy,
    pub report: FragReport,
}

#[derive(Serialize)]
struct MemRow<'a> {
    scenario: &'a str,
    shape: String,
    policy: String,
    peak_reserved: u64,
    peak_live: u64,
    fragmentation_ratio: f64,
    reuse_hits: u64,
    new_blocks: u64,
}

pub fn memsim_csv(rows: &[MemScenario]) -> String {
    to_csv(rows.iter().map(|m| MemRow {
        scenario: &m.scenario,
        shape: m.shape.to_string(),
        policy: m.policy.to_string(),
        peak_reserved: m.report.peak_reserved,
        peak_live: m.report.peak_live,
        fragmentation_ratio: m.report.fragmentation_ratio,
        reuse_hits: m.report.reuse_hits,
        new_blocks: m.report.new_blocks,
    }))
}
