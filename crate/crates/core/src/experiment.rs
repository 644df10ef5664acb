//! Experiment runner behind the `omnisched` binary: configuration loading,
//! scenario execution and output bundles.
//!
//! Every command produces a [`Bundle`] of named text files (always including
//! `config.resolved` and `summary.json`) that is then written to one output
//! directory. Bundles are pure functions of the resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memsim::{self, AllocPolicy, BufferShape, FragReport};
use crate::moe::{self, LoadReport, LogitSource, RouterConfig};
use crate::packing::{self, Packing, PackingPolicy, PackingReport};
use crate::pipeline::{self, CellResult, Comparison, PipelineConfig};
use crate::report::{self, MemScenario, ScheduleSummary};
use crate::sharding::{self, CostModel, ParallelLayout, PlanPolicy, ShardingError, StagePlan};
use crate::workload::{self, Modality, ModalityMix, SyntheticTraceSpec, TraceStats, WorkloadTrace};

/// The shipped heterogeneous scenario; also the base of every configuration.
pub const REPRODUCE_SCENARIO: &str = include_str!("../scenarios/reproduce.toml");

pub const SEED_ENV: &str = "OMNISCHED_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSection {
    #[serde(default = "default_trace_name")]
    pub name: String,
    pub sample_count: usize,
    /// Falls back to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub modalities: BTreeMap<Modality, ModalityMix>,
}

fn default_trace_name() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingScenario {
    pub modalities: Vec<Modality>,
    pub tokens_per_step: usize,
    pub steps: usize,
    /// Mean logit offset of expert 0 when `mean_offsets` is absent.
    #[serde(default = "one")]
    pub offset_magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_offsets: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub std_dev: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemsimConfig {
    pub bytes_per_token: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub capacity: u64,
    pub layouts: Vec<ParallelLayout>,
    pub packing: Vec<PackingPolicy>,
    pub plans: Vec<PlanPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_model_path: Option<PathBuf>,
    pub trace: TraceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_model: Option<CostModel>,
    pub pipeline: PipelineConfig,
    pub router: RouterConfig,
    pub routing: RoutingScenario,
    pub memsim: MemsimConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trace: Option<PathBuf>,
    pub capacity: Option<u64>,
    pub layouts: Option<Vec<ParallelLayout>>,
    pub packing: Option<Vec<PackingPolicy>>,
    pub plans: Option<Vec<PlanPolicy>>,
    pub cost_model: Option<PathBuf>,
    pub beta: Option<f64>,
    pub comm_latency: Option<f64>,
    pub num_experts: Option<usize>,
    pub top_k: Option<usize>,
    pub aux_coefficient: Option<f64>,
    pub bias_step: Option<f64>,
    pub steps: Option<usize>,
    pub tokens_per_step: Option<usize>,
    pub offset_magnitude: Option<f64>,
    pub modalities: Option<Vec<Modality>>,
    pub bytes_per_token: Option<u64>,
}

fn merge_into(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (key.as_str(), base.get_mut(&key), value) {
            // Alternative sources replace each other wholesale.
            ("trace" | "cost_model", _, v) => {
                base.insert(key, v);
            }
            ("cost_model_path", _, v) => {
                base.remove("cost_model");
                base.insert(key, v);
            }
            (_, Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_into(b, o),
            (_, _, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn resolve_relative(path: &mut Option<PathBuf>, dir: &Path) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
}

impl ExperimentConfig {
    /// The built-in scenario configuration.
    pub fn reproduce_default() -> Self {
        toml::from_str(REPRODUCE_SCENARIO).expect("shipped scenario parses")
    }

    /// Layers `file_text` (when given) over the built-in defaults. The seed
    /// falls back to `env_seed` only when the file does not set one. Relative
    /// paths resolve against `base_dir`.
    pub fn from_layers(file_text: Option<&str>, base_dir: &Path, env_seed: Option<u64>) -> Result<Self> {
        let mut base: toml::Table = REPRODUCE_SCENARIO.parse().expect("shipped scenario parses");
        let mut file_seed = false;
        if let Some(text) = file_text {
            let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            file_seed = overlay.contains_key("seed");
            merge_into(&mut base, overlay);
        }
        if !file_seed {
            if let Some(seed) = env_seed {
                base.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        let mut cfg: ExperimentConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        resolve_relative(&mut cfg.trace.path, base_dir);
        resolve_relative(&mut cfg.cost_model_path, base_dir);
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, env_seed: Option<u64>) -> Result<Self> {
        match path {
            None => Self::from_layers(None, Path::new("."), env_seed),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                let dir = p.parent().unwrap_or(Path::new("."));
                Self::from_layers(Some(&text), dir, env_seed)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.trace {
            self.trace = TraceSource { path: Some(v.clone()), synthetic: None };
        }
        if let Some(v) = o.capacity {
            self.capacity = v;
        }
        if let Some(v) = &o.layouts {
            self.layouts = v.clone();
        }
        if let Some(v) = &o.packing {
            self.packing = v.clone();
        }
        if let Some(v) = &o.plans {
            self.plans = v.clone();
        }
        if let Some(v) = &o.cost_model {
            self.cost_model_path = Some(v.clone());
            self.cost_model = None;
        }
        if let Some(v) = o.beta {
            self.pipeline.beta = v;
        }
        if let Some(v) = o.comm_latency {
            self.pipeline.comm_latency = v;
        }
        if let Some(v) = o.num_experts {
            self.router.num_experts = v;
            // Explicit offsets no longer match the expert count.
            self.routing.mean_offsets = None;
        }
        if let Some(v) = o.top_k {
            self.router.top_k = v;
        }
        if let Some(v) = o.aux_coefficient {
            self.router.aux_coefficient = v;
        }
        if let Some(v) = o.bias_step {
            self.router.bias_step = v;
        }
        if let Some(v) = o.steps {
            self.routing.steps = v;
        }
        if let Some(v) = o.tokens_per_step {
            self.routing.tokens_per_step = v;
        }
        if let Some(v) = o.offset_magnitude {
            self.routing.offset_magnitude = v;
            self.routing.mean_offsets = None;
        }
        if let Some(v) = &o.modalities {
            self.routing.modalities = v.clone();
        }
        if let Some(v) = o.bytes_per_token {
            self.memsim.bytes_per_token = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        if self.layouts.is_empty() || self.packing.is_empty() || self.plans.is_empty() {
            return bad("layouts, packing and plans must be non-empty");
        }
        match (&self.trace.path, &self.trace.synthetic) {
            (Some(_), Some(_)) => return bad("trace: give either `path` or `synthetic`, not both"),
            (None, None) => return bad("trace: one of `path` or `synthetic` is required"),
            _ => {}
        }
        if self.cost_model.is_some() && self.cost_model_path.is_some() {
            return bad("give either `cost_model` or `cost_model_path`, not both");
        }
        if self.routing.modalities.is_empty() {
            return bad("routing.modalities must be non-empty");
        }
        if self.memsim.bytes_per_token == 0 {
            return bad("memsim.bytes_per_token must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_trace(&self) -> Result<WorkloadTrace> {
        if let Some(path) = &self.trace.path {
            return Ok(workload::load_trace(path)?);
        }
        let s = self.trace.synthetic.as_ref().ok_or_else(|| Error::Config("no trace source".into()))?;
        let spec = SyntheticTraceSpec {
            name: s.name.clone(),
            sample_count: s.sample_count,
            seed: s.seed.unwrap_or(self.seed),
            modalities: s.modalities.clone(),
        };
        Ok(workload::generate_trace(&spec)?)
    }

    pub fn resolve_cost_model(&self) -> Result<CostModel> {
        match (&self.cost_model, &self.cost_model_path) {
            (Some(m), _) => {
                m.validate()?;
                Ok(m.clone())
            }
            (None, Some(p)) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                Ok(CostModel::from_toml(&text).map_err(|e| Error::from(e).context(p.display().to_string()))?)
            }
            (None, None) => Err(Error::Config("no cost model configured".into())),
        }
    }

    fn mean_offsets(&self) -> Vec<f64> {
        self.routing.mean_offsets.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; self.router.num_experts];
            if let Some(first) = v.first_mut() {
                *first = self.routing.offset_magnitude;
            }
            v
        })
    }
}

/// Named output files of one run, in write order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bundle {
    pub files: Vec<(String, String)>,
}

impl Bundle {
    fn push(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}

fn start_bundle(cfg: &ExperimentConfig) -> Bundle {
    let mut b = Bundle::default();
    b.push("config.resolved", cfg.to_toml());
    b
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackSummary {
    pub trace: String,
    pub stats: TraceStats,
    pub reports: Vec<PackingReport>,
}

pub fn run_pack(cfg: &ExperimentConfig) -> Result<Bundle> {
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;
    let reports = cfg
        .packing
        .iter()
        .map(|&p| packing::pack(&trace, cfg.capacity, p).map(|x| x.report))
        .collect::<Result<Vec<_>, _>>()?;
    let mut b = start_bundle(cfg);
    b.push("packing.csv", report::packing_csv(&reports));
    b.push("summary.json", report::to_json(&PackSummary { trace: trace.name.clone(), stats: workload::trace_stats(&trace), reports }));
    Ok(b)
}

fn check_stage_counts(model: &CostModel, layouts: &[ParallelLayout]) -> Result<()> {
    let units = model.units().len();
    for l in layouts {
        if units < l.pp {
            return Err(Error::from(ShardingError::TooFewUnits { units, stages: l.pp })
                .context(format!("layout {l}: {} pipeline stages requested, cost model has {units} units", l.pp)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanBrief {
    pub layout: ParallelLayout,
    pub policy: PlanPolicy,
    pub boundaries: Vec<usize>,
    pub stage_cost: Vec<f64>,
    pub imbalance: f64,
}

pub fn run_plan(cfg: &ExperimentConfig) -> Result<Bundle> {
    cfg.validate()?;
    let model = cfg.resolve_cost_model()?;
    check_stage_counts(&model, &cfg.layouts)?;
    let mut plans: Vec<StagePlan> = Vec::new();
    for &layout in &cfg.layouts {
        for &policy in &cfg.plans {
            let p = sharding::plan(&model, layout, policy).map_err(|e| Error::from(e).context(format!("layout {layout}, plan {policy}")))?;
            plans.push(p);
        }
    }
    let briefs: Vec<PlanBrief> = plans
        .iter()
        .map(|p| PlanBrief {
            layout: p.layout,
            policy: p.policy,
            boundaries: p.boundaries.clone(),
            stage_cost: p.stage_cost.clone(),
            imbalance: sharding::plan_imbalance(p),
        })
        .collect();
    let mut b = start_bundle(cfg);
    b.push("plans.json", report::to_json(&plans));
    b.push("plans.csv", report::plans_csv(&plans));
    b.push("summary.json", report::to_json(&briefs));
    Ok(b)
}

fn cell_schedule(
    trace: &WorkloadTrace,
    cfg: &ExperimentConfig,
    model: &CostModel,
    layout: ParallelLayout,
    pk: PackingPolicy,
    pl: PlanPolicy,
) -> Result<pipeline::ScheduleResult> {
    let packing: Packing = packing::pack(trace, cfg.capacity, pk)?;
    let plan = sharding::plan(model, layout, pl)?;
    Ok(pipeline::simulate_1f1b(&plan, &pipeline::microbatches(&packing), &cfg.pipeline)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub headline_ratio: Option<f64>,
    pub cells: Vec<CellResult>,
    pub schedules: BTreeMap<String, ScheduleSummary>,
}

fn compare(cfg: &ExperimentConfig, trace: &WorkloadTrace, model: &CostModel) -> Result<Comparison> {
    check_stage_counts(model, &cfg.layouts)?;
    Ok(pipeline::compare_configs(trace, cfg.capacity, model, &cfg.layouts, &cfg.packing, &cfg.plans, &cfg.pipeline)?)
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Bundle> {
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;
    let model = cfg.resolve_cost_model()?;
    let cmp = compare(cfg, &trace, &model)?;
    let mut b = start_bundle(cfg);
    b.push("comparison.csv", report::comparison_csv(&cmp.cells));

    let mut schedules = BTreeMap::new();
    for &layout in &cfg.layouts {
        let mut cells = vec![(PackingPolicy::Padding, PlanPolicy::Naive)];
        if cfg.packing.contains(&PackingPolicy::Ffd) && cfg.plans.contains(&PlanPolicy::Balanced) {
            cells.push((PackingPolicy::Ffd, PlanPolicy::Balanced));
        }
        for (pk, pl) in cells {
            let r = cell_schedule(&trace, cfg, &model, layout, pk, pl)?;
            let key = format!("{layout}_{pk}_{pl}");
            b.push(format!("timeline_{key}.csv"), report::timeline_csv(&r));
            schedules.insert(key, ScheduleSummary::from(&r));
        }
    }
    b.push("summary.json", report::to_json(&SimulateSummary { headline_ratio: cmp.headline_ratio, cells: cmp.cells, schedules }));
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteSummary {
    pub modality: Modality,
    pub steps: usize,
    pub initial_cov: f64,
    pub final_cov: f64,
    /// Median CoV over the first 11 steps.
    pub early_median_cov: f64,
    /// Median CoV over the last quarter of the run.
    pub late_median_cov: f64,
    pub final_bias: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-modality seed derivation so routers never share a random stream.
pub fn modality_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)
}

pub fn run_route(cfg: &ExperimentConfig) -> Result<Bundle> {
    cfg.validate()?;
    let offsets = cfg.mean_offsets();
    let mut series: Vec<(Modality, Vec<LoadReport>)> = Vec::new();
    let mut summaries = Vec::new();
    for (i, &m) in cfg.routing.modalities.iter().enumerate() {
        let source = LogitSource { mean_offsets: offsets.clone(), std_dev: cfg.routing.std_dev, seed: modality_seed(cfg.seed, i) };
        let mut state = moe::RouterState::new(m, cfg.router.num_experts);
        let reports = moe::simulate_routing_with(&mut state, &cfg.router, &source, cfg.routing.tokens_per_step, cfg.routing.steps)
            .map_err(|e| Error::from(e).context(format!("router {m}")))?;
        if !reports.is_empty() {
            let covs: Vec<f64> = reports.iter().map(|r| r.cov).collect();
            let n = covs.len();
            summaries.push(RouteSummary {
                modality: m,
                steps: n,
                initial_cov: covs[0],
                final_cov: covs[n - 1],
                early_median_cov: median(&covs[..n.min(11)]),
                late_median_cov: median(&covs[n * 3 / 4..]),
                final_bias: state.bias.clone(),
            });
        }
        series.push((m, reports));
    }
    let mut b = start_bundle(cfg);
    b.push("routing.csv", report::routing_csv(&series));
    b.push("summary.json", report::to_json(&summaries));
    Ok(b)
}

/// Buffer shape a packing policy produces: the unpacked baseline allocates
/// per-input shapes, packed policies allocate full fixed-length batches.
pub fn buffer_shape(policy: PackingPolicy) -> BufferShape {
    match policy {
        PackingPolicy::Padding => BufferShape::Dynamic,
        PackingPolicy::Stream | PackingPolicy::Ffd => BufferShape::Fixed,
    }
}

fn mem_scenarios(cfg: &ExperimentConfig, trace: &WorkloadTrace, policies: &[PackingPolicy]) -> Result<Vec<MemScenario>> {
    let mut rows = Vec::new();
    for &p in policies {
        let packing = packing::pack(trace, cfg.capacity, p)?;
        let shape = buffer_shape(p);
        let events = memsim::events_from_batches(&packing.batches, cfg.memsim.bytes_per_token, shape);
        for policy in [AllocPolicy::ExactReuseCache, AllocPolicy::NoCache] {
            let report = memsim::simulate_allocator(&events, policy)?;
            rows.push(MemScenario { scenario: p.as_str().to_string(), shape, policy, report });
        }
    }
    Ok(rows)
}

pub fn run_mem(cfg: &ExperimentConfig) -> Result<Bundle> {
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;
    let rows = mem_scenarios(cfg, &trace, &cfg.packing)?;
    let mut b = start_bundle(cfg);
    b.push("memsim.csv", report::memsim_csv(&rows));
    b.push("summary.json", report::to_json(&rows));
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellBrief {
    pub packing: PackingPolicy,
    pub plan: PlanPolicy,
    pub fill_fraction: f64,
    pub imbalance: f64,
    pub makespan: f64,
    pub bubble_fraction: f64,
    pub idle_fraction: f64,
    pub throughput: f64,
}

impl From<&CellResult> for CellBrief {
    fn from(c: &CellResult) -> Self {
        CellBrief {
            packing: c.packing,
            plan: c.plan,
            fill_fraction: c.fill_fraction,
            imbalance: c.imbalance,
            makespan: c.makespan,
            bubble_fraction: c.bubble_fraction,
            idle_fraction: c.idle_fraction,
            throughput: c.throughput,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutOutcome {
    pub layout: ParallelLayout,
    pub throughput_ratio: f64,
    pub baseline: CellBrief,
    pub optimized: CellBrief,
    /// FFD packing under the naive plan, isolating the planner's effect.
    pub packed_naive: CellBrief,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproduceSummary {
    pub scenario: String,
    pub seed: u64,
    pub samples: usize,
    pub useful_tokens: u64,
    pub capacity: u64,
    /// Smallest (ffd, balanced) / (padding, naive) throughput ratio over the
    /// scenario's layouts.
    pub throughput_ratio: f64,
    pub fill_fraction: BTreeMap<PackingPolicy, f64>,
    /// `layout -> plan -> bubble fraction`, both plans with FFD packing.
    pub bubble_fraction: BTreeMap<String, BTreeMap<PlanPolicy, f64>>,
    /// Same cells, idle share of all stage-time.
    pub idle_fraction: BTreeMap<String, BTreeMap<PlanPolicy, f64>>,
    /// Exact-reuse cache: `padded` is the unpacked baseline, `packed` is FFD.
    pub fragmentation_ratio: BTreeMap<String, f64>,
    pub new_blocks: BTreeMap<String, u64>,
    pub layouts: Vec<LayoutOutcome>,
    pub trace_stats: TraceStats,
}

fn frag_of(rows: &[MemScenario], p: PackingPolicy) -> FragReport {
    rows.iter()
        .find(|r| r.scenario == p.as_str() && r.policy == AllocPolicy::ExactReuseCache)
        .map(|r| r.report)
        .expect("scenario simulated")
}

/// Runs the shipped scenario: (padding, naive) against (ffd, balanced) at
/// every layout, plus allocator runs for the padded and packed streams.
pub fn run_reproduce(seed: Option<u64>) -> Result<(Bundle, ReproduceSummary)> {
    let mut cfg = ExperimentConfig::reproduce_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;
    let model = cfg.resolve_cost_model()?;
    let cmp = compare(&cfg, &trace, &model)?;

    let cell = |l, pk, pl| -> Result<&CellResult> {
        cmp.cell(l, pk, pl).ok_or_else(|| Error::Config(format!("scenario is missing cell {l}/{pk}/{pl}")))
    };
    let mut layouts = Vec::new();
    let mut bubble_fraction = BTreeMap::new();
    let mut idle_fraction = BTreeMap::new();
    for &l in &cfg.layouts {
        let base = cell(l, PackingPolicy::Padding, PlanPolicy::Naive)?;
        let best = cell(l, PackingPolicy::Ffd, PlanPolicy::Balanced)?;
        let packed_naive = cell(l, PackingPolicy::Ffd, PlanPolicy::Naive)?;
        bubble_fraction.insert(
            l.to_string(),
            BTreeMap::from([(PlanPolicy::Naive, packed_naive.bubble_fraction), (PlanPolicy::Balanced, best.bubble_fraction)]),
        );
        idle_fraction.insert(
            l.to_string(),
            BTreeMap::from([(PlanPolicy::Naive, packed_naive.idle_fraction), (PlanPolicy::Balanced, best.idle_fraction)]),
        );
        layouts.push(LayoutOutcome {
            layout: l,
            throughput_ratio: best.throughput / base.throughput,
            baseline: base.into(),
            optimized: best.into(),
            packed_naive: packed_naive.into(),
        });
    }
    let throughput_ratio = cmp.headline_ratio.ok_or_else(|| Error::Config("scenario lacks ffd/balanced".into()))?;

    let mut fill_fraction = BTreeMap::new();
    let mut pack_reports = Vec::new();
    for &p in &cfg.packing {
        let r = packing::pack(&trace, cfg.capacity, p)?.report;
        fill_fraction.insert(p, r.fill_fraction);
        pack_reports.push(r);
    }

    let mem = mem_scenarios(&cfg, &trace, &[PackingPolicy::Padding, PackingPolicy::Ffd])?;
    let padded = frag_of(&mem, PackingPolicy::Padding);
    let packed = frag_of(&mem, PackingPolicy::Ffd);

    let summary = ReproduceSummary {
        scenario: trace.name.clone(),
        seed: cfg.seed,
        samples: trace.len(),
        useful_tokens: trace.total_tokens(),
        capacity: cfg.capacity,
        throughput_ratio,
        fill_fraction,
        bubble_fraction,
        idle_fraction,
        fragmentation_ratio: BTreeMap::from([
            ("padded".to_string(), padded.fragmentation_ratio),
            ("packed".to_string(), packed.fragmentation_ratio),
        ]),
        new_blocks: BTreeMap::from([("padded".to_string(), padded.new_blocks), ("packed".to_string(), packed.new_blocks)]),
        layouts,
        trace_stats: workload::trace_stats(&trace),
    };

    let mut b = start_bundle(&cfg);
    b.push("summary.json", report::to_json(&summary));
    b.push("packing.csv", report::packing_csv(&pack_reports));
    b.push("comparison.csv", report::comparison_csv(&cmp.cells));
    b.push("memsim.csv", report::memsim_csv(&mem));
    b.push("trace.ndjson", trace.to_ndjson());
    Ok((b, summary))
}
