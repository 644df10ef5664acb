//! Stage planning: placement of encoder units and LLM layers onto pipeline
//! stages under a `(dp, pp, tp)` layout.
//!
//! Units form one global sequence (encoders in declared order, then LLM
//! layers) and every stage owns a contiguous, non-empty slice of it.
//! Encoders may be split at any unit boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::Modality;

#[derive(Debug, Error, PartialEq)]
pub enum ShardingError {
    #[error("too few units: {units} units cannot fill {stages} pipeline stages")]
    TooFewUnits { units: usize, stages: usize },
    #[error("too few LLM layers: {layers} layers cannot fill {stages} pipeline stages")]
    TooFewLayers { layers: usize, stages: usize },
    #[error("invalid layout `{0}`: expected DPxPPxTP with every degree >= 1")]
    BadLayout(String),
    #[error("invalid cost model: {0}")]
    BadCostModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ParallelLayout {
    pub dp: usize,
    pub pp: usize,
    pub tp: usize,
}

impl ParallelLayout {
    pub fn new(dp: usize, pp: usize, tp: usize) -> Result<Self, ShardingError> {
        if dp == 0 || pp == 0 || tp == 0 {
            return Err(ShardingError::BadLayout(format!("{dp}x{pp}x{tp}")));
        }
        Ok(ParallelLayout { dp, pp, tp })
    }

    pub fn world_size(&self) -> usize {
        self.dp * self.pp * self.tp
    }
}

impl fmt::Display for ParallelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.dp, self.pp, self.tp)
    }
}

/// Parses `DPxPPxTP`, e.g. `1x4x2`.
impl FromStr for ParallelLayout {
    type Err = ShardingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ShardingError::BadLayout(s.to_string());
        let parts: Vec<usize> = s
            .trim()
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [dp, pp, tp] => ParallelLayout::new(dp, pp, tp).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl From<ParallelLayout> for String {
    fn from(l: ParallelLayout) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for ParallelLayout {
    type Error = ShardingError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShardUnit {
    /// Compute units per microbatch token.
    pub cost: f64,
    #[serde(default = "yes")]
    pub tp_divisible: bool,
}

fn yes() -> bool {
    true
}

impl ShardUnit {
    pub fn cost_under_tp(&self, tp: usize) -> f64 {
        if self.tp_divisible {
            self.cost / tp as f64
        } else {
            self.cost
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality: Modality,
    pub units: Vec<ShardUnit>,
}

/// Encoders plus LLM layer costs; the file form of the planner input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default)]
    pub encoders: Vec<EncoderSpec>,
    pub llm_layers: Vec<f64>,
    #[serde(default = "yes")]
    pub llm_tp_divisible: bool,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ShardingError> {
        let positive = |c: f64| c > 0.0 && c.is_finite();
        for e in &self.encoders {
            if e.units.is_empty() {
                return Err(ShardingError::BadCostModel(format!("{} encoder has no units", e.modality)));
            }
            if let Some(u) = e.units.iter().find(|u| !positive(u.cost)) {
                return Err(ShardingError::BadCostModel(format!("{} encoder unit cost {} is not positive", e.modality, u.cost)));
            }
        }
        if let Some(c) = self.llm_layers.iter().find(|&&c| !positive(c)) {
            return Err(ShardingError::BadCostModel(format!("LLM layer cost {c} is not positive")));
        }
        if self.encoders.is_empty() && self.llm_layers.is_empty() {
            return Err(ShardingError::BadCostModel("no units".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ShardingError> {
        let model: CostModel = toml::from_str(text).map_err(|e| ShardingError::BadCostModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("cost model serializes")
    }

    /// The global unit sequence with references.
    pub fn units(&self) -> Vec<(UnitRef, ShardUnit)> {
        let mut out = Vec::new();
        for (ei, e) in self.encoders.iter().enumerate() {
            for (ui, u) in e.units.iter().enumerate() {
                out.push((UnitRef::Encoder { modality: e.modality, encoder: ei, unit: ui }, *u));
            }
        }
        for (li, &cost) in self.llm_layers.iter().enumerate() {
            out.push((UnitRef::Llm { layer: li }, ShardUnit { cost, tp_divisible: self.llm_tp_divisible }));
        }
        out
    }

    pub fn encoder_unit_count(&self) -> usize {
        self.encoders.iter().map(|e| e.units.len()).sum()
    }

    /// Per-unit costs after tensor-parallel division, in global order.
    pub fn unit_costs(&self, tp: usize) -> Vec<f64> {
        self.units().iter().map(|(_, u)| u.cost_under_tp(tp)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UnitRef {
    Encoder { modality: Modality, encoder: usize, unit: usize },
    Llm { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanPolicy {
    Naive,
    Balanced,
}

impl PlanPolicy {
    pub const ALL: [PlanPolicy; 2] = [PlanPolicy::Naive, PlanPolicy::Balanced];

    pub fn as_str(self) -> &'static str {
        match self {
            PlanPolicy::Naive => "naive",
            PlanPolicy::Balanced => "balanced",
        }
    }
}

impl fmt::Display for PlanPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(PlanPolicy::Naive),
            "balanced" => Ok(PlanPolicy::Balanced),
            other => Err(format!("unknown plan policy `{other}` (expected naive or balanced)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub layout: ParallelLayout,
    pub policy: PlanPolicy,
    /// Start index of each stage in the global unit sequence (first is 0).
    pub boundaries: Vec<usize>,
    pub stage_assignment: Vec<Vec<UnitRef>>,
    pub stage_cost: Vec<f64>,
    /// Sum of all unit costs in sequence order, independent of the split.
    pub total_cost: f64,
}

impl StagePlan {
    fn from_boundaries(model: &CostModel, layout: ParallelLayout, policy: PlanPolicy, boundaries: Vec<usize>) -> Self {
        let units = model.units();
        let mut stage_assignment = Vec::with_capacity(boundaries.len());
        let mut stage_cost = Vec::with_capacity(boundaries.len());
        for (s, &start) in boundaries.iter().enumerate() {
            let end = boundaries.get(s + 1).copied().unwrap_or(units.len());
            let slice = &units[start..end];
            stage_assignment.push(slice.iter().map(|(r, _)| *r).collect());
            stage_cost.push(segment_sum(slice.iter().map(|(_, u)| u.cost_under_tp(layout.tp))));
        }
        let total_cost = segment_sum(units.iter().map(|(_, u)| u.cost_under_tp(layout.tp)));
        StagePlan { layout, policy, boundaries, stage_assignment, stage_cost, total_cost }
    }

    pub fn max_stage_cost(&self) -> f64 {
        self.stage_cost.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

// Left-to-right accumulation; the planner relies on this order so that equal
// segments always produce bit-identical sums.
fn segment_sum(costs: impl Iterator<Item = f64>) -> f64 {
    costs.fold(0.0, |acc, c| acc + c)
}

/// Exact min-max contiguous partition of the unit sequence into `pp` stages,
/// ties broken by the lexicographically smallest boundary vector.
pub fn plan_balanced_stages(model: &CostModel, layout: ParallelLayout) -> Result<StagePlan, ShardingError> {
    model.validate()?;
    let costs = model.unit_costs(layout.tp);
    let boundaries = min_max_partition(&costs, layout.pp)?;
    Ok(StagePlan::from_boundaries(model, layout, PlanPolicy::Balanced, boundaries))
}

/// Returns stage start indices of an optimal partition of `costs` into
/// `parts` non-empty contiguous segments.
pub fn min_max_partition(costs: &[f64], parts: usize) -> Result<Vec<usize>, ShardingError> {
    let n = costs.len();
    if parts == 0 || n < parts {
        return Err(ShardingError::TooFewUnits { units: n, stages: parts });
    }
    // seg[i][j] = sum of costs[i..=j]
    let mut seg = vec![vec![0.0; n]; n];
    for (i, row) in seg.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in i..n {
            acc += costs[j];
            row[j] = acc;
        }
    }
    // best[s][i]: optimal max cost of splitting the suffix i.. into s segments.
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; n + 1]; parts + 1];
    for i in 0..n {
        best[1][i] = seg[i][n - 1];
    }
    for s in 2..=parts {
        for i in 0..=n - s {
            let mut v = inf;
            for j in i + 1..=n - s + 1 {
                v = v.min(seg[i][j - 1].max(best[s - 1][j]));
            }
            best[s][i] = v;
        }
    }
    let target = best[parts][0];
    let mut boundaries = Vec::with_capacity(parts);
    let mut start = 0;
    for s in (1..=parts).rev() {
        boundaries.push(start);
        if s == 1 {
            break;
        }
        let next = (start + 1..=n - s + 1)
            .find(|&j| seg[start][j - 1] <= target && best[s - 1][j] <= target)
            .expect("optimal continuation exists");
        start = next;
    }
    Ok(boundaries)
}

/// Baseline: every encoder unit on stage 0, LLM layers split evenly by count
/// (earlier stages take the remainder).
pub fn naive_plan(model: &CostModel, layout: ParallelLayout) -> Result<StagePlan, ShardingError> {
    model.validate()?;
    let layers = model.llm_layers.len();
    if layers < layout.pp {
        return Err(ShardingError::TooFewLayers { layers, stages: layout.pp });
    }
    let enc = model.encoder_unit_count();
    let base = layers / layout.pp;
    let extra = layers % layout.pp;
    let mut boundaries = Vec::with_capacity(layout.pp);
    let mut next = 0;
    for s in 0..layout.pp {
        boundaries.push(next);
        next += base + usize::from(s < extra);
        if s == 0 {
            next += enc;
        }
    }
    Ok(StagePlan::from_boundaries(model, layout, PlanPolicy::Naive, boundaries))
}

pub fn plan(model: &CostModel, layout: ParallelLayout, policy: PlanPolicy) -> Result<StagePlan, ShardingError> {
    match policy {
        PlanPolicy::Naive => naive_plan(model, layout),
        PlanPolicy::Balanced => plan_balanced_stages(model, layout),
    }
}

/// Max stage cost over mean stage cost; 1 means perfectly balanced.
pub fn plan_imbalance(plan: &StagePlan) -> f64 {
    let costs = &plan.stage_cost;
    if costs.is_empty() {
        return 1.0;
    }
    let mean = plan.total_cost / costs.len() as f64;
    let ratio = plan.max_stage_cost() / mean;
    // Rounding in the mean can push a perfectly even plan a hair below 1.
    if costs.iter().all(|&c| c == costs[0]) {
        1.0
    } else {
        ratio.max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llm_only(costs: &[f64]) -> CostModel {
        CostModel { encoders: vec![], llm_layers: costs.to_vec(), llm_tp_divisible: true }
    }

    fn layout(pp: usize) -> ParallelLayout {
        ParallelLayout::new(1, pp, 1).unwrap()
    }

    #[test]
    fn balanced_examples() {
        let p = plan_balanced_stages(&llm_only(&[5.0, 1.0, 1.0, 5.0]), layout(2)).unwrap();
        assert_eq!(p.boundaries, vec![0, 2]);
        assert_eq!(p.stage_cost, vec![6.0, 6.0]);

        let p = plan_balanced_stages(&llm_only(&[3.0; 4]), layout(2)).unwrap();
        assert_eq!(p.boundaries, vec![0, 2]);
        assert_eq!(p.max_stage_cost(), 6.0);

        let p = plan_balanced_stages(&llm_only(&[3.0, 1.0, 4.0]), layout(1)).unwrap();
        assert_eq!(p.stage_cost, vec![8.0]);
        assert_eq!(p.stage_assignment[0].len(), 3);
    }

    #[test]
    fn ties_pick_smallest_boundaries() {
        // [1 | 1 1] and [1 1 | 1] both give max 2.
        let p = plan_balanced_stages(&llm_only(&[1.0, 1.0, 1.0]), layout(2)).unwrap();
        assert_eq!(p.boundaries, vec![0, 1]);
    }

    #[test]
    fn too_few_units() {
        assert_eq!(
            plan_balanced_stages(&llm_only(&[1.0, 2.0]), layout(3)).unwrap_err(),
            ShardingError::TooFewUnits { units: 2, stages: 3 }
        );
        assert_eq!(
            naive_plan(&llm_only(&[1.0, 2.0]), layout(3)).unwrap_err(),
            ShardingError::TooFewLayers { layers: 2, stages: 3 }
        );
    }

    #[test]
    fn naive_puts_encoders_first() {
        let model = CostModel {
            encoders: vec![EncoderSpec {
                modality: Modality::Image,
                units: vec![ShardUnit { cost: 2.0, tp_divisible: true }, ShardUnit { cost: 4.0, tp_divisible: true }],
            }],
            llm_layers: vec![1.0; 4],
            llm_tp_divisible: true,
        };
        let p = naive_plan(&model, layout(2)).unwrap();
        assert_eq!(p.stage_cost, vec![8.0, 2.0]);
        assert_eq!(p.boundaries, vec![0, 4]);
        assert!(matches!(p.stage_assignment[0][0], UnitRef::Encoder { encoder: 0, unit: 0, .. }));
        assert_eq!(plan_imbalance(&p), 1.6);

        let one = layout(1);
        assert_eq!(naive_plan(&model, one).unwrap().stage_cost, plan_balanced_stages(&model, one).unwrap().stage_cost);
    }

    #[test]
    fn uneven_layer_split_favors_early_stages() {
        let p = naive_plan(&llm_only(&[1.0; 5]), layout(3)).unwrap();
        assert_eq!(p.stage_cost, vec![2.0, 2.0, 1.0]);
    }

    #[test]
    fn imbalance_of_even_plans_is_one() {
        let p = plan_balanced_stages(&llm_only(&[3.0; 4]), layout(2)).unwrap();
        assert_eq!(plan_imbalance(&p), 1.0);
        let p = plan_balanced_stages(&llm_only(&[6.0; 3]), layout(3)).unwrap();
        assert_eq!(plan_imbalance(&p), 1.0);
        let p = plan_balanced_stages(&llm_only(&[0.1; 9]), layout(3)).unwrap();
        assert_eq!(plan_imbalance(&p), 1.0);
    }

    #[test]
    fn tp_divides_only_divisible_units() {
        let model = CostModel {
            encoders: vec![EncoderSpec {
                modality: Modality::Audio,
                units: vec![ShardUnit { cost: 3.0, tp_divisible: false }, ShardUnit { cost: 4.0, tp_divisible: true }],
            }],
            llm_layers: vec![8.0],
            llm_tp_divisible: true,
        };
        assert_eq!(model.unit_costs(1), vec![3.0, 4.0, 8.0]);
        assert_eq!(model.unit_costs(4), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn layout_parsing() {
        let l: ParallelLayout = "2x4x1".parse().unwrap();
        assert_eq!((l.dp, l.pp, l.tp, l.world_size()), (2, 4, 1, 8));
        assert_eq!(l.to_string(), "2x4x1");
        assert!("1x0x1".parse::<ParallelLayout>().is_err());
        assert!("1x2".parse::<ParallelLayout>().is_err());
        assert!("axbxc".parse::<ParallelLayout>().is_err());
    }

    #[test]
    fn cost_model_toml() {
        let text = r#"
            llm_layers = [1.0, 1.0, 2.0]

            [[encoders]]
            modality = "image"
            units = [{ cost = 0.5 }, { cost = 0.25, tp_divisible = false }]
        "#;
        let m = CostModel::from_toml(text).unwrap();
        assert_eq!(m.encoders[0].units[1], ShardUnit { cost: 0.25, tp_divisible: false });
        assert!(m.llm_tp_divisible);
        assert_eq!(CostModel::from_toml(&m.to_toml()).unwrap(), m);
        assert!(CostModel::from_toml("llm_layers = [1.0, -2.0]").is_err());
        assert!(CostModel::from_toml("llm_layers = [1.0]\n[[encoders]]\nmodality = \"audio\"\nunits = []").is_err());
    }
}
