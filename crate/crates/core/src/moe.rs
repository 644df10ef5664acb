//! Sparse mixture-of-experts routing with per-modality routers and hybrid
//! load balancing: a switch-style auxiliary loss reported every step, plus a
//! sign-based bias controller that steers expert selection.
//!
//! Biases only affect which experts are selected. Combination weights are
//! always the softmax of the original logits over the selected set.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::Modality;

#[derive(Debug, Error, PartialEq)]
pub enum MoeError {
    #[error("invalid router config: {0}")]
    BadConfig(String),
    #[error("non-finite logit at expert {0}")]
    NonFiniteLogit(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("not a probability vector: {0}")]
    NotProbability(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_aux")]
    pub aux_coefficient: f64,
    /// Bias step per update; zero disables the controller.
    #[serde(default = "default_bias_step")]
    pub bias_step: f64,
}

fn default_aux() -> f64 {
    0.01
}

fn default_bias_step() -> f64 {
    0.01
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig { num_experts: 8, top_k: 2, aux_coefficient: default_aux(), bias_step: default_bias_step() }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.num_experts < 2 {
            return Err(MoeError::BadConfig(format!("num_experts must be >= 2, got {}", self.num_experts)));
        }
        if self.top_k < 1 || self.top_k >= self.num_experts {
            return Err(MoeError::BadConfig(format!(
                "top_k must satisfy 1 <= k < {}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if !(self.aux_coefficient >= 0.0 && self.aux_coefficient.is_finite()) {
            return Err(MoeError::BadConfig("aux_coefficient must be >= 0".into()));
        }
        if !(self.bias_step >= 0.0 && self.bias_step.is_finite()) {
            return Err(MoeError::BadConfig("bias_step must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub modality: Modality,
    pub bias: Vec<f64>,
    pub load_counts: Vec<u64>,
    pub tokens_routed: u64,
    pub step: u64,
}

impl RouterState {
    pub fn new(modality: Modality, num_experts: usize) -> Self {
        RouterState {
            modality,
            bias: vec![0.0; num_experts],
            load_counts: vec![0; num_experts],
            tokens_routed: 0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    /// Selected experts, highest adjusted score first.
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Selects the `k` experts with the largest `logit + bias` (ties to the lower
/// index) and weights them by the softmax of their original logits.
pub fn route_topk(logits: &[f64], bias: &[f64], k: usize) -> Result<Routing, MoeError> {
    let e = logits.len();
    if bias.len() != e {
        return Err(MoeError::Dimension { expected: e, got: bias.len() });
    }
    if k < 1 || k >= e {
        return Err(MoeError::BadConfig(format!("top_k must satisfy 1 <= k < {e}, got {k}")));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(MoeError::NonFiniteLogit(i));
    }
    if bias.iter().any(|b| !b.is_finite()) {
        return Err(MoeError::BadConfig("bias must be finite".into()));
    }
    let experts = select_topk(logits, bias, k);
    let weights = selected_softmax(logits, &experts);
    Ok(Routing { experts, weights })
}

fn select_topk(logits: &[f64], bias: &[f64], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k + 1);
    let score = |i: usize| logits[i] + bias[i];
    for i in 0..logits.len() {
        // Insert keeping descending score; equal scores keep index order.
        let s = score(i);
        let pos = chosen.iter().position(|&j| s > score(j)).unwrap_or(chosen.len());
        if pos < k {
            chosen.insert(pos, i);
            chosen.truncate(k);
        }
    }
    chosen
}

// The normalizer is summed in expert-index order so the weights depend on
// the selected set only, not on the order selection produced it in.
fn selected_softmax(logits: &[f64], selected: &[usize]) -> Vec<f64> {
    let max = selected.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut by_index = selected.to_vec();
    by_index.sort_unstable();
    let z: f64 = by_index.iter().map(|&i| (logits[i] - max).exp()).sum();
    selected.iter().map(|&i| (logits[i] - max).exp() / z).collect()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn check_probability(name: &str, v: &[f64]) -> Result<(), MoeError> {
    if v.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(MoeError::NotProbability(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(MoeError::NotProbability(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// Switch-style balancing loss `alpha * E * sum_i f_i * p_i`.
pub fn aux_loss(f: &[f64], p_mean: &[f64], alpha: f64) -> Result<f64, MoeError> {
    if f.len() != p_mean.len() {
        return Err(MoeError::Dimension { expected: f.len(), got: p_mean.len() });
    }
    if f.is_empty() {
        return Err(MoeError::NotProbability("empty vector".into()));
    }
    check_probability("f", f)?;
    check_probability("p_mean", p_mean)?;
    let dot: f64 = f.iter().zip(p_mean).map(|(a, b)| a * b).sum();
    Ok(alpha * (f.len() as f64 * dot))
}

/// Sign-based bias step: overloaded experts (`f_i > 1/E`) move down by `u`,
/// underloaded ones up by `u`, exactly balanced ones stay.
pub fn bias_update(state: &RouterState, f: &[f64], u: f64) -> Result<RouterState, MoeError> {
    let mut next = state.clone();
    apply_bias_update(&mut next, f, u)?;
    Ok(next)
}

fn apply_bias_update(state: &mut RouterState, f: &[f64], u: f64) -> Result<(), MoeError> {
    let e = state.bias.len();
    if f.len() != e {
        return Err(MoeError::Dimension { expected: e, got: f.len() });
    }
    check_probability("f", f)?;
    let target = 1.0 / e as f64;
    for (b, &fi) in state.bias.iter_mut().zip(f) {
        if fi > target {
            *b -= u;
        } else if fi < target {
            *b += u;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub step: u64,
    /// Share of routed token-slots per expert.
    pub f: Vec<f64>,
    /// Mean full-softmax router probability per expert.
    pub p_mean: Vec<f64>,
    /// Bias in effect while this step was routed.
    pub bias: Vec<f64>,
    pub cov: f64,
    pub aux_loss: f64,
}

/// Population coefficient of variation.
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Routes one batch of token logits through `state`, updates cumulative load
/// counts, reports the step and applies the bias controller.
pub fn route_step(state: &mut RouterState, config: &RouterConfig, logits: &[Vec<f64>]) -> Result<LoadReport, MoeError> {
    config.validate()?;
    let e = config.num_experts;
    if state.bias.len() != e {
        return Err(MoeError::Dimension { expected: e, got: state.bias.len() });
    }
    if logits.is_empty() {
        return Err(MoeError::BadConfig("at least one token per step is required".into()));
    }
    let mut counts = vec![0u64; e];
    let mut p_sum = vec![0.0; e];
    let mut probs = vec![0.0; e];
    for token in logits {
        if token.len() != e {
            return Err(MoeError::Dimension { expected: e, got: token.len() });
        }
        let routing = route_topk(token, &state.bias, config.top_k)?;
        for &x in &routing.experts {
            counts[x] += 1;
        }
        softmax_into(token, &mut probs);
        p_sum.iter_mut().zip(&probs).for_each(|(s, p)| *s += p);
    }
    let tokens = logits.len() as u64;
    let slots = (config.top_k as u64 * tokens) as f64;
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / slots).collect();
    let p_mean: Vec<f64> = p_sum.iter().map(|s| s / tokens as f64).collect();
    let report = LoadReport {
        step: state.step,
        cov: coefficient_of_variation(&f),
        aux_loss: aux_loss(&f, &p_mean, config.aux_coefficient)?,
        bias: state.bias.clone(),
        f,
        p_mean,
    };
    state.load_counts.iter_mut().zip(&counts).for_each(|(a, c)| *a += c);
    state.tokens_routed += tokens;
    apply_bias_update(state, &report.f, config.bias_step)?;
    Ok(report)
}

/// Seeded Gaussian logits with a fixed per-expert mean offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSource {
    pub mean_offsets: Vec<f64>,
    #[serde(default = "default_std")]
    pub std_dev: f64,
    pub seed: u64,
}

fn default_std() -> f64 {
    1.0
}

impl LogitSource {
    pub fn new(mean_offsets: Vec<f64>, seed: u64) -> Self {
        LogitSource { mean_offsets, std_dev: 1.0, seed }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn batch(&self, rng: &mut ChaCha8Rng, tokens: usize) -> Vec<Vec<f64>> {
        (0..tokens)
            .map(|_| {
                self.mean_offsets
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(rng);
                        mu + self.std_dev * z
                    })
                    .collect()
            })
            .collect()
    }
}

/// Runs `steps` routing steps of `tokens` tokens each with a fresh router.
pub fn simulate_routing(
    config: &RouterConfig,
    source: &LogitSource,
    tokens: usize,
    steps: usize,
) -> Result<Vec<LoadReport>, MoeError> {
    let mut state = RouterState::new(Modality::Text, config.num_experts);
    simulate_routing_with(&mut state, config, source, tokens, steps)
}

pub fn simulate_routing_with(
    state: &mut RouterState,
    config: &RouterConfig,
    source: &LogitSource,
    tokens: usize,
    steps: usize,
) -> Result<Vec<LoadReport>, MoeError> {
    config.validate()?;
    if source.mean_offsets.len() != config.num_experts {
        return Err(MoeError::Dimension { expected: config.num_experts, got: source.mean_offsets.len() });
    }
    if tokens == 0 {
        return Err(MoeError::BadConfig("tokens per step must be >= 1".into()));
    }
    if !(source.std_dev >= 0.0 && source.std_dev.is_finite()) || source.mean_offsets.iter().any(|m| !m.is_finite()) {
        return Err(MoeError::BadConfig("logit source parameters must be finite".into()));
    }
    let mut rng = source.rng();
    (0..steps)
        .map(|_| {
            let batch = source.batch(&mut rng, tokens);
            route_step(state, config, &batch)
        })
        .collect()
}

/// One independent router per modality over a shared expert pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRouters {
    pub config: RouterConfig,
    pub routers: BTreeMap<Modality, RouterState>,
}

impl ModalityRouters {
    pub fn new(config: RouterConfig, modalities: &[Modality]) -> Result<Self, MoeError> {
        config.validate()?;
        let routers = modalities.iter().map(|&m| (m, RouterState::new(m, config.num_experts))).collect();
        Ok(ModalityRouters { config, routers })
    }

    pub fn route(&mut self, modality: Modality, logits: &[Vec<f64>]) -> Result<LoadReport, MoeError> {
        let config = self.config;
        let state = self
            .routers
            .get_mut(&modality)
            .ok_or_else(|| MoeError::BadConfig(format!("no router for modality {modality}")))?;
        route_step(state, &config, logits)
    }

    pub fn state(&self, modality: Modality) -> Option<&RouterState> {
        self.routers.get(&modality)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEParamSpec {
    pub shared: u64,
    pub per_expert: u64,
    pub num_experts: u64,
    pub top_k: u64,
}

/// `(total, activated per token)` = `(S + E * P_e, S + k * P_e)`.
pub fn moe_param_counts(spec: &MoEParamSpec) -> (u64, u64) {
    (spec.shared + spec.num_experts * spec.per_expert, spec.shared + spec.top_k * spec.per_expert)
}

/// Candidate values for the parameter-count grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub shared: Vec<u64>,
    pub per_expert: Vec<u64>,
    pub num_experts: Vec<u64>,
    pub top_k: Vec<u64>,
}

impl Default for ParamGrid {
    /// Shared 0.1B..10B in 0.1B steps, per-expert 10M..2B in 10M steps,
    /// E in {2,4,8} plus multiples of 16 up to 512, and k in 1..=16.
    fn default() -> Self {
        const M: u64 = 1_000_000;
        let mut experts = vec![2, 4, 8];
        experts.extend((16..=512).step_by(16));
        ParamGrid {
            shared: (1..=100).map(|i| i * 100 * M).collect(),
            per_expert: (1..=200).map(|i| i * 10 * M).collect(),
            num_experts: experts,
            top_k: (1..=16).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamMatch {
    pub spec: MoEParamSpec,
    pub total: u64,
    pub activated: u64,
    /// Larger of the two relative errors.
    pub error: f64,
}

/// Exhaustive search for the grid point closest to the targets (minimizing
/// the larger relative error; first in grid order on ties). Only points with
/// `k < E` are considered.
pub fn search_param_spec(grid: &ParamGrid, target_total: f64, target_active: f64) -> Option<ParamMatch> {
    let mut best: Option<ParamMatch> = None;
    for &e in &grid.num_experts {
        for &k in grid.top_k.iter().filter(|&&k| k >= 1 && k < e) {
            for &pe in &grid.per_expert {
                for &s in &grid.shared {
                    let spec = MoEParamSpec { shared: s, per_expert: pe, num_experts: e, top_k: k };
                    let (total, activated) = moe_param_counts(&spec);
                    let err = ((total as f64 - target_total) / target_total)
                        .abs()
                        .max(((activated as f64 - target_active) / target_active).abs());
                    if best.is_none_or(|b| err < b.error) {
                        best = Some(ParamMatch { spec, total, activated, error: err });
                    }
                }
            }
        }
    }
    best
}
