//! Multimodal workload model: samples, traces, trace files and seeded
//! synthetic trace generation.
//!
//! Trace files are newline-delimited JSON, one flat object per sample:
//!
//! ```text
//! # comment lines start with '#'
//! {"id":0,"modality":"text","length":512}
//! {"id":1,"modality":"video","length":3000,"cost_per_token":1.5}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace file not found: {0}")]
    NotFound(String),
    #[error("i/o error reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate sample id {id} (line {line})")]
    DuplicateId { id: u64, line: usize },
    #[error("trace file contains no samples")]
    Empty,
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: u64, reason: String },
    #[error("invalid synthetic trace spec: {0}")]
    InvalidSpec(String),
}

/// The closed set of input modalities.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Text, Modality::Image, Modality::Audio, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

fn default_cost_per_token() -> f64 {
    1.0
}

fn is_default_cost(c: &f64) -> bool {
    *c == 1.0
}

/// One variable-length training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySample {
    pub id: u64,
    pub modality: Modality,
    pub length: u64,
    #[serde(default = "default_cost_per_token", skip_serializing_if = "is_default_cost")]
    pub cost_per_token: f64,
}

impl ModalitySample {
    pub fn new(id: u64, modality: Modality, length: u64) -> Self {
        ModalitySample { id, modality, length, cost_per_token: 1.0 }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        if self.length == 0 {
            return Err(WorkloadError::InvalidSample { id: self.id, reason: "length must be >= 1".into() });
        }
        if !(self.cost_per_token > 0.0 && self.cost_per_token.is_finite()) {
            return Err(WorkloadError::InvalidSample {
                id: self.id,
                reason: format!("cost_per_token must be positive and finite, got {}", self.cost_per_token),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub name: String,
    pub samples: Vec<ModalitySample>,
}

impl WorkloadTrace {
    /// Builds a trace, checking sample invariants and id uniqueness.
    pub fn new(name: impl Into<String>, samples: Vec<ModalitySample>) -> Result<Self, WorkloadError> {
        let mut seen = HashSet::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if !seen.insert(s.id) {
                return Err(WorkloadError::DuplicateId { id: s.id, line: i + 1 });
            }
        }
        Ok(WorkloadTrace { name: name.into(), samples })
    }

    /// Convenience constructor for tests and demos: text samples with ids 0..n.
    pub fn from_lengths(name: impl Into<String>, lengths: &[u64]) -> Result<Self, WorkloadError> {
        let samples = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| ModalitySample::new(i as u64, Modality::Text, len))
            .collect();
        Self::new(name, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.samples.iter().map(|s| s.length).sum()
    }

    /// Serializes to the line-delimited trace format.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses the line-delimited trace format. Blank and `#` lines are skipped.
    pub fn parse_ndjson(name: impl Into<String>, text: &str) -> Result<Self, WorkloadError> {
        let mut samples = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let sample: ModalitySample = serde_json::from_str(line)
                .map_err(|e| WorkloadError::Parse { line: line_no, message: e.to_string() })?;
            sample.validate().map_err(|e| WorkloadError::Parse { line: line_no, message: e.to_string() })?;
            if !seen.insert(sample.id) {
                return Err(WorkloadError::DuplicateId { id: sample.id, line: line_no });
            }
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(WorkloadError::Empty);
        }
        Ok(WorkloadTrace { name: name.into(), samples })
    }
}

/// Reads a trace file, preserving record order.
pub fn load_trace(path: impl AsRef<Path>) -> Result<WorkloadTrace, WorkloadError> {
    let path = path.as_ref();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(WorkloadError::NotFound(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    WorkloadTrace::parse_ndjson(name, &text)
}

/// Length distribution for one modality in a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum LengthDist {
    /// Uniform integer lengths in `[min, max]`.
    Uniform { min: u64, max: u64 },
    /// Log-normal, rounded to the nearest integer and clamped to `[1, max_len]`.
    LogNormal { mu: f64, sigma: f64, max_len: u64 },
}

impl LengthDist {
    fn validate(&self) -> Result<(), String> {
        match *self {
            LengthDist::Uniform { min, max } => {
                if min < 1 || min > max {
                    return Err(format!("uniform bounds must satisfy 1 <= min <= max, got [{min}, {max}]"));
                }
            }
            LengthDist::LogNormal { mu, sigma, max_len } => {
                if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
                    return Err(format!("log-normal parameters invalid: mu={mu}, sigma={sigma}"));
                }
                if max_len < 1 {
                    return Err("log-normal max_len must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match *self {
            LengthDist::Uniform { min, max } => rng.gen_range(min..=max),
            LengthDist::LogNormal { mu, sigma, max_len } => {
                let x: f64 = LogNormal::new(mu, sigma).expect("validated").sample(rng);
                let rounded = x.round();
                if rounded < 1.0 {
                    1
                } else if rounded >= max_len as f64 {
                    max_len
                } else {
                    rounded as u64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityMix {
    pub weight: f64,
    #[serde(flatten)]
    pub length: LengthDist,
    #[serde(default = "default_cost_per_token")]
    pub cost_per_token: f64,
}

/// Parameters of a seeded synthetic trace.
///
/// Generation uses ChaCha8 seeded through `seed_from_u64`. Each sample draws
/// its modality first (weighted index over the modalities in `Modality`
/// order), then its length from that modality's distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    #[serde(default = "default_trace_name")]
    pub name: String,
    pub sample_count: usize,
    pub seed: u64,
    pub modalities: BTreeMap<Modality, ModalityMix>,
}

fn default_trace_name() -> String {
    "synthetic".to_string()
}

impl SyntheticTraceSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if self.sample_count < 1 {
            return bad("sample_count must be >= 1".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        let mut total = 0.0;
        for (m, mix) in &self.modalities {
            if !(mix.weight >= 0.0 && mix.weight.is_finite()) {
                return bad(format!("{m}: weight must be non-negative"));
            }
            if !(mix.cost_per_token > 0.0 && mix.cost_per_token.is_finite()) {
                return bad(format!("{m}: cost_per_token must be positive"));
            }
            mix.length.validate().map_err(|e| WorkloadError::InvalidSpec(format!("{m}: {e}")))?;
            total += mix.weight;
        }
        if total <= 0.0 {
            return bad("mixture weights must sum to a positive value".into());
        }
        Ok(())
    }
}

pub fn generate_trace(spec: &SyntheticTraceSpec) -> Result<WorkloadTrace, WorkloadError> {
    spec.validate()?;
    let entries: Vec<(&Modality, &ModalityMix)> = spec.modalities.iter().collect();
    let chooser = WeightedIndex::new(entries.iter().map(|(_, mix)| mix.weight))
        .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = (0..spec.sample_count)
        .map(|i| {
            let (&modality, mix) = entries[chooser.sample(&mut rng)];
            let length = mix.length.sample(&mut rng);
            ModalitySample { id: i as u64, modality, length, cost_per_token: mix.cost_per_token }
        })
        .collect();
    Ok(WorkloadTrace { name: spec.name.clone(), samples })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub count: u64,
    pub total_tokens: u64,
    pub min_length: Option<u64>,
    pub max_length: Option<u64>,
    pub mean_length: Option<f64>,
}

impl LengthSummary {
    fn push(&mut self, len: u64) {
        self.count += 1;
        self.total_tokens += len;
        self.min_length = Some(self.min_length.map_or(len, |m| m.min(len)));
        self.max_length = Some(self.max_length.map_or(len, |m| m.max(len)));
    }

    fn finish(&mut self) {
        self.mean_length = (self.count > 0).then(|| self.total_tokens as f64 / self.count as f64);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub overall: LengthSummary,
    pub per_modality: BTreeMap<Modality, LengthSummary>,
}

pub fn trace_stats(trace: &WorkloadTrace) -> TraceStats {
    let mut stats = TraceStats::default();
    for s in &trace.samples {
        stats.overall.push(s.length);
        stats.per_modality.entry(s.modality).or_default().push(s.length);
    }
    stats.overall.finish();
    stats.per_modality.values_mut().for_each(LengthSummary::finish);
    stats
}
