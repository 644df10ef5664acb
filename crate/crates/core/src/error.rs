use serde::Serialize;
use thiserror::Error;

use crate::memsim::MemError;
use crate::moe::MoeError;
use crate::packing::PackingError;
use crate::pipeline::PipelineError;
use crate::sharding::ShardingError;
use crate::workload::WorkloadError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Sharding(#[from] ShardingError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Stable, machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Workload(e) => match e {
                WorkloadError::NotFound(_) => "trace-not-found",
                WorkloadError::Io(_) => "io",
                WorkloadError::Parse { .. } => "trace-parse",
                WorkloadError::DuplicateId { .. } => "duplicate-id",
                WorkloadError::Empty => "empty-trace",
                WorkloadError::InvalidSample { .. } => "invalid-sample",
                WorkloadError::InvalidSpec(_) => "invalid-trace-spec",
            },
            Error::Packing(e) => packing_kind(e),
            Error::Sharding(e) => sharding_kind(e),
            Error::Pipeline(e) => match e {
                PipelineError::NoMicrobatches => "no-microbatches",
                PipelineError::NoStages => "no-stages",
                PipelineError::BadConfig(_) => "bad-config",
                PipelineError::BadCosts(_) => "bad-costs",
                PipelineError::Packing(p) => packing_kind(p),
                PipelineError::Sharding { source, .. } => sharding_kind(source),
            },
            Error::Moe(e) => match e {
                MoeError::BadConfig(_) => "bad-router-config",
                MoeError::NonFiniteLogit(_) => "non-finite-logit",
                MoeError::Dimension { .. } => "dimension-mismatch",
                MoeError::NotProbability(_) => "not-probability",
            },
            Error::Mem(e) => match e {
                MemError::UnknownTag(_) => "unknown-tag",
                MemError::DoubleFree(_) => "double-free",
                MemError::TagInUse(_) => "tag-in-use",
                MemError::ZeroSize(_) => "zero-size",
            },
            Error::Config(_) => "bad-config",
            Error::Io { .. } => "io",
            Error::Context { source, .. } => source.kind(),
        }
    }

    pub fn to_report(&self) -> ErrorReport {
        let mut context = Vec::new();
        let mut cur = self;
        while let Error::Context { context: c, source } = cur {
            context.push(c.clone());
            cur = source;
        }
        ErrorReport { kind: self.kind().to_string(), message: cur.to_string(), context }
    }
}

fn packing_kind(e: &PackingError) -> &'static str {
    match e {
        PackingError::ZeroCapacity => "bad-config",
        PackingError::Oversize { .. } => "oversize-sample",
    }
}

fn sharding_kind(e: &ShardingError) -> &'static str {
    match e {
        ShardingError::TooFewUnits { .. } => "too-few-units",
        ShardingError::TooFewLayers { .. } => "too-few-layers",
        ShardingError::BadLayout(_) => "bad-layout",
        ShardingError::BadCostModel(_) => "bad-cost-model",
    }
}

/// The error object printed on stderr by the command-line runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    pub context: Vec<String>,
}
