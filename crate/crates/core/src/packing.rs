//! Sequence packing of variable-length samples into fixed-capacity batches.
//!
//! Three policies are provided: first-fit-decreasing (offline), next-fit in
//! arrival order (streaming) and the unpacked baseline that gives every
//! sample its own batch padded out to capacity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::WorkloadTrace;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackingError {
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("sample {id} has length {length}, exceeding capacity {capacity}")]
    Oversize { id: u64, length: u64, capacity: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingPolicy {
    Padding,
    Stream,
    Ffd,
}

impl PackingPolicy {
    pub const ALL: [PackingPolicy; 3] = [PackingPolicy::Padding, PackingPolicy::Stream, PackingPolicy::Ffd];

    pub fn as_str(self) -> &'static str {
        match self {
            PackingPolicy::Padding => "padding",
            PackingPolicy::Stream => "stream",
            PackingPolicy::Ffd => "ffd",
        }
    }
}

impl fmt::Display for PackingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PackingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "padding" => Ok(PackingPolicy::Padding),
            "stream" => Ok(PackingPolicy::Stream),
            "ffd" => Ok(PackingPolicy::Ffd),
            other => Err(format!("unknown packing policy `{other}` (expected padding, stream or ffd)")),
        }
    }
}

/// One sample's slot in a packed batch. The offsets double as the
/// block-diagonal attention boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedEntry {
    pub sample_id: u64,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub capacity: u64,
    pub entries: Vec<PackedEntry>,
    pub used: u64,
}

impl PackedBatch {
    fn new(capacity: u64) -> Self {
        PackedBatch { capacity, entries: Vec::new(), used: 0 }
    }

    pub fn room(&self) -> u64 {
        self.capacity - self.used
    }

    fn push(&mut self, sample_id: u64, length: u64) {
        debug_assert!(length <= self.room());
        self.entries.push(PackedEntry { sample_id, offset: self.used, length });
        self.used += length;
    }

    /// Checks the batch invariants: contiguous offsets, positive lengths,
    /// `used` equal to the summed lengths and within capacity.
    pub fn is_consistent(&self) -> bool {
        let mut next = 0;
        for e in &self.entries {
            if e.length == 0 || e.offset != next {
                return false;
            }
            next += e.length;
        }
        next == self.used && self.used <= self.capacity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingReport {
    pub policy: PackingPolicy,
    pub capacity: u64,
    pub batch_count: u64,
    pub total_tokens: u64,
    /// Useful tokens over reserved batch slots; 0 when there are no batches.
    pub fill_fraction: f64,
    pub padding_tokens: u64,
    pub largest_batch_used: u64,
}

impl PackingReport {
    fn from_batches(policy: PackingPolicy, capacity: u64, batches: &[PackedBatch]) -> Self {
        let batch_count = batches.len() as u64;
        let total_tokens: u64 = batches.iter().map(|b| b.used).sum();
        let slots = batch_count * capacity;
        PackingReport {
            policy,
            capacity,
            batch_count,
            total_tokens,
            fill_fraction: if slots == 0 { 0.0 } else { total_tokens as f64 / slots as f64 },
            padding_tokens: slots - total_tokens,
            largest_batch_used: batches.iter().map(|b| b.used).max().unwrap_or(0),
        }
    }
}

/// Output of one packing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packing {
    pub batches: Vec<PackedBatch>,
    pub report: PackingReport,
}

impl Packing {
    pub fn policy(&self) -> PackingPolicy {
        self.report.policy
    }
}

fn check_lengths(trace: &WorkloadTrace, capacity: u64) -> Result<(), PackingError> {
    if capacity == 0 {
        return Err(PackingError::ZeroCapacity);
    }
    match trace.samples.iter().find(|s| s.length > capacity) {
        Some(s) => Err(PackingError::Oversize { id: s.id, length: s.length, capacity }),
        None => Ok(()),
    }
}

/// First-fit-decreasing: longest samples first (ties by ascending id), each
/// into the first batch with room.
pub fn pack_ffd(trace: &WorkloadTrace, capacity: u64) -> Result<Packing, PackingError> {
    check_lengths(trace, capacity)?;
    let mut order: Vec<(u64, u64)> = trace.samples.iter().map(|s| (s.length, s.id)).collect();
    order.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut batches: Vec<PackedBatch> = Vec::new();
    for (length, id) in order {
        match batches.iter_mut().find(|b| b.room() >= length) {
            Some(b) => b.push(id, length),
            None => {
                let mut b = PackedBatch::new(capacity);
                b.push(id, length);
                batches.push(b);
            }
        }
    }
    let report = PackingReport::from_batches(PackingPolicy::Ffd, capacity, &batches);
    Ok(Packing { batches, report })
}

/// Next-fit in arrival order: a sample that does not fit closes the open batch.
pub fn pack_stream(trace: &WorkloadTrace, capacity: u64) -> Result<Packing, PackingError> {
    check_lengths(trace, capacity)?;
    let mut batches: Vec<PackedBatch> = Vec::new();
    for s in &trace.samples {
        let fits = batches.last().is_some_and(|b| b.room() >= s.length);
        if !fits {
            batches.push(PackedBatch::new(capacity));
        }
        batches.last_mut().expect("just pushed").push(s.id, s.length);
    }
    let report = PackingReport::from_batches(PackingPolicy::Stream, capacity, &batches);
    Ok(Packing { batches, report })
}

/// Unpacked baseline: one sample per batch, padded to capacity.
pub fn pack_padded(trace: &WorkloadTrace, capacity: u64) -> Result<Packing, PackingError> {
    check_lengths(trace, capacity)?;
    let batches: Vec<PackedBatch> = trace
        .samples
        .iter()
        .map(|s| {
            let mut b = PackedBatch::new(capacity);
            b.push(s.id, s.length);
            b
        })
        .collect();
    let report = PackingReport::from_batches(PackingPolicy::Padding, capacity, &batches);
    Ok(Packing { batches, report })
}

pub fn padding_baseline(trace: &WorkloadTrace, capacity: u64) -> Result<PackingReport, PackingError> {
    pack_padded(trace, capacity).map(|p| p.report)
}

pub fn pack(trace: &WorkloadTrace, capacity: u64, policy: PackingPolicy) -> Result<Packing, PackingError> {
    match policy {
        PackingPolicy::Padding => pack_padded(trace, capacity),
        PackingPolicy::Stream => pack_stream(trace, capacity),
        PackingPolicy::Ffd => pack_ffd(trace, capacity),
    }
}
