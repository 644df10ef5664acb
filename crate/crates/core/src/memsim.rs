//! Allocator model for batch input buffers.
//!
//! `ExactReuseCache` keeps freed blocks in a size-keyed pool and only reuses
//! a block whose size matches exactly, the way a caching device allocator
//! behaves for unsplit blocks. `NoCache` releases memory on free.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packing::PackedBatch;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("free of unknown tag {0}")]
    UnknownTag(u64),
    #[error("double free of tag {0}")]
    DoubleFree(u64),
    #[error("tag {0} allocated while still live")]
    TagInUse(u64),
    #[error("zero-sized allocation for tag {0}")]
    ZeroSize(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AllocEvent {
    Alloc { tag: u64, size: u64 },
    Free { tag: u64 },
}

/// How a batch's input buffer is sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferShape {
    /// Every buffer spans the batch capacity (fixed-length packed batches).
    Fixed,
    /// Every buffer matches the tokens actually present (dynamic shapes).
    Dynamic,
}

impl fmt::Display for BufferShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BufferShape::Fixed => "fixed",
            BufferShape::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocPolicy {
    ExactReuseCache,
    NoCache,
}

impl fmt::Display for AllocPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocPolicy::ExactReuseCache => "exact_reuse_cache",
            AllocPolicy::NoCache => "no_cache",
        })
    }
}

/// One alloc per batch (tagged by batch index), freed before the next.
pub fn events_from_batches(batches: &[PackedBatch], bytes_per_token: u64, shape: BufferShape) -> Vec<AllocEvent> {
    let mut events = Vec::with_capacity(2 * batches.len());
    for (i, b) in batches.iter().enumerate() {
        let tokens = match shape {
            BufferShape::Fixed => b.capacity,
            BufferShape::Dynamic => b.used,
        };
        let tag = i as u64;
        events.push(AllocEvent::Alloc { tag, size: tokens * bytes_per_token });
        events.push(AllocEvent::Free { tag });
    }
    events
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FragReport {
    pub peak_reserved: u64,
    pub peak_live: u64,
    /// Highest live total observed while reserved sat at its peak.
    pub live_at_peak_reserved: u64,
    pub fragmentation_ratio: f64,
    pub reuse_hits: u64,
    pub new_blocks: u64,
    pub final_live: u64,
    pub final_reserved: u64,
}

pub fn simulate_allocator(events: &[AllocEvent], policy: AllocPolicy) -> Result<FragReport, MemError> {
    let mut live_tags: HashMap<u64, u64> = HashMap::new();
    let mut freed: HashSet<u64> = HashSet::new();
    let mut cache: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut live, mut reserved) = (0u64, 0u64);
    let mut r = FragReport::default();

    for ev in events {
        match *ev {
            AllocEvent::Alloc { tag, size } => {
                if size == 0 {
                    return Err(MemError::ZeroSize(tag));
                }
                if live_tags.insert(tag, size).is_some() {
                    return Err(MemError::TagInUse(tag));
                }
                freed.remove(&tag);
                let hit = policy == AllocPolicy::ExactReuseCache
                    && match cache.get_mut(&size) {
                        Some(n) if *n > 0 => {
                            *n -= 1;
                            true
                        }
                        _ => false,
                    };
                if hit {
                    r.reuse_hits += 1;
                } else {
                    r.new_blocks += 1;
                    reserved += size;
                }
                live += size;
            }
            AllocEvent::Free { tag } => {
                let size = match live_tags.remove(&tag) {
                    Some(s) => s,
                    None if freed.contains(&tag) => return Err(MemError::DoubleFree(tag)),
                    None => return Err(MemError::UnknownTag(tag)),
                };
                freed.insert(tag);
                live -= size;
                match policy {
                    AllocPolicy::ExactReuseCache => *cache.entry(size).or_insert(0) += 1,
                    AllocPolicy::NoCache => reserved -= size,
                }
            }
        }
        r.peak_live = r.peak_live.max(live);
        if reserved > r.peak_reserved {
            r.peak_reserved = reserved;
            r.live_at_peak_reserved = live;
        } else if reserved == r.peak_reserved {
            r.live_at_peak_reserved = r.live_at_peak_reserved.max(live);
        }
    }
    r.fragmentation_ratio = if r.peak_reserved == 0 {
        0.0
    } else {
        (r.peak_reserved - r.live_at_peak_reserved) as f64 / r.peak_reserved as f64
    };
    r.final_live = live;
    r.final_reserved = reserved;
    Ok(r)
}
