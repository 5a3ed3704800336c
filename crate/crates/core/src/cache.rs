//! Contextual hot-channel cache.
//!
//! Each `(layer, operator)` tensor has its own slot budget and per-channel
//! activation counters. A missed channel is admitted when there is room, or
//! when its counter is at least the smallest counter among the resident
//! channels (that channel is evicted; ties evict the lowest index).

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, OpId};
use crate::sparsity::ActiveSet;
use crate::store::Payload;

/// Residency and counters of one tensor.
#[derive(Clone, Debug, Default)]
pub struct TensorCache {
    capacity: usize,
    resident: HashMap<u32, Payload>,
    counters: Vec<u32>,
    /// `(counter, channel)` of every resident channel; the first entry is the victim.
    by_count: BTreeSet<(u32, u32)>,
    bytes: u64,
}

impl TensorCache {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self { capacity: capacity.min(dim), counters: vec![0; dim], ..Self::default() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn contains(&self, channel: u32) -> bool {
        self.resident.contains_key(&channel)
    }

    pub fn get(&self, channel: u32) -> Option<&Payload> {
        self.resident.get(&channel)
    }

    pub fn counter(&self, channel: u32) -> u32 {
        self.counters[channel as usize]
    }

    /// Resident channels, ascending.
    pub fn resident(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.resident.keys().copied().collect();
        v.sort_unstable();
        v
    }

    fn bump(&mut self, channel: u32) {
        let c = &mut self.counters[channel as usize];
        if self.resident.contains_key(&channel) {
            self.by_count.remove(&(*c, channel));
            self.by_count.insert((*c + 1, channel));
        }
        *c += 1;
    }

    fn reset_counters(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0);
        self.by_count = self.resident.keys().map(|&ch| (0, ch)).collect();
    }

    fn admit(&mut self, channel: u32, payload: Payload) -> Admission {
        if self.capacity == 0 || self.resident.contains_key(&channel) {
            return Admission::Rejected;
        }
        let count = self.counters[channel as usize];
        if self.resident.len() < self.capacity {
            self.bytes += payload.len() as u64;
            self.resident.insert(channel, payload);
            self.by_count.insert((count, channel));
            return Admission::Inserted;
        }
        let &(victim_count, victim) = self.by_count.first().expect("cache is full");
        if count < victim_count {
            return Admission::Rejected;
        }
        self.by_count.remove(&(victim_count, victim));
        let old = self.resident.remove(&victim).expect("victim is resident");
        self.bytes = self.bytes - old.len() as u64 + payload.len() as u64;
        self.resident.insert(channel, payload);
        self.by_count.insert((count, channel));
        Admission::Evicted(victim)
    }
}

/// Result of offering a channel to the cache.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Admission {
    Inserted,
    /// Inserted after evicting the given channel.
    Evicted(u32),
    /// Not cached (or already resident).
    Rejected,
}

/// Outcome of [`CacheState::access`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Access {
    pub hits: Vec<u32>,
    /// Payloads of `hits`, in the same order.
    pub payloads: Vec<Payload>,
    pub misses: Vec<u32>,
}

/// The cache of every tensor of a model plus global hit statistics.
#[derive(Clone, Debug, Default)]
pub struct CacheState {
    tensors: Vec<TensorCache>,
    n_hit: u64,
    n_miss: u64,
}

impl CacheState {
    /// One tensor per entry of `dims`, indexed by [`OpId::flat`].
    pub fn new(dims: &[usize], capacities: &[usize]) -> Result<Self> {
        if dims.len() != capacities.len() {
            return Err(Error::input("one capacity per tensor is required"));
        }
        let tensors = dims.iter().zip(capacities).map(|(&d, &c)| TensorCache::new(d, c)).collect();
        Ok(Self { tensors, n_hit: 0, n_miss: 0 })
    }

    /// Slot capacity per tensor for a byte budget: every tensor gets the same
    /// fraction `cache_bytes / S_m` of its channels (floored).
    pub fn capacities_for_budget(spec: &ModelSpec, cache_bytes: u64) -> Vec<usize> {
        let total = spec.model_bytes() as f64;
        let frac = (cache_bytes as f64 / total).min(1.0);
        spec.op_ids()
            .map(|id| {
                let dim = id.op.input_dim(spec);
                ((frac * dim as f64 + 1e-9).floor() as usize).min(dim)
            })
            .collect()
    }

    pub fn for_budget(spec: &ModelSpec, cache_bytes: u64) -> Self {
        let dims: Vec<usize> = spec.op_ids().map(|id| id.op.input_dim(spec)).collect();
        Self::new(&dims, &Self::capacities_for_budget(spec, cache_bytes)).expect("matching lengths")
    }

    /// Bytes the cache may occupy when every tensor is full.
    pub fn capacity_bytes(spec: &ModelSpec, capacities: &[usize]) -> u64 {
        spec.op_ids().zip(capacities).map(|(id, &c)| (c * spec.channel_bytes(id.op)) as u64).sum()
    }

    fn tensor_mut(&mut self, op: OpId) -> &mut TensorCache {
        &mut self.tensors[op.flat()]
    }

    pub fn tensor(&self, op: OpId) -> &TensorCache {
        &self.tensors[op.flat()]
    }

    pub fn tensors(&self) -> &[TensorCache] {
        &self.tensors
    }

    pub fn capacities(&self) -> Vec<usize> {
        self.tensors.iter().map(TensorCache::capacity).collect()
    }

    /// Zeroes every counter; residency is kept. With `reset_stats`, hit and
    /// miss totals restart too.
    pub fn reset_context(&mut self, reset_stats: bool) {
        self.tensors.iter_mut().for_each(TensorCache::reset_counters);
        if reset_stats {
            self.n_hit = 0;
            self.n_miss = 0;
        }
    }

    /// Splits `channels` (strictly increasing) into hits and misses and bumps
    /// each requested channel's counter. Nothing is admitted.
    pub fn access(&mut self, op: OpId, channels: &[u32]) -> Access {
        let t = self.tensor_mut(op);
        let mut out = Access::default();
        for &c in channels {
            t.bump(c);
            match t.resident.get(&c) {
                Some(p) => {
                    out.hits.push(c);
                    out.payloads.push(Arc::clone(p));
                }
                None => out.misses.push(c),
            }
        }
        self.n_hit += out.hits.len() as u64;
        self.n_miss += out.misses.len() as u64;
        out
    }

    pub fn admit(&mut self, op: OpId, channel: u32, payload: Payload) -> Admission {
        self.tensor_mut(op).admit(channel, payload)
    }

    pub fn n_hit(&self) -> u64 {
        self.n_hit
    }

    pub fn n_miss(&self) -> u64 {
        self.n_miss
    }

    /// `N_hit / (N_hit + N_miss)`, or 0 before any access.
    pub fn hit_rate(&self) -> f64 {
        let total = self.n_hit + self.n_miss;
        if total == 0 {
            0.0
        } else {
            self.n_hit as f64 / total as f64
        }
    }

    /// Bytes held by resident payloads.
    pub fn resident_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.bytes).sum()
    }

    /// Checks that no tensor exceeds its capacity and that the victim index
    /// mirrors residency.
    pub fn check(&self) -> Result<()> {
        for (i, t) in self.tensors.iter().enumerate() {
            if t.resident.len() > t.capacity {
                return Err(Error::Runtime(format!("tensor {i} holds {} > {} channels", t.resident.len(), t.capacity)));
            }
            let bytes: u64 = t.resident.values().map(|p| p.len() as u64).sum();
            let consistent = bytes == t.bytes
                && t.by_count.len() == t.resident.len()
                && t.by_count.iter().all(|&(n, c)| t.resident.contains_key(&c) && t.counters[c as usize] == n);
            if !consistent {
                return Err(Error::Runtime(format!("tensor {i} eviction index out of sync")));
            }
        }
        Ok(())
    }
}

/// Replays a sequence of active sets through `cache` (access, then admit every
/// miss with an empty payload) and returns the resulting hit rate.
pub fn replay<'a>(cache: &mut CacheState, trace: impl IntoIterator<Item = &'a ActiveSet>) -> f64 {
    let empty: Payload = Arc::from(Vec::new());
    for set in trace {
        let acc = cache.access(set.op, set.indices());
        for c in acc.misses {
            cache.admit(set.op, c, Arc::clone(&empty));
        }
    }
    cache.hit_rate()
}

/// Frozen residency chosen from dataset-wide selection frequencies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskCache {
    /// Resident channels per tensor (by [`OpId::flat`]), ascending.
    pub resident: Vec<Vec<u32>>,
    n_hit: u64,
    n_miss: u64,
}

impl TaskCache {
    pub fn is_resident(&self, op: OpId, channel: u32) -> bool {
        self.resident[op.flat()].binary_search(&channel).is_ok()
    }

    pub fn access(&mut self, op: OpId, channels: &[u32]) -> usize {
        let hits = channels.iter().filter(|&&c| self.is_resident(op, c)).count();
        self.n_hit += hits as u64;
        self.n_miss += (channels.len() - hits) as u64;
        hits
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.n_hit + self.n_miss;
        if total == 0 {
            0.0
        } else {
            self.n_hit as f64 / total as f64
        }
    }
}

/// Picks, per tensor, the `capacity` most frequently selected channels of
/// `trace` (ties to the lower index).
pub fn build_task_cache<'a>(
    trace: impl IntoIterator<Item = &'a ActiveSet>,
    dims: &[usize],
    capacities: &[usize],
) -> Result<TaskCache> {
    if dims.len() != capacities.len() {
        return Err(Error::input("one capacity per tensor is required"));
    }
    let mut freq: Vec<Vec<u64>> = dims.iter().map(|&d| vec![0; d]).collect();
    let mut any = false;
    for set in trace {
        any = true;
        let f = freq
            .get_mut(set.op.flat())
            .ok_or_else(|| Error::input(format!("trace names unknown tensor {}", set.op)))?;
        for &c in set.indices() {
            *f.get_mut(c as usize).ok_or_else(|| Error::input(format!("channel {c} out of range")))? += 1;
        }
    }
    if !any {
        return Err(Error::input("task cache needs a non-empty trace"));
    }
    let resident = freq
        .iter()
        .zip(capacities)
        .map(|(f, &cap)| {
            let mut order: Vec<u32> = (0..f.len() as u32).collect();
            order.sort_by(|&a, &b| f[b as usize].cmp(&f[a as usize]).then(a.cmp(&b)));
            order.truncate(cap.min(f.len()));
            order.sort_unstable();
            order
        })
        .collect();
    Ok(TaskCache { resident, n_hit: 0, n_miss: 0 })
}
