//! The loader worker: owns the store reader and the cache, serves preload
//! and fetch requests.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::cache::CacheState;
use crate::error::{Error, Result};
use crate::model::{OpId, OpType};
use crate::store::{PackedStore, Payload, ReadStats};

/// Preload one operator of `group` for every layer of the group, using the
/// trigger mask `channels`.
#[derive(Clone, Debug)]
pub(crate) struct PreloadJob {
    pub group: usize,
    pub op: OpType,
    pub channels: Vec<u32>,
}

#[derive(Debug)]
pub(crate) struct PreloadReply {
    pub group: usize,
    pub op: OpType,
    /// `entries[li]`: `(channel, payload)` for the group's `li`-th layer, ascending.
    pub entries: Vec<Vec<(u32, Payload)>>,
    pub stats: ReadStats,
    pub elapsed: Duration,
}

/// Deliver every channel of `active` for one `(layer, op)`.
#[derive(Clone, Debug)]
pub(crate) struct FetchJob {
    pub layer: usize,
    pub op: OpType,
    pub active: Vec<u32>,
    /// What the preload delivered for this `(layer, op)`, used or not.
    pub preloaded: Vec<(u32, Payload)>,
}

#[derive(Debug)]
pub(crate) struct FetchReply {
    /// Payloads aligned with the request's `active`.
    pub payloads: Vec<Payload>,
    pub from_cache: Vec<u32>,
    pub from_preload: Vec<u32>,
    pub from_flash: Vec<u32>,
    pub stats: ReadStats,
    pub cache_bytes: u64,
}

pub(crate) struct Loader<'s> {
    store: &'s PackedStore,
    cache: CacheState,
}

impl<'s> Loader<'s> {
    pub fn new(store: &'s PackedStore, cache: CacheState) -> Self {
        Self { store, cache }
    }

    pub fn into_cache(self) -> CacheState {
        self.cache
    }

    pub fn reset_context(&mut self, reset_stats: bool) {
        self.cache.reset_context(reset_stats);
    }

    /// Reads the trigger channels for all layers of the group, skipping
    /// slots already resident in the cache.
    pub fn preload(&self, job: &PreloadJob) -> Result<PreloadReply> {
        let start = Instant::now();
        let g = self.store.group(job.group)?;
        let n = g.n_layers as u32;
        let mut slots = Vec::with_capacity(job.channels.len() * g.n_layers);
        for &c in &job.channels {
            for li in 0..n {
                let id = OpId::new(g.first_layer + li as usize, job.op);
                if !self.cache.tensor(id).contains(c) {
                    slots.push(c * n + li);
                }
            }
        }
        let (payloads, stats) = self.store.read_slots(job.group, job.op, &slots)?;
        let mut entries = vec![Vec::new(); g.n_layers];
        for (slot, p) in slots.iter().zip(payloads) {
            entries[(slot % n) as usize].push((slot / n, p));
        }
        Ok(PreloadReply { group: job.group, op: job.op, entries, stats, elapsed: start.elapsed() })
    }

    /// Cache lookup, then preloaded data, then flash for whatever is left.
    /// Every miss and every unused preloaded channel is offered to the cache.
    pub fn fetch(&mut self, job: FetchJob) -> Result<FetchReply> {
        let id = OpId::new(job.layer, job.op);
        let (group, li) = self.store.header().locate(job.layer);
        let n = self.store.group(group)?.n_layers as u32;
        let access = self.cache.access(id, &job.active);
        let mut have: HashMap<u32, Payload> = access.hits.iter().copied().zip(access.payloads).collect();
        let mut preloaded: HashMap<u32, Payload> = job.preloaded.into_iter().collect();
        let mut from_preload = Vec::new();
        let mut from_flash = Vec::new();
        for &c in &access.misses {
            match preloaded.remove(&c) {
                Some(p) => {
                    from_preload.push(c);
                    have.insert(c, p);
                }
                None => from_flash.push(c),
            }
        }
        let slots: Vec<u32> = from_flash.iter().map(|&c| c * n + li as u32).collect();
        let (loaded, stats) = self.store.read_slots(group, job.op, &slots)?;
        have.extend(from_flash.iter().copied().zip(loaded));

        for &c in &access.misses {
            self.cache.admit(id, c, Arc::clone(&have[&c]));
        }
        let mut unused: Vec<(u32, Payload)> = preloaded.into_iter().collect();
        unused.sort_unstable_by_key(|e| e.0);
        for (c, p) in unused {
            self.cache.admit(id, c, p);
        }
        let payloads = job.active.iter().map(|c| Arc::clone(&have[c])).collect();
        Ok(FetchReply {
            payloads,
            from_cache: access.hits,
            from_preload,
            from_flash,
            stats,
            cache_bytes: self.cache.resident_bytes(),
        })
    }
}

pub(crate) enum Request {
    Preload(PreloadJob),
    Fetch(FetchJob),
    Reset(bool),
}

/// Runs the loader on its own thread until the request channel closes.
///
/// Fetches are answered as soon as they arrive; preload jobs are queued and
/// worked off one operator at a time whenever no fetch is waiting.
pub(crate) fn serve(
    mut loader: Loader<'_>,
    requests: Receiver<Request>,
    fetch_out: Sender<Result<FetchReply>>,
    preload_out: Sender<Result<PreloadReply>>,
) -> CacheState {
    let mut queue: VecDeque<PreloadJob> = VecDeque::new();
    loop {
        let next = if queue.is_empty() {
            match requests.recv() {
                Ok(r) => Some(r),
                Err(_) => break,
            }
        } else {
            match requests.try_recv() {
                Ok(r) => Some(r),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => break,
            }
        };
        let sent = match next {
            Some(Request::Fetch(job)) => fetch_out.send(loader.fetch(job)).is_ok(),
            Some(Request::Preload(job)) => {
                queue.push_back(job);
                true
            }
            Some(Request::Reset(stats)) => {
                loader.reset_context(stats);
                true
            }
            None => {
                let job = queue.pop_front().expect("queue is non-empty");
                preload_out.send(loader.preload(&job)).is_ok()
            }
        };
        if !sent {
            break;
        }
    }
    loader.into_cache()
}

/// The compute worker's view of the loader.
pub(crate) enum LoaderHandle<'s> {
    /// Requests execute synchronously on the caller's thread.
    Inline { loader: Loader<'s>, done: VecDeque<PreloadReply> },
    Threaded {
        requests: Sender<Request>,
        fetched: Receiver<Result<FetchReply>>,
        preloaded: Receiver<Result<PreloadReply>>,
    },
}

/// The loader thread's side of the channels: requests in, replies out.
pub(crate) type LoaderEnd = (Receiver<Request>, Sender<Result<FetchReply>>, Sender<Result<PreloadReply>>);

fn worker_gone() -> Error {
    Error::Runtime("loader worker stopped unexpectedly".into())
}

impl LoaderHandle<'_> {
    /// Creates the channels of a threaded handle and returns the loader end.
    pub fn channels() -> (Self, LoaderEnd) {
        let (req_tx, req_rx) = mpsc::channel();
        let (fetch_tx, fetch_rx) = mpsc::channel();
        let (pre_tx, pre_rx) = mpsc::channel();
        (LoaderHandle::Threaded { requests: req_tx, fetched: fetch_rx, preloaded: pre_rx }, (req_rx, fetch_tx, pre_tx))
    }

    pub fn preload(&mut self, job: PreloadJob) -> Result<()> {
        match self {
            LoaderHandle::Inline { loader, done } => {
                done.push_back(loader.preload(&job)?);
                Ok(())
            }
            LoaderHandle::Threaded { requests, .. } => requests.send(Request::Preload(job)).map_err(|_| worker_gone()),
        }
    }

    /// Next completed preload, in issue order (blocks in threaded mode).
    pub fn preload_done(&mut self) -> Result<PreloadReply> {
        match self {
            LoaderHandle::Inline { done, .. } => {
                done.pop_front().ok_or_else(|| Error::Runtime("no preload outstanding".into()))
            }
            LoaderHandle::Threaded { preloaded, .. } => preloaded.recv().map_err(|_| worker_gone())?,
        }
    }

    pub fn fetch(&mut self, job: FetchJob) -> Result<FetchReply> {
        match self {
            LoaderHandle::Inline { loader, .. } => loader.fetch(job),
            LoaderHandle::Threaded { requests, fetched, .. } => {
                requests.send(Request::Fetch(job)).map_err(|_| worker_gone())?;
                fetched.recv().map_err(|_| worker_gone())?
            }
        }
    }

    pub fn reset_context(&mut self, reset_stats: bool) -> Result<()> {
        match self {
            LoaderHandle::Inline { loader, .. } => {
                loader.reset_context(reset_stats);
                Ok(())
            }
            LoaderHandle::Threaded { requests, .. } => {
                requests.send(Request::Reset(reset_stats)).map_err(|_| worker_gone())
            }
        }
    }
}
