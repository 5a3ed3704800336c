//! Decode loop with cross-layer-group preloading.
//!
//! The compute worker runs the model one operator at a time. For every
//! operator it selects the active input channels from the actual input,
//! asks the loader for exactly those channels, and multiplies. While it works
//! through the first layer of group `g`, it sends that layer's masks to the
//! loader as the prediction for every layer of group `g + 1`; the loader
//! reads them in the background (skipping cache-resident slots) and the
//! result becomes the next group's working set. Whatever the prediction
//! missed is read on demand. Group 0 of every step has no preload and is
//! read entirely on demand.
//!
//! In [`RunMode::Sim`] the loader runs inline and times come from the
//! bandwidth model: compute and top-k selection stream their bytes at
//! `bw_mem`, reads cost [`simulate_read_time`], and each group takes
//! `t_onload + max(t_topk + t_comp, t_preload)`. In [`RunMode::Real`] the
//! loader is a separate thread and times are measured.

mod loader;
mod trace;

use std::collections::HashMap;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use trace::{
    read_trace_csv, timing_report, write_trace_csv, DecodeTrace, GroupPlanStep, OpRecord, TimingReport, TimingSummary,
    TokenTiming, TraceRow,
};

use loader::{serve, FetchJob, Loader, LoaderHandle, PreloadJob, PreloadReply};

use crate::cache::CacheState;
use crate::error::{Error, Result};
use crate::model::{argmax, decode_step, gemv_channels, KvCache, LinearExec, ModelSpec, OpId, OpType};
use crate::planner::Plan;
use crate::sparsity::{active_quota, top_k_indices, ActiveSet, MaskSet, ThresholdTable};
use crate::store::{simulate_read_time, BandwidthModel, PackedStore, Payload, StoreHeader};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Loader thread, measured times.
    Real,
    /// Inline loader, modeled times.
    Sim,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(RunMode::Real),
            "sim" => Ok(RunMode::Sim),
            _ => Err(Error::input(format!("unknown mode {s:?} (expected real or sim)"))),
        }
    }
}

/// DRAM ceiling enforced during decode.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub m_max: u64,
    /// Fixed KV-cache reservation.
    pub m_kv: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub sp: f64,
    /// Magnitude thresholds; without them each operator keeps exactly its
    /// quota of `floor((1 - sp) · dim)` channels. With them, channels above
    /// the threshold are kept, capped at the quota.
    pub thresholds: Option<ThresholdTable>,
    pub mode: RunMode,
    pub bandwidth: BandwidthModel,
    pub budget: Option<MemoryBudget>,
    /// Whether hit/miss totals restart with the context.
    pub reset_stats: bool,
}

impl PipelineConfig {
    pub fn new(sp: f64, mode: RunMode) -> Self {
        Self { sp, thresholds: None, mode, bandwidth: BandwidthModel::default(), budget: None, reset_stats: true }
    }

    /// Configuration and empty cache for running `plan` against `store`.
    pub fn from_plan(
        plan: &Plan,
        store: &PackedStore,
        mode: RunMode,
        bandwidth: BandwidthModel,
    ) -> Result<(Self, CacheState)> {
        if plan.group_size() != store.group_size() {
            return Err(Error::input(format!(
                "plan uses group size {}, store is packed with {}",
                plan.group_size(),
                store.group_size()
            )));
        }
        if plan.params.n_layers != store.spec().n_layers || plan.params.s_m != store.spec().model_bytes() as f64 {
            return Err(Error::input("plan was made for a different model"));
        }
        let cfg = Self {
            sp: plan.sp(),
            thresholds: None,
            mode,
            bandwidth,
            budget: Some(MemoryBudget {
                m_max: plan.params.m_max.floor() as u64,
                m_kv: plan.params.m_kv.ceil() as u64,
            }),
            reset_stats: true,
        };
        Ok((cfg, CacheState::for_budget(store.spec(), plan.m_cache().floor() as u64)))
    }
}

#[derive(Debug)]
pub struct DecodeOutput {
    /// Generated tokens.
    pub tokens: Vec<u32>,
    /// Every token fed to the model (prompt, then generated tokens but the last).
    pub positions: Vec<u32>,
    /// The masks actually used at each position.
    pub masks: Vec<MaskSet>,
    pub trace: DecodeTrace,
    pub cache: CacheState,
}

struct Compute<'a, 's> {
    spec: &'a ModelSpec,
    header: &'a StoreHeader,
    cfg: &'a PipelineConfig,
    taus: Option<[f32; 7]>,
    loader: LoaderHandle<'s>,
    token: usize,
    masks: MaskSet,
    /// The group being computed.
    current: Option<(GroupPlanStep, Instant)>,
    /// A finished group whose preload for the next group is still in flight.
    waiting: Option<(GroupPlanStep, Instant)>,
    /// Preloaded entries of the current group, by `(layer in group, op)`.
    buffer: HashMap<(usize, OpType), Vec<(u32, Payload)>>,
    active_bytes: u64,
    preload_bytes: u64,
    cache_bytes: u64,
    done: Vec<GroupPlanStep>,
}

impl Compute<'_, '_> {
    fn sim(&self) -> bool {
        self.cfg.mode == RunMode::Sim
    }

    fn select(&self, op: OpType, x: &[f32]) -> Vec<u32> {
        let quota = active_quota(x.len(), self.cfg.sp);
        match &self.taus {
            None => top_k_indices(x, quota),
            Some(taus) => {
                let tau = taus[op.index()];
                let above: Vec<u32> = (0..x.len() as u32).filter(|&j| x[j as usize].abs() > tau).collect();
                if above.len() > quota {
                    top_k_indices(x, quota)
                } else {
                    above
                }
            }
        }
    }

    fn step(&mut self) -> &mut GroupPlanStep {
        &mut self.current.as_mut().expect("group in progress").0
    }

    fn account(&mut self, group: usize) -> Result<()> {
        let m_kv = self.cfg.budget.map_or(0, |b| b.m_kv);
        let resident = self.active_bytes + self.preload_bytes + self.cache_bytes + m_kv;
        let step = self.step();
        step.peak_resident = step.peak_resident.max(resident);
        match self.cfg.budget {
            Some(b) if resident > b.m_max => Err(Error::Budget { group, resident, budget: b.m_max }),
            _ => Ok(()),
        }
    }

    fn group_time(&self, step: &GroupPlanStep, started: Instant) -> f64 {
        if self.sim() {
            step.t_onload + (step.t_topk + step.t_comp).max(step.t_preload)
        } else {
            started.elapsed().as_secs_f64()
        }
    }

    fn begin_group(&mut self, g: usize) -> Result<()> {
        self.buffer.clear();
        self.active_bytes = 0;
        let mut step = GroupPlanStep {
            token: self.token,
            group: g,
            preload_masks: Vec::new(),
            ops: Vec::new(),
            t_preload: 0.0,
            t_onload: 0.0,
            t_topk: 0.0,
            t_comp: 0.0,
            t_group: 0.0,
            bytes_preload: 0,
            bytes_onload: 0,
            n_hit: 0,
            n_miss: 0,
            preloaded: 0,
            preload_used: 0,
            peak_resident: 0,
        };
        if g > 0 {
            let (mut prev, started) =
                self.waiting.take().ok_or_else(|| Error::Runtime("group started without a preload".into()))?;
            let mut replies: Vec<PreloadReply> = Vec::with_capacity(OpType::ALL.len());
            for _ in 0..prev.preload_masks.len() {
                replies.push(self.loader.preload_done()?);
            }
            for r in replies {
                if r.group != g {
                    return Err(Error::Runtime(format!("preload for group {} arrived at group {g}", r.group)));
                }
                prev.bytes_preload += r.stats.total_bytes();
                prev.t_preload += if self.sim() {
                    simulate_read_time(&r.stats, &self.cfg.bandwidth)
                } else {
                    r.elapsed.as_secs_f64()
                };
                for (li, entries) in r.entries.into_iter().enumerate() {
                    step.preloaded += entries.len();
                    self.active_bytes += entries.iter().map(|e| e.1.len() as u64).sum::<u64>();
                    self.buffer.insert((li, r.op), entries);
                }
            }
            self.preload_bytes = 0;
            prev.t_group = self.group_time(&prev, started);
            self.done.push(prev);
        }
        self.current = Some((step, Instant::now()));
        self.account(g)
    }

    fn end_group(&mut self, g: usize) {
        let (mut step, started) = self.current.take().expect("group in progress");
        self.buffer.clear();
        self.active_bytes = 0;
        if g + 1 < self.header.groups.len() {
            self.waiting = Some((step, started));
        } else {
            step.t_group = self.group_time(&step, started);
            self.done.push(step);
        }
    }

    fn issue_preload(&mut self, next: usize, op: OpId, active: &[u32]) -> Result<()> {
        let layers = self.header.groups[next].n_layers as u64;
        self.preload_bytes += active.len() as u64 * self.spec.channel_bytes(op.op) as u64 * layers;
        self.step().preload_masks.push(ActiveSet::from_indices(op, active.to_vec())?);
        self.loader.preload(PreloadJob { group: next, op: op.op, channels: active.to_vec() })?;
        self.account(next - 1)
    }
}

impl LinearExec for Compute<'_, '_> {
    fn linear(&mut self, id: OpId, x: &[f32]) -> Result<Vec<f32>> {
        let (g, li) = self.header.locate(id.layer);
        let group_layers = self.header.groups[g].n_layers;
        if id.op == OpType::Q && li == 0 {
            self.begin_group(g)?;
        }
        let bw_mem = self.cfg.bandwidth.bw_mem;

        let t0 = Instant::now();
        let active = self.select(id.op, x);
        let t_topk = if self.sim() { (x.len() * 4) as f64 / bw_mem } else { t0.elapsed().as_secs_f64() };
        self.masks.set(id, ActiveSet::from_indices(id, active.clone())?);
        if li == 0 && g + 1 < self.header.groups.len() {
            self.issue_preload(g + 1, id, &active)?;
        }

        let cb = self.spec.channel_bytes(id.op) as u64;
        let preloaded = self.buffer.remove(&(li, id.op)).unwrap_or_default();
        let preloaded_ids: Vec<u32> = preloaded.iter().map(|e| e.0).collect();
        let released: u64 = preloaded.iter().map(|e| e.1.len() as u64).sum();
        let t1 = Instant::now();
        let reply = self.loader.fetch(FetchJob { layer: id.layer, op: id.op, active: active.clone(), preloaded })?;
        let t_onload =
            if self.sim() { simulate_read_time(&reply.stats, &self.cfg.bandwidth) } else { t1.elapsed().as_secs_f64() };
        self.active_bytes =
            self.active_bytes - released + (reply.from_preload.len() + reply.from_flash.len()) as u64 * cb;
        self.cache_bytes = reply.cache_bytes;
        self.account(g)?;

        let t2 = Instant::now();
        let rows = id.op.output_dim(self.spec);
        let y = gemv_channels(
            rows,
            self.spec.dtype,
            x,
            active.iter().zip(&reply.payloads).map(|(&j, p)| (j as usize, &p[..])),
        );
        let t_comp = if self.sim() { (active.len() as u64 * cb) as f64 / bw_mem } else { t2.elapsed().as_secs_f64() };

        let step = self.step();
        step.t_topk += t_topk;
        step.t_onload += t_onload;
        step.t_comp += t_comp;
        step.bytes_onload += reply.stats.total_bytes();
        step.n_hit += reply.from_cache.len() as u64;
        step.n_miss += (reply.from_preload.len() + reply.from_flash.len()) as u64;
        step.preload_used += reply.from_preload.len();
        step.ops.push(OpRecord {
            op: id,
            active,
            from_cache: reply.from_cache,
            from_preload: reply.from_preload,
            from_flash: reply.from_flash,
            preloaded: preloaded_ids,
        });
        if id.op == OpType::Down && li + 1 == group_layers {
            self.end_group(g);
        }
        Ok(y)
    }
}

type Positions<'s> = (Vec<u32>, Vec<u32>, Vec<MaskSet>, DecodeTrace, LoaderHandle<'s>);

fn run_positions<'s>(
    store: &PackedStore,
    cfg: &PipelineConfig,
    loader: LoaderHandle<'s>,
    prompt: &[u32],
    n_tokens: usize,
) -> Result<Positions<'s>> {
    let spec = store.spec();
    let backbone = store.backbone()?;
    let taus = match &cfg.thresholds {
        None => None,
        Some(t) => {
            let mut taus = [0.0f32; 7];
            for op in OpType::ALL {
                taus[op.index()] = t.tau(op, cfg.sp)?;
            }
            Some(taus)
        }
    };
    let mut c = Compute {
        spec,
        header: store.header(),
        cfg,
        taus,
        loader,
        token: 0,
        masks: MaskSet::empty(spec),
        current: None,
        waiting: None,
        buffer: HashMap::new(),
        active_bytes: 0,
        preload_bytes: 0,
        cache_bytes: 0,
        done: Vec::new(),
    };
    c.loader.reset_context(cfg.reset_stats)?;
    let mut kv = KvCache::new(spec.n_layers);
    let mut tokens = Vec::with_capacity(n_tokens);
    let mut positions = Vec::new();
    let mut masks = Vec::new();
    let mut trace = DecodeTrace::default();
    let mut input = prompt.to_vec();
    let mut pos = 0;
    while tokens.len() < n_tokens {
        let token = input[pos];
        let traced = pos + 1 >= prompt.len();
        c.token = pos + 1 - prompt.len().min(pos + 1);
        let (logits, _) = decode_step(&backbone, &mut kv, token, &mut c)?;
        if c.current.is_some() || c.waiting.is_some() {
            return Err(Error::Runtime("step ended inside a group".into()));
        }
        positions.push(token);
        masks.push(std::mem::replace(&mut c.masks, MaskSet::empty(spec)));
        let groups = std::mem::take(&mut c.done);
        if traced {
            trace.token_times.push(groups.iter().map(|g| g.t_group).sum());
            trace.groups.extend(groups);
            let next = argmax(&logits);
            tokens.push(next);
            input.push(next);
        }
        pos += 1;
    }
    Ok((tokens, positions, masks, trace, c.loader))
}

/// Generates `n_tokens` tokens after `prompt` from the weights in `store`.
///
/// The prompt is processed through the same pipeline; only the steps that
/// produce a generated token are traced.
pub fn decode(
    store: &PackedStore,
    cache: CacheState,
    cfg: &PipelineConfig,
    prompt: &[u32],
    n_tokens: usize,
) -> Result<DecodeOutput> {
    let spec = store.spec();
    if prompt.is_empty() {
        return Err(Error::input("prompt is empty"));
    }
    if let Some(t) = prompt.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::input(format!("prompt token {t} out of vocabulary ({})", spec.vocab_size)));
    }
    if !(0.0..1.0).contains(&cfg.sp) {
        return Err(Error::input(format!("sparsity {} outside [0, 1)", cfg.sp)));
    }
    if cache.tensors().len() != spec.n_layers * OpType::ALL.len() {
        return Err(Error::input("cache does not match the model"));
    }
    cfg.bandwidth.validate()?;
    match cfg.mode {
        RunMode::Sim => {
            let handle = LoaderHandle::Inline { loader: Loader::new(store, cache), done: Default::default() };
            let (tokens, positions, masks, trace, handle) = run_positions(store, cfg, handle, prompt, n_tokens)?;
            let LoaderHandle::Inline { loader, .. } = handle else { unreachable!("inline handle") };
            Ok(DecodeOutput { tokens, positions, masks, trace, cache: loader.into_cache() })
        }
        RunMode::Real => thread::scope(|s| {
            let (handle, (requests, fetch_out, preload_out)) = LoaderHandle::channels();
            let loader = Loader::new(store, cache);
            let worker = s.spawn(move || serve(loader, requests, fetch_out, preload_out));
            let result = run_positions(store, cfg, handle, prompt, n_tokens).map(|(t, p, m, tr, h)| {
                drop(h);
                (t, p, m, tr)
            });
            let cache = worker.join().map_err(|_| Error::Runtime("loader worker panicked".into()))?;
            let (tokens, positions, masks, trace) = result?;
            Ok(DecodeOutput { tokens, positions, masks, trace, cache })
        }),
    }
}
