//! Closed-form decode cost model and the greedy parameter search.
//!
//! For a layer of `S_l` bytes at sparsity `sp`, a group of `N` layers needs
//! `M_cl = S_l (1 - sp) N` bytes of active weights. With cache hit rate `hr`
//! and cross-layer similarity `si`:
//!
//! ```text
//! T_load    = M_cl (1 - hr) / BW_small          first group, on demand
//! T_comp    = M_cl / BW_mem
//! T_onload  = S_l (1 - sp)(1 - hr)(1 - si) / BW_small
//! T_preload = M_cl (1 - hr) / BW_large
//! T_overlap = T_onload + max(T_preload, T_comp)
//! T_decode  = T_load + (G - 1) T_overlap + T_comp,   G = ceil(L / N)
//! M         = M_cl + M_cache + M_kv
//! ```

use serde::{Deserialize, Serialize};

use crate::cache::{replay, CacheState};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelSpec, OpId, OpType, Site};
use crate::sparsity::{active_quota, cross_layer_similarity, top_k_indices, ActiveSet};
use crate::store::BandwidthModel;

pub const DEFAULT_HR: f64 = 0.6;
pub const DEFAULT_SI: f64 = 0.8;
pub const DEFAULT_STOP_THRESHOLD: f64 = 0.05;

/// Every input of the cost model. Sizes in bytes, bandwidths in bytes/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub sp: f64,
    pub hr: f64,
    pub si: f64,
    pub bw_mem: f64,
    pub bw_small: f64,
    pub bw_large: f64,
    pub s_m: f64,
    pub s_l: f64,
    pub n_layers: usize,
    pub n: usize,
    pub m_max: f64,
    pub m_cache: f64,
    pub m_kv: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::input(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("sp", self.sp)?;
        unit("hr", self.hr)?;
        unit("si", self.si)?;
        for (name, v) in [("bw_mem", self.bw_mem), ("bw_small", self.bw_small), ("bw_large", self.bw_large)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive")));
            }
        }
        if self.n_layers == 0 || self.n == 0 || self.n > self.n_layers {
            return Err(Error::input(format!("N = {} outside 1..={}", self.n, self.n_layers)));
        }
        let s_m = self.s_l * self.n_layers as f64;
        if self.s_l.is_nan() || self.s_l < 0.0 || (s_m - self.s_m).abs() > 1e-9 * self.s_m.abs().max(1.0) {
            return Err(Error::input("S_l × n_layers must equal S_m"));
        }
        if self.m_cache < 0.0 || self.m_kv < 0.0 {
            return Err(Error::input("memory terms must be non-negative"));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.n_layers.div_ceil(self.n)
    }

    /// `M_cl = S_l (1 - sp) N`.
    pub fn m_cl(&self) -> f64 {
        self.s_l * (1.0 - self.sp) * self.n as f64
    }
}

/// Predicted per-token time components in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub m_cl: f64,
    pub groups: usize,
    pub t_load: f64,
    pub t_comp: f64,
    pub t_onload: f64,
    pub t_preload: f64,
    pub t_overlap: f64,
    pub t_decode: f64,
}

pub fn predict_decode_time(p: &CostParams) -> Result<TimeBreakdown> {
    p.validate()?;
    let m_cl = p.m_cl();
    let t_load = m_cl * (1.0 - p.hr) / p.bw_small;
    let t_comp = m_cl / p.bw_mem;
    let t_onload = p.s_l * (1.0 - p.sp) * (1.0 - p.hr) * (1.0 - p.si) / p.bw_small;
    let t_preload = m_cl * (1.0 - p.hr) / p.bw_large;
    let t_overlap = t_onload + t_preload.max(t_comp);
    let groups = p.groups();
    let t_decode = t_load + (groups - 1) as f64 * t_overlap + t_comp;
    Ok(TimeBreakdown { m_cl, groups, t_load, t_comp, t_onload, t_preload, t_overlap, t_decode })
}

/// `M = M_cl + M_cache + M_kv`.
pub fn memory_cost(p: &CostParams) -> f64 {
    p.m_cl() + p.m_cache + p.m_kv
}

/// Sizes the planner needs from a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub s_m: f64,
    pub s_l: f64,
    pub n_layers: usize,
    /// Mean bytes of one per-layer channel slot.
    pub channel_bytes: f64,
}

impl ModelStats {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        Self {
            s_m: spec.model_bytes() as f64,
            s_l: spec.layer_bytes() as f64,
            n_layers: spec.n_layers,
            channel_bytes: spec.layer_bytes() as f64 / spec.layer_channels() as f64,
        }
    }
}

/// Knobs of [`plan`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub m_max: f64,
    pub m_kv: f64,
    pub hr: f64,
    pub si: f64,
    pub stop_threshold: f64,
    /// Overrides the budget-derived sparsity.
    pub sp: Option<f64>,
    /// Pins the group size (e.g. to that of an existing store).
    pub fixed_n: Option<usize>,
    /// Constant small/large-read bandwidths instead of deriving them from the
    /// profile's chunk-size table.
    pub bw_small: Option<f64>,
    pub bw_large: Option<f64>,
}

impl PlanOptions {
    pub fn new(m_max: f64, m_kv: f64) -> Self {
        Self {
            m_max,
            m_kv,
            hr: DEFAULT_HR,
            si: DEFAULT_SI,
            stop_threshold: DEFAULT_STOP_THRESHOLD,
            sp: None,
            fixed_n: None,
            bw_small: None,
            bw_large: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub params: CostParams,
    pub predicted: TimeBreakdown,
    /// `M_cl + M_cache + M_kv`.
    pub memory: f64,
    /// Bytes reserved for the active group plus the preload buffer.
    pub weight_buffers: f64,
    pub stop_reason: String,
    /// Candidates considered, in order.
    pub candidates: Vec<TimeBreakdown>,
    /// Inputs that were assumed rather than measured.
    pub assumptions: Vec<String>,
}

impl Plan {
    pub fn sp(&self) -> f64 {
        self.params.sp
    }

    pub fn group_size(&self) -> usize {
        self.params.n
    }

    pub fn m_cache(&self) -> f64 {
        self.params.m_cache
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Plan = serde_json::from_str(text).map_err(|e| Error::format(format!("plan: {e}")))?;
        p.params.validate().map_err(|e| Error::format(format!("plan: {e}")))?;
        Ok(p)
    }
}

/// `sp = max(0, 1 - M_max / S_m)`.
pub fn sparsity_for_budget(m_max: f64, s_m: f64) -> f64 {
    (1.0 - m_max / s_m).max(0.0)
}

/// Bytes held for weights: the active group, plus a preload buffer of the
/// same size whenever there is more than one group.
pub fn weight_buffer_bytes(p: &CostParams) -> f64 {
    let m_cl = p.m_cl();
    if p.groups() > 1 {
        2.0 * m_cl
    } else {
        m_cl
    }
}

/// Chooses sparsity, group size and cache budget for a memory budget.
///
/// Sparsity follows from the budget unless overridden. `N` then grows from 1 while the
/// preload of a group takes longer than its computation and the per-layer
/// preload time still drops by at least `stop_threshold` (relative) per step;
/// growth also stops when the weight buffers would no longer fit. Whatever
/// remains of the budget becomes the cache.
pub fn plan(stats: &ModelStats, profile: &BandwidthModel, opts: &PlanOptions) -> Result<Plan> {
    profile.validate()?;
    if opts.m_max.is_nan() || opts.m_max <= 0.0 || opts.m_kv < 0.0 {
        return Err(Error::input("memory budget must be positive and M_kv non-negative"));
    }
    let sp = match opts.sp {
        Some(sp) if !(0.0..1.0).contains(&sp) => return Err(Error::input(format!("sparsity {sp} outside [0, 1)"))),
        Some(sp) => sp,
        None => sparsity_for_budget(opts.m_max, stats.s_m),
    };
    let bw_small = opts.bw_small.unwrap_or_else(|| profile.effective_bandwidth(stats.channel_bytes.round() as u64));
    let params_for = |n: usize| {
        let bw_large = opts
            .bw_large
            .unwrap_or_else(|| profile.effective_bandwidth((stats.channel_bytes * n as f64).round() as u64));
        let mut p = CostParams {
            sp,
            hr: opts.hr,
            si: opts.si,
            bw_mem: profile.bw_mem,
            bw_small,
            bw_large,
            s_m: stats.s_m,
            s_l: stats.s_l,
            n_layers: stats.n_layers,
            n,
            m_max: opts.m_max,
            m_cache: 0.0,
            m_kv: opts.m_kv,
        };
        p.m_cache = (opts.m_max - weight_buffer_bytes(&p) - opts.m_kv).max(0.0);
        p
    };
    let fits = |p: &CostParams| weight_buffer_bytes(p) + p.m_kv <= p.m_max;

    let range = match opts.fixed_n {
        Some(n) => n..=n,
        None => 1..=stats.n_layers,
    };
    let first = params_for(*range.start());
    first.validate()?;
    if !fits(&first) {
        return Err(Error::Planning(format!(
            "budget {:.0} B cannot hold M_kv {:.0} B plus weight buffers {:.0} B at sp = {sp:.4}, N = {}",
            opts.m_max,
            opts.m_kv,
            weight_buffer_bytes(&first),
            first.n
        )));
    }

    let mut candidates = Vec::new();
    let mut chosen = first;
    let mut stop_reason = String::from("fixed group size");
    for n in range {
        let p = params_for(n);
        if !fits(&p) {
            stop_reason = format!("N = {n} exceeds the memory budget");
            break;
        }
        let t = predict_decode_time(&p)?;
        if let Some(prev) = candidates.last() {
            let prev: &TimeBreakdown = prev;
            let per_layer_prev = prev.t_preload / (n - 1) as f64;
            let per_layer = t.t_preload / n as f64;
            if per_layer_prev <= 0.0 || (per_layer_prev - per_layer) / per_layer_prev < opts.stop_threshold {
                stop_reason = format!("preload-time decrement at N = {n} below threshold");
                break;
            }
        }
        candidates.push(t.clone());
        chosen = p;
        if t.t_preload <= t.t_comp {
            stop_reason = "T_preload <= T_comp".into();
            break;
        }
        if n == stats.n_layers {
            stop_reason = "N reached the layer count".into();
        }
    }
    if opts.fixed_n.is_some() {
        stop_reason = "fixed group size".into();
    }
    let predicted = predict_decode_time(&chosen)?;
    let mut assumptions = Vec::new();
    if opts.hr == DEFAULT_HR && opts.si == DEFAULT_SI {
        assumptions.push(format!("hr = {DEFAULT_HR} and si = {DEFAULT_SI} are defaults, not measured"));
    }
    let slack = opts.m_max - memory_cost(&chosen);
    if slack > 0.0 {
        assumptions.push(format!("{slack:.0} B of the budget hold the preload buffer"));
    }
    Ok(Plan {
        memory: memory_cost(&chosen),
        weight_buffers: weight_buffer_bytes(&chosen),
        params: chosen,
        predicted,
        stop_reason,
        candidates,
        assumptions,
    })
}

/// Exact-k masks derived from one recorded position: Q/K/V from `ATTN_IN`,
/// GATE/UP from `FFN_IN`, DOWN from `DOWN_IN`. The attention output feeding O
/// is not part of the trace, so O is omitted.
pub fn trace_masks(spec: &ModelSpec, acts: &[Activation], sp: f64) -> Result<Vec<ActiveSet>> {
    let mut out = Vec::new();
    for a in acts {
        let ops: &[OpType] = match a.site {
            Site::AttnIn => &[OpType::Q, OpType::K, OpType::V],
            Site::FfnIn => &[OpType::Gate, OpType::Up],
            Site::DownIn => &[OpType::Down],
        };
        if a.layer >= spec.n_layers || a.values.len() != ops[0].input_dim(spec) {
            return Err(Error::input(format!("trace entry layer {} {} does not match the model", a.layer, a.site)));
        }
        let k = active_quota(a.values.len(), sp).max(1);
        let idx = top_k_indices(&a.values, k);
        for &op in ops {
            out.push(ActiveSet::from_indices(OpId::new(a.layer, op), idx.clone())?);
        }
    }
    Ok(out)
}

/// Measured `hr` and `si`, or the defaults when no trace is available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrSi {
    pub hr: f64,
    pub si: f64,
    pub measured: bool,
}

/// Estimates `hr` by replaying the trace's masks through a fresh cache with
/// the given per-tensor capacities, and `si` as the mean consecutive-layer
/// Top-K precision.
pub fn estimate_hr_si(
    spec: &ModelSpec,
    trace: Option<&[Vec<Activation>]>,
    sp: f64,
    capacities: &[usize],
) -> Result<HrSi> {
    let Some(steps) = trace.filter(|s| !s.is_empty()) else {
        return Ok(HrSi { hr: DEFAULT_HR, si: DEFAULT_SI, measured: false });
    };
    let dims: Vec<usize> = spec.op_ids().map(|id| id.op.input_dim(spec)).collect();
    let mut cache = CacheState::new(&dims, capacities)?;
    let mut precisions = Vec::new();
    for acts in steps {
        let masks = trace_masks(spec, acts, sp)?;
        replay(&mut cache, &masks);
        if spec.n_layers > 1 {
            if let Some(p) = cross_layer_similarity(acts, sp)?.mean_precision() {
                precisions.push(p);
            }
        }
    }
    let si = if precisions.is_empty() { 1.0 } else { precisions.iter().sum::<f64>() / precisions.len() as f64 };
    Ok(HrSi { hr: cache.hit_rate(), si, measured: true })
}
