#![allow(dead_code)]

use std::path::Path;

use swapflow_core::model::{argmax, forward_sparse_steps, gen_model, DType, Model, ModelSpec};
use swapflow_core::pipeline::DecodeOutput;
use swapflow_core::store::{pack, IoMode, PackedStore};

pub fn toy_spec(n_layers: usize, dtype: DType, seed: u64) -> ModelSpec {
    ModelSpec::new(n_layers, 64, 128, 4, 48, dtype, seed)
}

pub fn toy_model(n_layers: usize, dtype: DType, seed: u64, weight_scale: f32) -> Model {
    gen_model(&toy_spec(n_layers, dtype, seed), weight_scale).unwrap()
}

pub fn packed(model: &Model, n: usize, dir: &Path, mode: IoMode) -> PackedStore {
    let path = dir.join(format!("m{n}.awsp"));
    pack(model, n, &path).unwrap();
    PackedStore::open(&path, mode).unwrap()
}

/// Tokens an offline masked forward pass produces with the masks the
/// pipeline recorded.
pub fn oracle_tokens(model: &Model, prompt_len: usize, out: &DecodeOutput) -> Vec<u32> {
    let logits = forward_sparse_steps(model, &out.positions, &out.masks).unwrap();
    logits[prompt_len - 1..].iter().map(|l| argmax(l)).collect()
}

/// KV-cache bytes after `positions` positions (f32 keys and values).
pub fn kv_bytes(spec: &ModelSpec, positions: usize) -> u64 {
    (2 * spec.n_layers * spec.hidden_dim * 4 * positions) as u64
}

/// A plan pinned to `(sp, n)` whose budget holds the double buffer, a cache
/// of `cache_bytes` and the KV cache.
pub fn grid_plan(
    spec: &ModelSpec,
    bw: &swapflow_core::store::BandwidthModel,
    sp: f64,
    n: usize,
    cache_bytes: u64,
    m_kv: u64,
) -> swapflow_core::planner::Plan {
    use swapflow_core::planner::{plan, ModelStats, PlanOptions};
    let stats = ModelStats::from_spec(spec);
    let m_cl = stats.s_l * (1.0 - sp) * n as f64;
    let buffers = if n < spec.n_layers { 2.0 * m_cl } else { m_cl };
    let m_max = buffers + cache_bytes as f64 + m_kv as f64;
    let opts = PlanOptions { sp: Some(sp), fixed_n: Some(n), ..PlanOptions::new(m_max, m_kv as f64) };
    plan(&stats, bw, &opts).unwrap()
}
