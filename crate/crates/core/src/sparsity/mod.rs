//! Top-K activation sparsity: importance scores, mask selection, threshold
//! calibration, upper-bound analysis and cross-layer similarity statistics.
//!
//! Ties are always broken toward the lower channel index.

mod calibrate;
mod upper_bound;

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate_thresholds, threshold_for, ThresholdEntry, ThresholdTable};
pub use upper_bound::{keep_count, retention_levels, upper_bound_sparsity, UpperBoundPoint};

use crate::error::{Error, Result};
use crate::model::{Activation, ModelSpec, OpId, OpType, Site, WeightTensor};

/// The active input channels of one operator for one step.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveSet {
    pub op: OpId,
    indices: Vec<u32>,
}

impl ActiveSet {
    /// Builds a set from strictly increasing indices.
    pub fn from_indices(op: OpId, indices: Vec<u32>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input(format!("active indices for {op} are not strictly increasing")));
        }
        Ok(Self { op, indices })
    }

    /// Builds a set from arbitrary indices (sorted, duplicates dropped).
    pub fn from_unsorted(op: OpId, mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { op, indices }
    }

    pub fn full(op: OpId, dim: usize) -> Self {
        Self { op, indices: (0..dim as u32).collect() }
    }

    pub fn empty(op: OpId) -> Self {
        Self { op, indices: Vec::new() }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: u32) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn intersection_len(&self, other: &ActiveSet) -> usize {
        let (mut a, mut b, mut n) = (0, 0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                Ordering::Less => a += 1,
                Ordering::Greater => b += 1,
                Ordering::Equal => {
                    n += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        n
    }

    /// Elements of `self` not in `other`.
    pub fn difference(&self, other: &ActiveSet) -> ActiveSet {
        let indices = self.indices.iter().copied().filter(|&j| !other.contains(j)).collect();
        ActiveSet { op: self.op, indices }
    }

    pub fn with_op(&self, op: OpId) -> ActiveSet {
        ActiveSet { op, indices: self.indices.clone() }
    }
}

/// One [`ActiveSet`] per `(layer, operator)` of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    sets: Vec<ActiveSet>,
}

impl MaskSet {
    pub fn full(spec: &ModelSpec) -> Self {
        Self { sets: spec.op_ids().map(|id| ActiveSet::full(id, id.op.input_dim(spec))).collect() }
    }

    pub fn empty(spec: &ModelSpec) -> Self {
        Self { sets: spec.op_ids().map(ActiveSet::empty).collect() }
    }

    /// Builds a mask set from `n_layers * 7` sets in canonical order.
    pub fn from_sets(sets: Vec<ActiveSet>) -> Result<Self> {
        for (i, s) in sets.iter().enumerate() {
            if s.op.flat() != i {
                return Err(Error::input(format!("mask for {} at position {i}", s.op)));
            }
        }
        Ok(Self { sets })
    }

    pub fn get(&self, op: OpId) -> &ActiveSet {
        &self.sets[op.flat()]
    }

    pub fn set(&mut self, op: OpId, set: ActiveSet) {
        self.sets[op.flat()] = set.with_op(op);
    }

    pub fn sets(&self) -> &[ActiveSet] {
        &self.sets
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.sets.len() != spec.n_layers * OpType::ALL.len() {
            return Err(Error::input(format!(
                "mask set covers {} operators, model has {}",
                self.sets.len(),
                spec.n_layers * OpType::ALL.len()
            )));
        }
        for s in &self.sets {
            let dim = s.op.op.input_dim(spec);
            if let Some(&j) = s.indices.last().filter(|&&j| j as usize >= dim) {
                return Err(Error::input(format!("mask index {j} out of range for {} (dim {dim})", s.op)));
            }
        }
        Ok(())
    }
}

/// How many channels stay active at sparsity `sp` (`floor((1 - sp) * dim)`).
pub fn active_quota(dim: usize, sp: f64) -> usize {
    let k = ((1.0 - sp.clamp(0.0, 1.0)) * dim as f64 + 1e-9).floor() as usize;
    k.min(dim)
}

/// `S[i][j] = |W[i][j]| * |x[j]|`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }
}

pub fn importance_scores(w: &WeightTensor, x: &[f32]) -> Result<ScoreMatrix> {
    if w.cols != x.len() {
        return Err(Error::input(format!("weight has {} columns, activation has {}", w.cols, x.len())));
    }
    let values = w.to_f32();
    let mut data = vec![0.0f32; w.rows * w.cols];
    for (j, col) in values.chunks_exact(w.rows).enumerate() {
        let ax = x[j].abs();
        for (i, v) in col.iter().enumerate() {
            data[i * w.cols + j] = v.abs() * ax;
        }
    }
    Ok(ScoreMatrix { rows: w.rows, cols: w.cols, data })
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Selector {
    /// Keep `{j : |x[j]| > tau}`.
    Threshold(f32),
    /// Keep the `k` largest magnitudes.
    ExactK(usize),
}

/// Orders channels by descending magnitude, then ascending index.
fn by_magnitude(x: &[f32]) -> impl Fn(&u32, &u32) -> Ordering + '_ {
    move |&a, &b| x[b as usize].abs().total_cmp(&x[a as usize].abs()).then(a.cmp(&b))
}

/// The `k` largest-magnitude indices of `x`, ascending. `k` may be 0.
pub fn top_k_indices(x: &[f32], k: usize) -> Vec<u32> {
    let k = k.min(x.len());
    let mut idx: Vec<u32> = (0..x.len() as u32).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_magnitude(x));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

pub fn topk_mask(op: OpId, x: &[f32], selector: Selector) -> Result<ActiveSet> {
    let indices = match selector {
        Selector::Threshold(tau) => {
            if tau.is_nan() || tau < 0.0 {
                return Err(Error::input(format!("threshold must be >= 0, got {tau}")));
            }
            x.iter().enumerate().filter(|(_, v)| v.abs() > tau).map(|(j, _)| j as u32).collect()
        }
        Selector::ExactK(k) => {
            if k == 0 || k > x.len() {
                return Err(Error::input(format!("k = {k} outside 1..={}", x.len())));
            }
            top_k_indices(x, k)
        }
    };
    Ok(ActiveSet { op, indices })
}

/// `|reference ∩ predicted| / |reference|`, or 1 when `reference` is empty.
pub fn topk_precision(reference: &ActiveSet, predicted: &ActiveSet) -> f64 {
    if reference.is_empty() {
        return 1.0;
    }
    reference.intersection_len(predicted) as f64 / reference.k() as f64
}

/// Cosine similarity; `None` when either vector is all zeros.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    /// The earlier layer of the compared pair `(layer, layer + 1)`.
    pub layer: usize,
    pub site: Site,
    pub cosine: f64,
    pub precision: f64,
    #[serde(skip)]
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean Top-K precision over non-degenerate rows.
    pub fn mean_precision(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| !r.degenerate).map(|r| r.precision).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Consecutive-layer similarity of the pre-normalization block inputs.
///
/// `trace` is the activation list of one position; only `ATTN_IN` and
/// `FFN_IN` are compared. Precision uses the top `floor((1 - sp) * dim)`
/// magnitudes (at least one).
pub fn cross_layer_similarity(trace: &[Activation], sparsity: f64) -> Result<SimilarityReport> {
    let n_layers = trace.iter().map(|a| a.layer + 1).max().unwrap_or(0);
    if n_layers < 2 {
        return Err(Error::input("similarity needs a trace covering at least two layers"));
    }
    let find = |layer: usize, site: Site| {
        trace
            .iter()
            .find(|a| a.layer == layer && a.site == site)
            .ok_or_else(|| Error::input(format!("trace lacks layer {layer} {site}")))
    };
    let mut rows = Vec::new();
    for layer in 0..n_layers - 1 {
        for site in [Site::AttnIn, Site::FfnIn] {
            let a = find(layer, site)?;
            let b = find(layer + 1, site)?;
            if a.values.len() != b.values.len() {
                return Err(Error::input(format!("layer {layer} {site} dimension mismatch")));
            }
            let k = active_quota(a.values.len(), sparsity).max(1);
            let op = OpId::new(layer, OpType::Q);
            let sa = ActiveSet { op, indices: top_k_indices(&a.values, k) };
            let sb = ActiveSet { op, indices: top_k_indices(&b.values, k) };
            let cos = cosine(&a.values, &b.values);
            rows.push(SimilarityRow {
                layer,
                site,
                cosine: cos.unwrap_or(0.0),
                precision: topk_precision(&sb, &sa),
                degenerate: cos.is_none(),
            });
        }
    }
    Ok(SimilarityReport { rows })
}
