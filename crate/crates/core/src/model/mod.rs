//! Toy decoder-only transformer used as the ground truth for the swapping
//! pipeline.
//!
//! Every layer has pre-normalized attention and a SwiGLU FFN, each wrapped in
//! a residual connection. The seven linear operators of a layer are stored
//! column-major so that one input channel (the column multiplied by a single
//! activation element) is a contiguous byte range. Linear operators are
//! evaluated through [`LinearExec`], which lets the dense reference, the
//! masked reference and the swapping pipeline share one forward pass.

pub mod container;
pub mod quant;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::MaskSet;

const NORM_EPS: f32 = 1e-5;

/// Layer index carried by the embedding and output head, which belong to no layer.
pub const BACKBONE_LAYER: usize = usize::MAX;

/// The seven linear operators of a layer, in their canonical order.
///
/// This order is used everywhere: manifests, packed layout, cache keys.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpType {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl OpType {
    pub const ALL: [OpType; 7] = [OpType::Q, OpType::K, OpType::V, OpType::O, OpType::Gate, OpType::Up, OpType::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpType::Q => "Q",
            OpType::K => "K",
            OpType::V => "V",
            OpType::O => "O",
            OpType::Gate => "GATE",
            OpType::Up => "UP",
            OpType::Down => "DOWN",
        }
    }

    /// Input dimension (number of channels).
    pub fn input_dim(self, spec: &ModelSpec) -> usize {
        match self {
            OpType::Down => spec.ffn_dim,
            _ => spec.hidden_dim,
        }
    }

    /// Output dimension (rows of the weight matrix).
    pub fn output_dim(self, spec: &ModelSpec) -> usize {
        match self {
            OpType::Gate | OpType::Up => spec.ffn_dim,
            _ => spec.hidden_dim,
        }
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpType::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown operator type {s:?}")))
    }
}

/// A linear operator within a specific layer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpId {
    pub layer: usize,
    pub op: OpType,
}

impl OpId {
    pub fn new(layer: usize, op: OpType) -> Self {
        Self { layer, op }
    }

    /// Dense index `layer * 7 + op`.
    pub fn flat(self) -> usize {
        self.layer * OpType::ALL.len() + self.op.index()
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.op)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Q4B32,
}

impl DType {
    /// Bytes of one channel holding `rows` elements (scales included).
    pub fn channel_bytes(self, rows: usize) -> usize {
        match self {
            DType::F32 => rows * 4,
            DType::Q4B32 => quant::channel_bytes(rows),
        }
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(DType::F32),
            "q4b32" => Ok(DType::Q4B32),
            other => Err(Error::format(format!("unknown dtype {other:?}"))),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::Q4B32 => "q4b32",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub op_types: Vec<OpType>,
    pub dtype: DType,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(
        n_layers: usize,
        hidden_dim: usize,
        ffn_dim: usize,
        n_heads: usize,
        vocab_size: usize,
        dtype: DType,
        seed: u64,
    ) -> Self {
        Self { n_layers, hidden_dim, ffn_dim, n_heads, vocab_size, op_types: OpType::ALL.to_vec(), dtype, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.n_heads == 0 || self.vocab_size == 0
        {
            return Err(Error::spec("all dimensions must be positive"));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::spec(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.op_types != OpType::ALL {
            return Err(Error::spec("op_types must be Q,K,V,O,GATE,UP,DOWN in that order"));
        }
        if self.dtype == DType::Q4B32
            && (!self.hidden_dim.is_multiple_of(quant::BLOCK) || !self.ffn_dim.is_multiple_of(quant::BLOCK))
        {
            return Err(Error::spec("q4b32 requires hidden_dim and ffn_dim divisible by 32"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn channel_bytes(&self, op: OpType) -> usize {
        self.dtype.channel_bytes(op.output_dim(self))
    }

    pub fn tensor_bytes(&self, op: OpType) -> usize {
        self.channel_bytes(op) * op.input_dim(self)
    }

    /// Swappable bytes of one layer (`S_l`).
    pub fn layer_bytes(&self) -> u64 {
        OpType::ALL.iter().map(|&op| self.tensor_bytes(op) as u64).sum()
    }

    /// Swappable bytes of the whole model (`S_m`).
    pub fn model_bytes(&self) -> u64 {
        self.layer_bytes() * self.n_layers as u64
    }

    /// Total input channels across the seven operators of one layer.
    pub fn layer_channels(&self) -> usize {
        OpType::ALL.iter().map(|op| op.input_dim(self)).sum()
    }

    pub fn op_ids(&self) -> impl Iterator<Item = OpId> + '_ {
        (0..self.n_layers).flat_map(|l| OpType::ALL.into_iter().map(move |op| OpId::new(l, op)))
    }
}

/// A column-major weight matrix; channel `j` is `data[j * cb..(j + 1) * cb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub op: OpId,
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub data: Vec<u8>,
}

impl WeightTensor {
    /// Builds an `F32` tensor from column-major values.
    pub fn from_columns(op: OpId, rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::input(format!(
                "expected {} values for a {rows}x{cols} tensor, got {}",
                rows * cols,
                values.len()
            )));
        }
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Self { op, rows, cols, dtype: DType::F32, data })
    }

    pub fn channel_bytes(&self) -> usize {
        self.dtype.channel_bytes(self.rows)
    }

    pub fn channel(&self, j: usize) -> &[u8] {
        let cb = self.channel_bytes();
        &self.data[j * cb..(j + 1) * cb]
    }

    /// Dequantized column-major values.
    pub fn to_f32(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.rows * self.cols];
        for (j, col) in out.chunks_exact_mut(self.rows).enumerate() {
            decode_channel(self.dtype, self.channel(j), col);
        }
        out
    }

    /// Element `W[i][j]` (dequantized).
    pub fn value(&self, i: usize, j: usize) -> f32 {
        let mut col = vec![0.0f32; self.rows];
        decode_channel(self.dtype, self.channel(j), &mut col);
        col[i]
    }
}

fn decode_channel(dtype: DType, bytes: &[u8], out: &mut [f32]) {
    match dtype {
        DType::F32 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        DType::Q4B32 => quant::dequantize_channel(bytes, out),
    }
}

/// Quantizes an `F32` tensor to Q4B32.
pub fn quantize_q4(t: &WeightTensor) -> Result<WeightTensor> {
    if t.dtype != DType::F32 {
        return Err(Error::format("quantize_q4 expects an f32 tensor"));
    }
    if !t.rows.is_multiple_of(quant::BLOCK) {
        return Err(Error::format(format!("rows {} not divisible by 32", t.rows)));
    }
    let values = t.to_f32();
    let cb = quant::channel_bytes(t.rows);
    let mut data = vec![0u8; cb * t.cols];
    for (col, out) in values.chunks_exact(t.rows).zip(data.chunks_exact_mut(cb)) {
        quant::quantize_channel(col, out);
    }
    Ok(WeightTensor { op: t.op, rows: t.rows, cols: t.cols, dtype: DType::Q4B32, data })
}

/// Expands a Q4B32 tensor back to `F32`.
pub fn dequantize_q4(t: &WeightTensor) -> Result<WeightTensor> {
    if t.dtype != DType::Q4B32 {
        return Err(Error::format("dequantize_q4 expects a q4b32 tensor"));
    }
    WeightTensor::from_columns(t.op, t.rows, t.cols, &t.to_f32())
}

/// `y += x * channel` for one channel in either dtype.
pub fn axpy_channel(dtype: DType, y: &mut [f32], x: f32, bytes: &[u8]) {
    match dtype {
        DType::F32 => {
            for (yi, c) in y.iter_mut().zip(bytes.chunks_exact(4)) {
                *yi += x * f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        DType::Q4B32 => quant::axpy_channel(y, x, bytes),
    }
}

/// Column-wise GEMV over an explicit list of channels, in the given order.
///
/// Zero activations are skipped, so evaluating all channels of a zero-masked
/// input and evaluating only the active channels are the same sequence of
/// floating-point operations.
pub fn gemv_channels<'a, I>(rows: usize, dtype: DType, x: &[f32], channels: I) -> Vec<f32>
where
    I: IntoIterator<Item = (usize, &'a [u8])>,
{
    let mut y = vec![0.0f32; rows];
    for (j, bytes) in channels {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        axpy_channel(dtype, &mut y, xj, bytes);
    }
    y
}

pub fn gemv(w: &WeightTensor, x: &[f32]) -> Vec<f32> {
    gemv_channels(w.rows, w.dtype, x, (0..w.cols).map(|j| (j, w.channel(j))))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Site {
    AttnIn,
    FfnIn,
    DownIn,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::AttnIn, Site::FfnIn, Site::DownIn];

    pub fn name(self) -> &'static str {
        match self {
            Site::AttnIn => "ATTN_IN",
            Site::FfnIn => "FFN_IN",
            Site::DownIn => "DOWN_IN",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown site {s:?}")))
    }
}

/// An activation vector observed at one site of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub values: Vec<f32>,
    pub layer: usize,
    pub site: Site,
}

impl Activation {
    pub fn new(values: Vec<f32>, layer: usize, site: Site) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite activation at layer {layer} {site} index {i}")));
        }
        Ok(Self { values, layer, site })
    }
}

/// Every intermediate vector of one layer for one position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerRecord {
    /// Residual stream entering the attention block (pre-normalization).
    pub attn_in: Vec<f32>,
    /// Normalized attention input; the input of Q, K and V.
    pub attn_norm: Vec<f32>,
    /// Attention mix; the input of O.
    pub attn_out: Vec<f32>,
    /// Residual stream entering the FFN block (pre-normalization).
    pub ffn_in: Vec<f32>,
    /// Normalized FFN input; the input of GATE and UP.
    pub ffn_norm: Vec<f32>,
    /// Gated FFN intermediate; the input of DOWN.
    pub down_in: Vec<f32>,
}

impl LayerRecord {
    /// The vector operator `op` actually multiplies.
    pub fn op_input(&self, op: OpType) -> &[f32] {
        match op {
            OpType::Q | OpType::K | OpType::V => &self.attn_norm,
            OpType::O => &self.attn_out,
            OpType::Gate | OpType::Up => &self.ffn_norm,
            OpType::Down => &self.down_in,
        }
    }

    pub fn site(&self, site: Site) -> &[f32] {
        match site {
            Site::AttnIn => &self.attn_in,
            Site::FfnIn => &self.ffn_in,
            Site::DownIn => &self.down_in,
        }
    }
}

/// Per-layer records of one decoding step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub layers: Vec<LayerRecord>,
}

impl StepRecord {
    /// The `n_layers × 3` site activations of this step, layer-major.
    pub fn activations(&self) -> Vec<Activation> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, rec)| {
                Site::ALL.into_iter().map(move |site| Activation { values: rec.site(site).to_vec(), layer: l, site })
            })
            .collect()
    }
}

/// The non-swapped part of a model: embedding, output head and topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: ModelSpec,
    /// `hidden × vocab`, column `t` is the embedding of token `t`. Always F32.
    pub embed: WeightTensor,
    /// `vocab × hidden`. Always F32.
    pub lm_head: WeightTensor,
}

impl Backbone {
    pub fn resident_bytes(&self) -> u64 {
        (self.embed.data.len() + self.lm_head.data.len()) as u64
    }

    fn embedding(&self, token: u32) -> Vec<f32> {
        let mut x = vec![0.0f32; self.spec.hidden_dim];
        decode_channel(DType::F32, self.embed.channel(token as usize), &mut x);
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub weight_scale: f32,
    /// `layers[l][op.index()]`.
    pub layers: Vec<Vec<WeightTensor>>,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.backbone.spec
    }

    pub fn tensor(&self, op: OpId) -> &WeightTensor {
        &self.layers[op.layer][op.op.index()]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &WeightTensor> {
        self.layers.iter().flatten()
    }

    /// Converts every layer tensor to `dtype` (backbone stays F32).
    pub fn with_dtype(&self, dtype: DType) -> Result<Model> {
        if dtype == self.spec().dtype {
            return Ok(self.clone());
        }
        let mut spec = self.spec().clone();
        spec.dtype = dtype;
        spec.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|ops| {
                ops.iter()
                    .map(|t| match dtype {
                        DType::Q4B32 => quantize_q4(t),
                        DType::F32 => dequantize_q4(t),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { backbone: Backbone { spec, ..self.backbone.clone() }, weight_scale: self.weight_scale, layers })
    }
}

/// Generates a deterministic synthetic model.
///
/// Embeddings are standard normal; layer weights have standard deviation
/// `weight_scale / sqrt(hidden_dim)`, so small scales keep block outputs well
/// below the residual stream.
pub fn gen_model(spec: &ModelSpec, weight_scale: f32) -> Result<Model> {
    spec.validate()?;
    if !(weight_scale >= 0.0 && weight_scale.is_finite()) {
        return Err(Error::spec(format!("weight_scale must be finite and >= 0, got {weight_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hidden_dim;
    let mut normal = |n: usize, std: f32| -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                if std == 0.0 {
                    0.0
                } else {
                    z * std
                }
            })
            .collect()
    };

    let embed_op = OpId::new(BACKBONE_LAYER, OpType::Q);
    let embed = WeightTensor::from_columns(embed_op, h, spec.vocab_size, &normal(h * spec.vocab_size, 1.0))?;
    let head_std = 1.0 / (h as f32).sqrt();
    let lm_head = WeightTensor::from_columns(embed_op, spec.vocab_size, h, &normal(h * spec.vocab_size, head_std))?;

    let std = weight_scale / (h as f32).sqrt();
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let mut ops = Vec::with_capacity(OpType::ALL.len());
        for op in OpType::ALL {
            let (rows, cols) = (op.output_dim(spec), op.input_dim(spec));
            let t = WeightTensor::from_columns(OpId::new(l, op), rows, cols, &normal(rows * cols, std))?;
            ops.push(match spec.dtype {
                DType::F32 => t,
                DType::Q4B32 => quantize_q4(&t)?,
            });
        }
        layers.push(ops);
    }

    Ok(Model { backbone: Backbone { spec: spec.clone(), embed, lm_head }, weight_scale, layers })
}

/// Source of linear-operator outputs during a forward step.
pub trait LinearExec {
    /// Returns `W(op) · x` where `x` is the operator's input vector.
    fn linear(&mut self, op: OpId, x: &[f32]) -> Result<Vec<f32>>;
}

/// Dense evaluation against an in-memory model.
pub struct DenseExec<'a>(pub &'a Model);

impl LinearExec for DenseExec<'_> {
    fn linear(&mut self, op: OpId, x: &[f32]) -> Result<Vec<f32>> {
        Ok(gemv(self.0.tensor(op), x))
    }
}

/// Evaluation with masked-out input elements treated as exact zeros.
pub struct MaskedExec<'a> {
    pub model: &'a Model,
    pub masks: &'a MaskSet,
}

impl LinearExec for MaskedExec<'_> {
    fn linear(&mut self, op: OpId, x: &[f32]) -> Result<Vec<f32>> {
        let mut masked = vec![0.0f32; x.len()];
        for &j in self.masks.get(op).indices() {
            masked[j as usize] = x[j as usize];
        }
        Ok(gemv(self.model.tensor(op), &masked))
    }
}

/// Per-layer key/value history.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self { keys: vec![Vec::new(); n_layers], values: vec![Vec::new(); n_layers] }
    }

    /// Number of cached positions.
    pub fn len(&self, hidden: usize) -> usize {
        self.keys.first().map_or(0, |k| k.len() / hidden)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.first().is_none_or(Vec::is_empty)
    }
}

pub fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn attention(spec: &ModelSpec, q: &[f32], keys: &[f32], values: &[f32]) -> Vec<f32> {
    let h = spec.hidden_dim;
    let hd = spec.head_dim();
    let positions = keys.len() / h;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; h];
    let mut scores = vec![0.0f32; positions];
    for head in 0..spec.n_heads {
        let r = head * hd..(head + 1) * hd;
        let qh = &q[r.clone()];
        for (t, s) in scores.iter_mut().enumerate() {
            let kh = &keys[t * h..][r.clone()];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let oh = &mut out[r.clone()];
        for (t, s) in scores.iter().enumerate() {
            let p = s / denom;
            let vh = &values[t * h..][r.clone()];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
    out
}

/// Runs one position through every layer and returns the logits.
pub fn decode_step(
    backbone: &Backbone,
    kv: &mut KvCache,
    token: u32,
    exec: &mut dyn LinearExec,
) -> Result<(Vec<f32>, StepRecord)> {
    let spec = &backbone.spec;
    if token as usize >= spec.vocab_size {
        return Err(Error::input(format!("token {token} out of vocabulary ({})", spec.vocab_size)));
    }
    let mut h = backbone.embedding(token);
    let mut record = StepRecord { layers: Vec::with_capacity(spec.n_layers) };
    for l in 0..spec.n_layers {
        let id = |op| OpId::new(l, op);
        let attn_in = h.clone();
        let attn_norm = rms_norm(&h);
        let q = exec.linear(id(OpType::Q), &attn_norm)?;
        let k = exec.linear(id(OpType::K), &attn_norm)?;
        let v = exec.linear(id(OpType::V), &attn_norm)?;
        kv.keys[l].extend_from_slice(&k);
        kv.values[l].extend_from_slice(&v);
        let attn_out = attention(spec, &q, &kv.keys[l], &kv.values[l]);
        let o = exec.linear(id(OpType::O), &attn_out)?;
        for (hi, oi) in h.iter_mut().zip(&o) {
            *hi += oi;
        }

        let ffn_in = h.clone();
        let ffn_norm = rms_norm(&h);
        let gate = exec.linear(id(OpType::Gate), &ffn_norm)?;
        let up = exec.linear(id(OpType::Up), &ffn_norm)?;
        let down_in: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let down = exec.linear(id(OpType::Down), &down_in)?;
        for (hi, di) in h.iter_mut().zip(&down) {
            *hi += di;
        }
        record.layers.push(LayerRecord { attn_in, attn_norm, attn_out, ffn_in, ffn_norm, down_in });
    }
    let logits = gemv(&backbone.lm_head, &rms_norm(&h));
    Ok((logits, record))
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Logits and activation trace of the final position.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub record: StepRecord,
}

impl ForwardOutput {
    /// The `n_layers × 3` site activations of the final position.
    pub fn trace(&self) -> Vec<Activation> {
        self.record.activations()
    }
}

fn check_tokens(spec: &ModelSpec, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("token sequence is empty"));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::input(format!("token {t} out of vocabulary ({})", spec.vocab_size)));
    }
    Ok(())
}

/// Runs `tokens` through `exec` position by position.
pub fn forward_with(backbone: &Backbone, tokens: &[u32], exec: &mut dyn LinearExec) -> Result<ForwardOutput> {
    check_tokens(&backbone.spec, tokens)?;
    let mut kv = KvCache::new(backbone.spec.n_layers);
    let mut last = None;
    for &t in tokens {
        last = Some(decode_step(backbone, &mut kv, t, exec)?);
    }
    let (logits, record) = last.expect("non-empty tokens");
    Ok(ForwardOutput { logits, record })
}

pub fn forward_dense(model: &Model, tokens: &[u32]) -> Result<ForwardOutput> {
    forward_with(&model.backbone, tokens, &mut DenseExec(model))
}

/// Forward pass with the same per-operator masks applied at every position.
pub fn forward_sparse(model: &Model, tokens: &[u32], masks: &MaskSet) -> Result<ForwardOutput> {
    masks.validate(model.spec())?;
    forward_with(&model.backbone, tokens, &mut MaskedExec { model, masks })
}

/// Forward pass with a distinct mask set per position; returns per-position logits.
pub fn forward_sparse_steps(model: &Model, tokens: &[u32], step_masks: &[MaskSet]) -> Result<Vec<Vec<f32>>> {
    check_tokens(model.spec(), tokens)?;
    if step_masks.len() != tokens.len() {
        return Err(Error::input(format!("{} mask sets for {} positions", step_masks.len(), tokens.len())));
    }
    let mut kv = KvCache::new(model.spec().n_layers);
    tokens
        .iter()
        .zip(step_masks)
        .map(|(&t, masks)| {
            masks.validate(model.spec())?;
            let (logits, _) = decode_step(&model.backbone, &mut kv, t, &mut MaskedExec { model, masks })?;
            Ok(logits)
        })
        .collect()
}

/// Greedy decoding with the dense model.
pub fn generate_dense(model: &Model, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
    check_tokens(model.spec(), prompt)?;
    let mut kv = KvCache::new(model.spec().n_layers);
    let mut exec = DenseExec(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decode_step(&model.backbone, &mut kv, t, &mut exec)?.0;
    }
    let mut out = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < n_tokens {
            logits = decode_step(&model.backbone, &mut kv, next, &mut exec)?.0;
        }
    }
    Ok(out)
}
