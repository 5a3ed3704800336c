//! On-disk model container: a JSON manifest plus one raw little-endian
//! payload file, and CSV activation traces.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, Backbone, DType, Model, ModelSpec, OpId, OpType, Site, WeightTensor, BACKBONE_LAYER};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "swapflow-model";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<OpType>,
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub weight_scale: f32,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
    pub payload_bytes: u64,
    /// Embedding and output head (always f32, never swapped).
    pub backbone: Vec<TensorEntry>,
    /// The `n_layers × 7` swappable operators, layer-major in operator order.
    pub tensors: Vec<TensorEntry>,
}

fn entry(name: String, t: &WeightTensor, offset: &mut u64, layer: bool) -> TensorEntry {
    let e = TensorEntry {
        name,
        layer: layer.then_some(t.op.layer),
        op: layer.then_some(t.op.op),
        rows: t.rows,
        cols: t.cols,
        dtype: t.dtype,
        offset: *offset,
        nbytes: t.data.len() as u64,
    };
    *offset += e.nbytes;
    e
}

/// Builds the manifest describing `model` with its payload named `payload`.
pub fn manifest_for(model: &Model, payload: &str) -> ModelManifest {
    let mut offset = 0u64;
    let backbone = vec![
        entry("embed".into(), &model.backbone.embed, &mut offset, false),
        entry("lm_head".into(), &model.backbone.lm_head, &mut offset, false),
    ];
    let tensors = model
        .tensors()
        .map(|t| {
            let name = format!("layers.{}.{}", t.op.layer, t.op.op.name().to_ascii_lowercase());
            entry(name, t, &mut offset, true)
        })
        .collect();
    ModelManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        spec: model.spec().clone(),
        weight_scale: model.weight_scale,
        payload: payload.into(),
        payload_bytes: offset,
        backbone,
        tensors,
    }
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(payload)
}

/// Writes `<manifest_path>` and its payload (`<stem>.bin` next to it).
pub fn save_model(model: &Model, manifest_path: &Path) -> Result<ModelManifest> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::input(format!("bad manifest path {}", manifest_path.display())))?;
    let payload_name = format!("{stem}.bin");
    let manifest = manifest_for(model, &payload_name);

    let mut payload = fs::File::create(payload_path(manifest_path, &payload_name))?;
    payload.write_all(&model.backbone.embed.data)?;
    payload.write_all(&model.backbone.lm_head.data)?;
    for t in model.tensors() {
        payload.write_all(&t.data)?;
    }
    payload.sync_all()?;

    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(manifest_path, json)?;
    Ok(manifest)
}

fn read_tensor(payload: &[u8], e: &TensorEntry, op: OpId) -> Result<WeightTensor> {
    let expected = e.dtype.channel_bytes(e.rows) * e.cols;
    if e.nbytes as usize != expected {
        return Err(Error::format(format!("tensor {} has {} bytes, expected {expected}", e.name, e.nbytes)));
    }
    let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= payload.len() as u64);
    let end = end.ok_or_else(|| Error::format(format!("tensor {} exceeds payload", e.name)))?;
    Ok(WeightTensor {
        op,
        rows: e.rows,
        cols: e.cols,
        dtype: e.dtype,
        data: payload[e.offset as usize..end as usize].to_vec(),
    })
}

/// Loads a model from its manifest, validating the tensor table.
pub fn load_model(manifest_path: &Path) -> Result<Model> {
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::format(format!("unsupported manifest {} v{}", manifest.format, manifest.version)));
    }
    let spec = manifest.spec.clone();
    spec.validate()?;
    let mut payload = Vec::new();
    fs::File::open(payload_path(manifest_path, &manifest.payload))?.read_to_end(&mut payload)?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::format(format!(
            "payload has {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let [embed, lm_head] = manifest.backbone.as_slice() else {
        return Err(Error::format("manifest must list exactly embed and lm_head"));
    };
    let backbone_op = OpId::new(BACKBONE_LAYER, OpType::Q);
    let embed = read_tensor(&payload, embed, backbone_op)?;
    let lm_head = read_tensor(&payload, lm_head, backbone_op)?;
    if (embed.rows, embed.cols) != (spec.hidden_dim, spec.vocab_size)
        || (lm_head.rows, lm_head.cols) != (spec.vocab_size, spec.hidden_dim)
        || embed.dtype != DType::F32
        || lm_head.dtype != DType::F32
    {
        return Err(Error::format("backbone tensors do not match the model spec"));
    }

    if manifest.tensors.len() != spec.n_layers * OpType::ALL.len() {
        return Err(Error::format(format!(
            "expected {} layer tensors, found {}",
            spec.n_layers * OpType::ALL.len(),
            manifest.tensors.len()
        )));
    }
    let mut layers = Vec::with_capacity(spec.n_layers);
    for (l, entries) in manifest.tensors.chunks(OpType::ALL.len()).enumerate() {
        let mut ops = Vec::with_capacity(OpType::ALL.len());
        for (e, op) in entries.iter().zip(OpType::ALL) {
            if e.layer != Some(l) || e.op != Some(op) {
                return Err(Error::format(format!("tensor {} out of canonical order", e.name)));
            }
            if (e.rows, e.cols, e.dtype) != (op.output_dim(&spec), op.input_dim(&spec), spec.dtype) {
                return Err(Error::format(format!("tensor {} has the wrong shape or dtype", e.name)));
            }
            ops.push(read_tensor(&payload, e, OpId::new(l, op))?);
        }
        layers.push(ops);
    }
    Ok(Model { backbone: Backbone { spec, embed, lm_head }, weight_scale: manifest.weight_scale, layers })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    token: usize,
    layer: usize,
    site: Site,
    index: usize,
    value: f32,
}

/// Writes activation traces as CSV `token,layer,site,index,value`.
///
/// `steps[t]` holds the activations of position `t`.
pub fn write_activation_trace<W: Write>(out: W, steps: &[Vec<Activation>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (token, acts) in steps.iter().enumerate() {
        for a in acts {
            for (index, &value) in a.values.iter().enumerate() {
                w.serialize(TraceRow { token, layer: a.layer, site: a.site, index, value })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV activation trace back into per-position activation lists.
///
/// Rows must be grouped by `(token, layer, site)` with consecutive indices.
pub fn read_activation_trace<R: Read>(input: R) -> Result<Vec<Vec<Activation>>> {
    let mut steps: Vec<Vec<Activation>> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: TraceRow = row?;
        if row.token >= steps.len() {
            if row.token != steps.len() {
                return Err(Error::format(format!("trace token {} out of order", row.token)));
            }
            steps.push(Vec::new());
        }
        let step = steps.last_mut().expect("pushed above");
        let start_new = step.last().is_none_or(|a| a.layer != row.layer || a.site != row.site);
        if start_new {
            if row.index != 0 {
                return Err(Error::format(format!(
                    "trace for layer {} {} starts at index {}",
                    row.layer, row.site, row.index
                )));
            }
            step.push(Activation { values: Vec::new(), layer: row.layer, site: row.site });
        }
        let act = step.last_mut().expect("pushed above");
        if row.index != act.values.len() {
            return Err(Error::format(format!("trace index {} out of order", row.index)));
        }
        if !row.value.is_finite() {
            return Err(Error::input(format!("non-finite trace value at layer {} {}", row.layer, row.site)));
        }
        act.values.push(row.value);
    }
    Ok(steps)
}
