use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_step, DenseExec, KvCache, Model, OpType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub op_type: OpType,
    pub sparsity: f64,
    pub tau: f32,
}

/// Magnitude thresholds per operator type and sparsity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub dataset: String,
    pub samples: usize,
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    fn levels(&self, op: OpType) -> Vec<(f64, f32)> {
        let mut v: Vec<(f64, f32)> =
            self.entries.iter().filter(|e| e.op_type == op).map(|e| (e.sparsity, e.tau)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    /// Threshold for `op` at sparsity `sp`.
    ///
    /// Calibrated levels are returned as stored; in between, thresholds are
    /// interpolated linearly (with `(0, 0)` as the implicit lowest point);
    /// above the highest level the highest threshold is used.
    pub fn tau(&self, op: OpType, sp: f64) -> Result<f32> {
        let levels = self.levels(op);
        if levels.is_empty() {
            return Err(Error::input(format!("no thresholds calibrated for {op}")));
        }
        if sp <= 0.0 {
            return Ok(0.0);
        }
        let mut prev = (0.0f64, 0.0f32);
        for &(s, t) in &levels {
            if sp == s {
                return Ok(t);
            }
            if sp < s {
                let w = (sp - prev.0) / (s - prev.0);
                return Ok(prev.1 + (t - prev.1) * w as f32);
            }
            prev = (s, t);
        }
        Ok(prev.1)
    }

    pub fn validate(&self) -> Result<()> {
        for op in OpType::ALL {
            let levels = self.levels(op);
            if levels.iter().any(|&(s, t)| !(s > 0.0 && s < 1.0) || t.is_nan() || t < 0.0) {
                return Err(Error::format(format!("invalid threshold entry for {op}")));
            }
            if levels.windows(2).any(|w| w[1].1 < w[0].1) {
                return Err(Error::format(format!("thresholds for {op} are not monotone in sparsity")));
            }
        }
        Ok(())
    }
}

/// Empirical `sp`-quantile of `magnitudes`: the `floor(sp * n)`-th smallest
/// value, or 0 when that rank is 0. Sorts `magnitudes` in place.
pub fn threshold_for(magnitudes: &mut [f32], sp: f64) -> f32 {
    magnitudes.sort_unstable_by(f32::total_cmp);
    let rank = (sp * magnitudes.len() as f64).floor() as usize;
    if rank == 0 {
        0.0
    } else {
        magnitudes[rank.min(magnitudes.len()) - 1]
    }
}

/// Calibrates per-operator thresholds from dense runs over `prompts`,
/// pooling `|x|` over all layers and positions for each operator type.
pub fn calibrate_thresholds(model: &Model, prompts: &[Vec<u32>], levels: &[f64]) -> Result<ThresholdTable> {
    if let Some(sp) = levels.iter().find(|&&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::input(format!("sparsity level {sp} outside (0, 1)")));
    }
    let mut pooled: BTreeMap<OpType, Vec<f32>> = BTreeMap::new();
    let mut positions = 0usize;
    for prompt in prompts {
        let mut kv = KvCache::new(model.spec().n_layers);
        for &t in prompt {
            let (_, record) = decode_step(&model.backbone, &mut kv, t, &mut DenseExec(model))?;
            positions += 1;
            for layer in &record.layers {
                for op in OpType::ALL {
                    pooled.entry(op).or_default().extend(layer.op_input(op).iter().map(|v| v.abs()));
                }
            }
        }
    }
    if positions == 0 {
        return Err(Error::input("calibration trace is empty"));
    }
    let mut entries = Vec::with_capacity(levels.len() * OpType::ALL.len());
    for (op, mut mags) in pooled {
        for &sp in levels {
            entries.push(ThresholdEntry { op_type: op, sparsity: sp, tau: threshold_for(&mut mags, sp) });
        }
    }
    Ok(ThresholdTable { dataset: format!("{} prompts", prompts.len()), samples: positions, entries })
}
