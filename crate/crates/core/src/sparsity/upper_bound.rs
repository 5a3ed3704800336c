use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, decode_step, gemv, DenseExec, KvCache, LinearExec, Model, OpId};

/// Minimal retained-weight fraction found for one decoded token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundPoint {
    /// Index of the decoded token (0 = first token after the prompt).
    pub step: usize,
    /// The dense model's token at this step.
    pub token: u32,
    pub fraction: f64,
}

/// Retention levels `step, 2·step, …, 1` (the last one clamped to 1).
pub fn retention_levels(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::input(format!("step must be in (0, 1], got {step}")));
    }
    let n = (1.0 / step - 1e-9).ceil() as usize;
    Ok((1..=n).map(|k| (k as f64 * step).min(1.0)).collect())
}

/// Number of weights kept out of `total` at retention `fraction`.
pub fn keep_count(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Executes each operator with only its `keep` highest-`|W_ij|·|x_j|` weights.
struct PruneExec<'a> {
    model: &'a Model,
    /// Dequantized column-major weights, indexed by `OpId::flat`.
    weights: &'a [Vec<f32>],
    fraction: f64,
}

impl LinearExec for PruneExec<'_> {
    fn linear(&mut self, op: OpId, x: &[f32]) -> Result<Vec<f32>> {
        let t = self.model.tensor(op);
        let total = t.rows * t.cols;
        let keep = keep_count(total, self.fraction);
        if keep == total {
            return Ok(gemv(t, x));
        }
        let w = &self.weights[op.flat()];
        let rows = t.rows;
        let score = |k: usize| w[k].abs() * x[k / rows].abs();
        let mut order: Vec<u32> = (0..total as u32).collect();
        let mut kept = vec![false; total];
        if keep > 0 {
            order.select_nth_unstable_by(keep - 1, |&a, &b| {
                score(b as usize).total_cmp(&score(a as usize)).then(a.cmp(&b))
            });
            for &k in &order[..keep] {
                kept[k as usize] = true;
            }
        }
        let mut y = vec![0.0f32; rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let base = j * rows;
            for (i, yi) in y.iter_mut().enumerate() {
                if kept[base + i] {
                    *yi += xj * w[base + i];
                }
            }
        }
        Ok(y)
    }
}

/// Per-token upper-bound contextual sparsity.
///
/// Greedily decodes `n_tokens` tokens after `prompt` with the dense model.
/// For each of them, the current position is re-evaluated with every
/// operator restricted to its top `fraction` of weights by importance score,
/// for fractions `step, 2·step, …, 1`; the smallest fraction whose argmax
/// matches the dense token is reported. Earlier positions always use the
/// dense key/value history.
pub fn upper_bound_sparsity(model: &Model, prompt: &[u32], n_tokens: usize, step: f64) -> Result<Vec<UpperBoundPoint>> {
    let levels = retention_levels(step)?;
    if prompt.is_empty() {
        return Err(Error::input("prompt is empty"));
    }
    let weights: Vec<Vec<f32>> = model.tensors().map(|t| t.to_f32()).collect();
    let mut kv = KvCache::new(model.spec().n_layers);
    for &t in &prompt[..prompt.len() - 1] {
        decode_step(&model.backbone, &mut kv, t, &mut DenseExec(model))?;
    }
    let mut input = *prompt.last().expect("non-empty");
    let mut out = Vec::with_capacity(n_tokens);
    for step_index in 0..n_tokens {
        let before = kv.clone();
        let (logits, _) = decode_step(&model.backbone, &mut kv, input, &mut DenseExec(model))?;
        let token = argmax(&logits);
        let mut fraction = 1.0;
        for &level in &levels {
            let mut trial = before.clone();
            let mut exec = PruneExec { model, weights: &weights, fraction: level };
            let (pruned, _) = decode_step(&model.backbone, &mut trial, input, &mut exec)?;
            if argmax(&pruned) == token {
                fraction = level;
                break;
            }
        }
        out.push(UpperBoundPoint { step: step_index, token, fraction });
        input = token;
    }
    Ok(out)
}
