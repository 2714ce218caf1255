//! Adam training loop for the toy decoder.
//!
//! Deterministic: the sample order comes from a seeded shuffle, batches are
//! consumed in order, and gradient accumulation order is fixed.

use super::autograd::backprop_batch;
use super::Model;
use crate::error::{Error, Result};
use crate::rng::Rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1200,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    /// Mean per-sequence loss of the final optimization step.
    pub final_loss: f64,
}

impl Model {
    /// Mutable views of every parameter, in the same order as
    /// [`super::Gradients::param_slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let Model {
            cfg: _,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            out_proj,
        } = self;
        let mut out: Vec<&mut [f64]> = vec![tok_emb.data_mut(), pos_emb.data_mut()];
        for l in layers.iter_mut() {
            out.push(&mut l.ln1.gamma);
            out.push(&mut l.ln1.beta);
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(&mut l.ln2.gamma);
            out.push(&mut l.ln2.beta);
            out.push(l.fc1.data_mut());
            out.push(l.fc2.data_mut());
        }
        out.push(&mut final_norm.gamma);
        out.push(&mut final_norm.beta);
        out.push(out_proj.data_mut());
        out
    }
}

/// Trains in place on `(tokens, targets)` items with Adam. Returns basic
/// stats; errors propagate from the backward pass (e.g. non-finite loss).
pub fn train_model(
    model: &mut Model,
    items: &[(Vec<u32>, Vec<Option<u32>>)],
    opts: &TrainOptions,
) -> Result<TrainStats> {
    if items.is_empty() {
        return Err(Error::invalid("no training items"));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::invalid("batch_size and learning_rate must be positive"));
    }
    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut adam_m: Vec<Vec<f64>> = model
        .param_slices_mut()
        .iter()
        .map(|s| vec![0.0; s.len()])
        .collect();
    let mut adam_v = adam_m.clone();

    let mut final_loss = 0.0;
    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(items[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = backprop_batch(model, &batch)?;
        let scale = 1.0 / batch.len() as f64;
        final_loss = loss * scale;

        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let grad_slices = grads.param_slices();
        let mut param_slices = model.param_slices_mut();
        for (pi, params) in param_slices.iter_mut().enumerate() {
            let g_slice = grad_slices[pi];
            let m = &mut adam_m[pi];
            let v = &mut adam_v[pi];
            for j in 0..params.len() {
                let g = g_slice[j] * scale;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                params[j] -= opts.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(TrainStats {
        steps: opts.steps,
        final_loss,
    })
}
