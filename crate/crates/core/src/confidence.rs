//! Confidence estimators: intrinsic MaxProb and the extrinsic Selector.
//!
//! MaxProb is the joint probability of the generated tokens, computed in
//! log space. The Selector is a two-layer perceptron (tanh hidden layer,
//! logistic output) regressing the soft-accuracy target from the flattened
//! feature vector [v_i ‖ q_i ‖ o_1 ‖ p], with per-feature standardization
//! fitted on its training portion.

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::metrics::PredictionRecord;
use crate::model::Generation;
use crate::rng::Rng;

/// Joint probability of all generated tokens: the product of per-step
/// probabilities, computed as `exp(Σ ln p)` to avoid underflow.
pub fn maxprob(generation: &Generation) -> Result<f64> {
    if generation.step_probs.is_empty() {
        return Err(Error::invalid("generation has no steps"));
    }
    if let Some(i) = generation
        .step_probs
        .iter()
        .position(|&p| !(p > 0.0 && p <= 1.0))
    {
        return Err(Error::invalid(format!(
            "step probability {} at step {i} outside (0, 1]",
            generation.step_probs[i]
        )));
    }
    let log_p: f64 = generation.step_probs.iter().map(|p| p.ln()).sum();
    Ok(log_p.exp())
}

/// Two-layer perceptron confidence estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    /// [hidden, input_dim]
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// [hidden]
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Per-feature standardization fitted on the training portion.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl SelectorModel {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    /// Seeded random initialization with neutral normalization stats.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::invalid("selector dimensions must be positive"));
        }
        let mut rng = Rng::new(seed);
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let w1 = Matrix::from_fn(hidden, input_dim, |_, _| rng.normal_scaled(s1));
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w2 = (0..hidden).map(|_| rng.normal_scaled(s2)).collect();
        Ok(SelectorModel {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
            norm_mean: vec![0.0; input_dim],
            norm_std: vec![1.0; input_dim],
        })
    }

    fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &x)| (x - self.norm_mean[i]) / self.norm_std[i])
            .collect()
    }

    /// Forward pass on raw (unnormalized) features: returns (prediction,
    /// hidden activations, normalized input).
    fn forward(&self, raw: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let x = self.normalize(raw);
        let mut h = self.w1.matvec(&x);
        for (i, v) in h.iter_mut().enumerate() {
            *v = (*v + self.b1[i]).tanh();
        }
        let z = dot(&self.w2, &h) + self.b2;
        (logistic(z), h, x)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Predicted correctness likelihood in [0, 1] for one raw feature vector.
pub fn selector_predict(model: &SelectorModel, raw_features: &[f64]) -> Result<f64> {
    if raw_features.len() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature vector has {} entries, selector expects {}",
            raw_features.len(),
            model.input_dim()
        )));
    }
    ensure_finite(raw_features, "selector features")?;
    Ok(model.forward(raw_features).0)
}

/// Gradient of the prediction with respect to the raw input features.
pub fn selector_input_grad(model: &SelectorModel, raw_features: &[f64]) -> Result<Vec<f64>> {
    if raw_features.len() != model.input_dim() {
        return Err(Error::ShapeMismatch("feature dimension mismatch".into()));
    }
    ensure_finite(raw_features, "selector features")?;
    let (y, h, _) = model.forward(raw_features);
    let dz = y * (1.0 - y);
    // dz/dh = w2; dh/da = 1 - h^2; da/dx_norm = w1; dx_norm/dx = 1/std
    let mut dx = vec![0.0; model.input_dim()];
    for (j, (&w2j, &hj)) in model.w2.iter().zip(h.iter()).enumerate() {
        let da = dz * w2j * (1.0 - hj * hj);
        let row = model.w1.row(j);
        for i in 0..dx.len() {
            dx[i] += da * row[i];
        }
    }
    for (i, g) in dx.iter_mut().enumerate() {
        *g /= model.norm_std[i];
    }
    Ok(dx)
}

/// Parameter gradients of the mean-squared-error loss over a batch.
#[derive(Debug, Clone)]
pub struct SelectorGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Mean squared error over a batch of raw feature vectors.
pub fn selector_loss(model: &SelectorModel, feats: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    if feats.len() != targets.len() || feats.is_empty() {
        return Err(Error::invalid("batch features/targets mismatch or empty"));
    }
    let mut loss = 0.0;
    for (x, &t) in feats.iter().zip(targets.iter()) {
        let (y, _, _) = model.forward(x);
        loss += (y - t) * (y - t);
    }
    Ok(loss / feats.len() as f64)
}

/// MSE loss and its exact parameter gradients over a batch.
pub fn selector_backprop(
    model: &SelectorModel,
    feats: &[Vec<f64>],
    targets: &[f64],
) -> Result<(f64, SelectorGrads)> {
    if feats.len() != targets.len() || feats.is_empty() {
        return Err(Error::invalid("batch features/targets mismatch or empty"));
    }
    let b = feats.len() as f64;
    let mut grads = SelectorGrads {
        w1: Matrix::zeros(model.hidden(), model.input_dim()),
        b1: vec![0.0; model.hidden()],
        w2: vec![0.0; model.hidden()],
        b2: 0.0,
    };
    let mut loss = 0.0;
    for (x, &t) in feats.iter().zip(targets.iter()) {
        let (y, h, xn) = model.forward(x);
        loss += (y - t) * (y - t);
        let dy = 2.0 * (y - t) / b;
        let dz = dy * y * (1.0 - y);
        for (j, &hj) in h.iter().enumerate() {
            grads.w2[j] += dz * hj;
            let da = dz * model.w2[j] * (1.0 - hj * hj);
            grads.b1[j] += da;
            let row = grads.w1.row_mut(j);
            for i in 0..xn.len() {
                row[i] += da * xn[i];
            }
        }
        grads.b2 += dz;
    }
    loss /= b;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite selector loss".to_string()));
    }
    Ok((loss, grads))
}

/// Hyper-parameters for [`selector_train`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub weight_decay: f64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        SelectorTrainConfig {
            epochs: 200,
            learning_rate: 0.5,
            batch_size: 32,
            seed: 0,
            hidden: 64,
            weight_decay: 1e-4,
        }
    }
}

impl SelectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid(
                "learning_rate must be positive, batch_size and hidden >= 1",
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Diagnostics from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Epoch whose parameters were returned (0 = the seeded init).
    pub best_epoch: usize,
    pub initial_heldout_mse: f64,
    pub best_heldout_mse: f64,
    pub warnings: Vec<String>,
}

fn record_features(records: &[PredictionRecord]) -> Result<Vec<Vec<f64>>> {
    let mut feats = Vec::with_capacity(records.len());
    let mut dim = None;
    for r in records {
        let f = r.features.as_ref().ok_or_else(|| {
            Error::invalid(format!("record {} has no features", r.id))
        })?;
        let flat = f.flatten();
        ensure_finite(&flat, &format!("features of record {}", r.id))?;
        match dim {
            None => dim = Some(flat.len()),
            Some(d) if d != flat.len() => {
                return Err(Error::ShapeMismatch(format!(
                    "record {} has {} features, expected {d}",
                    r.id,
                    flat.len()
                )));
            }
            _ => {}
        }
        feats.push(flat);
    }
    Ok(feats)
}

/// Trains a selector on records carrying features and soft-accuracy
/// targets, returning the model together with a [`TrainReport`].
///
/// A deterministic 10% holdout (at least one record) is split off after a
/// seeded shuffle; normalization statistics come from the remaining
/// training portion. Mini-batch SGD minimizes the MSE, and the parameters
/// of the best epoch by holdout MSE are returned — the seeded initial
/// model counts as epoch 0, so the result never regresses below it.
pub fn selector_train_report(
    records: &[PredictionRecord],
    cfg: &SelectorTrainConfig,
) -> Result<(SelectorModel, TrainReport)> {
    cfg.validate()?;
    if records.len() < 2 {
        return Err(Error::invalid("selector training needs at least 2 records"));
    }
    if let Some(r) = records
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.soft_acc) || !r.soft_acc.is_finite())
    {
        return Err(Error::invalid(format!(
            "record {}: target {} outside [0, 1]",
            r.id, r.soft_acc
        )));
    }
    let feats = record_features(records)?;
    let targets: Vec<f64> = records.iter().map(|r| r.soft_acc).collect();
    let input_dim = feats[0].len();

    let mut warnings = Vec::new();
    let identical_feats = feats.iter().all(|f| f == &feats[0]);
    let differing_targets = targets.iter().any(|&t| t != targets[0]);
    if identical_feats && differing_targets {
        warnings.push(
            "all records share identical features but targets differ; the remaining error is irreducible"
                .to_string(),
        );
    }

    // Deterministic shuffle, last 10% (>= 1) held out.
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    rng.shuffle(&mut order);
    let holdout_n = (records.len() / 10).max(1);
    let (train_idx, holdout_idx) = order.split_at(records.len() - holdout_n);

    // Standardization from the training portion only.
    let mut mean = vec![0.0; input_dim];
    for &i in train_idx {
        for (j, &v) in feats[i].iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= train_idx.len() as f64;
    }
    let mut std = vec![0.0; input_dim];
    for &i in train_idx {
        for (j, &v) in feats[i].iter().enumerate() {
            std[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    for s in &mut std {
        *s = (*s / train_idx.len() as f64).sqrt().max(1e-8);
    }

    let mut model = SelectorModel::init(input_dim, cfg.hidden, cfg.seed)?;
    model.norm_mean = mean;
    model.norm_std = std;

    let holdout_feats: Vec<Vec<f64>> = holdout_idx.iter().map(|&i| feats[i].clone()).collect();
    let holdout_targets: Vec<f64> = holdout_idx.iter().map(|&i| targets[i]).collect();
    let initial_mse = selector_loss(&model, &holdout_feats, &holdout_targets)?;

    let mut best = model.clone();
    let mut best_mse = initial_mse;
    let mut best_epoch = 0usize;
    let mut epoch_order: Vec<usize> = train_idx.to_vec();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut epoch_order);
        for chunk in epoch_order.chunks(cfg.batch_size) {
            let batch_feats: Vec<Vec<f64>> = chunk.iter().map(|&i| feats[i].clone()).collect();
            let batch_targets: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (_, grads) = selector_backprop(&model, &batch_feats, &batch_targets)?;
            let lr = cfg.learning_rate;
            let wd = cfg.weight_decay;
            for (w, g) in model
                .w1
                .data_mut()
                .iter_mut()
                .zip(grads.w1.data().iter())
            {
                *w -= lr * (g + wd * *w);
            }
            for (w, g) in model.b1.iter_mut().zip(grads.b1.iter()) {
                *w -= lr * g;
            }
            for (w, g) in model.w2.iter_mut().zip(grads.w2.iter()) {
                *w -= lr * (g + wd * *w);
            }
            model.b2 -= lr * grads.b2;
        }
        let mse = selector_loss(&model, &holdout_feats, &holdout_targets)?;
        if !mse.is_finite() {
            return Err(Error::Numerical(format!(
                "selector training diverged at epoch {epoch}"
            )));
        }
        if mse < best_mse {
            best_mse = mse;
            best = model.clone();
            best_epoch = epoch;
        }
    }

    Ok((
        best,
        TrainReport {
            best_epoch,
            initial_heldout_mse: initial_mse,
            best_heldout_mse: best_mse,
            warnings,
        },
    ))
}

/// Trains a selector; see [`selector_train_report`] for the mechanics.
pub fn selector_train(
    records: &[PredictionRecord],
    cfg: &SelectorTrainConfig,
) -> Result<SelectorModel> {
    selector_train_report(records, cfg).map(|(m, _)| m)
}

// ---------------------------------------------------------------------------
// JSON round-trip: 64-bit floats rendered as decimal strings
// ---------------------------------------------------------------------------

fn floats_to_strings(values: &[f64]) -> Vec<serde_json::Value> {
    values
        .iter()
        .map(|v| serde_json::Value::String(format!("{v:?}")))
        .collect()
}

fn strings_to_floats(value: &serde_json::Value, field: &str) -> Result<Vec<f64>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Corrupt(format!("selector field {field} is not an array")))?;
    arr.iter()
        .map(|v| {
            v.as_str()
                .ok_or_else(|| Error::Corrupt(format!("{field}: expected decimal string")))?
                .parse::<f64>()
                .map_err(|e| Error::Corrupt(format!("{field}: {e}")))
        })
        .collect()
}

impl SelectorModel {
    /// Serializes the model. Weights are row-major arrays of decimal
    /// strings formatted with the shortest representation that parses back
    /// to the identical 64-bit float.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "input_dim": self.input_dim(),
            "hidden": self.hidden(),
            "norm_mean": floats_to_strings(&self.norm_mean),
            "norm_std": floats_to_strings(&self.norm_std),
            "w1": floats_to_strings(self.w1.data()),
            "b1": floats_to_strings(&self.b1),
            "w2": floats_to_strings(&self.w2),
            "b2": format!("{:?}", self.b2),
        })
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<Self> {
        let input_dim = value["input_dim"]
            .as_u64()
            .ok_or_else(|| Error::Corrupt("selector: missing input_dim".into()))?
            as usize;
        let hidden = value["hidden"]
            .as_u64()
            .ok_or_else(|| Error::Corrupt("selector: missing hidden".into()))?
            as usize;
        let w1 = Matrix::from_vec(hidden, input_dim, strings_to_floats(&value["w1"], "w1")?)
            .map_err(|e| Error::Corrupt(format!("selector w1: {e}")))?;
        let b2 = value["b2"]
            .as_str()
            .ok_or_else(|| Error::Corrupt("selector: b2 must be a decimal string".into()))?
            .parse::<f64>()
            .map_err(|e| Error::Corrupt(format!("selector b2: {e}")))?;
        let model = SelectorModel {
            w1,
            b1: strings_to_floats(&value["b1"], "b1")?,
            w2: strings_to_floats(&value["w2"], "w2")?,
            b2,
            norm_mean: strings_to_floats(&value["norm_mean"], "norm_mean")?,
            norm_std: strings_to_floats(&value["norm_std"], "norm_std")?,
        };
        if model.b1.len() != hidden
            || model.w2.len() != hidden
            || model.norm_mean.len() != input_dim
            || model.norm_std.len() != input_dim
        {
            return Err(Error::Corrupt("selector: inconsistent dimensions".into()));
        }
        Ok(model)
    }
}
