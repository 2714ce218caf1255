//! Data-aware calibration: modality-weighted channel equalization.
//!
//! Gradient magnitudes of vision and text tokens (taken at the input
//! embeddings under a next-token loss) weight a per-channel reconstruction
//! objective. A small grid search over the exponent of the max-abs
//! activation statistic picks the channel scaling that minimizes the
//! weighted output error after quantization. In full precision the
//! scaling is an exact identity: `(X diag(1/s)) (diag(s) W)^T = X W^T`.

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::Matrix;
use crate::model::{backprop, Model};
use crate::quant::{dequantize, quantize, QuantSpec};
use serde::{Deserialize, Serialize};

/// Scale floor used when raising activation statistics to an exponent.
pub const EQ_SCALE_FLOOR: f64 = 1e-8;

/// Modality tag carried by every calibration token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "v")]
    Vision,
    #[serde(rename = "t")]
    Text,
}

/// One calibration sequence: token ids with one modality tag each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSequence {
    pub tokens: Vec<u32>,
    pub modality: Vec<Modality>,
}

/// A batch of calibration sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibBatch {
    pub samples: Vec<CalibSequence>,
}

impl CalibBatch {
    pub fn new(samples: Vec<CalibSequence>) -> Result<Self> {
        let batch = CalibBatch { samples };
        batch.validate()?;
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("calibration batch is empty"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.tokens.len() != s.modality.len() {
                return Err(Error::invalid(format!(
                    "sequence {i}: {} tokens but {} modality tags",
                    s.tokens.len(),
                    s.modality.len()
                )));
            }
            if s.tokens.len() < 2 {
                return Err(Error::invalid(format!(
                    "sequence {i} has fewer than 2 tokens; next-token loss needs at least 2"
                )));
            }
        }
        Ok(())
    }
}

/// Per-modality gradient weights, normalized to sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub alpha_v: f64,
    pub alpha_t: f64,
}

/// Per-input-channel scaling chosen by the grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationPlan {
    pub per_channel_scales: Vec<f64>,
    pub chosen_exponent: f64,
}

impl EqualizationPlan {
    /// A neutral plan (all scales 1).
    pub fn identity(channels: usize) -> Self {
        EqualizationPlan {
            per_channel_scales: vec![1.0; channels],
            chosen_exponent: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .per_channel_scales
            .iter()
            .position(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::invalid(format!(
                "equalization scale at channel {i} must be strictly positive and finite"
            )));
        }
        Ok(())
    }
}

/// Mean L2 norm of the loss gradient at the input embeddings, taken per
/// modality over every token of the batch, normalized so the two weights
/// sum to 1. The loss is next-token cross-entropy over each sequence.
pub fn modality_weights(model: &Model, batch: &CalibBatch) -> Result<ModalityWeights> {
    batch.validate()?;
    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    for seq in &batch.samples {
        let mut targets: Vec<Option<u32>> =
            seq.tokens.iter().skip(1).map(|&t| Some(t)).collect();
        targets.push(None);
        let (_, grads) = backprop(model, &seq.tokens, &targets)?;
        for (pos, &tag) in seq.modality.iter().enumerate() {
            let row = grads.input_emb.row(pos);
            let norm = row.iter().map(|g| g * g).sum::<f64>().sqrt();
            let idx = match tag {
                Modality::Vision => 0,
                Modality::Text => 1,
            };
            sum[idx] += norm;
            count[idx] += 1;
        }
    }
    let mean = |i: usize| if count[i] == 0 { 0.0 } else { sum[i] / count[i] as f64 };
    let (av, at) = (mean(0), mean(1));
    let total = av + at;
    if total <= 0.0 {
        return Err(Error::invalid(
            "both modality gradient weights are zero; cannot normalize",
        ));
    }
    Ok(ModalityWeights {
        alpha_v: av / total,
        alpha_t: at / total,
    })
}

fn check_acts(weights: &Matrix, acts: &Matrix, which: &str) -> Result<()> {
    if acts.rows() > 0 && acts.cols() != weights.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{which} activations have {} channels, weights have {} input channels",
            acts.cols(),
            weights.cols()
        )));
    }
    ensure_finite(acts.data(), which)
}

/// Channel scales for one exponent: `s_j = (max_i |X[i,j]|)^beta`, floored.
fn channel_scales(x_v: &Matrix, x_t: &Matrix, cols: usize, beta: f64) -> Vec<f64> {
    let mut max_abs = vec![0.0f64; cols];
    for acts in [x_v, x_t] {
        for r in 0..acts.rows() {
            let row = acts.row(r);
            for (j, m) in max_abs.iter_mut().enumerate() {
                *m = m.max(row[j].abs());
            }
        }
    }
    max_abs
        .iter()
        .map(|&m| m.powf(beta).max(EQ_SCALE_FLOOR))
        .collect()
}

/// Weighted reconstruction loss of quantizing `diag(s) W` at one exponent,
/// together with the scales used. Exposed so sweeps can score every grid
/// point with the full pipeline.
pub fn equalization_loss(
    weights: &Matrix,
    x_v: &Matrix,
    x_t: &Matrix,
    mw: &ModalityWeights,
    spec: &QuantSpec,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    check_acts(weights, x_v, "vision")?;
    check_acts(weights, x_t, "text")?;
    let scales = channel_scales(x_v, x_t, weights.cols(), beta);

    let mut scaled = weights.clone();
    for (j, &s) in scales.iter().enumerate() {
        scaled.scale_col(j, s);
    }
    let reconstructed = dequantize(&quantize(&scaled, spec)?)?;

    let mut loss = 0.0;
    for (acts, alpha) in [(x_v, mw.alpha_v), (x_t, mw.alpha_t)] {
        if acts.rows() == 0 || alpha == 0.0 {
            continue;
        }
        let full = acts.matmul_nt(weights)?;
        let mut folded = acts.clone();
        for (j, &s) in scales.iter().enumerate() {
            folded.scale_col(j, 1.0 / s);
        }
        let approx = folded.matmul_nt(&reconstructed)?;
        loss += alpha * full.frob_sq_dist(&approx)?;
    }
    Ok((loss, scales))
}

/// Grid search over exponents; returns the plan with the smallest weighted
/// loss, breaking ties toward the smaller exponent.
pub fn search_equalization(
    weights: &Matrix,
    x_v: &Matrix,
    x_t: &Matrix,
    mw: &ModalityWeights,
    spec: &QuantSpec,
    exponent_grid: &[f64],
) -> Result<EqualizationPlan> {
    if exponent_grid.is_empty() {
        return Err(Error::invalid("exponent grid is empty"));
    }
    if let Some(i) = exponent_grid.iter().position(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::invalid(format!(
            "exponent {} at grid index {i} outside [0, 1]",
            exponent_grid[i]
        )));
    }
    let mut best: Option<(f64, f64, Vec<f64>)> = None; // (loss, beta, scales)
    for &beta in exponent_grid {
        let (loss, scales) = equalization_loss(weights, x_v, x_t, mw, spec, beta)?;
        let better = match &best {
            None => true,
            Some((bl, bb, _)) => loss < *bl || (loss == *bl && beta < *bb),
        };
        if better {
            best = Some((loss, beta, scales));
        }
    }
    let (_, beta, scales) = best.expect("non-empty grid");
    Ok(EqualizationPlan {
        per_channel_scales: scales,
        chosen_exponent: beta,
    })
}

/// Default exponent grid.
pub fn default_exponent_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

/// W[o, j] * s_j for every input channel j.
pub fn apply_equalization(weights: &Matrix, plan: &EqualizationPlan) -> Result<Matrix> {
    plan.validate()?;
    if plan.per_channel_scales.len() != weights.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {} input channels",
            plan.per_channel_scales.len(),
            weights.cols()
        )));
    }
    let mut out = weights.clone();
    for (j, &s) in plan.per_channel_scales.iter().enumerate() {
        out.scale_col(j, s);
    }
    Ok(out)
}

/// X[n, j] / s_j — the activation-side compensation for [`apply_equalization`].
pub fn fold_inverse(acts: &Matrix, plan: &EqualizationPlan) -> Result<Matrix> {
    plan.validate()?;
    if plan.per_channel_scales.len() != acts.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {} activation channels",
            plan.per_channel_scales.len(),
            acts.cols()
        )));
    }
    let mut out = acts.clone();
    for (j, &s) in plan.per_channel_scales.iter().enumerate() {
        out.scale_col(j, 1.0 / s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::quant::{QuantMethod, QuantSpec};
    use crate::rng::Rng;

    fn tiny_model(seed: u64) -> Model {
        init_model(&ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 12,
            seed,
        })
        .unwrap()
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn text_only_batch_gives_alpha_t_one() {
        let model = tiny_model(1);
        let batch = CalibBatch::new(vec![CalibSequence {
            tokens: vec![1, 2, 3, 4],
            modality: vec![Modality::Text; 4],
        }])
        .unwrap();
        let mw = modality_weights(&model, &batch).unwrap();
        assert_eq!(mw.alpha_v, 0.0);
        assert_eq!(mw.alpha_t, 1.0);
    }

    #[test]
    fn tag_swapped_batch_is_symmetric() {
        // Tags do not enter the network, so mirroring them across two
        // otherwise identical sequences forces alpha_v == alpha_t.
        let model = tiny_model(2);
        let tokens = vec![3, 5, 2, 7, 1];
        let tags = vec![
            Modality::Vision,
            Modality::Vision,
            Modality::Text,
            Modality::Text,
            Modality::Text,
        ];
        let swapped: Vec<Modality> = tags
            .iter()
            .map(|t| match t {
                Modality::Vision => Modality::Text,
                Modality::Text => Modality::Vision,
            })
            .collect();
        let batch = CalibBatch::new(vec![
            CalibSequence {
                tokens: tokens.clone(),
                modality: tags,
            },
            CalibSequence {
                tokens,
                modality: swapped,
            },
        ])
        .unwrap();
        let mw = modality_weights(&model, &batch).unwrap();
        assert!((mw.alpha_v - 0.5).abs() < 1e-9, "{mw:?}");
        assert!((mw.alpha_t - 0.5).abs() < 1e-9, "{mw:?}");
    }

    #[test]
    fn duplicated_batch_leaves_alphas_unchanged() {
        let model = tiny_model(3);
        let seqs = vec![
            CalibSequence {
                tokens: vec![1, 4, 2, 9],
                modality: vec![
                    Modality::Vision,
                    Modality::Vision,
                    Modality::Text,
                    Modality::Text,
                ],
            },
            CalibSequence {
                tokens: vec![8, 3, 6],
                modality: vec![Modality::Vision, Modality::Text, Modality::Text],
            },
        ];
        let once = modality_weights(&model, &CalibBatch::new(seqs.clone()).unwrap()).unwrap();
        let mut doubled = seqs.clone();
        doubled.extend(seqs);
        let twice = modality_weights(&model, &CalibBatch::new(doubled).unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn exactly_representable_weights_pick_beta_zero() {
        // Every group spans [0, 15 * 0.25]: scale 0.25 (a power of two),
        // zero-point 0, so requantization at beta = 0 is bit-exact.
        let mut rng = Rng::new(5);
        let spec = QuantSpec::new(4, 16, QuantMethod::Hqq);
        let mut data: Vec<f64> = (0..64).map(|_| 0.25 * rng.below(16) as f64).collect();
        for g in 0..4 {
            data[g * 16] = 0.0;
            data[g * 16 + 1] = 0.25 * 15.0;
        }
        let grid_weights = Matrix::from_vec(4, 16, data).unwrap();
        let x_v = random_matrix(&mut rng, 6, 16);
        let x_t = random_matrix(&mut rng, 6, 16);
        let mw = ModalityWeights {
            alpha_v: 0.5,
            alpha_t: 0.5,
        };
        let plan = search_equalization(
            &grid_weights,
            &x_v,
            &x_t,
            &mw,
            &spec,
            &default_exponent_grid(),
        )
        .unwrap();
        assert_eq!(plan.chosen_exponent, 0.0);
        let (l0, _) = equalization_loss(&grid_weights, &x_v, &x_t, &mw, &spec, 0.0).unwrap();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn single_element_grid_is_forced() {
        let mut rng = Rng::new(7);
        let w = random_matrix(&mut rng, 4, 8);
        let x = random_matrix(&mut rng, 5, 8);
        let mw = ModalityWeights {
            alpha_v: 0.3,
            alpha_t: 0.7,
        };
        let spec = QuantSpec::new(3, 8, QuantMethod::Hqq);
        let plan = search_equalization(&w, &x, &x, &mw, &spec, &[0.5]).unwrap();
        assert_eq!(plan.chosen_exponent, 0.5);
    }

    #[test]
    fn outlier_channel_benefits_from_equalization() {
        let mut rng = Rng::new(11);
        let w = random_matrix(&mut rng, 8, 16);
        let mut x_v = random_matrix(&mut rng, 12, 16);
        let mut x_t = random_matrix(&mut rng, 12, 16);
        for x in [&mut x_v, &mut x_t] {
            x.scale_col(3, 100.0);
        }
        let mw = ModalityWeights {
            alpha_v: 0.5,
            alpha_t: 0.5,
        };
        let spec = QuantSpec::new(3, 16, QuantMethod::Hqq);
        let grid = default_exponent_grid();
        let losses: Vec<f64> = grid
            .iter()
            .map(|&b| equalization_loss(&w, &x_v, &x_t, &mw, &spec, b).unwrap().0)
            .collect();
        let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            best < losses[0],
            "no exponent beat beta=0: losses {losses:?}"
        );
        // And the search agrees with an explicit sweep.
        let plan = search_equalization(&w, &x_v, &x_t, &mw, &spec, &grid).unwrap();
        let chosen_idx = grid
            .iter()
            .position(|&b| b == plan.chosen_exponent)
            .unwrap();
        assert_eq!(losses[chosen_idx], best);
    }

    #[test]
    fn chosen_beta_never_loses_to_beta_zero() {
        let mut rng = Rng::new(13);
        let mw = ModalityWeights {
            alpha_v: 0.4,
            alpha_t: 0.6,
        };
        for _ in 0..5 {
            let w = random_matrix(&mut rng, 6, 8);
            let x_v = random_matrix(&mut rng, 7, 8);
            let x_t = random_matrix(&mut rng, 9, 8);
            let spec = QuantSpec::new(4, 8, QuantMethod::Hqq);
            let grid = default_exponent_grid();
            let plan = search_equalization(&w, &x_v, &x_t, &mw, &spec, &grid).unwrap();
            let (l0, _) = equalization_loss(&w, &x_v, &x_t, &mw, &spec, 0.0).unwrap();
            let (lb, _) =
                equalization_loss(&w, &x_v, &x_t, &mw, &spec, plan.chosen_exponent).unwrap();
            assert!(lb <= l0, "chosen {lb} > data-free {l0}");
        }
    }

    #[test]
    fn chosen_beta_invariant_under_alpha_rescaling() {
        let mut rng = Rng::new(17);
        let w = random_matrix(&mut rng, 6, 8);
        let mut x_v = random_matrix(&mut rng, 7, 8);
        x_v.scale_col(2, 40.0);
        let x_t = random_matrix(&mut rng, 9, 8);
        let spec = QuantSpec::new(3, 8, QuantMethod::Hqq);
        let grid = default_exponent_grid();
        let a = ModalityWeights {
            alpha_v: 0.25,
            alpha_t: 0.75,
        };
        let b = ModalityWeights {
            alpha_v: 2.5,
            alpha_t: 7.5,
        };
        let pa = search_equalization(&w, &x_v, &x_t, &a, &spec, &grid).unwrap();
        let pb = search_equalization(&w, &x_v, &x_t, &b, &spec, &grid).unwrap();
        assert_eq!(pa.chosen_exponent, pb.chosen_exponent);
    }

    #[test]
    fn identity_plan_is_bitwise_noop() {
        let mut rng = Rng::new(19);
        let w = random_matrix(&mut rng, 5, 6);
        let plan = EqualizationPlan::identity(6);
        assert_eq!(apply_equalization(&w, &plan).unwrap(), w);
    }

    #[test]
    fn equalization_is_algebraic_identity_in_full_precision() {
        let mut rng = Rng::new(23);
        let w = random_matrix(&mut rng, 6, 10);
        let x = random_matrix(&mut rng, 8, 10);
        let scales: Vec<f64> = (0..10).map(|_| rng.range_f64(0.1, 10.0)).collect();
        let plan = EqualizationPlan {
            per_channel_scales: scales.clone(),
            chosen_exponent: 0.5,
        };
        let full = x.matmul_nt(&w).unwrap();
        let scaled_w = apply_equalization(&w, &plan).unwrap();
        let folded_x = fold_inverse(&x, &plan).unwrap();
        let via_eq = folded_x.matmul_nt(&scaled_w).unwrap();
        for (a, b) in full.data().iter().zip(via_eq.data().iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn pipeline_identity_with_noop_quantizer() {
        // Equalize, "quantize" with the identity, fold back: end-to-end
        // output unchanged within float tolerance.
        let mut rng = Rng::new(29);
        let w = random_matrix(&mut rng, 4, 6);
        let x = random_matrix(&mut rng, 5, 6);
        let scales: Vec<f64> = (0..6).map(|_| rng.range_f64(0.5, 2.0)).collect();
        let plan = EqualizationPlan {
            per_channel_scales: scales.clone(),
            chosen_exponent: 1.0,
        };
        let scaled = apply_equalization(&w, &plan).unwrap();
        let reconstructed = scaled; // 16-bit-equivalent no-op quantizer
        let mut unscaled = reconstructed.clone();
        for (j, &s) in scales.iter().enumerate() {
            unscaled.scale_col(j, 1.0 / s);
        }
        let full = x.matmul_nt(&w).unwrap();
        let approx = x.matmul_nt(&unscaled).unwrap();
        for (a, b) in full.data().iter().zip(approx.data().iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_scales_and_activations_rejected() {
        let w = Matrix::zeros(2, 3);
        let bad_plan = EqualizationPlan {
            per_channel_scales: vec![1.0, 0.0, 1.0],
            chosen_exponent: 0.5,
        };
        assert!(apply_equalization(&w, &bad_plan).is_err());
        let neg_plan = EqualizationPlan {
            per_channel_scales: vec![1.0, -2.0, 1.0],
            chosen_exponent: 0.5,
        };
        assert!(fold_inverse(&w, &neg_plan).is_err());

        let mut x = Matrix::zeros(2, 3);
        x.set(1, 1, f64::INFINITY);
        let mw = ModalityWeights {
            alpha_v: 0.5,
            alpha_t: 0.5,
        };
        let spec = QuantSpec::new(4, 3, QuantMethod::Hqq);
        let err = equalization_loss(&w, &x, &Matrix::zeros(0, 3), &mw, &spec, 0.5).unwrap_err();
        assert!(err.to_string().contains("index 4"), "{err}");
    }
}
