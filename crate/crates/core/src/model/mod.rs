//! Desk-scale two-modality autoregressive decoder.
//!
//! A pre-norm transformer over plain token ids: learned token + position
//! embeddings, per-layer causal multi-head attention and a tanh two-layer
//! feed-forward (width `4 * d_model`), a final layer norm, and an output
//! projection. No biases on the linear maps, no KV cache — sequences are
//! tiny and correctness beats speed here. All math is in 64-bit floats.
//!
//! "Vision" tokens are ordinary embedded ids distinguished only by their
//! position in [`MMInput`]; that is enough to exercise modality-tagged
//! gradients and the pooled feature vector.

pub mod autograd;
pub mod train;

use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::mbq::EqualizationPlan;
use crate::quant::{dequantize, quantize, QuantSpec};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Token id that terminates generation.
pub const EOS_TOKEN: u32 = 0;

/// Layer-norm epsilon.
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.vocab_size < 2
            || self.max_seq == 0
        {
            return Err(Error::invalid(
                "model dimensions must be positive (vocab_size >= 2)",
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Feed-forward hidden width.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1: LayerNormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNormParams,
    pub fc1: Matrix,
    pub fc2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    /// [vocab_size, d_model]
    pub tok_emb: Matrix,
    /// [max_seq, d_model]
    pub pos_emb: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: LayerNormParams,
    /// [vocab_size, d_model]
    pub out_proj: Matrix,
}

/// One prompt: vision tokens followed by question tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMInput {
    pub vision_tokens: Vec<u32>,
    pub question_tokens: Vec<u32>,
}

impl MMInput {
    pub fn prompt(&self) -> Vec<u32> {
        let mut t = self.vision_tokens.clone();
        t.extend_from_slice(&self.question_tokens);
        t
    }
}

/// Selector input features harvested during decoding: max-pooled final
/// hidden states of the vision and question spans, the hidden state whose
/// logits produced the first generated token, and the joint probability of
/// the generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub v_i: Vec<f64>,
    pub q_i: Vec<f64>,
    pub o_1: Vec<f64>,
    pub p: f64,
}

impl FeatureVector {
    /// Flat layout [v_i ‖ q_i ‖ o_1 ‖ p], length `3 * d_model + 1`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.v_i.len() + self.q_i.len() + self.o_1.len() + 1);
        out.extend_from_slice(&self.v_i);
        out.extend_from_slice(&self.q_i);
        out.extend_from_slice(&self.o_1);
        out.push(self.p);
        out
    }
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, including the terminating EOS when one was produced.
    pub answer_tokens: Vec<u32>,
    /// Softmax probability of each chosen token, in (0, 1].
    pub step_probs: Vec<f64>,
    pub features: FeatureVector,
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal_scaled(std)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Builds a model with weights drawn deterministically from `cfg.seed`.
pub fn init_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.d_model;
    let linear_std = 1.0 / (d as f64).sqrt();
    let ff_std = 1.0 / (cfg.d_ff() as f64).sqrt();

    let tok_emb = init_matrix(&mut rng, cfg.vocab_size, d, 0.1);
    let pos_emb = init_matrix(&mut rng, cfg.max_seq, d, 0.1);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(Layer {
            ln1: LayerNormParams::identity(d),
            wq: init_matrix(&mut rng, d, d, linear_std),
            wk: init_matrix(&mut rng, d, d, linear_std),
            wv: init_matrix(&mut rng, d, d, linear_std),
            wo: init_matrix(&mut rng, d, d, linear_std),
            ln2: LayerNormParams::identity(d),
            fc1: init_matrix(&mut rng, cfg.d_ff(), d, linear_std),
            fc2: init_matrix(&mut rng, d, cfg.d_ff(), ff_std),
        });
    }
    Ok(Model {
        cfg: *cfg,
        tok_emb,
        pos_emb,
        layers,
        final_norm: LayerNormParams::identity(d),
        out_proj: init_matrix(&mut rng, cfg.vocab_size, d, linear_std),
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        let mut n = self.tok_emb.len() + self.pos_emb.len() + self.out_proj.len();
        for l in &self.layers {
            n += l.wq.len() + l.wk.len() + l.wv.len() + l.wo.len();
            n += l.fc1.len() + l.fc2.len();
            n += l.ln1.gamma.len() + l.ln1.beta.len();
            n += l.ln2.gamma.len() + l.ln2.beta.len();
        }
        n + self.final_norm.gamma.len() + self.final_norm.beta.len()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(i) = tokens.iter().position(|&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {} at position {i} is outside the vocabulary (size {})",
                tokens[i], self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Token + position embeddings for a sequence, [T, d_model].
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (k, &t) in tokens.iter().enumerate() {
            let te = self.tok_emb.row(t as usize);
            let pe = self.pos_emb.row(k);
            let row = x.row_mut(k);
            for i in 0..d {
                row[i] = te[i] + pe[i];
            }
        }
        Ok(x)
    }

    /// Runs the decoder stack from explicit input embeddings. Returns
    /// per-position logits and the post-final-norm hidden states. Delegates
    /// to the cached forward in [`autograd`], so inference and training
    /// share one implementation of the network math.
    pub fn forward_from_embeddings(&self, x0: &Matrix) -> Result<(Matrix, Matrix)> {
        let cache = autograd::forward_cached(self, x0)?;
        Ok((cache.logits, cache.hidden))
    }

    /// Per-position logits [T, vocab_size]. Causal: row `k` depends only on
    /// tokens at positions `<= k`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward_with_hidden(tokens)?.0)
    }

    /// Logits plus post-final-norm hidden states.
    pub fn forward_with_hidden(&self, tokens: &[u32]) -> Result<(Matrix, Matrix)> {
        let x0 = self.embed(tokens)?;
        self.forward_from_embeddings(&x0)
    }

    /// Greedy decoding: each step takes the argmax token (ties to the
    /// lowest id) and records its softmax probability. Stops at EOS or
    /// after `max_new` tokens.
    pub fn greedy_decode(&self, input: &MMInput, max_new: usize) -> Result<Generation> {
        if input.question_tokens.is_empty() {
            return Err(Error::invalid("question must be non-empty"));
        }
        if max_new == 0 {
            return Err(Error::invalid("max_new must be >= 1"));
        }
        let prompt = input.prompt();
        if prompt.len() + max_new > self.cfg.max_seq {
            return Err(Error::invalid(format!(
                "prompt ({}) plus generation budget ({max_new}) exceeds max_seq {}",
                prompt.len(),
                self.cfg.max_seq
            )));
        }

        let n_vision = input.vision_tokens.len();
        let prompt_len = prompt.len();
        let (_, hidden) = self.forward_with_hidden(&prompt)?;
        let d = self.cfg.d_model;

        // Max-pool over the final-layer hidden states of each modality span.
        // An empty vision span pools to the zero vector.
        let pool = |lo: usize, hi: usize| -> Vec<f64> {
            if lo == hi {
                return vec![0.0; d];
            }
            let mut out = hidden.row(lo).to_vec();
            for pos in lo + 1..hi {
                let row = hidden.row(pos);
                for i in 0..d {
                    out[i] = out[i].max(row[i]);
                }
            }
            out
        };
        let v_i = pool(0, n_vision);
        let q_i = pool(n_vision, prompt_len);
        // Hidden state whose logits produce the first generated token.
        let o_1 = hidden.row(prompt_len - 1).to_vec();

        let mut seq = prompt;
        let mut answer_tokens = Vec::new();
        let mut step_probs = Vec::new();
        loop {
            let logits = self.forward(&seq)?;
            let probs = softmax(logits.row(seq.len() - 1));
            let mut best = 0usize;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i; // strict > keeps the lowest id on ties
                }
            }
            answer_tokens.push(best as u32);
            step_probs.push(probs[best]);
            seq.push(best as u32);
            if best as u32 == EOS_TOKEN || answer_tokens.len() == max_new {
                break;
            }
        }

        let log_p: f64 = step_probs.iter().map(|p| p.ln()).sum();
        Ok(Generation {
            answer_tokens,
            step_probs,
            features: FeatureVector {
                v_i,
                q_i,
                o_1,
                p: log_p.exp(),
            },
        })
    }

    /// Names and shapes of the quantizable linear weights, in a fixed order.
    pub fn linear_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            for part in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ff.fc1", "ff.fc2"] {
                names.push(format!("layers.{l}.{part}"));
            }
        }
        names.push("out_proj".to_string());
        names
    }

    pub fn linear_weight(&self, name: &str) -> Option<&Matrix> {
        if name == "out_proj" {
            return Some(&self.out_proj);
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, part) = rest.split_once('.')?;
        let layer = self.layers.get(idx.parse::<usize>().ok()?)?;
        Some(match part {
            "attn.wq" => &layer.wq,
            "attn.wk" => &layer.wk,
            "attn.wv" => &layer.wv,
            "attn.wo" => &layer.wo,
            "ff.fc1" => &layer.fc1,
            "ff.fc2" => &layer.fc2,
            _ => return None,
        })
    }

    fn linear_weight_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name == "out_proj" {
            return Some(&mut self.out_proj);
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, part) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        Some(match part {
            "attn.wq" => &mut layer.wq,
            "attn.wk" => &mut layer.wk,
            "attn.wv" => &mut layer.wv,
            "attn.wo" => &mut layer.wo,
            "ff.fc1" => &mut layer.fc1,
            "ff.fc2" => &mut layer.fc2,
            _ => return None,
        })
    }

    /// Concatenated weight bytes of every parameter, for determinism checks.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |data: &[f64]| {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.tok_emb.data());
        push(self.pos_emb.data());
        for l in &self.layers {
            push(&l.ln1.gamma);
            push(&l.ln1.beta);
            push(l.wq.data());
            push(l.wk.data());
            push(l.wv.data());
            push(l.wo.data());
            push(&l.ln2.gamma);
            push(&l.ln2.beta);
            push(l.fc1.data());
            push(l.fc2.data());
        }
        push(&self.final_norm.gamma);
        push(&self.final_norm.beta);
        push(self.out_proj.data());
        out
    }
}

/// Replaces every linear-layer weight matrix with its
/// quantize-then-dequantize reconstruction. Embeddings and norm parameters
/// are untouched (weight-only). With an equalization plan for a tensor, the
/// weights are channel-scaled before quantization and the inverse scaling is
/// folded back into the reconstruction, so no runtime activation transform
/// is needed.
pub fn quantize_model(
    model: &Model,
    spec: &QuantSpec,
    plans: Option<&BTreeMap<String, EqualizationPlan>>,
) -> Result<Model> {
    spec.validate()?;
    let mut out = model.clone();
    for name in model.linear_names() {
        let w = model.linear_weight(&name).expect("name from linear_names");
        let plan = plans.and_then(|p| p.get(&name));
        let reconstructed = match plan {
            None => dequantize(&quantize(w, spec)?)?,
            Some(plan) => {
                if plan.per_channel_scales.len() != w.cols() {
                    return Err(Error::ShapeMismatch(format!(
                        "equalization plan for {name} has {} scales, tensor has {} input channels",
                        plan.per_channel_scales.len(),
                        w.cols()
                    )));
                }
                let scaled = crate::mbq::apply_equalization(w, plan)?;
                let mut deq = dequantize(&quantize(&scaled, spec)?)?;
                for (c, &s) in plan.per_channel_scales.iter().enumerate() {
                    deq.scale_col(c, 1.0 / s);
                }
                deq
            }
        };
        *out.linear_weight_mut(&name).expect("same names") = reconstructed;
    }
    Ok(out)
}

/// Mean KL divergence KL(reference ‖ candidate) between next-token
/// distributions over every position of every probe prompt.
pub fn mean_probe_kl(reference: &Model, candidate: &Model, probes: &[Vec<u32>]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::invalid("empty probe set"));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for tokens in probes {
        let l_ref = reference.forward(tokens)?;
        let l_cand = candidate.forward(tokens)?;
        for pos in 0..tokens.len() {
            let p = softmax(l_ref.row(pos));
            let q = softmax(l_cand.row(pos));
            let mut kl = 0.0;
            for i in 0..p.len() {
                kl += p[i] * (p[i].ln() - q[i].ln());
            }
            acc += kl.max(0.0); // guard tiny negative round-off
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Cross-entropy loss and gradients; see [`autograd::backprop`].
pub use autograd::{backprop, capture_linear_inputs, Gradients};
pub use train::{train_model, TrainOptions, TrainStats};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMethod;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 24,
            max_seq: 24,
            seed,
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_weights() {
        let a = init_model(&small_cfg(7)).unwrap();
        let b = init_model(&small_cfg(7)).unwrap();
        assert_eq!(a.weight_bytes(), b.weight_bytes());
        let c = init_model(&small_cfg(8)).unwrap();
        assert_ne!(a.weight_bytes(), c.weight_bytes());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 3,
            vocab_size: 10,
            max_seq: 8,
            seed: 0,
        };
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = small_cfg(3);
        let model = init_model(&cfg).unwrap();
        let d = cfg.d_model;
        let expected = 2 * cfg.vocab_size * d          // tok_emb + out_proj
            + cfg.max_seq * d                          // pos_emb
            + cfg.n_layers * (12 * d * d + 4 * d)      // 4 attn + 2 ff mats, 2 norms
            + 2 * d; // final norm
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn forward_is_causal() {
        let model = init_model(&small_cfg(11)).unwrap();
        let tokens = vec![1, 2, 3, 4, 5, 6];
        let base = model.forward(&tokens).unwrap();
        let mut perturbed = tokens.clone();
        perturbed[4] = 9; // change position 4; rows 0..4 must not move
        let alt = model.forward(&perturbed).unwrap();
        for pos in 0..4 {
            assert_eq!(base.row(pos), alt.row(pos), "position {pos} leaked");
        }
        assert_ne!(base.row(4), alt.row(4));
    }

    #[test]
    fn softmax_rows_normalize() {
        let model = init_model(&small_cfg(13)).unwrap();
        let logits = model.forward(&[3, 1, 4, 1, 5]).unwrap();
        for pos in 0..5 {
            let sum: f64 = softmax(logits.row(pos)).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rejects_out_of_vocab_and_overlength() {
        let model = init_model(&small_cfg(17)).unwrap();
        assert!(model.forward(&[1, 99]).is_err());
        assert!(model.forward(&vec![1; 25]).is_err());
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let model = init_model(&small_cfg(19)).unwrap();
        let input = MMInput {
            vision_tokens: vec![2, 3, 4],
            question_tokens: vec![5, 6],
        };
        let a = model.greedy_decode(&input, 4).unwrap();
        let b = model.greedy_decode(&input, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.answer_tokens.len(), a.step_probs.len());
        assert!(a.step_probs.iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn features_p_is_product_of_step_probs() {
        let model = init_model(&small_cfg(23)).unwrap();
        let input = MMInput {
            vision_tokens: vec![7, 8],
            question_tokens: vec![9, 10, 11],
        };
        let gen = model.greedy_decode(&input, 5).unwrap();
        let product: f64 = gen.step_probs.iter().product();
        assert!((gen.features.p - product).abs() < 1e-12);
    }

    #[test]
    fn empty_question_rejected_empty_vision_allowed() {
        let model = init_model(&small_cfg(29)).unwrap();
        let no_q = MMInput {
            vision_tokens: vec![1, 2],
            question_tokens: vec![],
        };
        assert!(model.greedy_decode(&no_q, 2).is_err());
        let no_v = MMInput {
            vision_tokens: vec![],
            question_tokens: vec![1, 2],
        };
        let gen = model.greedy_decode(&no_v, 2).unwrap();
        assert!(gen.features.v_i.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn budget_beyond_max_seq_rejected() {
        let model = init_model(&small_cfg(31)).unwrap();
        let input = MMInput {
            vision_tokens: vec![1; 10],
            question_tokens: vec![2; 10],
        };
        assert!(model.greedy_decode(&input, 5).is_err());
    }

    #[test]
    fn quantize_model_touches_only_linear_weights() {
        let model = init_model(&small_cfg(37)).unwrap();
        let spec = QuantSpec::new(4, 32, QuantMethod::Hqq);
        let quantized = quantize_model(&model, &spec, None).unwrap();
        assert_eq!(model.tok_emb, quantized.tok_emb);
        assert_eq!(model.pos_emb, quantized.pos_emb);
        for (a, b) in model.layers.iter().zip(quantized.layers.iter()) {
            assert_eq!(a.ln1, b.ln1);
            assert_eq!(a.ln2, b.ln2);
            assert_ne!(a.wq, b.wq, "weights should have moved");
        }
        assert_eq!(model.final_norm, quantized.final_norm);
    }

    #[test]
    fn probe_kl_monotone_int8_vs_int3() {
        let model = init_model(&small_cfg(41)).unwrap();
        let probes: Vec<Vec<u32>> = (0..8)
            .map(|i| vec![1 + i, 2 + i, 3, 4, 5 + i])
            .collect();
        let kl = |bits: u8| {
            let spec = QuantSpec::new(bits, 32, QuantMethod::Hqq);
            let q = quantize_model(&model, &spec, None).unwrap();
            mean_probe_kl(&model, &q, &probes).unwrap()
        };
        let (k8, k4, k3) = (kl(8), kl(4), kl(3));
        assert!(k8 <= k4 && k4 <= k3, "KL not monotone: {k8} {k4} {k3}");
    }

    #[test]
    fn int3_changes_at_least_one_answer() {
        let model = init_model(&small_cfg(43)).unwrap();
        let spec = QuantSpec::new(3, 32, QuantMethod::Hqq);
        let quantized = quantize_model(&model, &spec, None).unwrap();
        let mut changed = false;
        for i in 0..32u32 {
            let input = MMInput {
                vision_tokens: vec![1 + (i % 8), 2 + (i % 5)],
                question_tokens: vec![3 + (i % 7), 4],
            };
            let a = model.greedy_decode(&input, 3).unwrap();
            let b = quantized.greedy_decode(&input, 3).unwrap();
            if a.answer_tokens != b.answer_tokens {
                changed = true;
                break;
            }
        }
        assert!(changed, "int3 quantization changed no answers on the probe sweep");
    }
}
