//! Checks the decoder forward pass against a straight-line
//! reimplementation written directly from the architecture description,
//! and greedy decoding against a pencil-and-paper model.

use sqnt_core::linalg::Matrix;
use sqnt_core::model::{init_model, MMInput, Model, ModelConfig};

// ---------------------------------------------------------------------------
// Naive reference: nested Vec<f64>, no shared helpers with the crate.
// ---------------------------------------------------------------------------

fn ref_layernorm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let denom = (var + 1e-5).sqrt();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) / denom + beta[i];
    }
    out
}

fn ref_matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; w.rows()];
    for r in 0..w.rows() {
        let mut acc = 0.0;
        for c in 0..w.cols() {
            acc += w.get(r, c) * x[c];
        }
        y[r] = acc;
    }
    y
}

fn ref_softmax(x: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut e = vec![0.0; x.len()];
    let mut s = 0.0;
    for i in 0..x.len() {
        e[i] = (x[i] - m).exp();
        s += e[i];
    }
    for v in &mut e {
        *v /= s;
    }
    e
}

/// Straight-line forward pass: per-position logits.
fn reference_forward(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let hd = cfg.d_model / cfg.n_heads;
    let t_len = tokens.len();

    let mut x: Vec<Vec<f64>> = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        let mut row = vec![0.0; d];
        for i in 0..d {
            row[i] = model.tok_emb.get(tok as usize, i) + model.pos_emb.get(pos, i);
        }
        x.push(row);
    }

    for layer in &model.layers {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for pos in 0..t_len {
            let normed = ref_layernorm(&x[pos], &layer.ln1.gamma, &layer.ln1.beta);
            q.push(ref_matvec(&layer.wq, &normed));
            k.push(ref_matvec(&layer.wk, &normed));
            v.push(ref_matvec(&layer.wv, &normed));
        }
        let mut attn_out = Vec::new();
        for pos in 0..t_len {
            let mut ctx = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let lo = h * hd;
                let mut scores = vec![0.0; pos + 1];
                for j in 0..=pos {
                    let mut s = 0.0;
                    for i in 0..hd {
                        s += q[pos][lo + i] * k[j][lo + i];
                    }
                    scores[j] = s / (hd as f64).sqrt();
                }
                let weights = ref_softmax(&scores);
                for j in 0..=pos {
                    for i in 0..hd {
                        ctx[lo + i] += weights[j] * v[j][lo + i];
                    }
                }
            }
            attn_out.push(ref_matvec(&layer.wo, &ctx));
        }
        for pos in 0..t_len {
            for i in 0..d {
                x[pos][i] += attn_out[pos][i];
            }
        }
        for pos in 0..t_len {
            let normed = ref_layernorm(&x[pos], &layer.ln2.gamma, &layer.ln2.beta);
            let mut h1 = ref_matvec(&layer.fc1, &normed);
            for v in &mut h1 {
                *v = v.tanh();
            }
            let f2 = ref_matvec(&layer.fc2, &h1);
            for i in 0..d {
                x[pos][i] += f2[i];
            }
        }
    }

    let mut logits = Vec::new();
    for pos in 0..t_len {
        let h = ref_layernorm(&x[pos], &model.final_norm.gamma, &model.final_norm.beta);
        logits.push(ref_matvec(&model.out_proj, &h));
    }
    logits
}

#[test]
fn forward_matches_reference_on_two_layer_config() {
    let cfg = ModelConfig {
        d_model: 12,
        n_layers: 2,
        n_heads: 3,
        vocab_size: 20,
        max_seq: 16,
        seed: 1234,
    };
    let model = init_model(&cfg).unwrap();
    for tokens in [
        vec![1u32, 2, 3, 4, 5, 6, 7],
        vec![19, 0, 11, 3],
        vec![5],
        vec![2; 16],
    ] {
        let got = model.forward(&tokens).unwrap();
        let expected = reference_forward(&model, &tokens);
        for pos in 0..tokens.len() {
            for v in 0..cfg.vocab_size {
                let (a, b) = (got.get(pos, v), expected[pos][v]);
                assert!(
                    (a - b).abs() < 1e-10,
                    "pos {pos} vocab {v}: {a} vs {b} (tokens {tokens:?})"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pencil-and-paper decode on a hand-weighted 1-layer model.
// ---------------------------------------------------------------------------

/// Zeroes every layer weight so the residual stream is just the embedding,
/// then sets the output projection by hand.
fn hand_model(out_row1: [f64; 2]) -> Model {
    let cfg = ModelConfig {
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        vocab_size: 2,
        max_seq: 8,
        seed: 0,
    };
    let mut model = init_model(&cfg).unwrap();
    {
        let layer = &mut model.layers[0];
        for m in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.fc1,
            &mut layer.fc2,
        ] {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
    }
    for v in model.pos_emb.data_mut() {
        *v = 0.0;
    }
    model.tok_emb = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    model.out_proj =
        Matrix::from_vec(2, 2, vec![0.0, 0.0, out_row1[0], out_row1[1]]).unwrap();
    model
}

#[test]
fn greedy_decode_matches_hand_computation() {
    // Token 1 embeds to [0, 1]. With all layer weights zero the hidden
    // state is final_norm([0, 1]) = [-l, l] with l = 0.5 / sqrt(0.25 + 1e-5).
    // out_proj row 1 = [-1, 0] makes logits [0, l]: argmax is token 1 with
    // probability p = 1 / (1 + exp(-l)), repeated until the budget runs out.
    let l = 0.5 / (0.25f64 + 1e-5).sqrt();
    let p = 1.0 / (1.0 + (-l).exp());

    let model = hand_model([-1.0, 0.0]);
    let input = MMInput {
        vision_tokens: vec![],
        question_tokens: vec![1],
    };
    let gen = model.greedy_decode(&input, 3).unwrap();
    assert_eq!(gen.answer_tokens, vec![1, 1, 1]);
    for &sp in &gen.step_probs {
        assert!((sp - p).abs() < 1e-12, "{sp} vs {p}");
    }
    assert!((gen.features.p - p * p * p).abs() < 1e-12);
    assert!((gen.features.o_1[0] + l).abs() < 1e-12);
    assert!((gen.features.o_1[1] - l).abs() < 1e-12);
    assert_eq!(gen.features.v_i, vec![0.0, 0.0]);

    // Flipping the sign makes token 0 (EOS) the argmax with the same
    // probability, stopping after one step.
    let model = hand_model([1.0, 0.0]);
    let gen = model.greedy_decode(&input, 3).unwrap();
    assert_eq!(gen.answer_tokens, vec![0]);
    assert_eq!(gen.step_probs.len(), 1);
    assert!((gen.step_probs[0] - p).abs() < 1e-12);
}
