//! Exact backpropagation for the toy decoder.
//!
//! One cached forward pass is the single source of truth for the network
//! math; `Model::forward_from_embeddings` delegates here so the inference
//! and training paths can never drift apart. The loss is next-token
//! cross-entropy summed over the supervised positions (sum reduction, so
//! duplicating a batch doubles every gradient).

use super::{LayerNormParams, Model, LN_EPS};
use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};
use std::collections::BTreeMap;

pub(crate) struct LnCache {
    /// Normalized values (pre-gamma), one row per position.
    normed: Matrix,
    /// 1 / sqrt(var + eps) per position.
    inv: Vec<f64>,
}

fn ln_forward(params: &LayerNormParams, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let normed: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
    let out: Vec<f64> = normed
        .iter()
        .enumerate()
        .map(|(i, &n)| params.gamma[i] * n + params.beta[i])
        .collect();
    (out, normed, inv)
}

/// dx for one position given dout, the cached normalized values and inv.
/// Also accumulates dgamma/dbeta.
fn ln_backward(
    params: &LayerNormParams,
    dout: &[f64],
    normed: &[f64],
    inv: f64,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let d = dout.len();
    let df = d as f64;
    let mut dn = vec![0.0; d];
    for i in 0..d {
        dgamma[i] += dout[i] * normed[i];
        dbeta[i] += dout[i];
        dn[i] = dout[i] * params.gamma[i];
    }
    let mean_dn = dn.iter().sum::<f64>() / df;
    let mean_dn_n = dn.iter().zip(normed).map(|(a, b)| a * b).sum::<f64>() / df;
    (0..d)
        .map(|i| inv * (dn[i] - mean_dn - normed[i] * mean_dn_n))
        .collect()
}

pub(crate) struct LayerCache {
    x_in: Matrix,
    ln1: LnCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// att[pos][head][j] for j <= pos.
    att: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs (input to wo).
    ctx: Matrix,
    x_mid: Matrix,
    ln2: LnCache,
    /// tanh activations (input to fc2).
    h1a: Matrix,
}

pub(crate) struct ForwardCache {
    pub(crate) layers: Vec<LayerCache>,
    lnf: LnCache,
    pub(crate) hidden: Matrix,
    pub(crate) logits: Matrix,
}

/// Full forward pass from input embeddings, keeping every intermediate
/// needed by the backward pass.
pub(crate) fn forward_cached(model: &Model, x0: &Matrix) -> Result<ForwardCache> {
    if x0.cols() != model.cfg.d_model {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {} != d_model {}",
            x0.cols(),
            model.cfg.d_model
        )));
    }
    if x0.rows() == 0 || x0.rows() > model.cfg.max_seq {
        return Err(Error::invalid(format!(
            "sequence length {} outside [1, {}]",
            x0.rows(),
            model.cfg.max_seq
        )));
    }
    let t_len = x0.rows();
    let d = model.cfg.d_model;
    let n_heads = model.cfg.n_heads;
    let hd = model.cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = x0.clone();
    let mut layer_caches = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x_in = x.clone();
        let mut ln1_normed = Matrix::zeros(t_len, d);
        let mut ln1_inv = vec![0.0; t_len];
        let mut q = Matrix::zeros(t_len, d);
        let mut k = Matrix::zeros(t_len, d);
        let mut v = Matrix::zeros(t_len, d);
        for pos in 0..t_len {
            let (out, normed, inv) = ln_forward(&layer.ln1, x.row(pos));
            q.row_mut(pos).copy_from_slice(&layer.wq.matvec(&out));
            k.row_mut(pos).copy_from_slice(&layer.wk.matvec(&out));
            v.row_mut(pos).copy_from_slice(&layer.wv.matvec(&out));
            ln1_normed.row_mut(pos).copy_from_slice(&normed);
            ln1_inv[pos] = inv;
        }

        let mut att = Vec::with_capacity(t_len);
        let mut ctx = Matrix::zeros(t_len, d);
        for pos in 0..t_len {
            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let off = h * hd;
                let qh = &q.row(pos)[off..off + hd];
                let mut scores = Vec::with_capacity(pos + 1);
                for j in 0..=pos {
                    let kh = &k.row(j)[off..off + hd];
                    let mut s = 0.0;
                    for i in 0..hd {
                        s += qh[i] * kh[i];
                    }
                    scores.push(s * scale);
                }
                let weights = softmax(&scores);
                for (j, &a) in weights.iter().enumerate() {
                    let vh = &v.row(j)[off..off + hd];
                    let crow = ctx.row_mut(pos);
                    for i in 0..hd {
                        crow[off + i] += a * vh[i];
                    }
                }
                heads.push(weights);
            }
            att.push(heads);
            let ao = layer.wo.matvec(ctx.row(pos));
            let row = x.row_mut(pos);
            for i in 0..d {
                row[i] += ao[i];
            }
        }
        let x_mid = x.clone();

        let mut ln2_normed = Matrix::zeros(t_len, d);
        let mut ln2_inv = vec![0.0; t_len];
        let mut h1a = Matrix::zeros(t_len, model.cfg.d_ff());
        for pos in 0..t_len {
            let (out, normed, inv) = ln_forward(&layer.ln2, x.row(pos));
            let h1 = layer.fc1.matvec(&out);
            let act: Vec<f64> = h1.iter().map(|&z| z.tanh()).collect();
            let f2 = layer.fc2.matvec(&act);
            h1a.row_mut(pos).copy_from_slice(&act);
            ln2_normed.row_mut(pos).copy_from_slice(&normed);
            ln2_inv[pos] = inv;
            let row = x.row_mut(pos);
            for i in 0..d {
                row[i] += f2[i];
            }
        }

        layer_caches.push(LayerCache {
            x_in,
            ln1: LnCache {
                normed: ln1_normed,
                inv: ln1_inv,
            },
            q,
            k,
            v,
            att,
            ctx,
            x_mid,
            ln2: LnCache {
                normed: ln2_normed,
                inv: ln2_inv,
            },
            h1a,
        });
    }

    let mut lnf_normed = Matrix::zeros(t_len, d);
    let mut lnf_inv = vec![0.0; t_len];
    let mut hidden = Matrix::zeros(t_len, d);
    let mut logits = Matrix::zeros(t_len, model.cfg.vocab_size);
    for pos in 0..t_len {
        let (out, normed, inv) = ln_forward(&model.final_norm, x.row(pos));
        logits
            .row_mut(pos)
            .copy_from_slice(&model.out_proj.matvec(&out));
        hidden.row_mut(pos).copy_from_slice(&out);
        lnf_normed.row_mut(pos).copy_from_slice(&normed);
        lnf_inv[pos] = inv;
    }

    Ok(ForwardCache {
        layers: layer_caches,
        lnf: LnCache {
            normed: lnf_normed,
            inv: lnf_inv,
        },
        hidden,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub ln1: LayerNormGrads,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNormGrads,
    pub fc1: Matrix,
    pub fc2: Matrix,
}

/// Gradients for every model parameter plus the per-position input
/// embeddings of the sequence that was run.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerGrads>,
    pub final_norm: LayerNormGrads,
    pub out_proj: Matrix,
    /// d loss / d (tok_emb[t_k] + pos_emb[k]) per position, [T, d_model].
    pub input_emb: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &Model, seq_len: usize) -> Self {
        let d = model.cfg.d_model;
        Gradients {
            tok_emb: Matrix::zeros(model.cfg.vocab_size, d),
            pos_emb: Matrix::zeros(model.cfg.max_seq, d),
            layers: model
                .layers
                .iter()
                .map(|_| LayerGrads {
                    ln1: LayerNormGrads {
                        gamma: vec![0.0; d],
                        beta: vec![0.0; d],
                    },
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    ln2: LayerNormGrads {
                        gamma: vec![0.0; d],
                        beta: vec![0.0; d],
                    },
                    fc1: Matrix::zeros(model.cfg.d_ff(), d),
                    fc2: Matrix::zeros(d, model.cfg.d_ff()),
                })
                .collect(),
            final_norm: LayerNormGrads {
                gamma: vec![0.0; d],
                beta: vec![0.0; d],
            },
            out_proj: Matrix::zeros(model.cfg.vocab_size, d),
            input_emb: Matrix::zeros(seq_len, d),
        }
    }

    /// Parameter gradients flattened in the model's canonical order
    /// (input_emb excluded — it is not a parameter).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for l in &self.layers {
            out.push(&l.ln1.gamma);
            out.push(&l.ln1.beta);
            out.push(l.wq.data());
            out.push(l.wk.data());
            out.push(l.wv.data());
            out.push(l.wo.data());
            out.push(&l.ln2.gamma);
            out.push(&l.ln2.beta);
            out.push(l.fc1.data());
            out.push(l.fc2.data());
        }
        out.push(&self.final_norm.gamma);
        out.push(&self.final_norm.beta);
        out.push(self.out_proj.data());
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        fn add(a: &mut Matrix, b: &Matrix) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data().iter()) {
                *x += y;
            }
        }
        fn addv(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        add(&mut self.tok_emb, &other.tok_emb);
        add(&mut self.pos_emb, &other.pos_emb);
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            addv(&mut a.ln1.gamma, &b.ln1.gamma);
            addv(&mut a.ln1.beta, &b.ln1.beta);
            add(&mut a.wq, &b.wq);
            add(&mut a.wk, &b.wk);
            add(&mut a.wv, &b.wv);
            add(&mut a.wo, &b.wo);
            addv(&mut a.ln2.gamma, &b.ln2.gamma);
            addv(&mut a.ln2.beta, &b.ln2.beta);
            add(&mut a.fc1, &b.fc1);
            add(&mut a.fc2, &b.fc2);
        }
        addv(&mut self.final_norm.gamma, &other.final_norm.gamma);
        addv(&mut self.final_norm.beta, &other.final_norm.beta);
        add(&mut self.out_proj, &other.out_proj);
    }

    pub fn inf_norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Sum of -ln softmax(logits[k])[y_k] over supervised positions, and the
/// logit gradients.
fn ce_loss(logits: &Matrix, targets: &[Option<u32>]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} positions",
            targets.len(),
            logits.rows()
        )));
    }
    if targets.iter().all(|t| t.is_none()) {
        return Err(Error::invalid("no supervised positions in targets"));
    }
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for (pos, target) in targets.iter().enumerate() {
        let Some(y) = target else { continue };
        let y = *y as usize;
        if y >= logits.cols() {
            return Err(Error::invalid(format!(
                "target {y} at position {pos} outside vocabulary"
            )));
        }
        let probs = softmax(logits.row(pos));
        loss -= probs[y].ln();
        let drow = dlogits.row_mut(pos);
        for i in 0..probs.len() {
            drow[i] = probs[i];
        }
        drow[y] -= 1.0;
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite cross-entropy loss".to_string()));
    }
    Ok((loss, dlogits))
}

/// Loss only, from explicit input embeddings. This is the function the
/// finite-difference checks perturb.
pub fn loss_from_embeddings(model: &Model, x0: &Matrix, targets: &[Option<u32>]) -> Result<f64> {
    let cache = forward_cached(model, x0)?;
    Ok(ce_loss(&cache.logits, targets)?.0)
}

fn backward(
    model: &Model,
    cache: &ForwardCache,
    dlogits: &Matrix,
    grads: &mut Gradients,
) {
    let t_len = dlogits.rows();
    let d = model.cfg.d_model;
    let n_heads = model.cfg.n_heads;
    let hd = model.cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // Output projection and final norm.
    let mut dx = Matrix::zeros(t_len, d);
    for pos in 0..t_len {
        let dl = dlogits.row(pos);
        grads.out_proj.add_outer(dl, cache.hidden.row(pos));
        let dh = model.out_proj.t_matvec(dl);
        let dxp = ln_backward(
            &model.final_norm,
            &dh,
            cache.lnf.normed.row(pos),
            cache.lnf.inv[pos],
            &mut grads.final_norm.gamma,
            &mut grads.final_norm.beta,
        );
        dx.row_mut(pos).copy_from_slice(&dxp);
    }

    for (li, layer) in model.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // Feed-forward block: x_out = x_mid + fc2(tanh(fc1(ln2(x_mid)))).
        let mut dx_mid = dx.clone();
        for pos in 0..t_len {
            let df2 = dx.row(pos);
            lg.fc2.add_outer(df2, lc.h1a.row(pos));
            let dh1a = layer.fc2.t_matvec(df2);
            let h1a = lc.h1a.row(pos);
            let dh1: Vec<f64> = dh1a
                .iter()
                .zip(h1a.iter())
                .map(|(&g, &a)| g * (1.0 - a * a))
                .collect();
            let ln2_out: Vec<f64> = lc
                .ln2
                .normed
                .row(pos)
                .iter()
                .enumerate()
                .map(|(i, &n)| layer.ln2.gamma[i] * n + layer.ln2.beta[i])
                .collect();
            lg.fc1.add_outer(&dh1, &ln2_out);
            let dnormed = layer.fc1.t_matvec(&dh1);
            let dxp = ln_backward(
                &layer.ln2,
                &dnormed,
                lc.ln2.normed.row(pos),
                lc.ln2.inv[pos],
                &mut lg.ln2.gamma,
                &mut lg.ln2.beta,
            );
            let row = dx_mid.row_mut(pos);
            for i in 0..d {
                row[i] += dxp[i];
            }
        }

        // Attention block: x_mid = x_in + wo(ctx).
        let mut dq = Matrix::zeros(t_len, d);
        let mut dk = Matrix::zeros(t_len, d);
        let mut dv = Matrix::zeros(t_len, d);
        let mut dx_in = dx_mid.clone();
        for pos in 0..t_len {
            let dao = dx_mid.row(pos);
            lg.wo.add_outer(dao, lc.ctx.row(pos));
            let dctx = layer.wo.t_matvec(dao);
            for h in 0..n_heads {
                let off = h * hd;
                let weights = &lc.att[pos][h];
                let dctx_h = &dctx[off..off + hd];
                // datt[j] = dctx_h · v_h[j]
                let mut datt = Vec::with_capacity(pos + 1);
                for (j, &a) in weights.iter().enumerate() {
                    let vh = &lc.v.row(j)[off..off + hd];
                    let mut g = 0.0;
                    for i in 0..hd {
                        g += dctx_h[i] * vh[i];
                    }
                    datt.push(g);
                    let dvh = dv.row_mut(j);
                    for i in 0..hd {
                        dvh[off + i] += a * dctx_h[i];
                    }
                }
                // Softmax jacobian.
                let dot: f64 = weights.iter().zip(datt.iter()).map(|(a, g)| a * g).sum();
                for j in 0..=pos {
                    let ds = weights[j] * (datt[j] - dot) * scale;
                    let kh = &lc.k.row(j)[off..off + hd];
                    let qh = &lc.q.row(pos)[off..off + hd];
                    let dqh = dq.row_mut(pos);
                    for i in 0..hd {
                        dqh[off + i] += ds * kh[i];
                    }
                    let dkh = dk.row_mut(j);
                    for i in 0..hd {
                        dkh[off + i] += ds * qh[i];
                    }
                }
            }
        }
        for pos in 0..t_len {
            let ln1_out: Vec<f64> = lc
                .ln1
                .normed
                .row(pos)
                .iter()
                .enumerate()
                .map(|(i, &n)| layer.ln1.gamma[i] * n + layer.ln1.beta[i])
                .collect();
            lg.wq.add_outer(dq.row(pos), &ln1_out);
            lg.wk.add_outer(dk.row(pos), &ln1_out);
            lg.wv.add_outer(dv.row(pos), &ln1_out);
            let mut dnormed = layer.wq.t_matvec(dq.row(pos));
            let dk_in = layer.wk.t_matvec(dk.row(pos));
            let dv_in = layer.wv.t_matvec(dv.row(pos));
            for i in 0..d {
                dnormed[i] += dk_in[i] + dv_in[i];
            }
            let dxp = ln_backward(
                &layer.ln1,
                &dnormed,
                lc.ln1.normed.row(pos),
                lc.ln1.inv[pos],
                &mut lg.ln1.gamma,
                &mut lg.ln1.beta,
            );
            let row = dx_in.row_mut(pos);
            for i in 0..d {
                row[i] += dxp[i];
            }
        }
        dx = dx_in;
        let _ = &lc.x_in; // kept for clarity; residual path needs no values
        let _ = &lc.x_mid;
    }

    grads.input_emb = dx;
}

/// Next-token cross-entropy backprop through the whole model for one
/// sequence. `targets[k]`, when present, supervises the logits at position
/// `k`. Returns the summed loss and gradients for every parameter plus the
/// input embeddings.
pub fn backprop(model: &Model, tokens: &[u32], targets: &[Option<u32>]) -> Result<(f64, Gradients)> {
    let x0 = model.embed(tokens)?;
    let cache = forward_cached(model, &x0)?;
    let (loss, dlogits) = ce_loss(&cache.logits, targets)?;
    let mut grads = Gradients::zeros_like(model, tokens.len());
    backward(model, &cache, &dlogits, &mut grads);
    // Embedding rows receive the input-embedding gradient.
    for (pos, &tok) in tokens.iter().enumerate() {
        let g = grads.input_emb.row(pos).to_vec();
        let te = grads.tok_emb.row_mut(tok as usize);
        for i in 0..g.len() {
            te[i] += g[i];
        }
        let pe = grads.pos_emb.row_mut(pos);
        for i in 0..g.len() {
            pe[i] += g[i];
        }
    }
    Ok((loss, grads))
}

/// Like [`backprop`] but from explicit input embeddings; token and position
/// embedding gradients stay zero since no ids are known.
pub fn backprop_from_embeddings(
    model: &Model,
    x0: &Matrix,
    targets: &[Option<u32>],
) -> Result<(f64, Gradients)> {
    let cache = forward_cached(model, x0)?;
    let (loss, dlogits) = ce_loss(&cache.logits, targets)?;
    let mut grads = Gradients::zeros_like(model, x0.rows());
    backward(model, &cache, &dlogits, &mut grads);
    Ok((loss, grads))
}

/// Sums loss and gradients over a batch of (tokens, targets) items.
pub fn backprop_batch(
    model: &Model,
    items: &[(Vec<u32>, Vec<Option<u32>>)],
) -> Result<(f64, Gradients)> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    let mut acc: Option<Gradients> = None;
    for (tokens, targets) in items {
        let (loss, grads) = backprop(model, tokens, targets)?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => a.add_assign(&grads),
        }
    }
    Ok((total, acc.expect("non-empty batch")))
}

/// Records the input rows seen by every linear weight during a forward
/// pass: `attn.wq/wk/wv` see the ln1 output, `attn.wo` the concatenated
/// head outputs, `ff.fc1` the ln2 output, `ff.fc2` the tanh activations,
/// and `out_proj` the final hidden states. One row per position.
pub fn capture_linear_inputs(model: &Model, tokens: &[u32]) -> Result<BTreeMap<String, Matrix>> {
    let x0 = model.embed(tokens)?;
    let cache = forward_cached(model, &x0)?;
    let t_len = tokens.len();
    let d = model.cfg.d_model;
    let mut out = BTreeMap::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let lc = &cache.layers[li];
        let mut ln1_out = Matrix::zeros(t_len, d);
        let mut ln2_out = Matrix::zeros(t_len, d);
        for pos in 0..t_len {
            for i in 0..d {
                ln1_out.set(
                    pos,
                    i,
                    layer.ln1.gamma[i] * lc.ln1.normed.get(pos, i) + layer.ln1.beta[i],
                );
                ln2_out.set(
                    pos,
                    i,
                    layer.ln2.gamma[i] * lc.ln2.normed.get(pos, i) + layer.ln2.beta[i],
                );
            }
        }
        out.insert(format!("layers.{li}.attn.wq"), ln1_out.clone());
        out.insert(format!("layers.{li}.attn.wk"), ln1_out.clone());
        out.insert(format!("layers.{li}.attn.wv"), ln1_out);
        out.insert(format!("layers.{li}.attn.wo"), lc.ctx.clone());
        out.insert(format!("layers.{li}.ff.fc1"), ln2_out);
        out.insert(format!("layers.{li}.ff.fc2"), lc.h1a.clone());
    }
    out.insert("out_proj".to_string(), cache.hidden.clone());
    Ok(out)
}
