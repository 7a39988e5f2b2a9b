//! Explicit forward and backward passes for the encoder and both
//! heads. Processes one example at a time, accumulating gradients in
//! a fixed order so runs are bit-reproducible.

use super::ops::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, log_sum_exp, softmax_backward_row,
    softmax_rows, LnCache,
};
use super::{LayerParams, ModelError, ModelState, ParamTensors};
use crate::mlm_data::{ClassifyExample, MlmExample};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dropout behaviour of a forward pass. `On` is a no-op when the
/// configured rate is zero.
#[derive(Clone, Copy, Debug)]
pub enum Dropout {
    Off,
    On { seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub enum Batch<'a> {
    Mlm(&'a [MlmExample]),
    Classify(&'a [ClassifyExample]),
}

/// Logit rows at masked positions, flattened in (example, position)
/// order matching each example's `mask_positions`.
#[derive(Clone, Debug)]
pub struct MaskedLogits<T> {
    pub rows: Vec<Vec<T>>,
}

struct LayerCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>, // heads * seq * seq
    ctx: Vec<T>,
    attn_drop: Option<Vec<T>>,
    ln1: LnCache<T>,
    h1: Vec<T>,
    ffn_u: Vec<T>,
    ffn_g: Vec<T>,
    ffn_drop: Option<Vec<T>>,
    ln2: LnCache<T>,
}

struct ExampleCache<T> {
    ids: Vec<u32>,
    emb_ln: LnCache<T>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    final_hidden: Vec<T>,
}

fn linear<T: Scalar>(x: &[T], w: &Tensor<T>, b: &Tensor<T>, rows: usize) -> Vec<T> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![T::zero(); rows * d_out];
    matmul_acc(x, w.data(), &mut y, rows, d_in, d_out);
    for row in y.chunks_mut(d_out) {
        for (o, &bv) in row.iter_mut().zip(b.data().iter()) {
            *o += bv;
        }
    }
    y
}

fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &[T]) {
    for (v, &m) in x.iter_mut().zip(mask.iter()) {
        *v *= m;
    }
}

fn forward_example<T: Scalar>(
    state: &ModelState<T>,
    ids: &[u32],
    attention_len: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ExampleCache<T>, ModelError> {
    let config = &state.config;
    let p = &state.params;
    let seq = ids.len();
    if seq > config.max_seq || seq == 0 {
        return Err(ModelError::SequenceLength {
            found: seq,
            expected: config.max_seq,
        });
    }
    for &id in ids {
        if id as usize >= config.vocab_size {
            return Err(ModelError::TokenIdOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
    }
    let h = config.hidden_dim;
    let heads = config.num_heads;
    let dh = config.head_dim();
    let rate = config.dropout_rate;
    let mut rng = rng.filter(|_| rate > 0.0);

    // embeddings
    let mut x = vec![T::zero(); seq * h];
    for (pos, &id) in ids.iter().enumerate() {
        let tok = p.token_embeddings.row(id as usize);
        let pe = p.position_embeddings.row(pos);
        let row = &mut x[pos * h..(pos + 1) * h];
        for c in 0..h {
            row[c] = tok[c] + pe[c];
        }
    }
    let (mut hidden, emb_ln) = layer_norm_forward(
        &x,
        p.embedding_norm.gain.data(),
        p.embedding_norm.bias.data(),
        h,
    );
    let emb_drop = rng.as_deref_mut().map(|r| dropout_mask(seq * h, rate, r));
    if let Some(mask) = &emb_drop {
        apply_mask(&mut hidden, mask);
    }

    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut layer_caches = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let input = hidden.clone();
        let q = linear(&input, &layer.wq, &layer.bq, seq);
        let k = linear(&input, &layer.wk, &layer.bk, seq);
        let v = linear(&input, &layer.wv, &layer.bv, seq);

        let mut probs = vec![T::zero(); heads * seq * seq];
        for a in 0..heads {
            for s in 0..seq {
                let qrow = &q[s * h + a * dh..s * h + (a + 1) * dh];
                let prow = &mut probs[(a * seq + s) * seq..(a * seq + s + 1) * seq];
                for (t, pv) in prow.iter_mut().enumerate() {
                    if t >= attention_len {
                        *pv = T::neg_infinity();
                        continue;
                    }
                    let krow = &k[t * h + a * dh..t * h + (a + 1) * dh];
                    let mut dot = T::zero();
                    for (qq, kk) in qrow.iter().zip(krow.iter()) {
                        dot += *qq * *kk;
                    }
                    *pv = dot * scale;
                }
            }
        }
        softmax_rows(&mut probs, seq);

        let mut ctx = vec![T::zero(); seq * h];
        for a in 0..heads {
            for s in 0..seq {
                let prow = &probs[(a * seq + s) * seq..(a * seq + s + 1) * seq];
                let crow = &mut ctx[s * h + a * dh..s * h + (a + 1) * dh];
                for (t, &pv) in prow.iter().enumerate() {
                    if pv == T::zero() {
                        continue;
                    }
                    let vrow = &v[t * h + a * dh..t * h + (a + 1) * dh];
                    for (c, &vv) in crow.iter_mut().zip(vrow.iter()) {
                        *c += pv * vv;
                    }
                }
            }
        }

        let mut attn_out = linear(&ctx, &layer.wo, &layer.bo, seq);
        let attn_drop = rng.as_deref_mut().map(|r| dropout_mask(seq * h, rate, r));
        if let Some(mask) = &attn_drop {
            apply_mask(&mut attn_out, mask);
        }
        let mut res1 = input.clone();
        for (a, &b) in res1.iter_mut().zip(attn_out.iter()) {
            *a += b;
        }
        let (h1, ln1) = layer_norm_forward(
            &res1,
            layer.attn_norm.gain.data(),
            layer.attn_norm.bias.data(),
            h,
        );

        let ffn_u = linear(&h1, &layer.ffn_w1, &layer.ffn_b1, seq);
        let ffn_g: Vec<T> = ffn_u.iter().map(|&u| gelu(u)).collect();
        let mut ffn_out = linear(&ffn_g, &layer.ffn_w2, &layer.ffn_b2, seq);
        let ffn_drop = rng.as_deref_mut().map(|r| dropout_mask(seq * h, rate, r));
        if let Some(mask) = &ffn_drop {
            apply_mask(&mut ffn_out, mask);
        }
        let mut res2 = h1.clone();
        for (a, &b) in res2.iter_mut().zip(ffn_out.iter()) {
            *a += b;
        }
        let (h2, ln2) = layer_norm_forward(
            &res2,
            layer.ffn_norm.gain.data(),
            layer.ffn_norm.bias.data(),
            h,
        );

        layer_caches.push(LayerCache {
            input,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln1,
            h1,
            ffn_u,
            ffn_g,
            ffn_drop,
            ln2,
        });
        hidden = h2;
    }

    Ok(ExampleCache {
        ids: ids.to_vec(),
        emb_ln,
        emb_drop,
        layers: layer_caches,
        final_hidden: hidden,
    })
}

/// Backward through the encoder body, accumulating parameter
/// gradients. `dfinal` is the gradient w.r.t. the final hidden states.
fn backward_example<T: Scalar>(
    state: &ModelState<T>,
    cache: &ExampleCache<T>,
    mut dhidden: Vec<T>,
    grads: &mut ParamTensors<T>,
) {
    let config = &state.config;
    let p = &state.params;
    let seq = cache.ids.len();
    let h = config.hidden_dim;
    let heads = config.num_heads;
    let dh = config.head_dim();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    for (li, layer_cache) in cache.layers.iter().enumerate().rev() {
        let layer: &LayerParams<T> = &p.layers[li];
        let glayer = &mut grads.layers[li];

        // LN2
        let dres2 = layer_norm_backward(
            &dhidden,
            &layer_cache.ln2,
            layer.ffn_norm.gain.data(),
            glayer.ffn_norm.gain.data_mut(),
            glayer.ffn_norm.bias.data_mut(),
            h,
        );
        let mut dh1 = dres2.clone();
        let mut dffn = dres2;
        if let Some(mask) = &layer_cache.ffn_drop {
            apply_mask(&mut dffn, mask);
        }

        // ffn_out = gelu(u) . w2 + b2
        let f = config.ffn_dim;
        matmul_tn_acc(
            &layer_cache.ffn_g,
            &dffn,
            glayer.ffn_w2.data_mut(),
            seq,
            f,
            h,
        );
        for row in dffn.chunks(h) {
            for (g, &d) in glayer.ffn_b2.data_mut().iter_mut().zip(row.iter()) {
                *g += d;
            }
        }
        let mut dg = vec![T::zero(); seq * f];
        matmul_nt_acc(&dffn, layer.ffn_w2.data(), &mut dg, seq, h, f);
        let mut du = dg;
        for (d, &u) in du.iter_mut().zip(layer_cache.ffn_u.iter()) {
            *d *= gelu_grad(u);
        }
        matmul_tn_acc(
            &layer_cache.h1,
            &du,
            glayer.ffn_w1.data_mut(),
            seq,
            h,
            f,
        );
        for row in du.chunks(f) {
            for (g, &d) in glayer.ffn_b1.data_mut().iter_mut().zip(row.iter()) {
                *g += d;
            }
        }
        let mut dh1_from_ffn = vec![T::zero(); seq * h];
        matmul_nt_acc(&du, layer.ffn_w1.data(), &mut dh1_from_ffn, seq, f, h);
        for (a, &b) in dh1.iter_mut().zip(dh1_from_ffn.iter()) {
            *a += b;
        }

        // LN1
        let dres1 = layer_norm_backward(
            &dh1,
            &layer_cache.ln1,
            layer.attn_norm.gain.data(),
            glayer.attn_norm.gain.data_mut(),
            glayer.attn_norm.bias.data_mut(),
            h,
        );
        let mut dinput = dres1.clone();
        let mut dattn = dres1;
        if let Some(mask) = &layer_cache.attn_drop {
            apply_mask(&mut dattn, mask);
        }

        // attn_out = ctx . wo + bo
        matmul_tn_acc(
            &layer_cache.ctx,
            &dattn,
            glayer.wo.data_mut(),
            seq,
            h,
            h,
        );
        for row in dattn.chunks(h) {
            for (g, &d) in glayer.bo.data_mut().iter_mut().zip(row.iter()) {
                *g += d;
            }
        }
        let mut dctx = vec![T::zero(); seq * h];
        matmul_nt_acc(&dattn, layer.wo.data(), &mut dctx, seq, h, h);

        // attention
        let mut dq = vec![T::zero(); seq * h];
        let mut dk = vec![T::zero(); seq * h];
        let mut dv = vec![T::zero(); seq * h];
        let mut dprobs = vec![T::zero(); seq];
        let mut dscores = vec![T::zero(); seq];
        for a in 0..heads {
            for s in 0..seq {
                let prow = &layer_cache.probs[(a * seq + s) * seq..(a * seq + s + 1) * seq];
                let dctx_row = &dctx[s * h + a * dh..s * h + (a + 1) * dh];
                for t in 0..seq {
                    let vrow = &layer_cache.v[t * h + a * dh..t * h + (a + 1) * dh];
                    let mut dot = T::zero();
                    for (dc, vv) in dctx_row.iter().zip(vrow.iter()) {
                        dot += *dc * *vv;
                    }
                    dprobs[t] = dot;
                    if prow[t] != T::zero() {
                        let dvrow = &mut dv[t * h + a * dh..t * h + (a + 1) * dh];
                        for (dvv, &dc) in dvrow.iter_mut().zip(dctx_row.iter()) {
                            *dvv += prow[t] * dc;
                        }
                    }
                }
                softmax_backward_row(prow, &dprobs, &mut dscores);
                let qrow = &layer_cache.q[s * h + a * dh..s * h + (a + 1) * dh];
                for t in 0..seq {
                    let ds = dscores[t] * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &layer_cache.k[t * h + a * dh..t * h + (a + 1) * dh];
                    let dqrow = &mut dq[s * h + a * dh..s * h + (a + 1) * dh];
                    for (dqv, &kv) in dqrow.iter_mut().zip(krow.iter()) {
                        *dqv += ds * kv;
                    }
                    let dkrow = &mut dk[t * h + a * dh..t * h + (a + 1) * dh];
                    for (dkv, &qv) in dkrow.iter_mut().zip(qrow.iter()) {
                        *dkv += ds * qv;
                    }
                }
            }
        }

        // q/k/v projections
        for (w, b, d) in [
            (&mut glayer.wq, &mut glayer.bq, &dq),
            (&mut glayer.wk, &mut glayer.bk, &dk),
            (&mut glayer.wv, &mut glayer.bv, &dv),
        ] {
            matmul_tn_acc(&layer_cache.input, d, w.data_mut(), seq, h, h);
            for row in d.chunks(h) {
                for (g, &dd) in b.data_mut().iter_mut().zip(row.iter()) {
                    *g += dd;
                }
            }
        }
        let mut dinput_proj = vec![T::zero(); seq * h];
        matmul_nt_acc(&dq, layer.wq.data(), &mut dinput_proj, seq, h, h);
        matmul_nt_acc(&dk, layer.wk.data(), &mut dinput_proj, seq, h, h);
        matmul_nt_acc(&dv, layer.wv.data(), &mut dinput_proj, seq, h, h);
        for (a, &b) in dinput.iter_mut().zip(dinput_proj.iter()) {
            *a += b;
        }

        dhidden = dinput;
    }

    // embedding dropout + LN
    if let Some(mask) = &cache.emb_drop {
        apply_mask(&mut dhidden, mask);
    }
    let dx = layer_norm_backward(
        &dhidden,
        &cache.emb_ln,
        p.embedding_norm.gain.data(),
        grads.embedding_norm.gain.data_mut(),
        grads.embedding_norm.bias.data_mut(),
        h,
    );
    for (pos, &id) in cache.ids.iter().enumerate() {
        let drow = &dx[pos * h..(pos + 1) * h];
        let trow = grads.token_embeddings.row_mut(id as usize);
        for (g, &d) in trow.iter_mut().zip(drow.iter()) {
            *g += d;
        }
        let prow = grads.position_embeddings.row_mut(pos);
        for (g, &d) in prow.iter_mut().zip(drow.iter()) {
            *g += d;
        }
    }
}

fn mlm_logits_for_cache<T: Scalar>(
    state: &ModelState<T>,
    cache: &ExampleCache<T>,
    mask_positions: &[usize],
) -> Vec<Vec<T>> {
    let h = state.config.hidden_dim;
    let v = state.config.vocab_size;
    let emb = state.params.token_embeddings.data();
    let bias = state.params.mlm_bias.data();
    mask_positions
        .iter()
        .map(|&pos| {
            let row = &cache.final_hidden[pos * h..(pos + 1) * h];
            let mut logits = vec![T::zero(); v];
            matmul_nt_acc(row, emb, &mut logits, 1, h, v);
            for (l, &b) in logits.iter_mut().zip(bias.iter()) {
                *l += b;
            }
            logits
        })
        .collect()
}

fn make_rng(dropout: Dropout) -> Option<ChaCha8Rng> {
    match dropout {
        Dropout::Off => None,
        Dropout::On { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// MLM head: mean cross-entropy over all masked positions in the batch.
pub fn forward_mlm<T: Scalar>(
    state: &ModelState<T>,
    batch: &[MlmExample],
    dropout: Dropout,
) -> Result<(f64, MaskedLogits<T>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let total_masked: usize = batch.iter().map(|ex| ex.mask_positions.len()).sum();
    if total_masked == 0 {
        return Err(ModelError::NoMaskedPositions);
    }
    let mut rng = make_rng(dropout);
    let mut loss = 0.0f64;
    let mut rows = Vec::with_capacity(total_masked);
    for ex in batch {
        let cache = forward_example(state, &ex.input_ids, ex.attention_len, rng.as_mut())?;
        let logits = mlm_logits_for_cache(state, &cache, &ex.mask_positions);
        for (row, &target) in logits.iter().zip(ex.target_ids.iter()) {
            let lse = log_sum_exp(row);
            loss += lse - row[target as usize].to_f64_lossy();
        }
        rows.extend(logits);
    }
    Ok((loss / total_masked as f64, MaskedLogits { rows }))
}

/// Classification head: `[CLS]` pooling through the classifier,
/// mean cross-entropy over the batch.
pub fn forward_classify<T: Scalar>(
    state: &ModelState<T>,
    batch: &[ClassifyExample],
    dropout: Dropout,
) -> Result<(f64, Tensor<T>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let c = state.config.num_labels;
    let mut rng = make_rng(dropout);
    let mut loss = 0.0f64;
    let mut logits = Tensor::zeros(&[batch.len(), c]);
    for (b, ex) in batch.iter().enumerate() {
        if ex.label >= c {
            return Err(ModelError::LabelOutOfRange {
                label: ex.label,
                num_labels: c,
            });
        }
        let cache = forward_example(state, &ex.input_ids, ex.attention_len, rng.as_mut())?;
        let h = state.config.hidden_dim;
        let pooled = &cache.final_hidden[0..h];
        let row = linear(
            pooled,
            &state.params.classifier_weight,
            &state.params.classifier_bias,
            1,
        );
        let lse = log_sum_exp(&row);
        loss += lse - row[ex.label].to_f64_lossy();
        logits.row_mut(b).copy_from_slice(&row);
    }
    Ok((loss / batch.len() as f64, logits))
}

/// Deterministic classification logits (dropout off).
pub fn predict_logits<T: Scalar>(
    state: &ModelState<T>,
    batch: &[ClassifyExample],
) -> Result<Tensor<T>, ModelError> {
    forward_classify(state, batch, Dropout::Off).map(|(_, logits)| logits)
}

/// Logit rows at masked positions with dropout off.
pub fn mlm_logits<T: Scalar>(
    state: &ModelState<T>,
    batch: &[MlmExample],
) -> Result<MaskedLogits<T>, ModelError> {
    forward_mlm(state, batch, Dropout::Off).map(|(_, logits)| logits)
}

/// Loss plus gradients of every parameter tensor.
pub fn loss_and_grads<T: Scalar>(
    state: &ModelState<T>,
    batch: Batch<'_>,
    dropout: Dropout,
) -> Result<(f64, ParamTensors<T>), ModelError> {
    let mut grads = ParamTensors::<T>::zeros(&state.config);
    let mut rng = make_rng(dropout);
    let h = state.config.hidden_dim;
    match batch {
        Batch::Mlm(examples) => {
            if examples.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            let total_masked: usize = examples.iter().map(|ex| ex.mask_positions.len()).sum();
            if total_masked == 0 {
                return Err(ModelError::NoMaskedPositions);
            }
            let inv_n = 1.0 / total_masked as f64;
            let mut loss = 0.0f64;
            for ex in examples {
                let cache =
                    forward_example(state, &ex.input_ids, ex.attention_len, rng.as_mut())?;
                let logits = mlm_logits_for_cache(state, &cache, &ex.mask_positions);
                let seq = ex.input_ids.len();
                let mut dfinal = vec![T::zero(); seq * h];
                for ((row, &target), &pos) in logits
                    .iter()
                    .zip(ex.target_ids.iter())
                    .zip(ex.mask_positions.iter())
                {
                    let lse = log_sum_exp(row);
                    loss += (lse - row[target as usize].to_f64_lossy()) * inv_n;
                    // dlogits = (softmax - onehot) / N
                    let hidden_row = cache.final_hidden[pos * h..(pos + 1) * h].to_vec();
                    let emb = state.params.token_embeddings.data();
                    let dfrow = &mut dfinal[pos * h..(pos + 1) * h];
                    for (v_id, &logit) in row.iter().enumerate() {
                        let mut dl = ((logit.to_f64_lossy() - lse).exp()) * inv_n;
                        if v_id == target as usize {
                            dl -= inv_n;
                        }
                        let dl = T::from_f64_lossy(dl);
                        grads.mlm_bias.data_mut()[v_id] += dl;
                        // tied output layer: dE[v] += dl * hidden
                        let erow = &emb[v_id * h..(v_id + 1) * h];
                        let grow = &mut grads.token_embeddings.data_mut()[v_id * h..(v_id + 1) * h];
                        for c in 0..h {
                            grow[c] += dl * hidden_row[c];
                            dfrow[c] += dl * erow[c];
                        }
                    }
                }
                backward_example(state, &cache, dfinal, &mut grads);
            }
            Ok((loss, grads))
        }
        Batch::Classify(examples) => {
            if examples.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            let c = state.config.num_labels;
            let inv_b = 1.0 / examples.len() as f64;
            let mut loss = 0.0f64;
            for ex in examples {
                if ex.label >= c {
                    return Err(ModelError::LabelOutOfRange {
                        label: ex.label,
                        num_labels: c,
                    });
                }
                let cache =
                    forward_example(state, &ex.input_ids, ex.attention_len, rng.as_mut())?;
                let pooled = cache.final_hidden[0..h].to_vec();
                let row = linear(
                    &pooled,
                    &state.params.classifier_weight,
                    &state.params.classifier_bias,
                    1,
                );
                let lse = log_sum_exp(&row);
                loss += (lse - row[ex.label].to_f64_lossy()) * inv_b;
                let mut dlogits = vec![T::zero(); c];
                for (j, &logit) in row.iter().enumerate() {
                    let mut dl = (logit.to_f64_lossy() - lse).exp() * inv_b;
                    if j == ex.label {
                        dl -= inv_b;
                    }
                    dlogits[j] = T::from_f64_lossy(dl);
                }
                // classifier head
                matmul_tn_acc(
                    &pooled,
                    &dlogits,
                    grads.classifier_weight.data_mut(),
                    1,
                    h,
                    c,
                );
                for (g, &d) in grads.classifier_bias.data_mut().iter_mut().zip(&dlogits) {
                    *g += d;
                }
                let seq = ex.input_ids.len();
                let mut dfinal = vec![T::zero(); seq * h];
                matmul_nt_acc(
                    &dlogits,
                    state.params.classifier_weight.data(),
                    &mut dfinal[0..h],
                    1,
                    c,
                    h,
                );
                backward_example(state, &cache, dfinal, &mut grads);
            }
            Ok((loss, grads))
        }
    }
}
