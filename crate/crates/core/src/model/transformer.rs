//! Batched forward pass, next-token loss and hand-written backward pass.
//!
//! Activations are `[rows, width]` row-major buffers with `rows = batch ·
//! seq`. Linear layers run as one GEMM over all rows; attention runs per
//! (sequence, head). All reductions happen in a fixed order.

use super::linalg::{add_assign, dot, linear, linear_grad_input, linear_grad_weight};
use super::rope::{inverse_frequencies_with_theta, RopeTable};
use super::{LayerOffsets, ModelConfig, NormKind, NormOffsets, ParameterSet};
use crate::error::{Error, Result};
use crate::tokenizer::PAD_ID;

/// Output scores, `[batch, seq, vocab]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.seq + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) struct NormCache {
    pub input: Vec<f64>,
    pub out: Vec<f64>,
    rstd: Vec<f64>,
    mean: Vec<f64>,
}

pub(crate) fn norm_forward(
    x: Vec<f64>,
    width: usize,
    params: &ParameterSet,
    offs: NormOffsets,
    kind: NormKind,
    eps: f64,
) -> NormCache {
    let rows = x.len() / width;
    let gain = params.slice(offs.gain, width);
    let bias = offs.bias.map(|b| params.slice(b, width));
    let mut out = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let mut mean = Vec::with_capacity(if kind == NormKind::LayerNorm { rows } else { 0 });
    for (row, o) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        match kind {
            NormKind::RmsNorm => {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
                let r = 1.0 / (ms + eps).sqrt();
                for ((o, &v), &g) in o.iter_mut().zip(row).zip(gain) {
                    *o = v * r * g;
                }
                rstd.push(r);
            }
            NormKind::LayerNorm => {
                let mu = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
                let r = 1.0 / (var + eps).sqrt();
                let bias = bias.expect("layernorm has a bias");
                for (((o, &v), &g), &b) in o.iter_mut().zip(row).zip(gain).zip(bias) {
                    *o = (v - mu) * r * g + b;
                }
                rstd.push(r);
                mean.push(mu);
            }
        }
    }
    NormCache {
        input: x,
        out,
        rstd,
        mean,
    }
}

/// Returns `dx`; accumulates gain/bias gradients into `grads`.
fn norm_backward(
    cache: &NormCache,
    dy: &[f64],
    width: usize,
    params: &ParameterSet,
    offs: NormOffsets,
    grads: &mut [f64],
) -> Vec<f64> {
    let gain = params.slice(offs.gain, width);
    let mut dx = vec![0.0; dy.len()];
    let mut xhat = vec![0.0; width];
    let mut dxhat = vec![0.0; width];
    for (r, ((x, dyr), dxr)) in cache
        .input
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .enumerate()
    {
        let rstd = cache.rstd[r];
        let mu = cache.mean.get(r).copied().unwrap_or(0.0);
        for k in 0..width {
            xhat[k] = (x[k] - mu) * rstd;
            dxhat[k] = dyr[k] * gain[k];
        }
        {
            let dgain = &mut grads[offs.gain..offs.gain + width];
            for k in 0..width {
                dgain[k] += dyr[k] * xhat[k];
            }
        }
        if let Some(b) = offs.bias {
            add_assign(&mut grads[b..b + width], dyr);
        }
        let proj = dot(&dxhat, &xhat) / width as f64;
        if cache.mean.is_empty() {
            for k in 0..width {
                dxr[k] = rstd * (dxhat[k] - xhat[k] * proj);
            }
        } else {
            let m = dxhat.iter().sum::<f64>() / width as f64;
            for k in 0..width {
                dxr[k] = rstd * (dxhat[k] - m - xhat[k] * proj);
            }
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    n1: NormCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    n2: NormCache,
    g: Vec<f64>,
    u: Vec<f64>,
    hmid: Vec<f64>,
}

pub(crate) struct ForwardCache {
    batch: usize,
    seq: usize,
    tokens: Vec<u16>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    pub logits: Vec<f64>,
    rope: RopeTable,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u16]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        Some(&id) => Err(Error::TokenOutOfRange {
            id: u32::from(id),
            vocab_size: cfg.vocab_size,
        }),
        None => Ok(()),
    }
}

pub(crate) fn rope_table(cfg: &ModelConfig) -> Result<RopeTable> {
    let inv = inverse_frequencies_with_theta(cfg.head_dim(), cfg.rope_fraction, cfg.rope_theta)?;
    Ok(RopeTable::new(&inv, cfg.max_seq_len))
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    seq: usize,
    cfg: &ModelConfig,
) -> (Vec<f64>, Vec<f64>) {
    let (h, nh, hd) = (cfg.hidden_size, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; batch * nh * seq * seq];
    let mut o = vec![0.0; batch * seq * h];
    for b in 0..batch {
        for head in 0..nh {
            let col = head * hd;
            let pbase = (b * nh + head) * seq * seq;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * h + col..][..hd];
                let p = &mut probs[pbase + i * seq..pbase + i * seq + seq];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(b * seq + j) * h + col..][..hd];
                    p[j] = dot(qi, kj) * scale;
                    max = max.max(p[j]);
                }
                let mut sum = 0.0;
                for pj in p[..=i].iter_mut() {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let inv = 1.0 / sum;
                let oi = &mut o[(b * seq + i) * h + col..][..hd];
                for j in 0..=i {
                    p[j] *= inv;
                    let vj = &v[(b * seq + j) * h + col..][..hd];
                    for d in 0..hd {
                        oi[d] += p[j] * vj[d];
                    }
                }
            }
        }
    }
    (probs, o)
}

fn attention_backward(
    cache: &LayerCache,
    d_o: &[f64],
    batch: usize,
    seq: usize,
    cfg: &ModelConfig,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, nh, hd) = (cfg.hidden_size, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for head in 0..nh {
            let col = head * hd;
            let pbase = (b * nh + head) * seq * seq;
            for i in 0..seq {
                let p = &cache.probs[pbase + i * seq..pbase + i * seq + seq];
                let ri = (b * seq + i) * h + col;
                let doi = &d_o[ri..ri + hd];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let rj = (b * seq + j) * h + col;
                    dp[j] = dot(doi, &v[rj..rj + hd]);
                    weighted += p[j] * dp[j];
                    let dvj = &mut dv[rj..rj + hd];
                    for d in 0..hd {
                        dvj[d] += p[j] * doi[d];
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (b * seq + j) * h + col;
                    for d in 0..hd {
                        dq[ri + d] += ds * k[rj + d];
                        dk[rj + d] += ds * q[ri + d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn rotate_rows(x: &mut [f64], seq: usize, cfg: &ModelConfig, rope: &RopeTable, back: bool) {
    let (h, hd) = (cfg.hidden_size, cfg.head_dim());
    for (r, row) in x.chunks_exact_mut(h).enumerate() {
        let pos = r % seq;
        for head in row.chunks_exact_mut(hd) {
            if back {
                rope.rotate_back(head, pos);
            } else {
                rope.rotate(head, pos);
            }
        }
    }
}

fn layer_forward(
    x: Vec<f64>,
    params: &ParameterSet,
    lo: &LayerOffsets,
    cfg: &ModelConfig,
    batch: usize,
    seq: usize,
    rope: &RopeTable,
) -> (Vec<f64>, LayerCache) {
    let (h, i) = (cfg.hidden_size, cfg.intermediate_size);
    let rows = batch * seq;
    let n1 = norm_forward(x, h, params, lo.attn_norm, cfg.norm_kind, cfg.norm_eps);
    let mut q = linear(&n1.out, params.slice(lo.wq, h * h), rows, h, h);
    let mut k = linear(&n1.out, params.slice(lo.wk, h * h), rows, h, h);
    let v = linear(&n1.out, params.slice(lo.wv, h * h), rows, h, h);
    rotate_rows(&mut q, seq, cfg, rope, false);
    rotate_rows(&mut k, seq, cfg, rope, false);
    let (probs, o) = attention_forward(&q, &k, &v, batch, seq, cfg);
    let mut x2 = linear(&o, params.slice(lo.wo, h * h), rows, h, h);
    add_assign(&mut x2, &n1.input);

    let n2 = norm_forward(x2, h, params, lo.mlp_norm, cfg.norm_kind, cfg.norm_eps);
    let g = linear(&n2.out, params.slice(lo.w_gate, i * h), rows, h, i);
    let u = linear(&n2.out, params.slice(lo.w_up, i * h), rows, h, i);
    let hmid: Vec<f64> = g.iter().zip(&u).map(|(&g, &u)| g * sigmoid(g) * u).collect();
    let mut x3 = linear(&hmid, params.slice(lo.w_down, h * i), rows, i, h);
    add_assign(&mut x3, &n2.input);
    (
        x3,
        LayerCache {
            n1,
            q,
            k,
            v,
            probs,
            o,
            n2,
            g,
            u,
            hmid,
        },
    )
}

fn layer_backward(
    dx3: Vec<f64>,
    cache: &LayerCache,
    params: &ParameterSet,
    lo: &LayerOffsets,
    cfg: &ModelConfig,
    batch: usize,
    seq: usize,
    rope: &RopeTable,
    grads: &mut [f64],
) -> Vec<f64> {
    let (h, i) = (cfg.hidden_size, cfg.intermediate_size);
    let rows = batch * seq;

    // MLP
    linear_grad_weight(&dx3, &cache.hmid, &mut grads[lo.w_down..lo.w_down + h * i], rows, i, h);
    let dh = linear_grad_input(&dx3, params.slice(lo.w_down, h * i), rows, i, h);
    let mut dg = vec![0.0; dh.len()];
    let mut du = vec![0.0; dh.len()];
    for idx in 0..dh.len() {
        let g = cache.g[idx];
        let s = sigmoid(g);
        let silu = g * s;
        du[idx] = dh[idx] * silu;
        dg[idx] = dh[idx] * cache.u[idx] * s * (1.0 + g * (1.0 - s));
    }
    linear_grad_weight(&dg, &cache.n2.out, &mut grads[lo.w_gate..lo.w_gate + i * h], rows, h, i);
    linear_grad_weight(&du, &cache.n2.out, &mut grads[lo.w_up..lo.w_up + i * h], rows, h, i);
    let mut dn2 = linear_grad_input(&dg, params.slice(lo.w_gate, i * h), rows, h, i);
    add_assign(&mut dn2, &linear_grad_input(&du, params.slice(lo.w_up, i * h), rows, h, i));
    let mut dx2 = norm_backward(&cache.n2, &dn2, h, params, lo.mlp_norm, grads);
    add_assign(&mut dx2, &dx3);

    // attention
    linear_grad_weight(&dx2, &cache.o, &mut grads[lo.wo..lo.wo + h * h], rows, h, h);
    let d_o = linear_grad_input(&dx2, params.slice(lo.wo, h * h), rows, h, h);
    let (mut dq, mut dk, dv) = attention_backward(cache, &d_o, batch, seq, cfg);
    rotate_rows(&mut dq, seq, cfg, rope, true);
    rotate_rows(&mut dk, seq, cfg, rope, true);
    let a = &cache.n1.out;
    linear_grad_weight(&dq, a, &mut grads[lo.wq..lo.wq + h * h], rows, h, h);
    linear_grad_weight(&dk, a, &mut grads[lo.wk..lo.wk + h * h], rows, h, h);
    linear_grad_weight(&dv, a, &mut grads[lo.wv..lo.wv + h * h], rows, h, h);
    let mut dn1 = linear_grad_input(&dq, params.slice(lo.wq, h * h), rows, h, h);
    add_assign(&mut dn1, &linear_grad_input(&dk, params.slice(lo.wk, h * h), rows, h, h));
    add_assign(&mut dn1, &linear_grad_input(&dv, params.slice(lo.wv, h * h), rows, h, h));
    let mut dx = norm_backward(&cache.n1, &dn1, h, params, lo.attn_norm, grads);
    add_assign(&mut dx, &dx2);
    dx
}

/// Runs the network on `batch` rows of `seq` tokens each (flattened).
pub(crate) fn forward_cached(
    params: &ParameterSet,
    cfg: &ModelConfig,
    tokens: &[u16],
    batch: usize,
    seq: usize,
) -> Result<ForwardCache> {
    if tokens.len() != batch * seq {
        return Err(Error::Invalid("token buffer does not match batch × seq".into()));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    check_tokens(cfg, tokens)?;
    let h = cfg.hidden_size;
    let rope = rope_table(cfg)?;
    let emb = params.slice(params.layout.embedding, cfg.vocab_size * h);
    let mut x = Vec::with_capacity(tokens.len() * h);
    for &t in tokens {
        x.extend_from_slice(&emb[t as usize * h..(t as usize + 1) * h]);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &params.layout.layers {
        let (next, cache) = layer_forward(x, params, lo, cfg, batch, seq, &rope);
        layers.push(cache);
        x = next;
    }
    let final_norm = norm_forward(x, h, params, params.layout.final_norm, cfg.norm_kind, cfg.norm_eps);
    let head = params.slice(params.layout.head, cfg.vocab_size * h);
    let logits = linear(&final_norm.out, head, batch * seq, h, cfg.vocab_size);
    Ok(ForwardCache {
        batch,
        seq,
        tokens: tokens.to_vec(),
        layers,
        final_norm,
        logits,
        rope,
    })
}

pub(crate) fn backward(
    params: &ParameterSet,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Vec<f64> {
    let (h, v) = (cfg.hidden_size, cfg.vocab_size);
    let rows = cache.batch * cache.seq;
    let layout = &params.layout;
    let mut grads = vec![0.0; params.len()];
    linear_grad_weight(dlogits, &cache.final_norm.out, &mut grads[layout.head..layout.head + v * h], rows, h, v);
    let df = linear_grad_input(dlogits, params.slice(layout.head, v * h), rows, h, v);
    let mut dx = norm_backward(&cache.final_norm, &df, h, params, layout.final_norm, &mut grads);
    for (lo, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(dx, lc, params, lo, cfg, cache.batch, cache.seq, &cache.rope, &mut grads);
    }
    for (r, &t) in cache.tokens.iter().enumerate() {
        let at = layout.embedding + t as usize * h;
        add_assign(&mut grads[at..at + h], &dx[r * h..(r + 1) * h]);
    }
    grads
}

/// Logits for a batch of equal-length token rows.
pub fn forward(params: &ParameterSet, cfg: &ModelConfig, rows: &[&[u16]]) -> Result<Logits> {
    let seq = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != seq) {
        return Err(Error::Invalid("rows must share one length".into()));
    }
    let flat: Vec<u16> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let cache = forward_cached(params, cfg, &flat, rows.len(), seq)?;
    Ok(Logits {
        batch: rows.len(),
        seq,
        vocab: cfg.vocab_size,
        data: cache.logits,
    })
}

/// Negative log-likelihood of one row plus its gradient w.r.t. the logits.
fn row_nll(row: &[f64], target: usize, grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some(g) = grad {
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - lse).exp() * scale;
        }
        g[target] -= scale;
    }
    lse - row[target]
}

/// Mean next-token NLL over unmasked positions. `targets` and `include`
/// are flattened `[batch, seq]`.
pub fn cross_entropy_loss(logits: &Logits, targets: &[u16], include: &[bool]) -> Result<(f64, usize)> {
    let rows = logits.batch * logits.seq;
    if targets.len() != rows || include.len() != rows {
        return Err(Error::Invalid("targets/mask shape does not match logits".into()));
    }
    let count = include.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("every position is masked".into()));
    }
    let mut total = 0.0;
    for r in 0..rows {
        if include[r] {
            let row = &logits.data[r * logits.vocab..(r + 1) * logits.vocab];
            total += row_nll(row, targets[r] as usize, None, 0.0);
        }
    }
    Ok((total / count as f64, count))
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub count: usize,
    pub grads: Vec<f64>,
}

/// Splits full windows into inputs/targets, masking pad targets.
pub(crate) fn shift_batch(batch: &[&[u16]]) -> Result<(Vec<u16>, Vec<u16>, Vec<bool>, usize)> {
    let len = batch.first().map_or(0, |s| s.len());
    if len < 2 || batch.iter().any(|s| s.len() != len) {
        return Err(Error::Invalid("batch rows must share a length ≥ 2".into()));
    }
    let seq = len - 1;
    let mut inputs = Vec::with_capacity(batch.len() * seq);
    let mut targets = Vec::with_capacity(batch.len() * seq);
    for s in batch {
        inputs.extend_from_slice(&s[..seq]);
        targets.extend_from_slice(&s[1..]);
    }
    let include = targets.iter().map(|&t| t != PAD_ID).collect();
    Ok((inputs, targets, include, seq))
}

/// Mean loss over a batch of full windows and its gradient w.r.t. every parameter.
pub fn loss_and_grad(params: &ParameterSet, cfg: &ModelConfig, batch: &[&[u16]]) -> Result<LossOutput> {
    let (inputs, targets, include, seq) = shift_batch(batch)?;
    let count = include.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("every position is masked".into()));
    }
    let cache = forward_cached(params, cfg, &inputs, batch.len(), seq)?;
    let v = cfg.vocab_size;
    let scale = 1.0 / count as f64;
    let mut dlogits = vec![0.0; cache.logits.len()];
    let mut total = 0.0;
    for (r, (&t, &inc)) in targets.iter().zip(&include).enumerate() {
        if inc {
            let row = &cache.logits[r * v..(r + 1) * v];
            total += row_nll(row, t as usize, Some(&mut dlogits[r * v..(r + 1) * v]), scale);
        }
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Ok(LossOutput {
            loss,
            count,
            grads: Vec::new(),
        });
    }
    let grads = backward(params, cfg, &cache, &dlogits);
    Ok(LossOutput { loss, count, grads })
}

/// Mean loss only (no backward pass).
pub fn batch_loss(params: &ParameterSet, cfg: &ModelConfig, batch: &[&[u16]]) -> Result<(f64, usize)> {
    let (inputs, targets, include, seq) = shift_batch(batch)?;
    let cache = forward_cached(params, cfg, &inputs, batch.len(), seq)?;
    let logits = Logits {
        batch: batch.len(),
        seq,
        vocab: cfg.vocab_size,
        data: cache.logits,
    };
    cross_entropy_loss(&logits, &targets, &include)
}
