//! Greedy decoding with a per-layer key/value cache.

use super::linalg::{add_assign, dot, linear};
use super::rope::RopeTable;
use super::transformer::{check_tokens, norm_forward, rope_table};
use super::{ModelConfig, ParameterSet};
use crate::error::{Error, Result};

/// Streams decoded together; bounds cache memory.
const GROUP: usize = 256;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct KvCache {
    capacity: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    fn new(cfg: &ModelConfig, streams: usize, capacity: usize) -> Self {
        let size = streams * capacity * cfg.hidden_size;
        Self {
            capacity,
            keys: (0..cfg.n_layers).map(|_| vec![0.0; size]).collect(),
            values: (0..cfg.n_layers).map(|_| vec![0.0; size]).collect(),
        }
    }
}

/// Feeds one token per stream at position `pos`; returns logits when asked.
fn step(
    params: &ParameterSet,
    cfg: &ModelConfig,
    rope: &RopeTable,
    cache: &mut KvCache,
    tokens: &[u16],
    pos: usize,
    want_logits: bool,
) -> Option<Vec<f64>> {
    let (h, inter, hd) = (cfg.hidden_size, cfg.intermediate_size, cfg.head_dim());
    let n = tokens.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let emb = params.slice(params.layout.embedding, cfg.vocab_size * h);
    let mut x = Vec::with_capacity(n * h);
    for &t in tokens {
        x.extend_from_slice(&emb[t as usize * h..(t as usize + 1) * h]);
    }
    let mut scores = vec![0.0; pos + 1];
    for (l, lo) in params.layout.layers.iter().enumerate() {
        let n1 = norm_forward(x, h, params, lo.attn_norm, cfg.norm_kind, cfg.norm_eps);
        let mut q = linear(&n1.out, params.slice(lo.wq, h * h), n, h, h);
        let mut k = linear(&n1.out, params.slice(lo.wk, h * h), n, h, h);
        let v = linear(&n1.out, params.slice(lo.wv, h * h), n, h, h);
        for row in q.chunks_exact_mut(hd).chain(k.chunks_exact_mut(hd)) {
            rope.rotate(row, pos);
        }
        let (kc, vc) = (&mut cache.keys[l], &mut cache.values[l]);
        for s in 0..n {
            let at = (s * cache.capacity + pos) * h;
            kc[at..at + h].copy_from_slice(&k[s * h..(s + 1) * h]);
            vc[at..at + h].copy_from_slice(&v[s * h..(s + 1) * h]);
        }
        let mut o = vec![0.0; n * h];
        for s in 0..n {
            let base = s * cache.capacity * h;
            for head in 0..cfg.n_heads {
                let col = head * hd;
                let qi = &q[s * h + col..s * h + col + hd];
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let kj = &kc[base + j * h + col..base + j * h + col + hd];
                    *sc = dot(qi, kj) * scale;
                    max = max.max(*sc);
                }
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let oi = &mut o[s * h + col..s * h + col + hd];
                for (j, &sc) in scores.iter().enumerate() {
                    let p = sc / sum;
                    let vj = &vc[base + j * h + col..base + j * h + col + hd];
                    for d in 0..hd {
                        oi[d] += p * vj[d];
                    }
                }
            }
        }
        let mut x2 = linear(&o, params.slice(lo.wo, h * h), n, h, h);
        add_assign(&mut x2, &n1.input);
        let n2 = norm_forward(x2, h, params, lo.mlp_norm, cfg.norm_kind, cfg.norm_eps);
        let g = linear(&n2.out, params.slice(lo.w_gate, inter * h), n, h, inter);
        let u = linear(&n2.out, params.slice(lo.w_up, inter * h), n, h, inter);
        let hmid: Vec<f64> = g
            .iter()
            .zip(&u)
            .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
            .collect();
        let mut x3 = linear(&hmid, params.slice(lo.w_down, h * inter), n, inter, h);
        add_assign(&mut x3, &n2.input);
        x = x3;
    }
    if !want_logits {
        return None;
    }
    let f = norm_forward(x, h, params, params.layout.final_norm, cfg.norm_kind, cfg.norm_eps);
    let head = params.slice(params.layout.head, cfg.vocab_size * h);
    Some(linear(&f.out, head, n, h, cfg.vocab_size))
}

/// Greedily extends equal-length prompts by `l` tokens each.
pub fn generate_greedy_batch(
    params: &ParameterSet,
    cfg: &ModelConfig,
    prompts: &[&[u16]],
    l: usize,
) -> Result<Vec<Vec<u16>>> {
    let k = prompts.first().map_or(1, |p| p.len());
    if k == 0 || prompts.iter().any(|p| p.len() != k) {
        return Err(Error::Invalid("prompts must be non-empty and share one length".into()));
    }
    if k + l > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "prompt {k} + continuation {l} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    for p in prompts {
        check_tokens(cfg, p)?;
    }
    if l == 0 {
        return Ok(vec![Vec::new(); prompts.len()]);
    }
    let rope = rope_table(cfg)?;
    let v = cfg.vocab_size;
    let mut out = Vec::with_capacity(prompts.len());
    for group in prompts.chunks(GROUP) {
        let n = group.len();
        let mut cache = KvCache::new(cfg, n, k + l);
        let mut gen: Vec<Vec<u16>> = vec![Vec::with_capacity(l); n];
        let mut logits = None;
        for pos in 0..k {
            let toks: Vec<u16> = group.iter().map(|p| p[pos]).collect();
            logits = step(params, cfg, &rope, &mut cache, &toks, pos, pos + 1 == k);
        }
        for g in 0..l {
            let lg = logits.take().expect("logits at last fed position");
            for (s, seq) in gen.iter_mut().enumerate() {
                seq.push(argmax(&lg[s * v..(s + 1) * v]) as u16);
            }
            if g + 1 < l {
                let toks: Vec<u16> = gen.iter().map(|s| s[g]).collect();
                logits = step(params, cfg, &rope, &mut cache, &toks, k + g, true);
            }
        }
        out.extend(gen);
    }
    Ok(out)
}

pub fn generate_greedy(params: &ParameterSet, cfg: &ModelConfig, prompt: &[u16], l: usize) -> Result<Vec<u16>> {
    Ok(generate_greedy_batch(params, cfg, &[prompt], l)?.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_parameters, NormKind};
    use crate::rng::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_size: 16,
            n_layers: 2,
            n_heads: 4,
            intermediate_size: 20,
            max_seq_len: 24,
            norm_kind: NormKind::LayerNorm,
            rope_fraction: 0.5,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn ties_pick_lowest() {
        assert_eq!(argmax(&[0.0, 1.0, 1.0, 0.5]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[0.0; 258]), 0);
    }

    #[test]
    fn zero_length_continuation() {
        let c = cfg();
        let p = init_parameters(&c, 1).unwrap();
        assert!(generate_greedy(&p, &c, &[1, 2, 3], 0).unwrap().is_empty());
        assert!(generate_greedy(&p, &c, &[], 2).is_err());
        assert!(generate_greedy(&p, &c, &[1; 20], 5).is_err());
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let c = cfg();
        let p = init_parameters(&c, 2).unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let prompts: Vec<Vec<u16>> = (0..3)
            .map(|_| (0..5).map(|_| rng.below(256) as u16).collect())
            .collect();
        let refs: Vec<&[u16]> = prompts.iter().map(|p| p.as_slice()).collect();
        let gen = generate_greedy_batch(&p, &c, &refs, 6).unwrap();
        for (prompt, g) in prompts.iter().zip(&gen) {
            // recompute each greedy step with an uncached forward
            let mut seq = prompt.clone();
            for &tok in g {
                let logits = forward(&p, &c, &[&seq]).unwrap();
                let last = logits.row(0, seq.len() - 1);
                assert_eq!(argmax(last) as u16, tok);
                seq.push(tok);
            }
        }
    }
}
