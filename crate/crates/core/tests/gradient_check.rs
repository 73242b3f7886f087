//! Analytic gradients against central finite differences.

use ledgerlm::model::{batch_loss, init_parameters, loss_and_grad, ModelConfig, NormKind, ParameterSet};
use ledgerlm::rng::Rng;
use ledgerlm::tokenizer::PAD_ID;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-7;

fn numeric(p: &mut ParameterSet, cfg: &ModelConfig, batch: &[&[u16]], i: usize) -> f64 {
    let orig = p.data[i];
    p.data[i] = orig + STEP;
    let up = batch_loss(p, cfg, batch).unwrap().0;
    p.data[i] = orig - STEP;
    let down = batch_loss(p, cfg, batch).unwrap().0;
    p.data[i] = orig;
    (up - down) / (2.0 * STEP)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Perturbs weights away from the symmetric init so every path carries signal.
fn perturbed(cfg: &ModelConfig, seed: u64) -> ParameterSet {
    let mut p = init_parameters(cfg, seed).unwrap();
    let mut rng = Rng::seed_from_u64(seed ^ 0xabc);
    for x in p.data.iter_mut() {
        *x += 0.05 * rng.normal();
    }
    p
}

fn batch(rng: &mut Rng, rows: usize, len: usize) -> Vec<Vec<u16>> {
    let mut out: Vec<Vec<u16>> = (0..rows)
        .map(|_| (0..len).map(|_| rng.below(258) as u16).collect())
        .collect();
    // a padded tail exercises the loss mask
    let last = out.last_mut().unwrap();
    for t in last.iter_mut().skip(len - 3) {
        *t = PAD_ID;
    }
    out
}

fn check_all(cfg: ModelConfig, seed: u64) {
    let mut p = perturbed(&cfg, seed);
    let mut rng = Rng::seed_from_u64(seed);
    let rows = batch(&mut rng, 2, 7);
    let refs: Vec<&[u16]> = rows.iter().map(|r| r.as_slice()).collect();
    let analytic = loss_and_grad(&p, &cfg, &refs).unwrap().grads;
    let mut worst = (0.0, 0usize);
    for i in 0..p.len() {
        let n = numeric(&mut p, &cfg, &refs, i);
        let e = rel_err(analytic[i], n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    assert!(worst.0 <= TOL, "max rel err {} at {}", worst.0, worst.1);
}

#[test]
fn tiny_rmsnorm_full_rope() {
    check_all(
        ModelConfig {
            hidden_size: 8,
            n_layers: 2,
            n_heads: 2,
            intermediate_size: 12,
            max_seq_len: 8,
            ..ModelConfig::toy()
        },
        1,
    );
}

#[test]
fn tiny_layernorm_partial_rope_tied() {
    check_all(
        ModelConfig {
            hidden_size: 8,
            n_layers: 2,
            n_heads: 1,
            intermediate_size: 12,
            max_seq_len: 8,
            norm_kind: NormKind::LayerNorm,
            rope_fraction: 0.25,
            tie_embeddings: true,
            ..ModelConfig::toy()
        },
        2,
    );
}
