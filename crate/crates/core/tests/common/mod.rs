//! Finite-difference cases shared by the gradient tests and the acceptance
//! run. Each case builds a randomly initialized layer or model from `seed`,
//! backpropagates a random scalar loss and returns the largest relative
//! error over every checked coordinate (parameters and, for layers, inputs).

#![allow(dead_code)]

use emoctx::embed::{SentenceAffectEncoder, ToyAffect, WordTable};
use emoctx::models::{Features, Model, ModelConfig, ModelKind};
use emoctx::neural::{
    check_gradients, grad_check, weighted_cross_entropy, Affine, BiLstm, Coordinates, Params, SelfAttention,
};
use emoctx::textprep::{normalize_utterance, Token};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step for single layers.
pub const H: f64 = 1e-5;
/// Step for whole models. At initialization many coordinates have gradients
/// near 1e-8, where central differences at 1e-5 carry ~3e-11 of rounding
/// noise on an O(1) loss; 1e-3 keeps both rounding and truncation error
/// around 1e-5 relative.
pub const H_MODEL: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `sum(c * y)`, so every output coordinate matters.
fn projected(y: &[f64], c: &[f64]) -> f64 {
    y.iter().zip(c).map(|(a, b)| a * b).sum()
}

pub fn affine(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Affine::new(4, 3, &mut rng);
    let x = random_vec(&mut rng, 3 * 4);
    let c = random_vec(&mut rng, 3 * 3);
    layer.zero_grads();
    let dx = layer.backward(&x, 3, &c);
    let r = check_gradients(&mut layer, H, Coordinates::All, |l| {
        projected(&l.forward(&x, 3).unwrap(), &c)
    });
    let frozen = layer.clone();
    let rx = grad_check(&x, &dx, H, |xp| projected(&frozen.forward(xp, 3).unwrap(), &c));
    r.max_rel_error.max(rx.max_rel_error)
}

/// Two bidirectional layers; the loss reads every state and the final state.
pub fn bilstm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut net = BiLstm::new(3, 2, 2, &mut rng);
    let steps = 1 + (seed as usize % 5);
    let x = random_vec(&mut rng, steps * 3);
    let c = random_vec(&mut rng, steps * 4);
    let cf = random_vec(&mut rng, 4);
    let loss = |n: &BiLstm, xs: &[f64]| {
        let run = n.forward(xs, steps).unwrap();
        run.states.iter().sum::<f64>() + projected(&run.states, &c) + projected(&run.final_state, &cf)
    };
    net.zero_grads();
    let run = net.forward(&x, steps).unwrap();
    let d_states: Vec<f64> = c.iter().map(|v| v + 1.0).collect();
    let dx = net.backward(&run, &d_states, &cf);
    let r = check_gradients(&mut net, H, Coordinates::All, |n| loss(n, &x));
    let frozen = net.clone();
    let rx = grad_check(&x, &dx, H, |xp| loss(&frozen, xp));
    r.max_rel_error.max(rx.max_rel_error)
}

pub fn attention(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let d = 6;
    let steps = if seed == 0 { 4 } else { 1 + seed as usize % 6 };
    let mut att = SelfAttention::new(d, &mut rng);
    let states = random_vec(&mut rng, steps * d);
    let c = random_vec(&mut rng, d);
    att.zero_grads();
    let run = att.forward(&states, steps).unwrap();
    let ds = att.backward(&run, &c);
    let r = check_gradients(&mut att, H, Coordinates::All, |a| {
        projected(&a.forward(&states, steps).unwrap().output, &c)
    });
    let frozen = att.clone();
    let rs = grad_check(&states, &ds, H, |sp| {
        projected(&frozen.forward(sp, steps).unwrap().output, &c)
    });
    r.max_rel_error.max(rs.max_rel_error)
}

/// Gradient with respect to the logits of a batch of five.
pub fn weighted_ce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let logits: Vec<f64> = random_vec(&mut rng, 5 * 4).iter().map(|v| 3.0 * v).collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
    let out = weighted_cross_entropy(&logits, 4, &labels, &weights).unwrap();
    grad_check(&logits, &out.grad, H, |z| {
        weighted_cross_entropy(z, 4, &labels, &weights).unwrap().loss
    })
    .max_rel_error
}

/// Trainable affect table under a `sum(sin(c * y))` loss; the token pool
/// mixes vocabulary words, repeats and hashed out-of-vocabulary tokens.
pub fn toy_affect(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let words: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut enc = ToyAffect::new(words, 3, 5, true, &mut rng).unwrap();
    let n = rng.random_range(1..7);
    let pool = ["a", "b", "c", "zz", "yy", "a"];
    let tokens: Vec<Token> = (0..n)
        .map(|_| Token::word(pool[rng.random_range(0..pool.len())]))
        .collect();
    let c = random_vec(&mut rng, 5);
    let f = |e: &ToyAffect| -> f64 { e.encode(&tokens).iter().zip(&c).map(|(v, w)| (v * w).sin()).sum() };
    let y = enc.encode(&tokens);
    let d: Vec<f64> = y.iter().zip(&c).map(|(v, w)| w * (v * w).cos()).collect();
    enc.zero_grads();
    enc.backward(&tokens, &d);
    check_gradients(&mut enc, H, Coordinates::All, f).max_rel_error
}

const TEXTS: [&str; 8] = [
    "i am so happy today",
    "why would you say that",
    "leave me alone",
    "that is sad :(",
    "ok",
    "@john see you at 5",
    "nooooo way",
    "love it :)",
];

fn batch(model: &Model, rng: &mut ChaCha8Rng) -> (Vec<Features>, Vec<usize>, Vec<f64>) {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for _ in 0..2 {
        let pick = |rng: &mut ChaCha8Rng| normalize_utterance(TEXTS[rng.random_range(0..TEXTS.len())]);
        let turns = [pick(rng), pick(rng), pick(rng)];
        feats.push(model.featurize(&turns));
        labels.push(rng.random_range(0..4));
        weights.push(rng.random_range(0.2..2.0));
    }
    (feats, labels, weights)
}

fn model_loss(model: &Model, feats: &[Features], labels: &[usize], weights: &[f64]) -> f64 {
    let logits: Vec<f64> = feats.iter().flat_map(|f| model.logits(f).unwrap()).collect();
    weighted_cross_entropy(&logits, 4, labels, weights).unwrap().loss
}

/// A desk-profile model under the weighted loss on a random two-conversation
/// batch, 6 sampled coordinates per tensor.
pub fn whole_model(kind: ModelKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 * kind as u64 + seed);
    let vocab = vec!["happy".to_string(), "sad".to_string(), "<smile>".to_string()];
    let mut model = Model::new(kind, ModelConfig::desk(), WordTable::empty(0), vocab, seed).unwrap();
    let (feats, labels, weights) = batch(&model, &mut rng);

    model.zero_grads();
    let traces: Vec<_> = feats.iter().map(|f| model.forward(f).unwrap()).collect();
    let logits: Vec<f64> = traces.iter().flat_map(|t| t.logits.clone()).collect();
    let out = weighted_cross_entropy(&logits, 4, &labels, &weights).unwrap();
    for (i, (f, t)) in feats.iter().zip(&traces).enumerate() {
        model.backward(f, t, &out.grad[i * 4..(i + 1) * 4]);
    }
    let coords = Coordinates::Sample { per_tensor: 6, seed };
    let r = check_gradients(&mut model, H_MODEL, coords, |m| {
        model_loss(m, &feats, &labels, &weights)
    });
    assert!(r.checked > 0);
    r.max_rel_error
}
