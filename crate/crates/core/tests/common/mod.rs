#![allow(dead_code)]

pub mod suites;

use alee_core::corpus::{PosTag, Sentence, TaskSchema, TriggerCandidate};
use alee_core::encoder::EncoderConfig;
use alee_core::extractor::SamplePredictions;
use alee_core::graph::Gradients;
use alee_core::mblp::PredictorConfig;
use alee_core::model::{Model, ModelConfig};
use alee_core::params::{ParamId, ParamStore};
use alee_core::vocab::Vocab;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_h: 8,
            layers: 1,
            heads: 2,
            max_len: 16,
            provider: "transformer".into(),
        },
        predictor: PredictorConfig {
            d_m: 6,
            hidden: 5,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn tiny_schema() -> TaskSchema {
    TaskSchema::generic(3, 2).unwrap()
}

pub fn random_sentence(rng: &mut ChaCha8Rng, id: &str, vocab: usize) -> Sentence {
    let n = rng.gen_range(2..=6);
    let tokens = (0..n).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
    let mut candidates = Vec::new();
    let mut j = 0;
    while j < n {
        if rng.gen_bool(0.4) {
            let end = (j + rng.gen_range(1..=2)).min(n);
            candidates.push(TriggerCandidate {
                start: j,
                end,
                pos: PosTag::Verb,
            });
            j = end;
        } else {
            j += 1;
        }
    }
    if candidates.is_empty() {
        candidates.push(TriggerCandidate {
            start: 0,
            end: 1,
            pos: PosTag::Noun,
        });
    }
    Sentence {
        id: id.into(),
        tokens,
        candidates,
    }
}

pub fn tiny_model(seed: u64, memory: bool) -> Model {
    let mut cfg = tiny_config();
    cfg.predictor.memory = memory;
    let vocab = Vocab::from_tokens((0..12).map(|i| format!("w{i}")).collect());
    Model::new(&cfg, &tiny_schema(), vocab, seed).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Scaled dot-product attention written out loop by loop.
pub fn naive_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Array2<f64> {
    let dk = q.ncols() / heads;
    let dv = v.ncols() / heads;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for i in 0..q.nrows() {
        for h in 0..heads {
            let mut scores = Vec::with_capacity(k.nrows());
            for j in 0..k.nrows() {
                let mut s = 0.0;
                for t in 0..dk {
                    s += q[[i, h * dk + t]] * k[[j, h * dk + t]];
                }
                scores.push(s / (dk as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..k.nrows() {
                for t in 0..dv {
                    out[[i, h * dv + t]] += exps[j] / z * v[[j, h * dv + t]];
                }
            }
        }
    }
    out
}

/// Brute force: repeatedly pull out the largest remaining value.
pub fn naive_importance(losses: &[f64], m: Option<usize>) -> f64 {
    let mut rest = losses.to_vec();
    let take = m.map_or(rest.len(), |m| m.min(rest.len()));
    if take == 0 {
        return 0.0;
    }
    let mut picked = Vec::new();
    for _ in 0..take {
        let mut best = 0;
        for i in 1..rest.len() {
            if rest[i] > rest[best] {
                best = i;
            }
        }
        picked.push(rest.remove(best));
    }
    picked.iter().sum::<f64>() / take as f64
}

pub fn naive_hinge(ordered: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 1..ordered.len() {
        let d = ordered[j] - ordered[j - 1];
        if d > 0.0 {
            total += d;
        }
    }
    total
}

pub fn naive_mse(t: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        total += (t[i] - p[i]).powi(2);
    }
    total
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated memory update for one task, one category row at a time.
pub fn naive_smm_update(store: &ParamStore, task: &str, mem: &Array2<f64>, enc: &Array2<f64>) -> Array2<f64> {
    let get = |n: &str| store.value(store.find(&format!("mblp.{task}.{n}")).unwrap()).clone();
    let (wq, wm, wg, bg) = (get("update_wq"), get("w_m"), get("w_g"), get("b_g"));
    let mut out = mem.clone();
    for p in 0..mem.nrows() {
        let row = mem.row(p).to_owned().insert_axis(ndarray::Axis(0));
        let q = row.dot(&wq);
        let f = naive_attention(&q, enc, enc, 1);
        let mut z = bg[[0, 0]];
        for t in 0..f.ncols() {
            z += f[[0, t]] * wg[[t, 0]];
        }
        for t in 0..mem.ncols() {
            z += mem[[p, t]] * wg[[f.ncols() + t, 0]];
        }
        let g = sigmoid(z);
        let proj = f.dot(&wm);
        for t in 0..mem.ncols() {
            out[[p, t]] = g * proj[[0, t]] + (1.0 - g) * mem[[p, t]];
        }
    }
    out
}

pub fn random_predictions(rng: &mut ChaCha8Rng, k: usize, n: usize, d_h: usize, schema: &TaskSchema) -> SamplePredictions {
    let probs = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        let mut a = Array2::from_shape_fn((r, c), |_| rng.gen_range(0.05..1.0));
        for mut row in a.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        a
    };
    SamplePredictions {
        sentence_id: "r".into(),
        n,
        k,
        trigger_hidden: random_matrix(rng, k, d_h),
        trigger_probs: probs(rng, k, schema.num_event_types()),
        argument_hidden: random_matrix(rng, k * n, 3 * d_h),
        argument_probs: probs(rng, k * n, schema.num_arg_labels()),
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over up to `per_param` entries of each parameter in `ids`.
pub fn max_fd_error<F>(store: &mut ParamStore, ids: &[ParamId], per_param: usize, f: F) -> f64
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    const EPS: f64 = 1e-6;
    let (_, grads) = f(store);
    let mut worst: f64 = 0.0;
    for &id in ids {
        let shape = store.value(id).dim();
        let total = shape.0 * shape.1;
        let step = (total / per_param).max(1);
        for flat in (0..total).step_by(step) {
            let (r, c) = (flat / shape.1, flat % shape.1);
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + EPS;
            let up = f(store).0;
            store.value_mut(id)[[r, c]] = orig - EPS;
            let down = f(store).0;
            store.value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn order_by_truth(truth: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..truth.len()).collect();
    idx.sort_by(|&a, &b| truth[b].partial_cmp(&truth[a]).unwrap());
    idx
}

/// A random BIO row over `roles` roles with no dangling inside tag.
pub fn valid_row(rng: &mut ChaCha8Rng, n: usize, roles: usize) -> Vec<usize> {
    let mut row = Vec::with_capacity(n);
    let mut prev = 0usize;
    for _ in 0..n {
        let l = match rng.gen_range(0..3) {
            0 => 0,
            1 => 1 + 2 * rng.gen_range(0..roles),
            _ if prev != 0 => 2 + 2 * ((prev - 1) / 2),
            _ => 0,
        };
        row.push(l);
        prev = l;
    }
    row
}
