//! Gradient and oracle suites shared by their own test targets and the
//! acceptance report.

use alee_core::corpus::{LabelSet, Sentence};
use alee_core::encoder::{attention, EncoderOutput};
use alee_core::extractor::{ee_loss, Task};
use alee_core::graph::{Graph, Var};
use alee_core::model::Model;
use alee_core::params::{Group, ParamId, ParamStore};
use alee_core::selection::importance;
use alee_core::trainer::{external_rank_loss, internal_rank_loss, mse_loss, mse_var, rank_var, top_m_var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_labels(rng: &mut ChaCha8Rng, model: &Model, s: &Sentence) -> LabelSet {
    let m = model.schema.num_event_types();
    LabelSet {
        triggers: s.candidates.iter().map(|_| rng.gen_range(0..m)).collect(),
        arguments: s
            .candidates
            .iter()
            .map(|_| (0..s.len()).map(|_| rng.gen_range(0..model.schema.num_arg_labels())).collect())
            .collect(),
    }
}

/// Extraction loss of one sentence against encoder and extractor parameters.
pub fn extraction_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_model(seed, true);
    let s = random_sentence(&mut rng, "g", 12);
    let labels = random_labels(&mut rng, &model, &s);
    let ids: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| model.store.group(id) != Group::Predictor)
        .collect();
    let f = |store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        let mut g = Graph::new();
        let fw = m.forward_tape(&mut g, &s).unwrap();
        let (t, a) = m.extractor.loss_vars(&mut g, fw.extractor.as_ref().unwrap(), &labels).unwrap();
        let ts = g.sum(t);
        let as_ = g.sum(a);
        let total = g.add(ts, as_);
        (g.scalar(total), g.backward(total))
    };
    let mut store = model.store.clone();
    max_fd_error(&mut store, &ids, 6, f)
}

pub type PredictorLoss = fn(&mut Graph, &[Var], &[Vec<f64>], u64) -> Var;

/// Predicted losses of random predictions after two memory updates, with
/// `loss` on top, against every loss-predictor parameter.
pub fn predictor_instance(seed: u64, loss: PredictorLoss) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_model(seed, true);
    let schema = model.schema.clone();
    let encs: Vec<Array2<f64>> = (0..2)
        .map(|_| {
            let n = rng.gen_range(1..5);
            random_matrix(&mut rng, n, model.d_h())
        })
        .collect();
    let preds: Vec<_> = (0..3)
        .map(|_| {
            let k = rng.gen_range(1..3);
            let n = rng.gen_range(1..4);
            random_predictions(&mut rng, k, n, model.d_h(), &schema)
        })
        .collect();
    let truths: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| (0..p.len()).map(|_| rng.gen_range(0.0..1.5)).collect())
        .collect();
    let ids: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| model.store.group(id) == Group::Predictor)
        .collect();
    let f = |store: &ParamStore| {
        let p = &model.predictor;
        let mut g = Graph::new();
        let mut mem = p.reset_vars(&mut g, store).unwrap();
        for e in &encs {
            let e = g.input(e.clone());
            mem = p.update_vars(&mut g, store, &mem, e).unwrap().0;
        }
        let outs: Vec<_> = preds
            .iter()
            .map(|sp| p.predict_vars(&mut g, store, Some(&mem), sp).unwrap().unwrap())
            .collect();
        let l = loss(&mut g, &outs, &truths, seed);
        (g.scalar(l), g.backward(l))
    };
    let mut store = model.store.clone();
    max_fd_error(&mut store, &ids, 8, f)
}

pub fn squared_error_loss(g: &mut Graph, outs: &[Var], truths: &[Vec<f64>], _: u64) -> Var {
    let parts: Vec<_> = outs.iter().zip(truths).map(|(o, t)| mse_var(g, *o, t)).collect();
    let c = g.vcat(&parts);
    g.sum(c)
}

pub fn internal_rank(g: &mut Graph, outs: &[Var], truths: &[Vec<f64>], _: u64) -> Var {
    let mut parts = Vec::new();
    for (o, t) in outs.iter().zip(truths) {
        parts.extend(rank_var(g, *o, t));
    }
    // a draw of single-prediction samples leaves nothing to rank
    if parts.is_empty() {
        return g.sum(outs[0]);
    }
    let c = g.vcat(&parts);
    g.sum(c)
}

pub fn external_rank(g: &mut Graph, outs: &[Var], truths: &[Vec<f64>], _: u64) -> Var {
    let scores: Vec<_> = outs.iter().map(|o| top_m_var(g, *o, Some(2))).collect();
    let stats: Vec<f64> = truths.iter().map(|t| naive_importance(t, Some(2))).collect();
    let c = g.vcat(&scores);
    rank_var(g, c, &stats).unwrap()
}

/// Random linear read-out of every predicted loss.
pub fn linear_readout(g: &mut Graph, outs: &[Var], _: &[Vec<f64>], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<_> = outs
        .iter()
        .map(|o| {
            let n = g.shape(*o).0;
            let w = g.input(random_matrix(&mut rng, n, 1));
            let p = g.mul(*o, w);
            g.sum(p)
        })
        .collect();
    let c = g.vcat(&parts);
    g.sum(c)
}

/// Token and position embeddings of a three-token sentence.
pub fn encoder_instance() -> f64 {
    let model = tiny_model(7, true);
    let ids = vec![1usize, 4, 2];
    let emb = model.store.find("encoder.token_emb").unwrap();
    let pos = model.store.find("encoder.pos_emb").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = random_matrix(&mut rng, 3, model.d_h());
    let f = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = model.encoder.encode(&mut g, store, &ids).unwrap();
        let wv = g.input(w.clone());
        let p = g.mul(out, wv);
        let l = g.sum(p);
        (g.scalar(l), g.backward(l))
    };
    let mut store = model.store.clone();
    max_fd_error(&mut store, &[emb, pos], 40, f)
}

/// Every gradient instance as `(name, max relative error)`.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for s in 0..5 {
        out.push((format!("extraction/{s}"), extraction_instance(100 + s)));
    }
    let losses: [(&str, u64, PredictorLoss); 4] = [
        ("mse", 200, squared_error_loss),
        ("internal_rank", 300, internal_rank),
        ("external_rank", 400, external_rank),
        ("memory", 500, linear_readout),
    ];
    for (name, base, loss) in losses {
        for s in 0..4 {
            out.push((format!("{name}/{s}"), predictor_instance(base + s, loss)));
        }
    }
    out.push(("encoder".into(), encoder_instance()));
    out
}

pub fn importance_oracle(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let len = rng.gen_range(0..60);
        let losses: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..3.0)).collect();
        let m = if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(1..15)) };
        worst = worst.max((importance(&losses, m) - naive_importance(&losses, m)).abs());
    }
    worst
}

pub fn rank_oracle(cases: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut int, mut ext): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let len = rng.gen_range(0..25);
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..2.0)).collect();
        int = int.max((internal_rank_loss(&v) - naive_hinge(&v)).abs());
        ext = ext.max((external_rank_loss(&v) - naive_hinge(&v)).abs());
    }
    (int, ext)
}

pub fn mse_oracle(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let len = rng.gen_range(1..30);
        let t: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0)).collect();
        let p: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0)).collect();
        worst = worst.max((mse_loss(&t, &p).unwrap() - naive_mse(&t, &p)).abs());
    }
    worst
}

pub fn attention_oracle(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let heads = rng.gen_range(1..=3);
        let d = heads * rng.gen_range(1..=4);
        let qr = rng.gen_range(1..4);
        let q = random_matrix(&mut rng, qr, d);
        let rows = rng.gen_range(1..6);
        let k = random_matrix(&mut rng, rows, d);
        let dv = heads * rng.gen_range(1..=3);
        let v = random_matrix(&mut rng, rows, dv);
        let got = attention(&q, &k, &v, heads).unwrap();
        let want = naive_attention(&q, &k, &v, heads);
        for (a, b) in got.iter().zip(want.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub fn smm_oracle(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = tiny_model(3, true);
    let p = &model.predictor;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        // every other case starts from a random memory instead of the initial one
        let mut mem = p.reset(&model.store).unwrap();
        if case % 2 == 1 {
            for m in mem.matrices.iter_mut() {
                let (r, c) = m.dim();
                *m = random_matrix(&mut rng, r, c);
            }
        }
        let n = rng.gen_range(1..7);
        let enc = EncoderOutput {
            token_features: random_matrix(&mut rng, n, model.d_h()),
        };
        let up = p.smm_update(&model.store, &mem, &enc).unwrap();
        for (task, name) in [(Task::Trigger, "trigger"), (Task::Argument, "argument")] {
            let want = naive_smm_update(&model.store, name, mem.matrix(task), &enc.token_features);
            for (a, b) in up.memory.matrix(task).iter().zip(want.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

pub fn cross_entropy_oracle(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let schema = tiny_schema();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let k = rng.gen_range(0..3);
        let n = rng.gen_range(1..5);
        let preds = random_predictions(&mut rng, k, n, 4, &schema);
        let labels = LabelSet {
            triggers: (0..k).map(|_| rng.gen_range(0..schema.num_event_types())).collect(),
            arguments: (0..k)
                .map(|_| (0..n).map(|_| rng.gen_range(0..schema.num_arg_labels())).collect())
                .collect(),
        };
        let (total, _) = ee_loss(&preds, &labels).unwrap();
        let mut want = 0.0;
        for i in 0..k {
            want -= preds.trigger_probs[[i, labels.triggers[i]]].ln();
            for j in 0..n {
                want -= preds.argument_probs[[i * n + j, labels.arguments[i][j]]].ln();
            }
        }
        worst = worst.max((total - want).abs());
    }
    worst
}
