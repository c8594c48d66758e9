//! Sample encoder: per-token feature vectors shared by the extractor and the
//! loss predictor, and the scaled dot-product attention used throughout.

use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Only `"transformer"` ships with the crate; other providers implement
    /// [`SentenceEncoder`] and are installed with [`crate::model::Model::with_encoder`].
    pub provider: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 128,
            layers: 2,
            heads: 4,
            max_len: crate::corpus::MAX_SENTENCE_LEN,
            provider: "transformer".into(),
        }
    }
}

/// Token features `𝓑(S)` for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub token_features: Array2<f64>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.token_features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.token_features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.token_features.ncols()
    }

    /// Mean of the token rows in `[start, end)`.
    pub fn span_feature(&self, start: usize, end: usize) -> Array1<f64> {
        self.token_features
            .slice(s![start..end, ..])
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty span")
    }

    /// Mean over all tokens.
    pub fn mean_pooled(&self) -> Array1<f64> {
        self.span_feature(0, self.len())
    }
}

/// Pluggable provider of token features. Implementations register their
/// parameters in the model's [`ParamStore`] under [`Group::Encoder`].
pub trait SentenceEncoder: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Push the encoding of `token_ids` onto `g`; the result is `n × dim`.
    fn encode(&self, g: &mut Graph, store: &ParamStore, token_ids: &[usize]) -> Result<Var>;
}

/// Multi-head scaled dot-product attention on the tape. `query` is `q × d`,
/// `keys` is `n × d`, `values` is `n × d_v`; output is `q × d_v`. Heads split
/// the columns of all three evenly.
pub fn attend(g: &mut Graph, query: Var, keys: Var, values: Var, heads: usize) -> Result<Var> {
    let (_, dq) = g.shape(query);
    let (nk, dk) = g.shape(keys);
    let (nv, dv) = g.shape(values);
    if dq != dk {
        return Err(Error::Shape(format!("query width {dq} != key width {dk}")));
    }
    if nk != nv {
        return Err(Error::Shape(format!("{nk} keys but {nv} values")));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(Error::Shape(format!(
            "key width {dk} / value width {dv} not divisible into {heads} heads"
        )));
    }
    let hk = dk / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (query, keys, values)
        } else {
            (
                g.slice_cols(query, h * hk, (h + 1) * hk),
                g.slice_cols(keys, h * hk, (h + 1) * hk),
                g.slice_cols(values, h * hv, (h + 1) * hv),
            )
        };
        let scores = g.matmul_t(q, k);
        let scores = g.affine(scores, scale, 0.0);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, v));
    }
    Ok(if heads == 1 { outs[0] } else { g.hcat(&outs) })
}

/// [`attend`] on plain matrices.
pub fn attention(
    query: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    heads: usize,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let q = g.input(query.clone());
    let k = g.input(keys.clone());
    let v = g.input(values.clone());
    let out = attend(&mut g, q, k, v, heads)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone)]
struct Layer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Token embedding concatenated with a learned position embedding, followed
/// by post-norm bidirectional self-attention blocks.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        cfg: &EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.provider != "transformer" {
            return Err(Error::InvalidArgument(format!(
                "unknown encoder provider {:?}",
                cfg.provider
            )));
        }
        if cfg.d_h < 4 || cfg.heads == 0 || cfg.d_h % cfg.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_h {} must be >= 4 and divisible by {} heads",
                cfg.d_h, cfg.heads
            )));
        }
        let d = cfg.d_h;
        let d_pos = d / 4;
        let group = Group::Encoder;
        let token_emb = store.add_normal("token_emb", group, vocab_size.max(1), d - d_pos, 0.5, rng);
        let pos_emb = store.add_normal("pos_emb", group, cfg.max_len, d_pos, 0.5, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |n: &str| format!("layer{l}.{n}");
                Layer {
                    wq: store.add_xavier(&p("wq"), group, d, d, rng),
                    wk: store.add_xavier(&p("wk"), group, d, d, rng),
                    wv: store.add_xavier(&p("wv"), group, d, d, rng),
                    wo: store.add_xavier(&p("wo"), group, d, d, rng),
                    bo: store.add_zeros(&p("bo"), group, 1, d),
                    ln1_g: store.add_const(&p("ln1_g"), group, 1, d, 1.0),
                    ln1_b: store.add_zeros(&p("ln1_b"), group, 1, d),
                    w1: store.add_xavier(&p("w1"), group, d, 2 * d, rng),
                    b1: store.add_zeros(&p("b1"), group, 1, 2 * d),
                    w2: store.add_xavier(&p("w2"), group, 2 * d, d, rng),
                    b2: store.add_zeros(&p("b2"), group, 1, d),
                    ln2_g: store.add_const(&p("ln2_g"), group, 1, d, 1.0),
                    ln2_b: store.add_zeros(&p("ln2_b"), group, 1, d),
                }
            })
            .collect();
        Ok(TransformerEncoder {
            cfg: cfg.clone(),
            token_emb,
            pos_emb,
            layers,
        })
    }

    pub fn into_shared(self) -> Arc<dyn SentenceEncoder> {
        Arc::new(self)
    }

    fn block(&self, g: &mut Graph, store: &ParamStore, layer: &Layer, x: Var) -> Result<Var> {
        let wq = g.param(store, layer.wq);
        let wk = g.param(store, layer.wk);
        let wv = g.param(store, layer.wv);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let att = attend(g, q, k, v, self.cfg.heads)?;
        let wo = g.param(store, layer.wo);
        let bo = g.param(store, layer.bo);
        let att = g.matmul(att, wo);
        let att = g.add_row(att, bo);
        let x = g.add(x, att);
        let x = norm(g, store, x, layer.ln1_g, layer.ln1_b);

        let w1 = g.param(store, layer.w1);
        let b1 = g.param(store, layer.b1);
        let w2 = g.param(store, layer.w2);
        let b2 = g.param(store, layer.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        let x = g.add(x, h);
        Ok(norm(g, store, x, layer.ln2_g, layer.ln2_b))
    }
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let gain = g.param(store, gain);
    let bias = g.param(store, bias);
    let x = g.layer_norm(x);
    let x = g.mul_row(x, gain);
    g.add_row(x, bias)
}

impl SentenceEncoder for TransformerEncoder {
    fn dim(&self) -> usize {
        self.cfg.d_h
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, token_ids: &[usize]) -> Result<Var> {
        let n = token_ids.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
        }
        if n > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sentence of {n} tokens exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let vocab = store.value(self.token_emb).nrows();
        let ids: Vec<usize> = token_ids
            .iter()
            .map(|&t| if t < vocab { t } else { 0 })
            .collect();
        let tok = g.param_rows(store, self.token_emb, &ids);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.param_rows(store, self.pos_emb, &positions);
        let mut x = g.hcat(&[tok, pos]);
        for layer in &self.layers {
            x = self.block(g, store, layer, x)?;
        }
        Ok(x)
    }
}

/// Encode outside of training.
pub fn encode(
    encoder: &dyn SentenceEncoder,
    store: &ParamStore,
    token_ids: &[usize],
) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let out = encoder.encode(&mut g, store, token_ids)?;
    Ok(EncoderOutput {
        token_features: g.value(out).clone(),
    })
}
