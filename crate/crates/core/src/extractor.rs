//! Joint event extraction: trigger classification over candidate span
//! features and per-trigger BIO argument labeling with an attention context.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bio_role, LabelSet, Sentence, TaskSchema};
use crate::encoder::attend;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Hidden width of both classifiers; 0 means "same as d_h".
    pub hidden: usize,
    /// Heads of the argument context attention; 0 means "same as encoder".
    pub context_heads: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            hidden: 0,
            context_heads: 0,
        }
    }
}

/// Which classifier produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Trigger,
    Argument,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Trigger, Task::Argument];

    pub fn index(self) -> usize {
        match self {
            Task::Trigger => 0,
            Task::Argument => 1,
        }
    }
}

/// Model outputs for one sentence. Prediction order everywhere in the crate
/// is: the k trigger predictions, then the k·n argument predictions in
/// (candidate, token) row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePredictions {
    pub sentence_id: String,
    pub n: usize,
    pub k: usize,
    /// `k × d_h`: span features `𝓑(S, tr_i)`.
    pub trigger_hidden: Array2<f64>,
    /// `k × M`.
    pub trigger_probs: Array2<f64>,
    /// `k·n × 3·d_h`: classifier input `[𝓑(S,tr_i); 𝓑(S,w_j); c_ij]`.
    pub argument_hidden: Array2<f64>,
    /// `k·n × (2N+1)`.
    pub argument_probs: Array2<f64>,
}

impl SamplePredictions {
    pub fn len(&self) -> usize {
        self.k + self.k * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn task_of(&self, index: usize) -> Task {
        if index < self.k {
            Task::Trigger
        } else {
            Task::Argument
        }
    }

    pub fn hidden(&self, task: Task) -> &Array2<f64> {
        match task {
            Task::Trigger => &self.trigger_hidden,
            Task::Argument => &self.argument_hidden,
        }
    }

    pub fn probs(&self, task: Task) -> &Array2<f64> {
        match task {
            Task::Trigger => &self.trigger_probs,
            Task::Argument => &self.argument_probs,
        }
    }

    /// Category count for each prediction, in prediction order.
    pub fn category_counts(&self) -> Vec<usize> {
        let mut out = vec![self.trigger_probs.ncols(); self.k];
        out.extend(std::iter::repeat_n(self.argument_probs.ncols(), self.k * self.n));
        out
    }
}

/// Flatten a label set into prediction order (trigger types, then BIO labels).
pub fn flat_targets(labels: &LabelSet) -> (Vec<usize>, Vec<usize>) {
    let triggers = labels.triggers.clone();
    let args = labels.arguments.iter().flatten().copied().collect();
    (triggers, args)
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ExtractorVars {
    pub tokens: Var,
    pub spans: Var,
    pub trigger_logits: Var,
    pub argument_input: Var,
    pub argument_logits: Var,
}

#[derive(Debug, Clone)]
pub struct Extractor {
    d_h: usize,
    heads: usize,
    num_types: usize,
    num_arg_labels: usize,
    trig_w1: ParamId,
    trig_b1: ParamId,
    trig_w2: ParamId,
    trig_b2: ParamId,
    ctx_wq: ParamId,
    arg_w1: ParamId,
    arg_b1: ParamId,
    arg_w2: ParamId,
    arg_b2: ParamId,
}

impl Extractor {
    pub fn new<R: Rng>(
        cfg: &ExtractorConfig,
        schema: &TaskSchema,
        d_h: usize,
        encoder_heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = if cfg.hidden == 0 { d_h } else { cfg.hidden };
        let heads = if cfg.context_heads == 0 {
            encoder_heads
        } else {
            cfg.context_heads
        };
        if d_h % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_h {d_h} not divisible by {heads} context heads"
            )));
        }
        let m = schema.num_event_types();
        let k_ar = schema.num_arg_labels();
        let g = Group::Extractor;
        Ok(Extractor {
            d_h,
            heads,
            num_types: m,
            num_arg_labels: k_ar,
            trig_w1: store.add_xavier("trigger.w1", g, d_h, hidden, rng),
            trig_b1: store.add_zeros("trigger.b1", g, 1, hidden),
            trig_w2: store.add_xavier("trigger.w2", g, hidden, m, rng),
            trig_b2: store.add_zeros("trigger.b2", g, 1, m),
            ctx_wq: store.add_xavier("context.wq", g, 2 * d_h, d_h, rng),
            arg_w1: store.add_xavier("argument.w1", g, 3 * d_h, hidden, rng),
            arg_b1: store.add_zeros("argument.b1", g, 1, hidden),
            arg_w2: store.add_xavier("argument.w2", g, hidden, k_ar, rng),
            arg_b2: store.add_zeros("argument.b2", g, 1, k_ar),
        })
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn num_arg_labels(&self) -> usize {
        self.num_arg_labels
    }

    fn classifier(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        w: [ParamId; 4],
    ) -> Var {
        let w1 = g.param(store, w[0]);
        let b1 = g.param(store, w[1]);
        let w2 = g.param(store, w[2]);
        let b2 = g.param(store, w[3]);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    /// Push trigger and argument logits for `sentence` given its token
    /// features `tokens` (`n × d_h`). Returns `None` when the sentence has no
    /// candidates.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        sentence: &Sentence,
    ) -> Result<Option<ExtractorVars>> {
        let (n, d) = g.shape(tokens);
        if d != self.d_h {
            return Err(Error::Shape(format!("token features {d} wide, expected {}", self.d_h)));
        }
        let k = sentence.candidates.len();
        if k == 0 {
            return Ok(None);
        }
        let mut avg = Array2::zeros((k, n));
        for (i, c) in sentence.candidates.iter().enumerate() {
            let w = 1.0 / c.len() as f64;
            for j in c.start..c.end {
                avg[[i, j]] = w;
            }
        }
        let avg = g.input(avg);
        let spans = g.matmul(avg, tokens);
        let trigger_logits = self.classifier(
            g,
            store,
            spans,
            [self.trig_w1, self.trig_b1, self.trig_w2, self.trig_b2],
        );

        let trig_rows: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let tok_rows: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let trig_rep = g.gather_rows(spans, &trig_rows);
        let tok_rep = g.gather_rows(tokens, &tok_rows);
        let pair = g.hcat(&[trig_rep, tok_rep]);
        let wq = g.param(store, self.ctx_wq);
        let query = g.matmul(pair, wq);
        let context = attend(g, query, tokens, tokens, self.heads)?;
        let argument_input = g.hcat(&[trig_rep, tok_rep, context]);
        let argument_logits = self.classifier(
            g,
            store,
            argument_input,
            [self.arg_w1, self.arg_b1, self.arg_w2, self.arg_b2],
        );
        Ok(Some(ExtractorVars {
            tokens,
            spans,
            trigger_logits,
            argument_input,
            argument_logits,
        }))
    }

    /// Per-prediction cross-entropies on the tape: `(k × 1, k·n × 1)`.
    pub fn loss_vars(
        &self,
        g: &mut Graph,
        vars: &ExtractorVars,
        labels: &LabelSet,
    ) -> Result<(Var, Var)> {
        let (triggers, args) = flat_targets(labels);
        let (k, m) = g.shape(vars.trigger_logits);
        let (kn, k_ar) = g.shape(vars.argument_logits);
        if triggers.len() != k || args.len() != kn {
            return Err(Error::Shape("labels do not cover every prediction".into()));
        }
        if triggers.iter().any(|&t| t >= m) || args.iter().any(|&a| a >= k_ar) {
            return Err(Error::InvalidArgument("label index out of range".into()));
        }
        let t = g.cross_entropy(vars.trigger_logits, &triggers);
        let a = g.cross_entropy(vars.argument_logits, &args);
        Ok((t, a))
    }

    /// Read predictions off a finished forward pass.
    pub fn predictions(
        &self,
        g: &Graph,
        vars: Option<&ExtractorVars>,
        sentence: &Sentence,
    ) -> SamplePredictions {
        let n = sentence.len();
        match vars {
            None => SamplePredictions {
                sentence_id: sentence.id.clone(),
                n,
                k: 0,
                trigger_hidden: Array2::zeros((0, self.d_h)),
                trigger_probs: Array2::zeros((0, self.num_types)),
                argument_hidden: Array2::zeros((0, 3 * self.d_h)),
                argument_probs: Array2::zeros((0, self.num_arg_labels)),
            },
            Some(v) => SamplePredictions {
                sentence_id: sentence.id.clone(),
                n,
                k: sentence.candidates.len(),
                trigger_hidden: g.value(v.spans).clone(),
                trigger_probs: softmax(g.value(v.trigger_logits)),
                argument_hidden: g.value(v.argument_input).clone(),
                argument_probs: softmax(g.value(v.argument_logits)),
            },
        }
    }
}

fn softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Cross-entropy loss of a sentence: `(𝓛_ee^S, per-prediction losses)` in
/// prediction order, natural log.
pub fn ee_loss(preds: &SamplePredictions, labels: &LabelSet) -> Result<(f64, Vec<f64>)> {
    let (triggers, args) = flat_targets(labels);
    if triggers.len() != preds.k || args.len() != preds.k * preds.n {
        return Err(Error::Shape("labels do not cover every prediction".into()));
    }
    let mut losses = Vec::with_capacity(preds.len());
    for (task, targets) in [(Task::Trigger, &triggers), (Task::Argument, &args)] {
        let probs = preds.probs(task);
        for (r, &t) in targets.iter().enumerate() {
            if t >= probs.ncols() {
                return Err(Error::InvalidArgument(format!("label index {t} out of range")));
            }
            losses.push(-probs[[r, t]].max(f64::MIN_POSITIVE).ln());
        }
    }
    Ok((losses.iter().sum(), losses))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Most likely labels, with BIO repair (a stray `I-r` becomes `B-r`) and NA
/// triggers forced to all-O argument rows.
pub fn decode(preds: &SamplePredictions) -> LabelSet {
    let triggers: Vec<usize> = (0..preds.k)
        .map(|i| argmax(preds.trigger_probs.row(i)))
        .collect();
    let arguments = (0..preds.k)
        .map(|i| {
            if triggers[i] == 0 {
                return vec![0; preds.n];
            }
            let mut row: Vec<usize> = (0..preds.n)
                .map(|j| argmax(preds.argument_probs.row(i * preds.n + j)))
                .collect();
            let mut prev = None;
            for l in row.iter_mut() {
                if let Some((role, false)) = bio_role(*l) {
                    if prev != Some(role) {
                        *l -= 1;
                    }
                }
                prev = bio_role(*l).map(|(r, _)| r);
            }
            row
        })
        .collect();
    LabelSet {
        triggers,
        arguments,
    }
}

/// One-hot predictions reproducing `labels`; inverse of [`decode`].
pub fn one_hot(sentence: &Sentence, labels: &LabelSet, schema: &TaskSchema, d_h: usize) -> SamplePredictions {
    let k = sentence.candidates.len();
    let n = sentence.len();
    let mut trigger_probs = Array2::zeros((k, schema.num_event_types()));
    let mut argument_probs = Array2::zeros((k * n, schema.num_arg_labels()));
    for i in 0..k {
        trigger_probs[[i, labels.triggers[i]]] = 1.0;
        for j in 0..n {
            argument_probs[[i * n + j, labels.arguments[i][j]]] = 1.0;
        }
    }
    SamplePredictions {
        sentence_id: sentence.id.clone(),
        n,
        k,
        trigger_hidden: Array2::zeros((k, d_h)),
        trigger_probs,
        argument_hidden: Array2::zeros((k * n, 3 * d_h)),
        argument_probs,
    }
}
