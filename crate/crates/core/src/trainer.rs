//! Delayed training: the extractor is supervised on every batch, while the
//! loss predictor is supervised one step late, on predictions it made for
//! batch `b_i` with a memory fed only `b_{i-1}` and a model that had not yet
//! seen `b_{i-1}`'s update. This mirrors selection time, where candidates are
//! scored against memory of samples the model has not been trained on.

use std::io::Write;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Sentence};
use crate::error::{Error, Result};
use crate::extractor::SamplePredictions;
use crate::graph::{Graph, Gradients, Var};
use crate::mblp::MemoryVars;
use crate::model::Model;
use crate::params::{Group, Optimizer, OptimizerKind};
use crate::selection::{balance_all, TopM};

/// Indices sorted by `truth` descending; ties keep their original order.
pub fn true_order(truth: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]));
    order
}

/// Sum of squared errors between true and predicted balanced losses.
pub fn mse_loss(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} targets, {} predictions", truth.len(), pred.len())));
    }
    Ok(truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum())
}

/// Adjacent hinge `Σ [pred[j+1] − pred[j]]_+` over a list already ordered by
/// true loss, largest first.
pub fn internal_rank_loss(pred_in_true_order: &[f64]) -> f64 {
    pred_in_true_order
        .windows(2)
        .map(|w| (w[1] - w[0]).max(0.0))
        .sum()
}

/// The same hinge across the sentences of a batch, on sentence scores ordered
/// by the true sentence statistic.
pub fn external_rank_loss(scores_in_true_order: &[f64]) -> f64 {
    internal_rank_loss(scores_in_true_order)
}

/// Squared error on the tape; `pred` is `n × 1`.
pub fn mse_var(g: &mut Graph, pred: Var, truth: &[f64]) -> Var {
    let t = g.input(ndarray::Array2::from_shape_vec((truth.len(), 1), truth.to_vec()).expect("column"));
    let d = g.sub(pred, t);
    let sq = g.mul(d, d);
    g.sum(sq)
}

/// Adjacent hinge of `pred` (`n × 1`) reordered by `truth`. `None` below two
/// predictions.
pub fn rank_var(g: &mut Graph, pred: Var, truth: &[f64]) -> Option<Var> {
    if truth.len() < 2 {
        return None;
    }
    let order = true_order(truth);
    let hi = g.gather_rows(pred, &order[..order.len() - 1]);
    let lo = g.gather_rows(pred, &order[1..]);
    let d = g.sub(lo, hi);
    let h = g.relu(d);
    Some(g.sum(h))
}

/// Mean of the `m` largest predicted values, selected by predicted value.
pub fn top_m_var(g: &mut Graph, pred: Var, m: TopM) -> Var {
    let values: Vec<f64> = g.value(pred).iter().copied().collect();
    let used = m.map_or(values.len(), |m| m.min(values.len()));
    let order = true_order(&values);
    let top = g.gather_rows(pred, &order[..used]);
    g.mean(top)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_ee: f64,
    pub lr_mblp: f64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
    /// Top-m used for the sentence statistic of the external ranking loss.
    pub m: TopM,
    /// Add the internal and external ranking losses to the squared error.
    pub ranking: bool,
    /// Supervise the loss predictor at all (baselines that never query it
    /// skip this).
    pub train_predictor: bool,
    pub early_stop: bool,
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 8,
            epochs: 10,
            lr_ee: 0.05,
            lr_mblp: 0.01,
            clip: 5.0,
            optimizer: OptimizerKind::Sgd,
            m: Some(10),
            ranking: true,
            train_predictor: true,
            early_stop: true,
            patience: 3,
            min_improvement: 0.01,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be positive".into()));
        }
        if !(self.lr_ee > 0.0 && self.lr_mblp > 0.0) || self.clip < 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.m == Some(0) {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
    pub l_ee: f64,
    pub l_mse: Option<f64>,
    #[serde(rename = "l_rI")]
    pub l_ri: Option<f64>,
    #[serde(rename = "l_rE")]
    pub l_re: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochCounters {
    pub batches: usize,
    pub ee_updates: usize,
    pub mblp_updates: usize,
}

/// Provenance of one delayed supervision: the step at which the consumed
/// predictions were made, the batch the memory had been fed, and the step
/// that consumed them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayRecord {
    pub epoch: usize,
    pub consumed_at: usize,
    pub predicted_at: usize,
    pub memory_batch: usize,
    pub target_batch: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
    pub epochs: Vec<EpochCounters>,
    /// Mean per-sentence extraction loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub delays: Vec<DelayRecord>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for l in &self.logs {
            serde_json::to_writer(&mut *out, l)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Predictions for an upcoming batch, still on the tape that produced them.
#[derive(Debug)]
pub struct DelayedStepState {
    graph: Graph,
    preds: Vec<Option<Var>>,
    predicted_at: usize,
    memory_batch: usize,
    target_batch: usize,
}

impl DelayedStepState {
    pub fn target_batch(&self) -> usize {
        self.target_batch
    }
}

struct Forwarded {
    grads: Gradients,
    loss: f64,
    /// Balanced per-prediction losses, prediction order.
    targets: Vec<f64>,
    predictions: SamplePredictions,
    tokens: ndarray::Array2<f64>,
}

fn forward_labeled(model: &Model, sentence: &Sentence, labels: &LabelSet) -> Result<Forwarded> {
    let mut g = Graph::new();
    let f = model.forward_tape(&mut g, sentence)?;
    let predictions = model.extractor.predictions(&g, f.extractor.as_ref(), sentence);
    let tokens = g.value(f.tokens).clone();
    let Some(vars) = f.extractor else {
        return Ok(Forwarded {
            grads: Gradients::new(),
            loss: 0.0,
            targets: Vec::new(),
            predictions,
            tokens,
        });
    };
    let (t, a) = model.extractor.loss_vars(&mut g, &vars, labels)?;
    let per: Vec<f64> = g.value(t).iter().chain(g.value(a).iter()).copied().collect();
    let ts = g.sum(t);
    let as_ = g.sum(a);
    let total = g.add(ts, as_);
    Ok(Forwarded {
        grads: g.backward(total),
        loss: g.scalar(total),
        targets: balance_all(&per, &predictions)?,
        predictions,
        tokens,
    })
}

/// Loss-predictor objective on `g` for a set of sentences. Returns the total
/// and its `(mse, internal, external)` parts.
fn predictor_objective(
    g: &mut Graph,
    preds: &[Option<Var>],
    targets: &[&[f64]],
    cfg: &TrainerConfig,
) -> Result<Option<(Var, [f64; 3])>> {
    let mut terms = Vec::new();
    let (mut mse, mut ri) = (0.0, 0.0);
    let mut scores = Vec::with_capacity(preds.len());
    let mut true_stats = Vec::with_capacity(preds.len());
    for (p, &t) in preds.iter().zip(targets) {
        match p {
            Some(p) => {
                if g.shape(*p).0 != t.len() {
                    return Err(Error::Shape("pending predictions do not match targets".into()));
                }
                let e = mse_var(g, *p, t);
                mse += g.scalar(e);
                terms.push(e);
                if cfg.ranking {
                    if let Some(r) = rank_var(g, *p, t) {
                        ri += g.scalar(r);
                        terms.push(r);
                    }
                    scores.push(top_m_var(g, *p, cfg.m));
                    true_stats.push(crate::selection::importance(t, cfg.m));
                }
            }
            None if cfg.ranking => {
                scores.push(g.input(ndarray::Array2::zeros((1, 1))));
                true_stats.push(0.0);
            }
            None => {}
        }
    }
    let mut re = 0.0;
    if cfg.ranking && scores.len() >= 2 {
        let col = g.vcat(&scores);
        if let Some(r) = rank_var(g, col, &true_stats) {
            re = g.scalar(r);
            terms.push(r);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let all = g.vcat(&terms);
    let total = g.sum(all);
    Ok(Some((total, [mse, ri, re])))
}

/// Everything needed to run training rounds on a model: the two optimizers
/// and the batch-order RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    ee_opt: Optimizer,
    mblp_opt: Optimizer,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            ee_opt: Optimizer::new(
                cfg.optimizer,
                &[Group::Encoder, Group::Extractor],
                cfg.lr_ee,
                cfg.clip,
            ),
            mblp_opt: Optimizer::new(cfg.optimizer, &[Group::Predictor], cfg.lr_mblp, cfg.clip),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Train on `labeled` for up to `cfg.epochs` epochs, warm-starting from the
    /// current weights.
    pub fn train_round(
        &mut self,
        model: &mut Model,
        labeled: &[(Sentence, LabelSet)],
        round: usize,
    ) -> Result<TrainReport> {
        if labeled.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty labeled set".into()));
        }
        // keep at least two batches so the delayed supervision happens
        let batch_size = self.cfg.batch_size.min((labeled.len() / 2).max(1));
        let mut report = TrainReport::default();
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..labeled.len()).collect();
            order.shuffle(&mut self.rng);
            let batches: Vec<&[usize]> = order.chunks(batch_size).collect();
            let (counters, mean) = self.epoch(model, labeled, &batches, round, epoch, &mut report)?;
            report.epochs.push(counters);
            report.epoch_loss.push(mean);
            if self.cfg.early_stop && converged(&report.epoch_loss, self.cfg.patience, self.cfg.min_improvement) {
                debug!("round {round}: early stop after epoch {epoch}");
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }

    fn epoch(
        &mut self,
        model: &mut Model,
        labeled: &[(Sentence, LabelSet)],
        batches: &[&[usize]],
        round: usize,
        epoch: usize,
        report: &mut TrainReport,
    ) -> Result<(EpochCounters, f64)> {
        let memory = model.predictor.uses_memory();
        let train_predictor = self.cfg.train_predictor;
        let mut counters = EpochCounters {
            batches: batches.len(),
            ..Default::default()
        };
        let mut pending: Option<DelayedStepState> = None;
        let mut loss_sum = 0.0;
        for (i, batch) in batches.iter().enumerate() {
            // (a) extractor forward and true losses on b_i
            let fwd: Vec<Forwarded> = batch
                .iter()
                .map(|&j| forward_labeled(model, &labeled[j].0, &labeled[j].1))
                .collect::<Result<_>>()?;
            let l_ee = fwd.iter().map(|f| f.loss).sum::<f64>() / fwd.len() as f64;
            loss_sum += fwd.iter().map(|f| f.loss).sum::<f64>();
            let mut log = StepLog {
                round,
                epoch,
                step: i,
                l_ee,
                l_mse: None,
                l_ri: None,
                l_re: None,
            };
            let targets: Vec<&[f64]> = fwd.iter().map(|f| f.targets.as_slice()).collect();

            if train_predictor && memory {
                // (b) delayed supervision with the predictions made last step
                if let Some(mut p) = pending.take() {
                    if p.target_batch != i {
                        return Err(Error::InvalidArgument("pending predictions out of step".into()));
                    }
                    if let Some((loss, parts)) = predictor_objective(&mut p.graph, &p.preds, &targets, &self.cfg)? {
                        let grads = p.graph.backward(loss);
                        self.mblp_opt.step(&mut model.store, &grads);
                        counters.mblp_updates += 1;
                        set_parts(&mut log, parts, self.cfg.ranking);
                    }
                    report.delays.push(DelayRecord {
                        epoch,
                        consumed_at: i,
                        predicted_at: p.predicted_at,
                        memory_batch: p.memory_batch,
                        target_batch: p.target_batch,
                    });
                }
                // (c) fresh memory fed with b_i, (d) predictions for b_{i+1}
                if let Some(next) = batches.get(i + 1) {
                    let mut g = Graph::new();
                    let mut mem: MemoryVars = model.predictor.reset_vars(&mut g, &model.store)?;
                    for f in &fwd {
                        let enc = g.input(f.tokens.clone());
                        mem = model.predictor.update_vars(&mut g, &model.store, &mem, enc)?.0;
                    }
                    let mut preds = Vec::with_capacity(next.len());
                    for &j in next.iter() {
                        let sp = model.forward(&labeled[j].0)?.predictions;
                        preds.push(model.predictor.predict_vars(&mut g, &model.store, Some(&mem), &sp)?);
                    }
                    pending = Some(DelayedStepState {
                        graph: g,
                        preds,
                        predicted_at: i,
                        memory_batch: i,
                        target_batch: i + 1,
                    });
                }
            } else if train_predictor {
                // memory-less predictor: same-batch supervision
                let mut g = Graph::new();
                let preds: Vec<Option<Var>> = fwd
                    .iter()
                    .map(|f| model.predictor.predict_vars(&mut g, &model.store, None, &f.predictions))
                    .collect::<Result<_>>()?;
                if let Some((loss, parts)) = predictor_objective(&mut g, &preds, &targets, &self.cfg)? {
                    let grads = g.backward(loss);
                    self.mblp_opt.step(&mut model.store, &grads);
                    counters.mblp_updates += 1;
                    set_parts(&mut log, parts, self.cfg.ranking);
                }
            }

            // (e) extractor and encoder update
            let mut grads = Gradients::new();
            for f in &fwd {
                grads.accumulate(&f.grads);
            }
            grads.scale(1.0 / fwd.len() as f64);
            self.ee_opt.step(&mut model.store, &grads);
            counters.ee_updates += 1;
            report.logs.push(log);
        }
        Ok((counters, loss_sum / labeled.len() as f64))
    }
}

fn set_parts(log: &mut StepLog, parts: [f64; 3], ranking: bool) {
    log.l_mse = Some(parts[0]);
    if ranking {
        log.l_ri = Some(parts[1]);
        log.l_re = Some(parts[2]);
    }
}

/// True when the last `patience` epochs improved the loss by less than
/// `min_improvement` (relative).
pub fn converged(losses: &[f64], patience: usize, min_improvement: f64) -> bool {
    if patience == 0 || losses.len() <= patience {
        return false;
    }
    let before = losses[losses.len() - 1 - patience];
    let now = losses[losses.len() - 1];
    before <= 0.0 || (before - now) / before < min_improvement
}
