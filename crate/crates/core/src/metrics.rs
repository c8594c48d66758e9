//! Micro-averaged precision, recall and F1 for triggers and arguments.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{bio_role, LabelSet, Sentence};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let p = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf {
            precision: p,
            recall: r,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub trigger: Prf,
    pub argument: Prf,
}

/// `(start, end, role)` spans of a BIO row. A stray `I-r` opens a span.
pub fn bio_spans(row: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (j, &l) in row.iter().enumerate() {
        match bio_role(l) {
            Some((r, false)) if open.map(|o| o.1) == Some(r) => {}
            Some((r, _)) => {
                if let Some((s, or)) = open.take() {
                    spans.push((s, j, or));
                }
                open = Some((j, r));
            }
            None => {
                if let Some((s, or)) = open.take() {
                    spans.push((s, j, or));
                }
            }
        }
    }
    if let Some((s, r)) = open {
        spans.push((s, row.len(), r));
    }
    spans
}

type TriggerKey = (usize, usize, usize, usize);
type ArgumentKey = (usize, usize, usize, usize, usize);

fn tuples(idx: usize, sentence: &Sentence, labels: &LabelSet) -> (Vec<TriggerKey>, Vec<ArgumentKey>) {
    let mut trig = Vec::new();
    let mut args = Vec::new();
    for (i, c) in sentence.candidates.iter().enumerate() {
        let t = labels.triggers[i];
        if t == 0 {
            continue;
        }
        trig.push((idx, c.start, c.end, t));
        for (s, e, r) in bio_spans(&labels.arguments[i]) {
            args.push((idx, c.start, s, e, r));
        }
    }
    (trig, args)
}

/// Score predicted label sets against gold. Triggers count only when not NA;
/// arguments need the trigger candidate, the exact span and the role to match.
pub fn score(items: &[(&Sentence, &LabelSet, &LabelSet)]) -> Result<F1Report> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty test set".into()));
    }
    let (mut gt, mut ga, mut pt, mut pa) = (HashSet::new(), HashSet::new(), HashSet::new(), HashSet::new());
    for (idx, (s, gold, pred)) in items.iter().enumerate() {
        let (t, a) = tuples(idx, s, gold);
        gt.extend(t);
        ga.extend(a);
        let (t, a) = tuples(idx, s, pred);
        pt.extend(t);
        pa.extend(a);
    }
    Ok(F1Report {
        trigger: Prf::from_counts(gt.intersection(&pt).count(), pt.len(), gt.len()),
        argument: Prf::from_counts(ga.intersection(&pa).count(), pa.len(), ga.len()),
    })
}

/// Decode the model on every test sentence and score against gold.
pub fn f1_eval(model: &Model, test: &[(Sentence, LabelSet)]) -> Result<F1Report> {
    use rayon::prelude::*;
    let preds: Vec<LabelSet> = test
        .par_iter()
        .map(|(s, _)| model.predict(s))
        .collect::<Result<_>>()?;
    let items: Vec<_> = test.iter().zip(&preds).map(|((s, g), p)| (s, g, p)).collect();
    score(&items)
}
