//! Sample selection: balanced losses, top-m importance, batch-based selection
//! with the memory module, and the baseline strategies.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PoolState, Sentence};
use crate::error::{Error, Result};
use crate::extractor::{SamplePredictions, Task};
use crate::model::{Forward, Model};

/// `loss / ln K`: a uniform prediction over `K` categories scores 1.
pub fn balanced(loss: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("balanced loss needs K >= 2, got {k}")));
    }
    Ok(loss / (k as f64).ln())
}

/// Balance per-prediction losses given in prediction order.
pub fn balance_all(losses: &[f64], preds: &SamplePredictions) -> Result<Vec<f64>> {
    if losses.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} predictions",
            losses.len(),
            preds.len()
        )));
    }
    losses
        .iter()
        .enumerate()
        .map(|(i, &l)| balanced(l, preds.probs(preds.task_of(i)).ncols()))
        .collect()
}

/// How many of the largest losses represent a sentence. `None` is "all of
/// them".
pub type TopM = Option<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub sentence_id: String,
    pub losses: Vec<f64>,
    pub top_m_mean: f64,
    pub m_used: usize,
}

/// Mean of the `m` largest values (all values when `m` is `None`); 0 for an
/// empty list.
pub fn importance(losses: &[f64], m: TopM) -> f64 {
    top_m(losses, m).0
}

fn top_m(losses: &[f64], m: TopM) -> (f64, usize) {
    let used = m.map_or(losses.len(), |m| m.min(losses.len()));
    if used == 0 {
        return (0.0, 0);
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted[..used].iter().sum::<f64>() / used as f64, used)
}

pub fn importance_score(sentence_id: &str, losses: Vec<f64>, m: TopM) -> ImportanceScore {
    let (top_m_mean, m_used) = top_m(&losses, m);
    ImportanceScore {
        sentence_id: sentence_id.to_string(),
        losses,
        top_m_mean,
        m_used,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mblp,
    Random,
    Uncertainty,
    Diversity,
    UncertDiver,
    LossPred,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Mblp,
        Strategy::Random,
        Strategy::Uncertainty,
        Strategy::Diversity,
        Strategy::UncertDiver,
        Strategy::LossPred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mblp => "mblp",
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Diversity => "diversity",
            Strategy::UncertDiver => "uncert_diver",
            Strategy::LossPred => "loss_pred",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub query_size: usize,
    pub m: TopM,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::Mblp,
            query_size: 50,
            m: Some(10),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCounters {
    pub scorings: usize,
    pub smm_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub strategy: Strategy,
    pub query_size: usize,
    /// Batch partition of the pool (batch-based strategies only).
    pub batches: Vec<Vec<String>>,
    /// Picked ids in pick order.
    pub selected: Vec<String>,
    /// Score of each pick (0 for random).
    pub scores: Vec<f64>,
    pub counters: SelectionCounters,
}

/// Query size actually usable on a pool of `pool` sentences.
fn clamp_query(query: usize, pool: usize) -> Result<usize> {
    if query == 0 {
        return Err(Error::InvalidArgument("query size must be at least 1".into()));
    }
    if query > pool {
        warn!("query size {query} exceeds pool of {pool}; clamping");
    }
    Ok(query.min(pool))
}

/// Indices of `ids` sorted by id, shuffled with `seed`, and split into `q`
/// near-equal batches; the remainder goes one per batch from the front.
pub fn partition(ids: &[&str], q: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if q == 0 {
        return Vec::new();
    }
    let base = ids.len() / q;
    let extra = ids.len() % q;
    let mut out = Vec::with_capacity(q);
    let mut it = order.into_iter();
    for b in 0..q {
        let size = base + usize::from(b < extra);
        out.push(it.by_ref().take(size).collect());
    }
    out
}

/// Index of the best score in `members`; ties go to the lowest id.
fn argmax_by_id(members: &[usize], scores: &[f64], ids: &[&str]) -> Option<usize> {
    members.iter().copied().reduce(|best, i| {
        match scores[i].total_cmp(&scores[best]) {
            std::cmp::Ordering::Greater => i,
            std::cmp::Ordering::Equal if ids[i] < ids[best] => i,
            _ => best,
        }
    })
}

/// Batch-based selection. `score(i)` is called once per member of each batch
/// and must reflect everything `pick(i)` has done before; `pick` is called
/// once per non-empty batch with the winner.
pub fn select_batched<S, P>(
    ids: &[&str],
    query: usize,
    seed: u64,
    mut score: S,
    mut pick: P,
) -> Result<(Vec<Vec<usize>>, Vec<usize>, Vec<f64>)>
where
    S: FnMut(usize) -> Result<f64>,
    P: FnMut(usize) -> Result<()>,
{
    let q = clamp_query(query, ids.len())?;
    let batches = partition(ids, q, seed);
    let mut scores = vec![f64::NEG_INFINITY; ids.len()];
    let mut picks = Vec::with_capacity(q);
    let mut picked_scores = Vec::with_capacity(q);
    for batch in &batches {
        for &i in batch {
            scores[i] = score(i)?;
        }
        if let Some(best) = argmax_by_id(batch, &scores, ids) {
            pick(best)?;
            picks.push(best);
            picked_scores.push(scores[best]);
        }
    }
    Ok((batches, picks, picked_scores))
}

/// Top-`q` indices by score, ties to the lowest id.
pub fn top_q(ids: &[&str], scores: &[f64], q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(ids[b])));
    order.truncate(q);
    order
}

/// Mean normalised entropy over all predictions of a sentence, in [0, 1].
pub fn uncertainty_score(preds: &SamplePredictions) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for task in Task::ALL {
        let probs = preds.probs(task);
        let norm = (probs.ncols() as f64).ln();
        for row in probs.rows() {
            let h: f64 = row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            total += h / norm;
        }
    }
    total / preds.len() as f64
}

fn distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum distance from each point to `anchors`; when there are no anchors,
/// the distance to the mean of `points`.
pub fn min_distances(points: &[Array1<f64>], anchors: &[Array1<f64>]) -> Vec<f64> {
    if anchors.is_empty() {
        if points.is_empty() {
            return Vec::new();
        }
        let mut mean = Array1::zeros(points[0].len());
        for p in points {
            mean += p;
        }
        mean /= points.len() as f64;
        return points.iter().map(|p| distance(p, &mean)).collect();
    }
    points
        .iter()
        .map(|p| {
            anchors
                .iter()
                .map(|a| distance(p, a))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Greedy farthest-first (k-center) selection of `q` points. Distances are
/// measured to the labeled set plus everything already picked; with nothing
/// labeled the first pick is the point farthest from the pool mean.
pub fn k_center(ids: &[&str], points: &[Array1<f64>], labeled: &[Array1<f64>], q: usize) -> Vec<usize> {
    let mut dist = min_distances(points, labeled);
    let mut picks = Vec::with_capacity(q);
    let mut taken = vec![false; points.len()];
    let all: Vec<usize> = (0..points.len()).collect();
    for _ in 0..q.min(points.len()) {
        let open: Vec<usize> = all.iter().copied().filter(|&i| !taken[i]).collect();
        let Some(best) = argmax_by_id(&open, &dist, ids) else {
            break;
        };
        taken[best] = true;
        picks.push(best);
        for i in 0..points.len() {
            dist[i] = dist[i].min(distance(&points[i], &points[best]));
        }
    }
    picks
}

/// Forward passes for every sentence, computed in parallel.
pub fn forward_all(model: &Model, sentences: &[Sentence]) -> Result<Vec<Forward>> {
    sentences.par_iter().map(|s| model.forward(s)).collect()
}

/// Choose the next query from `pool` with `cfg.strategy`.
pub fn select(model: &Model, pool: &PoolState, cfg: &SelectionConfig, seed: u64) -> Result<SelectionPlan> {
    let sentences = &pool.unlabeled;
    let ids: Vec<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
    let q = clamp_query(cfg.query_size, ids.len())?;
    let mut counters = SelectionCounters::default();
    let named = |idx: &[usize]| idx.iter().map(|&i| ids[i].to_string()).collect::<Vec<_>>();

    let (batches, picks, scores) = match cfg.strategy {
        Strategy::Random => {
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order.truncate(q);
            let n = order.len();
            (Vec::new(), order, vec![0.0; n])
        }
        Strategy::Mblp if model.predictor.uses_memory() => {
            let forwards = forward_all(model, sentences)?;
            let store = &model.store;
            let memory = std::cell::RefCell::new(model.predictor.reset(store)?);
            let (batches, picks, scores) = select_batched(
                &ids,
                q,
                seed,
                |i| {
                    counters.scorings += 1;
                    let preds = &forwards[i].predictions;
                    let losses = model.predictor.predict_losses(store, Some(&memory.borrow()), preds)?;
                    Ok(importance(&losses, cfg.m))
                },
                |i| {
                    counters.smm_updates += 1;
                    let next = model
                        .predictor
                        .smm_update(store, &memory.borrow(), &forwards[i].encoding)?
                        .memory;
                    *memory.borrow_mut() = next;
                    Ok(())
                },
            )?;
            (batches, picks, scores)
        }
        Strategy::Mblp | Strategy::LossPred => {
            // memory-less predictor: greedy top-Q on predicted losses
            let forwards = forward_all(model, sentences)?;
            let m = if cfg.strategy == Strategy::LossPred { None } else { cfg.m };
            let all: Vec<f64> = forwards
                .iter()
                .map(|f| {
                    counters.scorings += 1;
                    let losses = model.predictor.predict_losses(&model.store, None, &f.predictions)?;
                    Ok(importance(&losses, m))
                })
                .collect::<Result<_>>()?;
            let picks = top_q(&ids, &all, q);
            let scores = picks.iter().map(|&i| all[i]).collect();
            (Vec::new(), picks, scores)
        }
        Strategy::Uncertainty => {
            let forwards = forward_all(model, sentences)?;
            let all: Vec<f64> = forwards.iter().map(|f| uncertainty_score(&f.predictions)).collect();
            counters.scorings = all.len();
            let picks = top_q(&ids, &all, q);
            let scores = picks.iter().map(|&i| all[i]).collect();
            (Vec::new(), picks, scores)
        }
        Strategy::Diversity | Strategy::UncertDiver => {
            let forwards = forward_all(model, sentences)?;
            let points: Vec<Array1<f64>> = forwards.iter().map(|f| f.encoding.mean_pooled()).collect();
            let labeled_sentences: Vec<Sentence> = pool.labeled.iter().map(|(s, _)| s.clone()).collect();
            let labeled: Vec<Array1<f64>> = forward_all(model, &labeled_sentences)?
                .iter()
                .map(|f| f.encoding.mean_pooled())
                .collect();
            counters.scorings = points.len();
            if cfg.strategy == Strategy::Diversity {
                let picks = k_center(&ids, &points, &labeled, q);
                let n = picks.len();
                (Vec::new(), picks, vec![0.0; n])
            } else {
                let dist = min_distances(&points, &labeled);
                let max = dist.iter().copied().fold(0.0, f64::max);
                let all: Vec<f64> = forwards
                    .iter()
                    .zip(&dist)
                    .map(|(f, &d)| {
                        let d = if max > 0.0 { d / max } else { 0.0 };
                        uncertainty_score(&f.predictions) * d
                    })
                    .collect();
                let picks = top_q(&ids, &all, q);
                let scores = picks.iter().map(|&i| all[i]).collect();
                (Vec::new(), picks, scores)
            }
        }
    };
    Ok(SelectionPlan {
        strategy: cfg.strategy,
        query_size: q,
        batches: batches.iter().map(|b| named(b)).collect(),
        selected: named(&picks),
        scores,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_examples() {
        assert!((balanced(7f64.ln(), 7).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(balanced(0.0, 3).unwrap(), 0.0);
        assert!((balanced(2.0, 10).unwrap() - 0.868_588_963_806_503_6).abs() < 1e-12);
        assert!(balanced(1.0, 1).is_err());
    }

    #[test]
    fn importance_examples() {
        assert!((importance(&[0.9, 0.1, 0.5, 0.7], Some(2)) - 0.8).abs() < 1e-12);
        assert!((importance(&[0.2, 0.4], Some(10)) - 0.3).abs() < 1e-12);
        assert_eq!(importance(&[], Some(3)), 0.0);
        assert!((importance(&[1.0, 2.0, 6.0], None) - 3.0).abs() < 1e-12);
        let s = importance_score("a", vec![1.0, 2.0], Some(5));
        assert_eq!(s.m_used, 2);
    }

    #[test]
    fn partition_sizes_and_remainder() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let p = partition(&refs, 4, 3);
        let sizes: Vec<usize> = p.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        let mut all: Vec<usize> = p.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(p, partition(&refs, 4, 3));
    }

    #[test]
    fn batched_selection_picks_each_batch_max() {
        let ids = ["a", "b", "c", "d", "e", "f"];
        let scores = [0.2, 0.8, 0.5, 0.1, 0.9, 0.3];
        let (batches, picks, _) =
            select_batched(&ids, 3, 1, |i| Ok(scores[i]), |_| Ok(())).unwrap();
        for (b, p) in batches.iter().zip(&picks) {
            let best = b.iter().copied().max_by(|&x, &y| scores[x].total_cmp(&scores[y])).unwrap();
            assert_eq!(*p, best);
        }
    }

    #[test]
    fn batched_ties_go_to_lowest_id() {
        let ids = ["c", "a", "b"];
        let (_, picks, _) = select_batched(&ids, 1, 0, |_| Ok(1.0), |_| Ok(())).unwrap();
        assert_eq!(picks, vec![1]);
    }

    #[test]
    fn query_of_whole_pool_takes_everything_in_shuffle_order() {
        let ids = ["a", "b", "c", "d"];
        let (batches, picks, _) = select_batched(&ids, 4, 9, |_| Ok(0.0), |_| Ok(())).unwrap();
        assert!(batches.iter().all(|b| b.len() == 1));
        assert_eq!(picks, batches.concat());
    }

    #[test]
    fn k_center_on_collinear_points_takes_endpoints() {
        let ids = ["p0", "p1", "p2"];
        let pts: Vec<Array1<f64>> = (0..3).map(|i| Array1::from(vec![i as f64, 0.0])).collect();
        let mut picks = k_center(&ids, &pts, &[], 2);
        picks.sort();
        // brute force over all pairs: maximise the pair distance
        let mut best = (0, 0, -1.0);
        for a in 0..3 {
            for b in a + 1..3 {
                let d = distance(&pts[a], &pts[b]);
                if d > best.2 {
                    best = (a, b, d);
                }
            }
        }
        assert_eq!(picks, vec![best.0, best.1]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }
}
