//! Experiment orchestration: active-learning loops over seeds, learning
//! curves, ablation variants, the m sweep, and their on-disk outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_corpus, records_from_pairs, split_pool, synth_corpus_with, LabelSet, Oracle, PoolState,
    Record, Sentence, SynthConfig, TaskSchema,
};
use crate::error::{Error, Result};
use crate::metrics::{f1_eval, F1Report};
use crate::model::{Model, ModelConfig};
use crate::selection::{select, SelectionConfig, Strategy, TopM};
use crate::trainer::{StepLog, Trainer, TrainerConfig};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_sentences: usize,
    pub seed: u64,
    pub noise: f64,
    pub generator: SynthConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_sentences: 2000,
            seed: 1,
            noise: 0.2,
            generator: SynthConfig::default(),
        }
    }
}

/// Where the corpus comes from: a JSONL file with its schema, or the
/// synthetic generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub path: Option<PathBuf>,
    pub schema_path: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl CorpusSpec {
    pub fn load(&self) -> Result<(TaskSchema, Vec<Record>)> {
        match &self.path {
            Some(path) => {
                let schema = match &self.schema_path {
                    Some(p) => TaskSchema::load(p)?,
                    None => TaskSchema::desk_default(),
                };
                let records = load_corpus(path, &schema)?;
                Ok((schema, records))
            }
            None => {
                let schema = match &self.schema_path {
                    Some(p) => TaskSchema::load(p)?,
                    None => TaskSchema::desk_default(),
                };
                let s = &self.synth;
                let pairs = synth_corpus_with(&schema, s.n_sentences, s.seed, s.noise, &s.generator)?;
                Ok((schema, records_from_pairs(pairs)))
            }
        }
    }
}

/// Ablation variants: memory on/off crossed with the ranking objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No memory, mean of all losses, squared error only.
    LpMean,
    /// No memory, top-m importance, ranking losses.
    LpIe,
    /// Memory and batch selection, mean of all losses, squared error only.
    MblpBatch,
    /// Memory, batch selection, top-m importance, ranking losses.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LpMean, Variant::LpIe, Variant::MblpBatch, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LpMean => "lp_mean",
            Variant::LpIe => "lp_ie",
            Variant::MblpBatch => "mblp_batch",
            Variant::Full => "full",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig) {
        let (memory, ranking, all_losses) = match self {
            Variant::LpMean => (false, false, true),
            Variant::LpIe => (false, true, false),
            Variant::MblpBatch => (true, false, true),
            Variant::Full => (true, true, false),
        };
        cfg.selection.strategy = if self == Variant::LpMean {
            Strategy::LossPred
        } else {
            Strategy::Mblp
        };
        cfg.model.predictor.memory = memory;
        cfg.trainer.ranking = ranking;
        cfg.trainer.train_predictor = true;
        if all_losses {
            cfg.selection.m = None;
            cfg.trainer.m = None;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub unlabeled_fraction: f64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub selection: SelectionConfig,
    /// Overrides the strategy wiring with an ablation variant.
    pub variant: Option<Variant>,
    pub seeds: Vec<u64>,
    /// Stop after this many query rounds (the initial random round included).
    pub max_rounds: Option<usize>,
    /// Stop once this fraction of the pool is labeled.
    pub max_labeled_fraction: Option<f64>,
    /// Stop a seed once its trigger F1 reaches this value.
    pub stop_at_trigger_f1: Option<f64>,
    /// Epoch budget of the full-supervision reference run.
    pub full_data_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSpec::default(),
            unlabeled_fraction: 0.7,
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            selection: SelectionConfig::default(),
            variant: None,
            seeds: vec![0, 1, 2, 3, 4],
            max_rounds: None,
            max_labeled_fraction: None,
            stop_at_trigger_f1: None,
            full_data_epochs: 30,
        }
    }
}

impl ExperimentConfig {
    /// Read a JSON or TOML config, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Json { line: e.line(), source: e })
        }
    }

    /// The configuration with strategy-dependent wiring filled in.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        match cfg.variant {
            Some(v) => v.apply(&mut cfg),
            None => match cfg.selection.strategy {
                Strategy::Mblp => {
                    cfg.model.predictor.memory = true;
                    cfg.trainer.train_predictor = true;
                }
                Strategy::LossPred => Variant::LpMean.apply(&mut cfg),
                _ => cfg.trainer.train_predictor = false,
            },
        }
        cfg.trainer.m = cfg.selection.m;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.selection.query_size == 0 {
            return Err(Error::InvalidArgument("query size must be at least 1".into()));
        }
        if self.selection.m == Some(0) {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        self.trainer.validate()
    }

    /// Label used in reports.
    pub fn label(&self) -> String {
        match self.variant {
            Some(v) => v.name().to_string(),
            None => self.selection.strategy.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub labeled: usize,
    pub trigger_f1: f64,
    pub argument_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurve {
    pub seed: u64,
    pub pool_size: usize,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub round: usize,
    pub labeled: f64,
    pub seeds: usize,
    pub trigger_mean: f64,
    pub trigger_std: f64,
    pub argument_mean: f64,
    pub argument_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub label: String,
    pub seeds: Vec<SeedCurve>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl LearningCurve {
    /// Per-round mean and population std over the seeds that reached the
    /// round.
    pub fn aggregate(&self) -> Vec<AggregatePoint> {
        let rounds = self.seeds.iter().map(|s| s.points.len()).max().unwrap_or(0);
        (0..rounds)
            .map(|r| {
                let pts: Vec<&CurvePoint> = self.seeds.iter().filter_map(|s| s.points.get(r)).collect();
                let col = |f: fn(&CurvePoint) -> f64| pts.iter().map(|p| f(p)).collect::<Vec<_>>();
                let (tm, ts) = mean_std(&col(|p| p.trigger_f1));
                let (am, as_) = mean_std(&col(|p| p.argument_f1));
                AggregatePoint {
                    round: r,
                    labeled: mean_std(&col(|p| p.labeled as f64)).0,
                    seeds: pts.len(),
                    trigger_mean: tm,
                    trigger_std: ts,
                    argument_mean: am,
                    argument_std: as_,
                }
            })
            .collect()
    }

    pub fn pool_size(&self) -> usize {
        self.seeds.first().map_or(0, |s| s.pool_size)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "round,labeled,trigger_f1,argument_f1,seed")?;
        for s in &self.seeds {
            for p in &s.points {
                writeln!(
                    out,
                    "{},{},{:.6},{:.6},{}",
                    p.round, p.labeled, p.trigger_f1, p.argument_f1, s.seed
                )?;
            }
        }
        Ok(())
    }
}

/// Labels needed for `value(point)` to reach `target`, interpolating linearly
/// between consecutive rounds. `None` if the curve never gets there.
pub fn labels_to_reach(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = points.iter().position(|&(_, v)| v >= target)?;
    if first == 0 {
        return Some(points[0].0);
    }
    let (x0, y0) = points[first - 1];
    let (x1, y1) = points[first];
    Some(x0 + (target - y0) / (y1 - y0) * (x1 - x0))
}

/// Value of the curve at `labeled`, interpolating linearly; clamped to the
/// first and last points.
pub fn value_at(points: &[(f64, f64)], labeled: f64) -> Option<f64> {
    let first = points.first()?;
    if labeled <= first.0 {
        return Some(first.1);
    }
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if labeled <= x1 {
            return Some(y0 + (labeled - x0) / (x1 - x0) * (y1 - y0));
        }
    }
    points.last().map(|p| p.1)
}

pub fn trigger_points(points: &[CurvePoint]) -> Vec<(f64, f64)> {
    points.iter().map(|p| (p.labeled as f64, p.trigger_f1)).collect()
}

pub fn aggregate_trigger_points(agg: &[AggregatePoint]) -> Vec<(f64, f64)> {
    agg.iter().map(|p| (p.labeled, p.trigger_mean)).collect()
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub curve: SeedCurve,
    pub logs: Vec<StepLog>,
    pub model: Model,
    pub pool: PoolState,
}

fn vocab_for(pool: &PoolState) -> Vocab {
    Vocab::build(pool.unlabeled.iter().chain(pool.labeled.iter().map(|(s, _)| s)))
}

fn test_pairs(test: &[Record]) -> Result<Vec<(Sentence, LabelSet)>> {
    test.iter()
        .map(|r| {
            r.labels
                .clone()
                .map(|l| (r.sentence.clone(), l))
                .ok_or_else(|| Error::NoGoldLabels(r.sentence.id.clone()))
        })
        .collect()
}

/// One active-learning run for one seed.
pub fn run_seed(cfg: &ExperimentConfig, schema: &TaskSchema, corpus: &[Record], seed: u64) -> Result<SeedRun> {
    let split = split_pool(corpus, cfg.unlabeled_fraction, seed)?;
    let oracle = Oracle::from_records(corpus);
    let test = test_pairs(&split.test)?;
    let mut pool = split.pool;
    let pool_size = pool.total();
    let mut model = Model::new(&cfg.model, schema, vocab_for(&pool), seed)?;
    let mut trainer = Trainer::new(&TrainerConfig {
        seed: seed.wrapping_add(1),
        ..cfg.trainer.clone()
    })?;
    let mut commit_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let label = cfg.label();

    let initial = SelectionConfig {
        strategy: Strategy::Random,
        ..cfg.selection.clone()
    };
    let plan = select(&model, &pool, &initial, seed.wrapping_mul(7919))?;
    pool.commit_round(&plan.selected, oracle.label(&plan.selected)?, schema, &mut commit_rng)?;

    let mut points = Vec::new();
    let mut logs = Vec::new();
    loop {
        let report = trainer.train_round(&mut model, &pool.labeled, pool.round)?;
        logs.extend(report.logs);
        let f1: F1Report = f1_eval(&model, &test)?;
        let point = CurvePoint {
            round: pool.round,
            labeled: pool.labeled.len(),
            trigger_f1: f1.trigger.f1,
            argument_f1: f1.argument.f1,
        };
        info!(
            "{label} seed {seed} round {}: {} labeled, trigger {:.3}, argument {:.3}",
            point.round, point.labeled, point.trigger_f1, point.argument_f1
        );
        points.push(point);
        let done = pool.unlabeled.is_empty()
            || cfg.max_rounds.is_some_and(|r| pool.round >= r)
            || cfg
                .max_labeled_fraction
                .is_some_and(|f| pool.labeled.len() as f64 >= f * pool_size as f64 - 1e-9)
            || cfg.stop_at_trigger_f1.is_some_and(|t| point.trigger_f1 >= t);
        if done {
            break;
        }
        let round_seed = seed.wrapping_mul(7919).wrapping_add(pool.round as u64);
        let plan = select(&model, &pool, &cfg.selection, round_seed)?;
        pool.commit_round(&plan.selected, oracle.label(&plan.selected)?, schema, &mut commit_rng)?;
    }
    Ok(SeedRun {
        curve: SeedCurve {
            seed,
            pool_size,
            points,
        },
        logs,
        model,
        pool,
    })
}

/// Run `f` over `items` on a pool capped by `ALEE_THREADS`.
pub fn fan_out<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let threads = std::env::var("ALEE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub curve: LearningCurve,
    pub logs: Vec<(u64, Vec<StepLog>)>,
}

/// Every seed of one configuration on an already-loaded corpus.
pub fn run_on(cfg: &ExperimentConfig, schema: &TaskSchema, corpus: &[Record]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let runs = fan_out(&cfg.seeds, |&seed| {
        let r = run_seed(&cfg, schema, corpus, seed)?;
        Ok((r.curve, r.logs))
    })?;
    let (seeds, logs): (Vec<_>, Vec<_>) = runs.into_iter().map(|(c, l)| (c.clone(), (c.seed, l))).unzip();
    Ok(ExperimentResult {
        curve: LearningCurve {
            label: cfg.label(),
            seeds,
        },
        config: cfg,
        logs,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (schema, corpus) = cfg.corpus.load()?;
    run_on(cfg, &schema, &corpus)
}

/// F1 after training on the whole pool, per seed.
pub fn full_data_f1(cfg: &ExperimentConfig, schema: &TaskSchema, corpus: &[Record]) -> Result<Vec<F1Report>> {
    let cfg = cfg.resolved();
    fan_out(&cfg.seeds, |&seed| {
        let split = split_pool(corpus, cfg.unlabeled_fraction, seed)?;
        let oracle = Oracle::from_records(corpus);
        let test = test_pairs(&split.test)?;
        let pool = split.pool;
        let ids = pool.unlabeled_ids();
        let labeled: Vec<(Sentence, LabelSet)> = pool.unlabeled.iter().cloned().zip(oracle.label(&ids)?).collect();
        let mut model = Model::new(&cfg.model, schema, vocab_for(&pool), seed)?;
        let mut trainer = Trainer::new(&TrainerConfig {
            seed: seed.wrapping_add(1),
            epochs: cfg.full_data_epochs,
            train_predictor: false,
            ..cfg.trainer.clone()
        })?;
        trainer.train_round(&mut model, &labeled, 0)?;
        f1_eval(&model, &test)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub pool_size: usize,
    pub aggregate: Vec<AggregatePoint>,
    /// Per seed: labels needed to reach the target trigger F1, if reached.
    pub labels_to_target: Option<(f64, Vec<Option<f64>>)>,
}

impl ExperimentResult {
    pub fn summary(&self, target: Option<f64>) -> Summary {
        Summary {
            label: self.curve.label.clone(),
            pool_size: self.curve.pool_size(),
            aggregate: self.curve.aggregate(),
            labels_to_target: target.map(|t| {
                let per = self
                    .curve
                    .seeds
                    .iter()
                    .map(|s| labels_to_reach(&trigger_points(&s.points), t))
                    .collect();
                (t, per)
            }),
        }
    }

    /// `curve.csv`, `summary.json` and `log.jsonl` in `dir`.
    pub fn write(&self, dir: &Path, target: Option<f64>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("curve.csv");
        let mut w = BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
        self.curve.write_csv(&mut w).map_err(|e| Error::io(&p, e))?;
        w.flush().map_err(|e| Error::io(&p, e))?;

        let p = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary(target)).expect("summary serialises");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;

        let p = dir.join("log.jsonl");
        let mut w = BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
        for (_, logs) in &self.logs {
            for l in logs {
                serde_json::to_writer(&mut w, l).map_err(|e| Error::io(&p, e.into()))?;
                w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }
}

pub const ABLATION_PERCENTAGES: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// `(percent labeled, mean trigger F1, mean argument F1)`.
    pub cells: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub curves: Vec<LearningCurve>,
}

impl AblationReport {
    pub fn cell(&self, variant: Variant, percent: usize) -> Option<(f64, f64)> {
        let row = self.rows.iter().find(|r| r.variant == variant)?;
        row.cells.iter().find(|c| c.0 == percent).map(|c| (c.1, c.2))
    }
}

/// Seed-mean F1 at `percent` of the pool labeled, interpolated per seed.
pub fn f1_at_percent(curve: &LearningCurve, percent: usize) -> (f64, f64) {
    let at = |pick: fn(&CurvePoint) -> f64| {
        let vals: Vec<f64> = curve
            .seeds
            .iter()
            .filter_map(|s| {
                let pts: Vec<(f64, f64)> = s.points.iter().map(|p| (p.labeled as f64, pick(p))).collect();
                value_at(&pts, percent as f64 / 100.0 * s.pool_size as f64)
            })
            .collect();
        mean_std(&vals).0
    };
    (at(|p| p.trigger_f1), at(|p| p.argument_f1))
}

/// The four ablation variants on identical seeds.
pub fn ablation_suite(cfg: &ExperimentConfig, schema: &TaskSchema, corpus: &[Record]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for v in Variant::ALL {
        let c = ExperimentConfig {
            variant: Some(v),
            ..cfg.clone()
        };
        let res = run_on(&c, schema, corpus)?;
        rows.push(AblationRow {
            variant: v,
            cells: ABLATION_PERCENTAGES
                .iter()
                .map(|&p| {
                    let (t, a) = f1_at_percent(&res.curve, p);
                    (p, t, a)
                })
                .collect(),
        });
        curves.push(res.curve);
    }
    Ok(AblationReport { rows, curves })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: TopM,
    /// Percent of the pool labeled when the seed-mean trigger F1 first
    /// reaches the target; `None` means more than was run.
    pub percent: Option<f64>,
    pub curve: LearningCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub full_data_f1: f64,
    pub target: f64,
    pub rows: Vec<SweepRow>,
}

/// Labels-to-target of MBLP for each `m`, where the target is
/// `target_fraction` of the full-data trigger F1.
pub fn sweep_m(
    cfg: &ExperimentConfig,
    schema: &TaskSchema,
    corpus: &[Record],
    m_values: &[TopM],
    target_fraction: f64,
) -> Result<SweepReport> {
    let full = full_data_f1(cfg, schema, corpus)?;
    let full_f1 = mean_std(&full.iter().map(|r| r.trigger.f1).collect::<Vec<_>>()).0;
    let target = target_fraction * full_f1;
    let mut rows = Vec::new();
    for &m in m_values {
        let mut c = cfg.clone();
        c.variant = None;
        c.selection.strategy = Strategy::Mblp;
        c.selection.m = m;
        c.trainer.m = m;
        let res = run_on(&c, schema, corpus)?;
        let agg = res.curve.aggregate();
        let percent = labels_to_reach(&aggregate_trigger_points(&agg), target)
            .map(|l| 100.0 * l / res.curve.pool_size() as f64);
        rows.push(SweepRow {
            m,
            percent,
            curve: res.curve,
        });
    }
    Ok(SweepReport {
        full_data_f1: full_f1,
        target,
        rows,
    })
}
