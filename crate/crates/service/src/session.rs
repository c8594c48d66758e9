//! The annotation session: pool, model, pending tasks and staged labels, with
//! a write-ahead label journal and per-round snapshots.
//!
//! On disk (`state_dir`):
//! - `labels.jsonl`: one line per accepted label or deletion, fsynced before
//!   the request is acknowledged;
//! - `snapshot.json`: pool, pending tasks and history as of the last published
//!   round, plus how many journal lines it already reflects;
//! - `model-<version>.ckpt`: the model that produced the pending tasks.
//!
//! Boot loads the snapshot (or starts fresh) and replays the journal tail.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use alee_core::checkpoint;
use alee_core::corpus::{split_pool, LabelSet, PoolState, Sentence, TaskSchema, TriggerCandidate};
use alee_core::harness::ExperimentConfig;
use alee_core::metrics::{f1_eval, F1Report};
use alee_core::model::Model;
use alee_core::selection::{select, SelectionConfig, Strategy};
use alee_core::trainer::Trainer;
use alee_core::vocab::Vocab;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("sentence {0} is not pending")]
    UnknownId(String),
    #[error("sentence {0} is already labeled")]
    AlreadyLabeled(String),
    #[error("{0}")]
    Invalid(alee_core::Error),
    #[error("only the most recent label of the open round can be deleted")]
    NotLast,
    #[error(transparent)]
    Core(#[from] alee_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, SessionError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTask {
    pub id: String,
    pub importance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnnotationTask {
    pub id: String,
    pub tokens: Vec<String>,
    pub candidates: Vec<TriggerCandidate>,
    pub schema: TaskSchema,
    pub importance: f64,
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub round: usize,
    pub labeled: usize,
    pub trigger_f1: Option<f64>,
    pub argument_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Status {
    pub round: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub pending: usize,
    pub completed: usize,
    pub query_size: usize,
    pub training: bool,
    pub model_version: u64,
    pub latest_f1: Option<F1Report>,
    pub history: Vec<HistoryPoint>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum JournalEntry {
    Label {
        round: usize,
        id: String,
        labels: LabelSet,
    },
    Unlabel {
        round: usize,
        id: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    pool: PoolState,
    pending: Vec<PendingTask>,
    model_version: u64,
    history: Vec<HistoryPoint>,
    latest_f1: Option<F1Report>,
    journal_lines: usize,
}

struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    fn open(path: PathBuf) -> Result<(Self, Vec<JournalEntry>)> {
        let mut entries = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            let mut offset = 0;
            for (i, line) in text.split_inclusive('\n').enumerate() {
                if !line.trim().is_empty() {
                    match serde_json::from_str(line) {
                        Ok(e) => entries.push(e),
                        // a torn final write was never acknowledged: drop it
                        Err(_) if !line.ends_with('\n') => {
                            log::warn!("{}: dropping torn line {}", path.display(), i + 1);
                            let f = OpenOptions::new().write(true).open(&path).map_err(io(&path))?;
                            f.set_len(offset as u64).map_err(io(&path))?;
                            f.sync_all().map_err(io(&path))?;
                            break;
                        }
                        Err(e) => {
                            return Err(SessionError::Corrupt {
                                path,
                                reason: format!("line {}: {e}", i + 1),
                            })
                        }
                    }
                }
                offset += line.len();
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        Ok((Journal { path, file }, entries))
    }

    fn append(&mut self, e: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_vec(e).expect("journal entry serialises");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io(&self.path))?;
        self.file.sync_data().map_err(io(&self.path))
    }
}

/// Work for the background worker: train on the new labeled set, evaluate and
/// pick the next round.
pub struct RoundJob {
    model: Model,
    trainer: Trainer,
    pool: PoolState,
    test: Vec<(Sentence, LabelSet)>,
    selection: SelectionConfig,
    seed: u64,
}

pub struct RoundResult {
    model: Model,
    trainer: Trainer,
    f1: Option<F1Report>,
    pending: Vec<PendingTask>,
}

impl RoundJob {
    pub fn run(mut self) -> Result<RoundResult> {
        let round = self.pool.round;
        self.trainer.train_round(&mut self.model, &self.pool.labeled, round)?;
        let f1 = if self.test.is_empty() {
            None
        } else {
            Some(f1_eval(&self.model, &self.test)?)
        };
        let pending = if self.pool.unlabeled.is_empty() {
            Vec::new()
        } else {
            plan_tasks(&self.model, &self.pool, &self.selection, round_seed(self.seed, round))?
        };
        Ok(RoundResult {
            model: self.model,
            trainer: self.trainer,
            f1,
            pending,
        })
    }
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_mul(7919).wrapping_add(round as u64)
}

/// Selected tasks, importance-descending with ties by id.
fn plan_tasks(model: &Model, pool: &PoolState, cfg: &SelectionConfig, seed: u64) -> Result<Vec<PendingTask>> {
    let plan = select(model, pool, cfg, seed)?;
    let mut tasks: Vec<PendingTask> = plan
        .selected
        .into_iter()
        .zip(plan.scores)
        .map(|(id, importance)| PendingTask { id, importance })
        .collect();
    tasks.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.id.cmp(&b.id)));
    Ok(tasks)
}

pub struct Session {
    cfg: ExperimentConfig,
    seed: u64,
    schema: TaskSchema,
    pool: PoolState,
    test: Vec<(Sentence, LabelSet)>,
    /// Absent while a round is training.
    model: Option<(Model, Trainer)>,
    pending: Vec<PendingTask>,
    staged: Vec<(String, LabelSet)>,
    model_version: u64,
    history: Vec<HistoryPoint>,
    latest_f1: Option<F1Report>,
    journal: Journal,
    /// Journal entries applied so far, and how many of them the pool reflects.
    journal_pos: usize,
    committed_lines: usize,
    last_error: Option<String>,
    state_dir: PathBuf,
}

impl Session {
    /// Open the session in `state_dir`, resuming from its snapshot and journal
    /// when present. A round completed by the journal tail is trained before
    /// returning.
    pub fn open(cfg: &ExperimentConfig, state_dir: &Path) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        fs::create_dir_all(state_dir).map_err(io(state_dir))?;
        let seed = cfg.seeds[0];
        let (schema, corpus) = cfg.corpus.load()?;
        let split = split_pool(&corpus, cfg.unlabeled_fraction, seed)?;
        let test: Vec<(Sentence, LabelSet)> = split
            .test
            .iter()
            .filter_map(|r| r.labels.clone().map(|l| (r.sentence.clone(), l)))
            .collect();
        let (journal, entries) = Journal::open(state_dir.join("labels.jsonl"))?;
        let trainer = Trainer::new(&cfg.trainer)?;

        let snap_path = state_dir.join("snapshot.json");
        let mut session = if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(io(&snap_path))?;
            let snap: Snapshot = serde_json::from_str(&text).map_err(|e| SessionError::Corrupt {
                path: snap_path.clone(),
                reason: e.to_string(),
            })?;
            let model = checkpoint::load(&Self::checkpoint_path(state_dir, snap.model_version))?;
            if model.schema != schema {
                return Err(alee_core::Error::Schema("saved model schema differs from the corpus schema".into()).into());
            }
            info!("resuming round {} from {}", snap.pool.round, snap_path.display());
            let skip = snap.journal_lines;
            let mut s = Session {
                cfg: cfg.clone(),
                seed,
                schema,
                pool: snap.pool,
                test,
                model: Some((model, trainer)),
                pending: snap.pending,
                staged: Vec::new(),
                model_version: snap.model_version,
                history: snap.history,
                latest_f1: snap.latest_f1,
                journal,
                journal_pos: skip,
                committed_lines: skip,
                last_error: None,
                state_dir: state_dir.to_path_buf(),
            };
            if skip > entries.len() {
                return Err(SessionError::Corrupt {
                    path: s.journal.path.clone(),
                    reason: format!("snapshot reflects {skip} entries but the journal has {}", entries.len()),
                });
            }
            s.replay(&entries[skip..])?;
            s
        } else {
            let model = Model::new(&cfg.model, &schema, Vocab::build(split.pool.unlabeled.iter()), seed)?;
            // nothing is trained yet: the first round is random
            let initial = SelectionConfig {
                strategy: Strategy::Random,
                ..cfg.selection.clone()
            };
            let pending = plan_tasks(&model, &split.pool, &initial, round_seed(seed, 0))?;
            let s = Session {
                cfg: cfg.clone(),
                seed,
                schema,
                pool: split.pool,
                test,
                model: Some((model, trainer)),
                pending,
                staged: Vec::new(),
                model_version: 0,
                history: Vec::new(),
                latest_f1: None,
                journal,
                journal_pos: 0,
                committed_lines: 0,
                last_error: None,
                state_dir: state_dir.to_path_buf(),
            };
            if !entries.is_empty() {
                return Err(SessionError::Corrupt {
                    path: s.journal.path.clone(),
                    reason: "label journal present without a snapshot".into(),
                });
            }
            s.persist()?;
            s
        };
        if let Some(job) = session.close_round_if_complete()? {
            let result = job.run()?;
            session.publish(result)?;
        }
        Ok(session)
    }

    fn checkpoint_path(dir: &Path, version: u64) -> PathBuf {
        dir.join(format!("model-{version}.ckpt"))
    }

    fn replay(&mut self, entries: &[JournalEntry]) -> Result<()> {
        for e in entries {
            match e {
                JournalEntry::Label { round, id, labels } if *round == self.pool.round => {
                    self.stage(id, labels.clone())?;
                }
                JournalEntry::Unlabel { round, id } if *round == self.pool.round => {
                    self.unstage(id)?;
                }
                _ => {
                    return Err(SessionError::Corrupt {
                        path: self.journal.path.clone(),
                        reason: format!("entry {e:?} does not belong to round {}", self.pool.round),
                    })
                }
            }
            self.journal_pos += 1;
            if self.staged.len() == self.pending.len() {
                if let Some(job) = self.close_round_if_complete()? {
                    let result = job.run()?;
                    self.publish(result)?;
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn round(&self) -> usize {
        self.pool.round
    }

    pub fn is_training(&self) -> bool {
        self.model.is_none()
    }

    pub fn status(&self) -> Status {
        Status {
            round: self.pool.round,
            labeled: self.pool.labeled.len(),
            unlabeled: self.pool.unlabeled.len(),
            pending: self.pending.len() - self.staged.len(),
            completed: self.staged.len(),
            query_size: self.pending.len(),
            training: self.is_training(),
            model_version: self.model_version,
            latest_f1: self.latest_f1,
            history: self.history.clone(),
            error: self.last_error.clone(),
        }
    }

    /// Open tasks, importance-descending.
    pub fn tasks(&self, limit: Option<usize>) -> Vec<AnnotationTask> {
        self.pending
            .iter()
            .filter(|t| !self.staged.iter().any(|(id, _)| *id == t.id))
            .take(limit.unwrap_or(usize::MAX))
            .map(|t| {
                let s = self.pool.find_unlabeled(&t.id).expect("pending sentences are unlabeled");
                AnnotationTask {
                    id: t.id.clone(),
                    tokens: s.tokens.clone(),
                    candidates: s.candidates.clone(),
                    schema: self.schema.clone(),
                    importance: t.importance,
                    round: self.pool.round,
                }
            })
            .collect()
    }

    fn stage(&mut self, id: &str, labels: LabelSet) -> Result<()> {
        if self.staged.iter().any(|(s, _)| s == id) || self.pool.labeled.iter().any(|(s, _)| s.id == id) {
            return Err(SessionError::AlreadyLabeled(id.to_string()));
        }
        if !self.pending.iter().any(|t| t.id == id) {
            return Err(SessionError::UnknownId(id.to_string()));
        }
        let sentence = self.pool.find_unlabeled(id).expect("pending sentences are unlabeled");
        labels.validate(sentence, &self.schema).map_err(SessionError::Invalid)?;
        self.staged.push((id.to_string(), labels));
        Ok(())
    }

    fn unstage(&mut self, id: &str) -> Result<()> {
        match self.staged.last() {
            Some((last, _)) if last == id => {
                self.staged.pop();
                Ok(())
            }
            _ if self.pending.iter().any(|t| t.id == id) => Err(SessionError::NotLast),
            _ => Err(SessionError::UnknownId(id.to_string())),
        }
    }

    /// Validate, journal and stage a label. When it completes the round, the
    /// round is committed and the training job returned.
    pub fn submit(&mut self, id: &str, labels: LabelSet) -> Result<Option<RoundJob>> {
        self.stage(id, labels.clone())?;
        let entry = JournalEntry::Label {
            round: self.pool.round,
            id: id.to_string(),
            labels,
        };
        if let Err(e) = self.journal.append(&entry) {
            self.staged.pop();
            return Err(e);
        }
        self.journal_pos += 1;
        self.close_round_if_complete()
    }

    /// Withdraw the most recent label of the open round.
    pub fn delete_last(&mut self, id: &str) -> Result<()> {
        if self.is_training() {
            return Err(SessionError::UnknownId(id.to_string()));
        }
        self.unstage(id)?;
        let entry = JournalEntry::Unlabel {
            round: self.pool.round,
            id: id.to_string(),
        };
        if let Err(e) = self.journal.append(&entry) {
            // the deletion is not durable, so it does not happen
            return Err(e);
        }
        self.journal_pos += 1;
        Ok(())
    }

    fn close_round_if_complete(&mut self) -> Result<Option<RoundJob>> {
        if self.staged.is_empty() || self.staged.len() < self.pending.len() || self.is_training() {
            return Ok(None);
        }
        let (ids, labels): (Vec<String>, Vec<LabelSet>) = std::mem::take(&mut self.staged).into_iter().unzip();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.pool.round as u64));
        self.pool.commit_round(&ids, labels, &self.schema, &mut rng)?;
        self.pending.clear();
        self.committed_lines = self.journal_pos;
        let (model, trainer) = self.model.take().expect("not training");
        info!("round {} closed with {} labeled; training", self.pool.round, self.pool.labeled.len());
        Ok(Some(RoundJob {
            model,
            trainer,
            pool: self.pool.clone(),
            test: self.test.clone(),
            selection: self.cfg.selection.clone(),
            seed: self.seed,
        }))
    }

    /// Install a finished round: new model, evaluation and pending tasks.
    pub fn publish(&mut self, result: RoundResult) -> Result<()> {
        self.model = Some((result.model, result.trainer));
        self.pending = result.pending;
        self.latest_f1 = result.f1;
        self.history.push(HistoryPoint {
            round: self.pool.round,
            labeled: self.pool.labeled.len(),
            trigger_f1: result.f1.map(|f| f.trigger.f1),
            argument_f1: result.f1.map(|f| f.argument.f1),
        });
        self.model_version += 1;
        self.persist()
    }

    /// Recover from a failed training job: reload the last published model and
    /// leave the round committed but without tasks. The next boot retries it.
    pub fn fail(&mut self, error: &SessionError) -> Result<()> {
        log::error!("round {} failed: {error}", self.pool.round);
        self.last_error = Some(error.to_string());
        let model = checkpoint::load(&Self::checkpoint_path(&self.state_dir, self.model_version))?;
        self.model = Some((model, Trainer::new(&self.cfg.trainer)?));
        Ok(())
    }

    fn persist(&self) -> Result<()> {
        let (model, _) = self.model.as_ref().expect("not training");
        let ckpt = Self::checkpoint_path(&self.state_dir, self.model_version);
        checkpoint::save(model, &ckpt)?;
        let snap = Snapshot {
            pool: self.pool.clone(),
            pending: self.pending.clone(),
            model_version: self.model_version,
            history: self.history.clone(),
            latest_f1: self.latest_f1,
            journal_lines: self.committed_lines,
        };
        let path = self.state_dir.join("snapshot.json");
        let tmp = self.state_dir.join("snapshot.json.tmp");
        let mut f = File::create(&tmp).map_err(io(&tmp))?;
        serde_json::to_writer(&mut f, &snap).expect("snapshot serialises");
        f.sync_all().map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))?;
        if self.model_version > 0 {
            let old = Self::checkpoint_path(&self.state_dir, self.model_version - 1);
            let _ = fs::remove_file(old);
        }
        Ok(())
    }
}
