//! Sentences, label sets, the JSONL corpus format, the synthetic corpus
//! generator, and active-learning pool bookkeeping.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest sentence accepted at ingestion (size of the position table).
pub const MAX_SENTENCE_LEN: usize = 128;

/// Name of the null event type; always index 0.
pub const NA: &str = "NA";

/// Event types and argument roles. Event type 0 is always [`NA`]. Argument
/// labels are ordered `[O, B-r1, I-r1, ..., B-rN, I-rN]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub event_types: Vec<String>,
    pub roles: Vec<String>,
}

impl TaskSchema {
    pub fn new(event_types: Vec<String>, roles: Vec<String>) -> Result<Self> {
        let schema = TaskSchema { event_types, roles };
        schema.validate()?;
        Ok(schema)
    }

    /// Schema with `m` event types (including NA) and `n` roles named
    /// generically.
    pub fn generic(m: usize, n: usize) -> Result<Self> {
        let mut event_types = vec![NA.to_string()];
        event_types.extend((1..m).map(|i| format!("Event{i}")));
        let roles = (1..=n).map(|i| format!("Role{i}")).collect();
        Self::new(event_types, roles)
    }

    /// The desk-scale default: 8 event types including NA, 6 roles.
    pub fn desk_default() -> Self {
        let event_types = [NA, "Attack", "Die", "Transfer", "Meet", "Arrest", "Elect", "Injure"];
        let roles = ["Agent", "Victim", "Place", "Time", "Instrument", "Recipient"];
        TaskSchema {
            event_types: event_types.iter().map(|s| s.to_string()).collect(),
            roles: roles.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.event_types.first().map(String::as_str) != Some(NA) {
            return Err(Error::Schema("event_types[0] must be \"NA\"".into()));
        }
        if self.event_types.len() < 2 {
            return Err(Error::Schema("need at least one event type besides NA".into()));
        }
        let unique: HashSet<_> = self.event_types.iter().collect();
        if unique.len() != self.event_types.len() {
            return Err(Error::Schema("duplicate event type".into()));
        }
        let unique: HashSet<_> = self.roles.iter().collect();
        if unique.len() != self.roles.len() {
            return Err(Error::Schema("duplicate role".into()));
        }
        Ok(())
    }

    /// M, including NA.
    pub fn num_event_types(&self) -> usize {
        self.event_types.len()
    }

    /// N.
    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    /// 2N + 1.
    pub fn num_arg_labels(&self) -> usize {
        2 * self.roles.len() + 1
    }

    pub fn event_index(&self, name: &str) -> Option<usize> {
        self.event_types.iter().position(|e| e == name)
    }

    pub fn begin_label(&self, role: usize) -> usize {
        1 + 2 * role
    }

    pub fn inside_label(&self, role: usize) -> usize {
        2 + 2 * role
    }

    /// Human-readable argument label (`O`, `B-Victim`, ...).
    pub fn arg_label_name(&self, label: usize) -> String {
        match bio_role(label) {
            None => "O".to_string(),
            Some((role, true)) => format!("B-{}", self.roles[role]),
            Some((role, false)) => format!("I-{}", self.roles[role]),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: TaskSchema =
            serde_json::from_str(&text).map_err(|e| Error::Json { line: 1, source: e })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("schema serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `None` for O, otherwise `(role, is_begin)`.
pub fn bio_role(label: usize) -> Option<(usize, bool)> {
    if label == 0 {
        None
    } else {
        Some(((label - 1) / 2, label % 2 == 1))
    }
}

/// Position of the first ill-formed label: an `I-r` that does not follow
/// `B-r` or `I-r`.
pub fn bio_violation(labels: &[usize]) -> Option<usize> {
    let mut prev: Option<usize> = None;
    for (j, &l) in labels.iter().enumerate() {
        if let Some((role, false)) = bio_role(l) {
            if prev != Some(role) {
                return Some(j);
            }
        }
        prev = bio_role(l).map(|(r, _)| r);
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Verb,
    #[serde(alias = "adjective")]
    Adj,
}

/// A candidate trigger: tokens `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerCandidate {
    pub start: usize,
    pub end: usize,
    pub pos: PosTag,
}

impl TriggerCandidate {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub candidates: Vec<TriggerCandidate>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of predictions the extractor makes: `k + k·n`.
    pub fn num_predictions(&self) -> usize {
        let k = self.candidates.len();
        k + k * self.tokens.len()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidSentence {
            id: self.id.clone(),
            reason,
        };
        if self.tokens.is_empty() {
            return Err(bad("empty sentence".into()));
        }
        if self.tokens.len() > max_len {
            return Err(bad(format!(
                "{} tokens exceeds the maximum of {max_len}",
                self.tokens.len()
            )));
        }
        let n = self.tokens.len();
        for (i, c) in self.candidates.iter().enumerate() {
            if c.start >= c.end {
                return Err(bad(format!("candidate {i} is an empty span")));
            }
            if c.end > n {
                return Err(bad(format!(
                    "candidate {i} span [{}, {}) out of range for {n} tokens",
                    c.start, c.end
                )));
            }
        }
        let mut spans: Vec<_> = self.candidates.iter().map(|c| (c.start, c.end)).collect();
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(bad("overlapping candidate spans".into()));
        }
        Ok(())
    }
}

/// Gold or predicted labels for one sentence. `triggers[i]` is the event type
/// of candidate `i`; `arguments[i]` is the BIO row (length n) for candidate i.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    pub triggers: Vec<usize>,
    pub arguments: Vec<Vec<usize>>,
}

impl LabelSet {
    /// All-NA labels with all-O argument rows.
    pub fn empty_for(sentence: &Sentence) -> Self {
        let k = sentence.candidates.len();
        LabelSet {
            triggers: vec![0; k],
            arguments: vec![vec![0; sentence.len()]; k],
        }
    }

    /// Check shape, index ranges, BIO well-formedness and NA consistency.
    pub fn validate(&self, sentence: &Sentence, schema: &TaskSchema) -> Result<()> {
        let bad = |reason: String| Error::InvalidLabels {
            id: sentence.id.clone(),
            reason,
        };
        let k = sentence.candidates.len();
        if self.triggers.len() != k || self.arguments.len() != k {
            return Err(bad(format!(
                "expected labels for {k} candidates, got {} triggers and {} argument rows",
                self.triggers.len(),
                self.arguments.len()
            )));
        }
        for (i, (&t, row)) in self.triggers.iter().zip(&self.arguments).enumerate() {
            if t >= schema.num_event_types() {
                return Err(bad(format!("candidate {i}: unknown event type index {t}")));
            }
            if row.len() != sentence.len() {
                return Err(bad(format!(
                    "candidate {i}: argument row has {} labels for {} tokens",
                    row.len(),
                    sentence.len()
                )));
            }
            if let Some(&l) = row.iter().find(|&&l| l >= schema.num_arg_labels()) {
                return Err(bad(format!("candidate {i}: unknown argument label index {l}")));
            }
            if let Some(j) = bio_violation(row) {
                return Err(Error::IllFormedBio {
                    id: sentence.id.clone(),
                    candidate: i,
                    token: j,
                });
            }
            if t == 0 && row.iter().any(|&l| l != 0) {
                return Err(bad(format!(
                    "candidate {i} is NA but has non-O argument labels"
                )));
            }
        }
        Ok(())
    }
}

/// One corpus line: a sentence and optional gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sentence: Sentence,
    pub labels: Option<LabelSet>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    tokens: Vec<String>,
    candidates: Vec<TriggerCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<LabelSet>,
}

/// Read a JSONL corpus, validating every record against `schema`.
pub fn load_corpus(path: &Path, schema: &TaskSchema) -> Result<Vec<Record>> {
    load_corpus_with(path, schema, MAX_SENTENCE_LEN)
}

pub fn load_corpus_with(path: &Path, schema: &TaskSchema, max_len: usize) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| Error::Json { line: i + 1, source: e })?;
        let sentence = Sentence {
            id: rec.id,
            tokens: rec.tokens,
            candidates: rec.candidates,
        };
        sentence.validate(max_len)?;
        if let Some(labels) = &rec.labels {
            labels.validate(&sentence, schema)?;
        }
        if !seen.insert(sentence.id.clone()) {
            return Err(Error::DuplicateId(sentence.id));
        }
        out.push(Record {
            sentence,
            labels: rec.labels,
        });
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let rec = JsonRecord {
            id: r.sentence.id.clone(),
            tokens: r.sentence.tokens.clone(),
            candidates: r.sentence.candidates.clone(),
            labels: r.labels.clone(),
        };
        serde_json::to_writer(&mut w, &rec).expect("record serialises");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Knobs for the synthetic generator beyond the ones every caller sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Distinct trigger words per event type.
    pub lexemes_per_type: usize,
    /// Zipf exponent over each type's trigger words.
    pub lexeme_zipf: f64,
    /// Zipf exponent over event types.
    pub type_zipf: f64,
    /// Shared filler nouns used for argument spans.
    pub filler_nouns: usize,
    /// Filler adjectives.
    pub filler_adjectives: usize,
    /// Probabilities of 1, 2, 3, ... event clauses per sentence.
    pub clause_weights: Vec<f64>,
    /// Probability an optional role is dropped from a clause.
    pub drop_role: f64,
    /// Number of distinct role markers shared by all roles, with the
    /// marker-to-role mapping rotated per event type. 0 gives every role its
    /// own marker.
    pub shared_markers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lexemes_per_type: 150,
            lexeme_zipf: 0.8,
            type_zipf: 0.8,
            filler_nouns: 60,
            filler_adjectives: 20,
            clause_weights: vec![0.5, 0.35, 0.15],
            drop_role: 0.3,
            shared_markers: 6,
        }
    }
}

/// Templated lexicon. Everything is drawn from the generator seed.
struct Lexicon {
    triggers: Vec<Vec<String>>,
    nouns: Vec<String>,
    adjectives: Vec<String>,
    markers: Vec<String>,
    /// Role indices for each event type; the first is placed before the trigger.
    frames: Vec<Vec<usize>>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr", "br", "kl",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CONNECTIVES: &[&str] = &["and", "then", "while", "after"];
const MARKERS: &[&str] = &[
    "at", "with", "to", "on", "by", "for", "from", "near", "over", "under", "into", "about",
];

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syll = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syll {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / (r as f64).powf(s)).collect()
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

impl Lexicon {
    fn build(schema: &TaskSchema, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut used: HashSet<String> = ["the", "a", "not"]
            .iter()
            .chain(CONNECTIVES)
            .chain(MARKERS)
            .map(|s| s.to_string())
            .collect();
        let m = schema.num_event_types();
        let n_roles = schema.num_roles();
        let triggers = (1..m)
            .map(|_| {
                (0..cfg.lexemes_per_type)
                    .map(|_| pseudo_word(rng, &mut used))
                    .collect()
            })
            .collect();
        let nouns = (0..cfg.filler_nouns).map(|_| pseudo_word(rng, &mut used)).collect();
        let adjectives = (0..cfg.filler_adjectives)
            .map(|_| pseudo_word(rng, &mut used))
            .collect();
        let markers = (0..n_roles)
            .map(|r| {
                MARKERS
                    .get(r)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| pseudo_word(rng, &mut used))
            })
            .collect();
        // Every role appears in some frame: frames cycle through roles.
        let mut frames = Vec::with_capacity(m - 1);
        let mut next_role = 0;
        for _ in 1..m {
            let size = rng.gen_range(2..=4).min(n_roles).max(1);
            let mut frame: Vec<usize> = Vec::with_capacity(size);
            frame.push(next_role % n_roles);
            next_role += 1;
            while frame.len() < size {
                let r = rng.gen_range(0..n_roles);
                if !frame.contains(&r) {
                    frame.push(r);
                }
            }
            frames.push(frame);
        }
        for r in 0..n_roles {
            if !frames.iter().any(|f| f.contains(&r)) {
                let k = r % frames.len();
                frames[k].push(r);
            }
        }
        Lexicon {
            triggers,
            nouns,
            adjectives,
            markers,
            frames,
        }
    }
}

struct Builder<'a> {
    tokens: Vec<String>,
    candidates: Vec<TriggerCandidate>,
    triggers: Vec<usize>,
    /// (candidate, start, end, role)
    args: Vec<(usize, usize, usize, usize)>,
    schema: &'a TaskSchema,
}

impl Builder<'_> {
    fn push(&mut self, w: &str) -> usize {
        self.tokens.push(w.to_string());
        self.tokens.len() - 1
    }

    fn filler(&mut self, lex: &Lexicon, rng: &mut ChaCha8Rng, noisy: bool) -> (usize, usize) {
        self.push(if rng.gen_bool(0.5) { "the" } else { "a" });
        let start = self.tokens.len();
        if rng.gen_bool(0.35) {
            let adj = &lex.adjectives[rng.gen_range(0..lex.adjectives.len())];
            let j = self.push(adj);
            if noisy && rng.gen_bool(0.5) {
                self.distractor(j, PosTag::Adj);
            }
        }
        let noun = &lex.nouns[rng.gen_range(0..lex.nouns.len())];
        self.push(noun);
        (start, self.tokens.len())
    }

    fn distractor(&mut self, at: usize, pos: PosTag) {
        self.candidates.push(TriggerCandidate {
            start: at,
            end: at + 1,
            pos,
        });
        self.triggers.push(0);
    }

    fn finish(self, id: String) -> (Sentence, LabelSet) {
        let n = self.tokens.len();
        // candidates sorted by position; remap argument owners accordingly
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by_key(|&i| self.candidates[i].start);
        let mut new_index = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let candidates: Vec<_> = order.iter().map(|&i| self.candidates[i]).collect();
        let triggers: Vec<_> = order.iter().map(|&i| self.triggers[i]).collect();
        let mut arguments = vec![vec![0usize; n]; candidates.len()];
        for &(cand, start, end, role) in &self.args {
            let row = &mut arguments[new_index[cand]];
            row[start] = self.schema.begin_label(role);
            for l in row.iter_mut().take(end).skip(start + 1) {
                *l = self.schema.inside_label(role);
            }
        }
        (
            Sentence {
                id,
                tokens: self.tokens,
                candidates,
            },
            LabelSet {
                triggers,
                arguments,
            },
        )
    }
}

/// Generate a labeled corpus from role-slot templates.
///
/// Each sentence holds one or more event clauses `[Agent] TRIGGER [marker
/// role-filler]...` joined by connectives. Trigger words follow a Zipf
/// distribution within each event type, and event types follow a Zipf
/// distribution too, so rare words are genuinely rare. A `noise` fraction of
/// sentences additionally carries NA distractor candidates: adjectives inside
/// fillers and trigger words used as nouns after "the". With shared markers
/// the same preposition introduces different roles for different event types,
/// so argument roles can only be read off once the trigger type is known.
pub fn synth_corpus(
    schema: &TaskSchema,
    n_sentences: usize,
    seed: u64,
    noise: f64,
) -> Result<Vec<(Sentence, LabelSet)>> {
    synth_corpus_with(schema, n_sentences, seed, noise, &SynthConfig::default())
}

pub fn synth_corpus_with(
    schema: &TaskSchema,
    n_sentences: usize,
    seed: u64,
    noise: f64,
    cfg: &SynthConfig,
) -> Result<Vec<(Sentence, LabelSet)>> {
    schema.validate()?;
    if schema.num_roles() == 0 {
        return Err(Error::Schema("synthetic corpora need at least one role".into()));
    }
    if n_sentences == 0 {
        return Err(Error::InvalidArgument("n_sentences must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise {noise} outside [0, 1]")));
    }
    if cfg.lexemes_per_type == 0 || cfg.filler_nouns == 0 || cfg.clause_weights.is_empty() {
        return Err(Error::InvalidArgument("degenerate synthetic config".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::build(schema, cfg, &mut rng);
    let n_types = schema.num_event_types() - 1;
    let type_w = zipf_weights(n_types, cfg.type_zipf);
    let lexeme_w = zipf_weights(cfg.lexemes_per_type, cfg.lexeme_zipf);
    let width = n_sentences.to_string().len();

    let mut out = Vec::with_capacity(n_sentences);
    for s in 0..n_sentences {
        // cycle event types for the first sentences so every type and role
        // shows up in any corpus of at least 10·M sentences
        let forced_type = (s < n_types).then_some(s);
        let noisy = rng.gen_bool(noise);
        let clauses = 1 + sample_weighted(&mut rng, &cfg.clause_weights);
        let mut b = Builder {
            tokens: Vec::new(),
            candidates: Vec::new(),
            triggers: Vec::new(),
            args: Vec::new(),
            schema,
        };
        for c in 0..clauses {
            if c > 0 {
                b.push(CONNECTIVES[rng.gen_range(0..CONNECTIVES.len())]);
            }
            let etype = match (c, forced_type) {
                (0, Some(t)) => t,
                _ => sample_weighted(&mut rng, &type_w),
            };
            let frame = &lex.frames[etype];
            let word = &lex.triggers[etype][sample_weighted(&mut rng, &lexeme_w)];
            let (a0, a1) = b.filler(&lex, &mut rng, noisy);
            let t = b.push(word);
            let cand = b.candidates.len();
            b.candidates.push(TriggerCandidate {
                start: t,
                end: t + 1,
                pos: PosTag::Verb,
            });
            b.triggers.push(etype + 1);
            b.args.push((cand, a0, a1, frame[0]));
            for (slot, &role) in frame.iter().enumerate().skip(1) {
                if slot > 1 && forced_type.is_none() && rng.gen_bool(cfg.drop_role) {
                    continue;
                }
                let marker = match cfg.shared_markers {
                    0 => role,
                    k => (role + etype) % k.min(lex.markers.len()),
                };
                b.push(&lex.markers[marker]);
                let (f0, f1) = b.filler(&lex, &mut rng, noisy);
                b.args.push((cand, f0, f1, role));
            }
        }
        if noisy {
            // a trigger word used as a noun is not an event
            b.push(&lex.markers[rng.gen_range(0..lex.markers.len())]);
            b.push("the");
            let t = rng.gen_range(0..n_types);
            let w = &lex.triggers[t][sample_weighted(&mut rng, &lexeme_w)];
            let j = b.push(w);
            b.distractor(j, PosTag::Noun);
        }
        out.push(b.finish(format!("s{s:0width$}")));
    }
    Ok(out)
}

/// Gold labels held back from the learner and revealed on request,
/// simulating the human annotator.
#[derive(Debug, Clone, Default)]
pub struct Oracle {
    gold: HashMap<String, LabelSet>,
}

impl Oracle {
    pub fn from_records(records: &[Record]) -> Self {
        Oracle {
            gold: records
                .iter()
                .filter_map(|r| r.labels.clone().map(|l| (r.sentence.id.clone(), l)))
                .collect(),
        }
    }

    /// Gold labels for `ids`, in request order.
    pub fn label(&self, ids: &[String]) -> Result<Vec<LabelSet>> {
        ids.iter()
            .map(|id| {
                self.gold
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::NoGoldLabels(id.clone()))
            })
            .collect()
    }
}

pub fn records_from_pairs(pairs: Vec<(Sentence, LabelSet)>) -> Vec<Record> {
    pairs
        .into_iter()
        .map(|(sentence, labels)| Record {
            sentence,
            labels: Some(labels),
        })
        .collect()
}

/// Labeled set 𝓛, unlabeled pool 𝓤, and the per-round selection history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: Vec<(Sentence, LabelSet)>,
    pub unlabeled: Vec<Sentence>,
    pub round: usize,
    pub history: Vec<Vec<String>>,
}

/// Result of [`split_pool`]: the pool and the held-out test records.
#[derive(Debug, Clone)]
pub struct Split {
    pub pool: PoolState,
    pub test: Vec<Record>,
}

/// Randomly reserve `unlabeled_fraction` of the corpus as the unlabeled pool
/// and the rest as test data. The labeled set starts empty.
pub fn split_pool(corpus: &[Record], unlabeled_fraction: f64, seed: u64) -> Result<Split> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 sentences to split a corpus".into(),
        ));
    }
    if !(unlabeled_fraction > 0.0 && unlabeled_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "unlabeled fraction {unlabeled_fraction} outside (0, 1)"
        )));
    }
    let mut ids = HashSet::new();
    for r in corpus {
        if !ids.insert(&r.sentence.id) {
            return Err(Error::DuplicateId(r.sentence.id.clone()));
        }
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_pool = ((unlabeled_fraction * corpus.len() as f64).round() as usize)
        .clamp(1, corpus.len() - 1);
    let unlabeled = order[..n_pool]
        .iter()
        .map(|&i| corpus[i].sentence.clone())
        .collect();
    let test = order[n_pool..].iter().map(|&i| corpus[i].clone()).collect();
    Ok(Split {
        pool: PoolState {
            unlabeled,
            ..PoolState::default()
        },
        test,
    })
}

impl PoolState {
    pub fn unlabeled_ids(&self) -> Vec<String> {
        self.unlabeled.iter().map(|s| s.id.clone()).collect()
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn find_unlabeled(&self, id: &str) -> Option<&Sentence> {
        self.unlabeled.iter().find(|s| s.id == id)
    }

    /// Move `ids` from 𝓤 to 𝓛 with their labels, append the round to the
    /// history, and reshuffle both sets.
    pub fn commit_round<R: Rng>(
        &mut self,
        ids: &[String],
        labels: Vec<LabelSet>,
        schema: &TaskSchema,
        rng: &mut R,
    ) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot commit an empty round".into()));
        }
        if ids.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids but {} label sets",
                ids.len(),
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate id {id} in round")));
            }
        }
        let position: HashMap<&str, usize> = self
            .unlabeled
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut picks = Vec::with_capacity(ids.len());
        for (id, l) in ids.iter().zip(&labels) {
            let &i = position
                .get(id.as_str())
                .ok_or_else(|| Error::NotInPool(id.clone()))?;
            l.validate(&self.unlabeled[i], schema)?;
            picks.push(i);
        }
        let mut taken = vec![None; self.unlabeled.len()];
        for (&i, l) in picks.iter().zip(labels) {
            taken[i] = Some(l);
        }
        let old = std::mem::take(&mut self.unlabeled);
        for (s, l) in old.into_iter().zip(taken) {
            match l {
                Some(l) => self.labeled.push((s, l)),
                None => self.unlabeled.push(s),
            }
        }
        self.round += 1;
        self.history.push(ids.to_vec());
        self.labeled.shuffle(rng);
        self.unlabeled.shuffle(rng);
        Ok(())
    }
}
