//! Machine teaching: serve the bot, keep append-only session logs, rank
//! sessions by response perplexity, take corrections, count their edit cost,
//! and fine-tune on corrected turns while serving continues.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BeliefState, Corpus, Ontology, Role};
use crate::decoder::{DecodeError, DecodeParams, Session, TurnResult};
use crate::evaluator::{evaluate, EvalError, EvalReport};
use crate::grounding::{db_state, Database, DbState, GroundingError, KnowledgeBase};
use crate::model::{
    save_checkpoint, span_perplexity, train, ModelError, ModelParams, OptimConfig, OptimizerKind,
    TrainConfig,
};
use crate::serializer::{SerializeError, SpanRole, TurnExample};
use crate::tokenizer::Vocab;

pub const SLOT_EDIT_COST: u64 = 1;
pub const RESPONSE_EDIT_COST: u64 = 10;

#[derive(Debug, Error)]
pub enum TeachError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("session {session} has no turn {turn}")]
    TurnNotFound { session: String, turn: usize },
    #[error("correction has no edits")]
    EmptyCorrection,
    #[error("replacement response is empty")]
    EmptyReplacement,
    #[error("slot ({domain}, {slot}) is not in the ontology")]
    UnknownSlot { domain: String, slot: String },
    #[error("no logged sessions to rank")]
    EmptyLogs,
    #[error("k must be at least 1")]
    BadK,
    #[error("no corrections to teach from")]
    EmptyTeachCorpus,
    #[error("a teach job is already running")]
    Busy,
    #[error("no held-out corpus configured")]
    NoHeldout,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedTurn {
    pub timestamp: DateTime<Utc>,
    pub checkpoint_id: String,
    pub user: String,
    pub belief: BeliefState,
    pub belief_malformed: bool,
    pub db_state: DbState,
    pub delex: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub id: String,
    pub checkpoint_id: String,
    pub seed: u64,
    turns: Vec<LoggedTurn>,
}

impl SessionLog {
    pub fn new(id: &str, checkpoint_id: &str, seed: u64) -> Self {
        SessionLog {
            id: id.to_string(),
            checkpoint_id: checkpoint_id.to_string(),
            seed,
            turns: Vec::new(),
        }
    }

    /// Logged turns are never modified; this is the only way to add one.
    pub fn append(&mut self, turn: LoggedTurn) {
        self.turns.push(turn);
    }

    pub fn turns(&self) -> &[LoggedTurn] {
        &self.turns
    }

    /// History up to and including the user utterance of turn `index`.
    pub fn history_through(&self, index: usize) -> Vec<(Role, String)> {
        let mut out = Vec::with_capacity(2 * index + 1);
        for t in &self.turns[..index] {
            out.push((Role::User, t.user.clone()));
            out.push((Role::System, t.text.clone()));
        }
        out.push((Role::User, self.turns[index].user.clone()));
        out
    }

    /// The turn as the bot produced it.
    pub fn turn_example(&self, index: usize) -> TurnExample {
        let t = &self.turns[index];
        TurnExample {
            history: self.history_through(index),
            belief: t.belief.clone(),
            db: t.db_state.clone(),
            response: t.delex.clone(),
        }
    }
}

/// A single belief edit; `value: None` deletes the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefEdit {
    pub domain: String,
    pub slot: String,
    #[serde(default)]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub session_id: String,
    pub turn: usize,
    #[serde(default)]
    pub belief_edits: Vec<BeliefEdit>,
    #[serde(default)]
    pub response_replacement: Option<String>,
    #[serde(default)]
    pub author: String,
    #[serde(default = "Utc::now")]
    pub timestamp: DateTime<Utc>,
}

impl Correction {
    pub fn validate(&self, ontology: &Ontology) -> Result<(), TeachError> {
        if self.belief_edits.is_empty() && self.response_replacement.is_none() {
            return Err(TeachError::EmptyCorrection);
        }
        if self
            .response_replacement
            .as_deref()
            .is_some_and(|r| r.trim().is_empty())
        {
            return Err(TeachError::EmptyReplacement);
        }
        for e in &self.belief_edits {
            if !ontology.has_slot(&e.domain, &e.slot) {
                return Err(TeachError::UnknownSlot {
                    domain: e.domain.clone(),
                    slot: e.slot.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One per slot edit plus ten for a replaced response.
pub fn edit_cost(c: &Correction) -> u64 {
    c.belief_edits.len() as u64 * SLOT_EDIT_COST
        + u64::from(c.response_replacement.is_some()) * RESPONSE_EDIT_COST
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub corrections: usize,
    pub slot_edits: usize,
    pub response_replacements: usize,
    pub total: u64,
}

pub fn cost_summary<'a>(corrections: impl IntoIterator<Item = &'a Correction>) -> CostSummary {
    let mut out = CostSummary::default();
    for c in corrections {
        out.corrections += 1;
        out.slot_edits += c.belief_edits.len();
        out.response_replacements += usize::from(c.response_replacement.is_some());
        out.total += edit_cost(c);
    }
    out
}

/// The corrected training example for a logged turn. The DB state is always
/// recomputed from the corrected belief.
pub fn apply_correction<K: KnowledgeBase + ?Sized>(
    c: &Correction,
    log: &SessionLog,
    kb: &K,
    ontology: &Ontology,
) -> Result<TurnExample, TeachError> {
    c.validate(ontology)?;
    let turn = log.turns.get(c.turn).ok_or_else(|| TeachError::TurnNotFound {
        session: log.id.clone(),
        turn: c.turn,
    })?;
    let mut belief = turn.belief.clone();
    for e in &c.belief_edits {
        match &e.value {
            Some(v) => belief.insert(&e.domain, &e.slot, v),
            None => {
                belief.remove(&e.domain, &e.slot);
            }
        }
    }
    let domain = c
        .belief_edits
        .last()
        .map_or_else(|| turn.db_state.domain.clone(), |e| e.domain.clone());
    let matches = kb.lookup(&belief, &domain)?;
    Ok(TurnExample {
        history: log.history_through(c.turn),
        db: db_state(&matches, &domain)?,
        belief,
        response: c
            .response_replacement
            .clone()
            .unwrap_or_else(|| turn.delex.clone()),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSession {
    pub session_id: String,
    pub score: f64,
    pub turns: usize,
}

/// Top `k` sessions by response-span perplexity (mean or max over turns),
/// highest first, ties by session id.
pub fn rank_logs<'a>(
    logs: impl IntoIterator<Item = &'a SessionLog>,
    params: &ModelParams,
    vocab: &Vocab,
    k: usize,
    mode: RankMode,
) -> Result<Vec<RankedSession>, TeachError> {
    if k == 0 {
        return Err(TeachError::BadK);
    }
    let mut ranked = Vec::new();
    for log in logs {
        if log.turns.is_empty() {
            continue;
        }
        let mut scores = Vec::with_capacity(log.turns.len());
        for i in 0..log.turns.len() {
            let seq = log.turn_example(i).assemble(vocab, params.config.max_len)?;
            scores.push(span_perplexity(params, &seq, SpanRole::Response, vocab)?);
        }
        let score = match mode {
            RankMode::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            RankMode::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        ranked.push(RankedSession {
            session_id: log.id.clone(),
            score,
            turns: log.turns.len(),
        });
    }
    if ranked.is_empty() {
        return Err(TeachError::EmptyLogs);
    }
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.session_id.cmp(&b.session_id))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Everything needed to answer a chat turn. Swapped as a whole.
#[derive(Debug, Clone)]
pub struct Engine {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub db: Database,
    pub ontology: Ontology,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeachConfig {
    pub decode: DecodeParams,
    pub optimizer: OptimizerKind,
    pub sgd_lr: f64,
    pub adamw_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Base examples mixed in per correction example.
    pub mix_ratio: f64,
    pub rank: RankMode,
    /// Where teach-job checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TeachConfig {
    fn default() -> Self {
        TeachConfig {
            decode: DecodeParams::greedy(),
            optimizer: OptimizerKind::Sgd,
            sgd_lr: 0.05,
            adamw_lr: 1e-3,
            steps: 40,
            batch_size: 8,
            mix_ratio: 0.0,
            rank: RankMode::Mean,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TeachJobRequest {
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachJob {
    pub id: u64,
    pub status: JobStatus,
    pub corrections: usize,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub base_checkpoint: String,
    pub result_checkpoint: Option<String>,
    pub before: Option<EvalReport>,
    pub after: Option<EvalReport>,
    pub error: Option<String>,
}

struct LiveSession {
    log: SessionLog,
    session: Session,
}

/// The teaching service. Chat turns read an immutable engine snapshot;
/// at most one teach job trains at a time and swaps the engine when done.
pub struct TeachService {
    engine: RwLock<Arc<Engine>>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<LiveSession>>>>,
    corrections: Mutex<Vec<Correction>>,
    jobs: Mutex<BTreeMap<u64, TeachJob>>,
    busy: AtomicBool,
    next_job: AtomicU64,
    heldout: Option<Corpus>,
    base_examples: Vec<TurnExample>,
    eval_cache: Mutex<Option<(String, EvalReport)>>,
    pub config: TeachConfig,
}

impl TeachService {
    pub fn new(
        engine: Engine,
        heldout: Option<Corpus>,
        base_examples: Vec<TurnExample>,
        config: TeachConfig,
    ) -> Self {
        TeachService {
            engine: RwLock::new(Arc::new(engine)),
            sessions: Mutex::new(BTreeMap::new()),
            corrections: Mutex::new(Vec::new()),
            jobs: Mutex::new(BTreeMap::new()),
            busy: AtomicBool::new(false),
            next_job: AtomicU64::new(1),
            heldout,
            base_examples,
            eval_cache: Mutex::new(None),
            config,
        }
    }

    /// The engine currently serving.
    pub fn engine(&self) -> Arc<Engine> {
        Arc::clone(&self.engine.read().expect("engine lock"))
    }

    /// Respond to `text` in session `id`, creating the session on first use.
    pub fn chat_turn(&self, id: &str, text: &str) -> Result<TurnResult, TeachError> {
        let engine = self.engine();
        let live = {
            let mut sessions = self.sessions.lock().expect("sessions lock");
            Arc::clone(sessions.entry(id.to_string()).or_insert_with(|| {
                Arc::new(Mutex::new(LiveSession {
                    log: SessionLog::new(id, &engine.checkpoint_id, self.config.decode.seed),
                    session: Session::new(self.config.decode.seed),
                }))
            }))
        };
        let mut live = live.lock().expect("session lock");
        let result = live.session.turn(
            &engine.params,
            &engine.vocab,
            &engine.db,
            Some(&engine.ontology),
            &self.config.decode,
            text,
        )?;
        live.log.append(LoggedTurn {
            timestamp: Utc::now(),
            checkpoint_id: engine.checkpoint_id.clone(),
            user: text.to_string(),
            belief: result.belief.clone(),
            belief_malformed: result.belief_malformed,
            db_state: result.db_state.clone(),
            delex: result.delex.clone(),
            text: result.text.clone(),
        });
        Ok(result)
    }

    pub fn logs(&self) -> Vec<SessionLog> {
        let sessions: Vec<_> = self
            .sessions
            .lock()
            .expect("sessions lock")
            .values()
            .cloned()
            .collect();
        sessions
            .iter()
            .map(|s| s.lock().expect("session lock").log.clone())
            .collect()
    }

    pub fn log(&self, id: &str) -> Option<SessionLog> {
        let live = self.sessions.lock().expect("sessions lock").get(id).cloned()?;
        let log = live.lock().expect("session lock").log.clone();
        Some(log)
    }

    /// Insert a log recorded elsewhere (for example a chat transcript).
    pub fn import_log(&self, log: SessionLog) {
        let mut session = Session::new(log.seed);
        for t in log.turns() {
            session.history.push((Role::User, t.user.clone()));
            session.history.push((Role::System, t.text.clone()));
        }
        self.sessions.lock().expect("sessions lock").insert(
            log.id.clone(),
            Arc::new(Mutex::new(LiveSession { log, session })),
        );
    }

    pub fn rank(&self, k: usize) -> Result<Vec<RankedSession>, TeachError> {
        let engine = self.engine();
        let logs = self.logs();
        rank_logs(&logs, &engine.params, &engine.vocab, k, self.config.rank)
    }

    /// Validate and store a correction; returns its cost.
    pub fn add_correction(&self, c: Correction) -> Result<u64, TeachError> {
        let engine = self.engine();
        c.validate(&engine.ontology)?;
        let log = self
            .log(&c.session_id)
            .ok_or_else(|| TeachError::SessionNotFound(c.session_id.clone()))?;
        if c.turn >= log.turns().len() {
            return Err(TeachError::TurnNotFound {
                session: c.session_id.clone(),
                turn: c.turn,
            });
        }
        let cost = edit_cost(&c);
        self.corrections.lock().expect("corrections lock").push(c);
        Ok(cost)
    }

    pub fn corrections(&self) -> Vec<Correction> {
        self.corrections.lock().expect("corrections lock").clone()
    }

    pub fn cost_since(&self, since: Option<DateTime<Utc>>) -> CostSummary {
        let all = self.corrections();
        cost_summary(all.iter().filter(|c| since.is_none_or(|s| c.timestamp >= s)))
    }

    /// Held-out report for the serving engine, cached per checkpoint.
    pub fn eval(&self) -> Result<EvalReport, TeachError> {
        let engine = self.engine();
        if let Some((id, report)) = &*self.eval_cache.lock().expect("eval lock") {
            if *id == engine.checkpoint_id {
                return Ok(report.clone());
            }
        }
        let report = self.evaluate_engine(&engine)?;
        *self.eval_cache.lock().expect("eval lock") = Some((engine.checkpoint_id.clone(), report.clone()));
        Ok(report)
    }

    fn evaluate_engine(&self, engine: &Engine) -> Result<EvalReport, TeachError> {
        let heldout = self.heldout.as_ref().ok_or(TeachError::NoHeldout)?;
        Ok(evaluate(
            &engine.params,
            &engine.vocab,
            &engine.db,
            heldout,
            &DecodeParams::greedy(),
        )?)
    }

    pub fn job(&self, id: u64) -> Option<TeachJob> {
        self.jobs.lock().expect("jobs lock").get(&id).cloned()
    }

    /// Queue a job and run it on a background thread.
    pub fn start_job(self: &Arc<Self>, req: TeachJobRequest) -> Result<u64, TeachError> {
        let id = self.create_job(&req)?;
        let me = Arc::clone(self);
        std::thread::spawn(move || me.run_job(id, &req));
        Ok(id)
    }

    /// Queue a job and run it to completion on the calling thread.
    pub fn run_job_blocking(&self, req: TeachJobRequest) -> Result<TeachJob, TeachError> {
        let id = self.create_job(&req)?;
        self.run_job(id, &req);
        Ok(self.job(id).expect("job exists"))
    }

    fn create_job(&self, req: &TeachJobRequest) -> Result<u64, TeachError> {
        let corrections = self.corrections().len();
        if corrections == 0 {
            return Err(TeachError::EmptyTeachCorpus);
        }
        if self
            .busy
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return Err(TeachError::Busy);
        }
        let id = self.next_job.fetch_add(1, Ordering::SeqCst);
        let job = TeachJob {
            id,
            status: JobStatus::Queued,
            corrections,
            optimizer: req.optimizer.unwrap_or(self.config.optimizer),
            steps: req.steps.unwrap_or(self.config.steps),
            base_checkpoint: self.engine().checkpoint_id.clone(),
            result_checkpoint: None,
            before: None,
            after: None,
            error: None,
        };
        self.jobs.lock().expect("jobs lock").insert(id, job);
        Ok(id)
    }

    fn update_job(&self, id: u64, f: impl FnOnce(&mut TeachJob)) {
        if let Some(job) = self.jobs.lock().expect("jobs lock").get_mut(&id) {
            f(job);
        }
    }

    fn run_job(&self, id: u64, req: &TeachJobRequest) {
        self.update_job(id, |j| j.status = JobStatus::Running);
        let outcome = self.teach(id, req);
        match outcome {
            Ok((checkpoint, before, after)) => self.update_job(id, |j| {
                j.status = JobStatus::Done;
                j.result_checkpoint = Some(checkpoint);
                j.before = before;
                j.after = after;
            }),
            Err(e) => {
                log::error!("teach job {id} failed: {e}");
                self.update_job(id, |j| {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                });
            }
        }
        self.busy.store(false, Ordering::SeqCst);
    }

    /// Corrected examples for all stored corrections, plus mixed-in base
    /// examples.
    pub fn teach_examples(&self, engine: &Engine) -> Result<Vec<TurnExample>, TeachError> {
        let mut examples = Vec::new();
        for c in self.corrections() {
            let log = self
                .log(&c.session_id)
                .ok_or_else(|| TeachError::SessionNotFound(c.session_id.clone()))?;
            examples.push(apply_correction(&c, &log, &engine.db, &engine.ontology)?);
        }
        if examples.is_empty() {
            return Err(TeachError::EmptyTeachCorpus);
        }
        let extra = ((self.config.mix_ratio * examples.len() as f64).round() as usize)
            .min(self.base_examples.len());
        if extra > 0 {
            let mut base = self.base_examples.clone();
            base.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed));
            examples.extend(base.into_iter().take(extra));
        }
        Ok(examples)
    }

    #[allow(clippy::type_complexity)]
    fn teach(
        &self,
        id: u64,
        req: &TeachJobRequest,
    ) -> Result<(String, Option<EvalReport>, Option<EvalReport>), TeachError> {
        let base = self.engine();
        let examples = self.teach_examples(&base)?;
        let seqs = examples
            .iter()
            .map(|e| e.assemble(&base.vocab, base.params.config.max_len))
            .collect::<Result<Vec<_>, _>>()?;
        let before = match &self.heldout {
            Some(_) => Some(self.evaluate_engine(&base)?),
            None => None,
        };
        let kind = req.optimizer.unwrap_or(self.config.optimizer);
        let steps = req.steps.unwrap_or(self.config.steps);
        let lr = req.lr.unwrap_or(match kind {
            OptimizerKind::Sgd => self.config.sgd_lr,
            OptimizerKind::Adamw => self.config.adamw_lr,
        });
        let cfg = TrainConfig {
            epochs: steps.max(1),
            max_steps: Some(steps),
            batch_size: self.config.batch_size,
            seed: self.config.seed ^ id,
            optim: OptimConfig {
                kind,
                lr,
                warmup_frac: 0.0,
                decay: false,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        };
        let outcome = train(&base.params, &seqs, &[], &base.vocab, &cfg)?;
        let checkpoint_id = format!("{}+teach{id}", base.checkpoint_id);
        let engine = Engine {
            params: outcome.params,
            vocab: base.vocab.clone(),
            db: base.db.clone(),
            ontology: base.ontology.clone(),
            checkpoint_id: checkpoint_id.clone(),
        };
        let after = match &self.heldout {
            Some(_) => Some(self.evaluate_engine(&engine)?),
            None => None,
        };
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(ModelError::from)?;
            save_checkpoint(&engine.params, &dir.join(format!("teach-{id}.ckpt")))?;
        }
        *self.engine.write().expect("engine lock") = Arc::new(engine);
        Ok((checkpoint_id, before, after))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainSchema;
    use crate::grounding::Entity;

    fn correction(edits: usize, response: bool) -> Correction {
        Correction {
            session_id: "s".into(),
            turn: 0,
            belief_edits: (0..edits)
                .map(|i| BeliefEdit {
                    domain: "restaurant".into(),
                    slot: format!("slot{i}"),
                    value: Some("x".into()),
                })
                .collect(),
            response_replacement: response.then(|| "[restaurant_name] is nice .".to_string()),
            author: "t".into(),
            timestamp: Utc::now(),
        }
    }

    #[test]
    fn edit_costs_follow_the_weights() {
        assert_eq!(edit_cost(&correction(3, false)), 3);
        assert_eq!(edit_cost(&correction(0, true)), 10);
        assert_eq!(edit_cost(&correction(2, true)), 12);
        assert_eq!(edit_cost(&correction(3, true)), 13);
        let batch = [correction(3, true), correction(1, false), correction(0, true)];
        let s = cost_summary(&batch);
        assert_eq!(s.total, batch.iter().map(edit_cost).sum::<u64>());
        assert_eq!(s.total, 24);
        assert_eq!((s.slot_edits, s.response_replacements), (4, 2));
    }

    fn ontology() -> Ontology {
        let schema = DomainSchema {
            slots: BTreeMap::from([
                ("area".to_string(), vec!["north".to_string(), "centre".to_string()]),
                ("food".to_string(), vec!["thai".to_string()]),
            ]),
            requestable: Default::default(),
        };
        Ontology {
            domains: BTreeMap::from([("restaurant".to_string(), schema)]),
        }
    }

    fn log() -> (SessionLog, Database) {
        let db = Database::new([
            Entity::new("restaurant", "r1", [("name", "a"), ("area", "north"), ("food", "thai")]),
            Entity::new("restaurant", "r2", [("name", "b"), ("area", "centre"), ("food", "thai")]),
            Entity::new("restaurant", "r3", [("name", "c"), ("area", "centre"), ("food", "thai")]),
        ])
        .unwrap();
        let mut belief = BeliefState::new();
        belief.insert("restaurant", "area", "north");
        let mut log = SessionLog::new("s", "ckpt", 0);
        log.append(LoggedTurn {
            timestamp: Utc::now(),
            checkpoint_id: "ckpt".into(),
            user: "something in the north".into(),
            belief,
            belief_malformed: false,
            db_state: DbState::from_count("restaurant", 1),
            delex: "[restaurant_name] is in the north .".into(),
            text: "a is in the north .".into(),
        });
        (log, db)
    }

    #[test]
    fn belief_edit_recomputes_db_state() {
        let (log, db) = log();
        let mut c = correction(0, false);
        c.belief_edits.push(BeliefEdit {
            domain: "restaurant".into(),
            slot: "area".into(),
            value: Some("centre".into()),
        });
        let ex = apply_correction(&c, &log, &db, &ontology()).unwrap();
        assert_eq!(ex.belief.get("restaurant", "area"), Some("centre"));
        assert_eq!(ex.db.text, "Restaurant 2 match");
        assert_eq!(ex.response, log.turns()[0].delex);
        assert_eq!(ex.history, vec![(Role::User, "something in the north".to_string())]);
    }

    #[test]
    fn response_only_keeps_belief_and_db() {
        let (log, db) = log();
        let c = correction(0, true);
        let ex = apply_correction(&c, &log, &db, &ontology()).unwrap();
        assert_eq!(ex.belief, log.turns()[0].belief);
        assert_eq!(ex.db, log.turns()[0].db_state);
        assert_eq!(ex.response, "[restaurant_name] is nice .");
    }

    #[test]
    fn invalid_corrections_are_rejected() {
        let (log, db) = log();
        let mut c = correction(0, false);
        c.belief_edits.push(BeliefEdit {
            domain: "restaurant".into(),
            slot: "colour".into(),
            value: Some("red".into()),
        });
        assert!(matches!(
            apply_correction(&c, &log, &db, &ontology()),
            Err(TeachError::UnknownSlot { .. })
        ));
        assert!(matches!(
            apply_correction(&correction(0, false), &log, &db, &ontology()),
            Err(TeachError::EmptyCorrection)
        ));
        let mut c = correction(0, true);
        c.turn = 5;
        assert!(matches!(
            apply_correction(&c, &log, &db, &ontology()),
            Err(TeachError::TurnNotFound { .. })
        ));
    }

    #[test]
    fn correction_json_defaults() {
        let c: Correction = serde_json::from_str(
            r#"{"session_id":"s","turn":0,"belief_edits":[{"domain":"restaurant","slot":"area"}]}"#,
        )
        .unwrap();
        assert_eq!(c.belief_edits[0].value, None);
        assert_eq!(edit_cost(&c), 1);
    }
}
