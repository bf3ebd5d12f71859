//! Two-stage grounded inference: generate a belief, query the knowledge
//! base, then generate a delexicalized response conditioned on both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{lexicalize, BeliefState, Ontology, Role};
use crate::grounding::{active_domain, db_state, select_offer, DbState, Entity, GroundingError, KnowledgeBase};
use crate::model::{ModelError, ModelParams};
use crate::serializer::{belief_prompt, parse_belief_with, render_belief, response_prompt, SerializeError};
use crate::tokenizer::Vocab;

/// Tokens reserved for the DB item when budgeting the belief-stage prompt.
const DB_ITEM_BUDGET: usize = 16;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode params: {0}")]
    Params(String),
    #[error("knowledge base has no domain to ground in")]
    NoDomain,
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub top_p: f64,
    pub temperature: f64,
    /// Argmax decoding, ties to the lowest id.
    pub greedy: bool,
    pub max_belief_tokens: usize,
    pub max_response_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            top_p: 0.5,
            temperature: 1.0,
            greedy: false,
            max_belief_tokens: 64,
            max_response_tokens: 96,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn greedy() -> Self {
        DecodeParams {
            greedy: true,
            ..DecodeParams::default()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::Params(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(DecodeError::Params(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.max_belief_tokens == 0 || self.max_response_tokens == 0 {
            return Err(DecodeError::Params("token caps must be positive".into()));
        }
        Ok(())
    }
}

/// Highest-scoring id, ties to the lowest id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Token ids of the nucleus with their renormalized probabilities.
pub fn nucleus(logits: &[f64], top_p: f64, temperature: f64) -> Vec<(u32, f64)> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as u32, ((l - max) / temperature).exp()))
        .collect();
    let sum: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= sum;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = 0;
    for (_, p) in &probs {
        mass += p;
        keep += 1;
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    probs.truncate(keep);
    for p in &mut probs {
        p.1 /= mass;
    }
    probs
}

pub fn nucleus_sample<R: Rng>(logits: &[f64], top_p: f64, temperature: f64, rng: &mut R) -> u32 {
    let kept = nucleus(logits, top_p, temperature);
    let mut u = rng.gen::<f64>();
    for &(id, p) in &kept {
        if u < p {
            return id;
        }
        u -= p;
    }
    kept.last().expect("nucleus is non-empty").0
}

fn pick<R: Rng>(logits: &[f64], dp: &DecodeParams, rng: &mut R) -> u32 {
    if dp.greedy {
        argmax(logits)
    } else {
        nucleus_sample(logits, dp.top_p, dp.temperature, rng)
    }
}

/// Sample until `stop` or `cap` tokens. All special tokens except `stop` are
/// masked out. Returns the generated ids (without `stop`) and whether the cap
/// was hit.
fn generate<R: Rng>(
    params: &ModelParams,
    vocab: &Vocab,
    prompt: &[u32],
    stop: u32,
    cap: usize,
    dp: &DecodeParams,
    rng: &mut R,
) -> Result<(Vec<u32>, bool), DecodeError> {
    let specials = vocab.special_ids();
    let mut cache = params.new_cache();
    let mut logits = params.prefill(&mut cache, prompt)?;
    let mut out = Vec::new();
    loop {
        for id in specials.all() {
            if id != stop {
                logits[id as usize] = f64::NEG_INFINITY;
            }
        }
        let next = pick(logits.as_slice().expect("contiguous logits"), dp, rng);
        if next == stop {
            return Ok((out, false));
        }
        out.push(next);
        if out.len() >= cap || cache.len() >= params.config.max_len {
            return Ok((out, true));
        }
        logits = params.step(&mut cache, next)?;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefGeneration {
    pub state: BeliefState,
    pub raw: String,
    pub malformed: bool,
    pub truncated: bool,
}

pub fn generate_belief<R: Rng>(
    params: &ModelParams,
    vocab: &Vocab,
    history: &[(Role, &str)],
    ontology: Option<&Ontology>,
    dp: &DecodeParams,
    rng: &mut R,
) -> Result<BeliefGeneration, DecodeError> {
    dp.validate()?;
    let reserve = dp.max_belief_tokens + 1 + 4 + DB_ITEM_BUDGET + dp.max_response_tokens + 1;
    let reserve = reserve.min(params.config.max_len.saturating_sub(2));
    let prompt = belief_prompt(history, vocab, params.config.max_len, reserve)?;
    let eob = vocab.special_ids().eob;
    let (ids, truncated) = generate(params, vocab, &prompt, eob, dp.max_belief_tokens, dp, rng)?;
    let raw = vocab.decode(&ids).unwrap_or_default().trim().to_string();
    let parsed = parse_belief_with(&raw, ontology);
    Ok(BeliefGeneration {
        malformed: truncated || !parsed.is_well_formed(),
        state: parsed.state,
        raw,
        truncated,
    })
}

/// What the previous turns of a session left behind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionContext {
    /// Most recent well-formed belief.
    pub belief: BeliefState,
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    /// Belief used for grounding (the generated one, or the session fallback
    /// when generation was malformed).
    pub belief: BeliefState,
    pub belief_text: String,
    pub belief_malformed: bool,
    pub db_state: DbState,
    pub delex: String,
    pub text: String,
    pub offered: Option<Entity>,
    pub response_truncated: bool,
    pub unresolved: Vec<String>,
    /// Decoded stage-two input, for debugging dumps.
    pub response_input: String,
}

fn ground<K: KnowledgeBase + ?Sized>(
    kb: &K,
    ctx: &SessionContext,
    belief: &BeliefState,
) -> Result<(String, Vec<Entity>), DecodeError> {
    let default = kb.default_domain();
    let fallback = ctx.domain.clone().or_else(|| default.clone());
    let mut candidates = Vec::new();
    candidates.extend(active_domain(&ctx.belief, belief, fallback.as_deref()));
    candidates.extend(ctx.domain.clone());
    candidates.extend(default);
    let mut last_err = None;
    for domain in candidates {
        match kb.lookup(belief, &domain) {
            Ok(matches) => return Ok((domain, matches)),
            Err(e @ GroundingError::UnknownDomain(_)) => last_err = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last_err.map_or(DecodeError::NoDomain, DecodeError::from))
}

/// One system turn: belief, fresh DB lookup, response, lexicalization.
#[allow(clippy::too_many_arguments)]
pub fn respond<K: KnowledgeBase + ?Sized, R: Rng>(
    params: &ModelParams,
    vocab: &Vocab,
    kb: &K,
    ontology: Option<&Ontology>,
    history: &[(Role, &str)],
    ctx: &SessionContext,
    dp: &DecodeParams,
    rng: &mut R,
) -> Result<TurnResult, DecodeError> {
    let generated = generate_belief(params, vocab, history, ontology, dp, rng)?;
    let belief = if generated.malformed {
        log::debug!("malformed belief {:?}; using session fallback", generated.raw);
        ctx.belief.clone()
    } else {
        generated.state.clone()
    };
    let (domain, matches) = ground(kb, ctx, &belief)?;
    let db = db_state(&matches, &domain)?;

    let reserve = dp.max_response_tokens + 1;
    let prompt = response_prompt(history, &belief, &db, vocab, params.config.max_len, reserve)?;
    let eos = vocab.special_ids().eos;
    let (ids, truncated) = generate(params, vocab, &prompt, eos, dp.max_response_tokens, dp, rng)?;
    let delex = vocab.decode(&ids).unwrap_or_default().trim().to_string();
    let offered = select_offer(&matches).cloned();
    let lex = lexicalize(&delex, offered.as_ref(), &belief);
    Ok(TurnResult {
        belief_text: render_belief(&belief),
        belief,
        belief_malformed: generated.malformed,
        db_state: db,
        delex,
        text: lex.text,
        offered,
        response_truncated: truncated,
        unresolved: lex.unresolved,
        response_input: vocab.decode(&prompt).unwrap_or_default(),
    })
}

/// A live conversation: history, grounding context and its own rng.
#[derive(Debug, Clone)]
pub struct Session {
    pub history: Vec<(Role, String)>,
    pub context: SessionContext,
    rng: ChaCha8Rng,
}

impl Session {
    pub fn new(seed: u64) -> Self {
        Session {
            history: Vec::new(),
            context: SessionContext::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn turn<K: KnowledgeBase + ?Sized>(
        &mut self,
        params: &ModelParams,
        vocab: &Vocab,
        kb: &K,
        ontology: Option<&Ontology>,
        dp: &DecodeParams,
        user: &str,
    ) -> Result<TurnResult, DecodeError> {
        let mut history: Vec<(Role, &str)> = self.history.iter().map(|(r, t)| (*r, t.as_str())).collect();
        history.push((Role::User, user));
        let result = respond(params, vocab, kb, ontology, &history, &self.context, dp, &mut self.rng)?;
        self.history.push((Role::User, user.to_string()));
        self.history.push((Role::System, result.text.clone()));
        if !result.belief_malformed {
            self.context.belief = result.belief.clone();
        }
        self.context.domain = Some(result.db_state.domain.clone());
        Ok(result)
    }
}
