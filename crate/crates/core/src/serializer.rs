//! Flattening a dialog turn (history, belief, DB state, response) into one
//! token sequence with role-labeled spans, the canonical belief string, and
//! contrastive negative sampling.
//!
//! Plain-text layout of an assembled sequence:
//!
//! ```text
//! User : ... System : ... User : ... => Belief State : Restaurant { area = north } <EOB> DB : Restaurant 1 match <EOKB> ... <EOS>
//! ```

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_value, BeliefState, Ontology, Role};
use crate::grounding::{capitalize, DbState};
use crate::tokenizer::Vocab;

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum SerializeError {
    #[error("belief, DB state and response need {needed} tokens but max_len is {max_len}")]
    OverLength { needed: usize, max_len: usize },
    #[error("history must be non-empty, alternate roles starting with a user turn, and end with a user turn")]
    BadHistory,
    #[error("contrastive pool needs at least two distinct beliefs and responses (have {beliefs} and {responses})")]
    PoolTooSmall { beliefs: usize, responses: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub belief_prefix: String,
    pub eob: String,
    pub db_prefix: String,
    pub eokb: String,
    pub eos: String,
    pub user_prefix: String,
    pub system_prefix: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            belief_prefix: "=> Belief State :".into(),
            eob: "<EOB>".into(),
            db_prefix: "DB :".into(),
            eokb: "<EOKB>".into(),
            eos: "<EOS>".into(),
            user_prefix: "User :".into(),
            system_prefix: "System :".into(),
        }
    }
}

impl SpecialTokens {
    /// In vocabulary id order.
    pub fn all(&self) -> [&str; 7] {
        [
            &self.belief_prefix,
            &self.eob,
            &self.db_prefix,
            &self.eokb,
            &self.eos,
            &self.user_prefix,
            &self.system_prefix,
        ]
    }
}

/// `Restaurant { area = north , food = chinese }`, domains in alphabetical order.
pub fn render_belief(belief: &BeliefState) -> String {
    belief
        .entries
        .iter()
        .filter(|(_, slots)| !slots.is_empty())
        .map(|(domain, slots)| {
            let pairs = slots
                .iter()
                .map(|(s, v)| format!("{s} = {v}"))
                .collect::<Vec<_>>()
                .join(" , ");
            format!("{} {{ {pairs} }}", capitalize(domain))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BeliefParseError {
    Unclosed { domain: String },
    MissingBrace { text: String },
    BadDomain { text: String },
    BadPair { domain: String, text: String },
    UnknownDomain { domain: String },
    UnknownSlot { domain: String, slot: String },
}

impl fmt::Display for BeliefParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeliefParseError::Unclosed { domain } => write!(f, "unclosed brace for {domain}"),
            BeliefParseError::MissingBrace { text } => write!(f, "expected '{{' in {text:?}"),
            BeliefParseError::BadDomain { text } => write!(f, "bad domain name {text:?}"),
            BeliefParseError::BadPair { domain, text } => {
                write!(f, "bad slot pair {text:?} in {domain}")
            }
            BeliefParseError::UnknownDomain { domain } => write!(f, "unknown domain {domain}"),
            BeliefParseError::UnknownSlot { domain, slot } => {
                write!(f, "unknown slot {slot} in {domain}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedBelief {
    pub state: BeliefState,
    pub errors: Vec<BeliefParseError>,
}

impl ParsedBelief {
    pub fn is_well_formed(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn parse_belief(text: &str) -> ParsedBelief {
    parse_belief_with(text, None)
}

/// Parse a belief string, recovering what it can. With an ontology, unknown
/// domains and slots are kept in the state and reported as errors.
pub fn parse_belief_with(text: &str, ontology: Option<&Ontology>) -> ParsedBelief {
    let mut out = ParsedBelief::default();
    let mut rest = text.trim();
    while !rest.is_empty() {
        let Some(open) = rest.find('{') else {
            out.errors.push(BeliefParseError::MissingBrace {
                text: rest.to_string(),
            });
            break;
        };
        let domain_text = rest[..open].trim();
        let after = &rest[open + 1..];
        let (body, next, closed) = match (after.find('}'), after.find('{')) {
            (Some(close), Some(nested)) if nested < close => {
                // The next domain began before this one closed.
                let cut = after[..nested].trim_end().rfind(char::is_whitespace).map_or(0, |i| i + 1);
                (&after[..cut], &after[cut..], false)
            }
            (None, Some(nested)) => {
                let cut = after[..nested].trim_end().rfind(char::is_whitespace).map_or(0, |i| i + 1);
                (&after[..cut], &after[cut..], false)
            }
            (Some(close), _) => (&after[..close], &after[close + 1..], true),
            (None, None) => (after, "", false),
        };
        rest = next.trim_start();

        let domain = normalize_value(domain_text);
        if domain.is_empty() || domain.contains('}') || domain.contains(' ') {
            out.errors.push(BeliefParseError::BadDomain {
                text: domain_text.to_string(),
            });
            continue;
        }
        if !closed {
            out.errors.push(BeliefParseError::Unclosed {
                domain: domain.clone(),
            });
        }
        if let Some(o) = ontology {
            if !o.domains.contains_key(&domain) {
                out.errors.push(BeliefParseError::UnknownDomain {
                    domain: domain.clone(),
                });
            }
        }
        for pair in body.split(',') {
            let pair = pair.trim();
            if pair.is_empty() {
                continue;
            }
            let parsed = pair.split_once('=').map(|(s, v)| {
                (
                    normalize_value(s),
                    v.split_whitespace().collect::<Vec<_>>().join(" "),
                )
            });
            match parsed {
                Some((slot, value)) if !slot.is_empty() && !value.is_empty() => {
                    if let Some(o) = ontology {
                        if o.domains.contains_key(&domain) && !o.has_slot(&domain, &slot) {
                            out.errors.push(BeliefParseError::UnknownSlot {
                                domain: domain.clone(),
                                slot: slot.clone(),
                            });
                        }
                    }
                    out.state.insert(&domain, &slot, &value);
                }
                _ => out.errors.push(BeliefParseError::BadPair {
                    domain: domain.clone(),
                    text: pair.to_string(),
                }),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    History,
    Belief,
    Db,
    Response,
    Marker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeType {
    Belief,
    Response,
    BeliefAndResponse,
}

/// Token ids of the four items before they are joined. Turn encodings carry
/// their role prefix but no leading separator; item contents exclude their
/// surrounding markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceParts {
    pub turns: Vec<Vec<u32>>,
    pub belief: Vec<u32>,
    pub db: Vec<u32>,
    pub response: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub spans: Vec<SpanRole>,
    pub contrast_label: Option<bool>,
    pub negative_type: Option<NegativeType>,
    pub parts: SequenceParts,
    pub max_len: usize,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions whose tokens are belief targets: the belief span and `<EOB>`.
    pub fn belief_targets(&self, vocab: &Vocab) -> Vec<usize> {
        self.targets(SpanRole::Belief, vocab.special_ids().eob)
    }

    /// Positions whose tokens are response targets: the response span and `<EOS>`.
    pub fn response_targets(&self, vocab: &Vocab) -> Vec<usize> {
        self.targets(SpanRole::Response, vocab.special_ids().eos)
    }

    fn targets(&self, role: SpanRole, closing: u32) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .spans
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect();
        let after = out.last().map_or_else(
            || self.first_marker_after_role(role),
            |&last| Some(last + 1),
        );
        if let Some(p) = after.filter(|&p| p < self.tokens.len() && self.tokens[p] == closing) {
            out.push(p);
        }
        out
    }

    fn first_marker_after_role(&self, role: SpanRole) -> Option<usize> {
        // Empty span: the closing marker follows the opening prefix directly.
        let prefix_end = match role {
            SpanRole::Belief => self.history_len() + 2,
            SpanRole::Response => self.history_len() + 2 + self.parts.belief.len() + 1 + 2 + self.parts.db.len() + 1,
            _ => return None,
        };
        Some(prefix_end)
    }

    fn history_len(&self) -> usize {
        self.spans
            .iter()
            .take_while(|r| **r == SpanRole::History)
            .count()
    }

    pub fn eos_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn to_text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens).unwrap_or_default()
    }
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Encode one history turn: role prefix followed by the utterance.
pub fn encode_turn(role: Role, text: &str, vocab: &Vocab) -> Vec<u32> {
    let ids = vocab.special_ids();
    let mut out = vec![match role {
        Role::User => ids.user_prefix,
        Role::System => ids.system_prefix,
    }];
    let text = normalize_ws(text);
    if !text.is_empty() {
        out.extend(vocab.encode(&format!(" {text}")));
    }
    out
}

/// Content tokens of an item: the text with a leading and trailing space.
pub fn encode_item(text: &str, vocab: &Vocab) -> Vec<u32> {
    let text = normalize_ws(text);
    if text.is_empty() {
        vocab.encode(" ")
    } else {
        vocab.encode(&format!(" {text} "))
    }
}

fn space_id(vocab: &Vocab) -> u32 {
    let ids = vocab.encode(" ");
    debug_assert_eq!(ids.len(), 1);
    ids[0]
}

fn check_history(history: &[(Role, &str)]) -> Result<(), SerializeError> {
    let alternates = history
        .iter()
        .enumerate()
        .all(|(i, (r, _))| *r == if i % 2 == 0 { Role::User } else { Role::System });
    if history.is_empty() || !alternates || history.last().map(|t| t.0) != Some(Role::User) {
        return Err(SerializeError::BadHistory);
    }
    Ok(())
}

/// Joined history tokens starting at turn `first`.
fn join_turns(turns: &[Vec<u32>], first: usize, space: u32) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, t) in turns[first..].iter().enumerate() {
        if i > 0 {
            out.push(space);
        }
        out.extend_from_slice(t);
    }
    out
}

/// Drop whole oldest user/system pairs until `history + tail ≤ max_len`. When
/// only the final user turn is left and it still does not fit, its oldest
/// tokens after the role prefix are cut.
fn truncate_history(
    turns: &[Vec<u32>],
    tail: usize,
    max_len: usize,
    space: u32,
) -> Result<Vec<u32>, SerializeError> {
    if tail + 1 > max_len {
        return Err(SerializeError::OverLength {
            needed: tail + 1,
            max_len,
        });
    }
    let mut first = 0;
    loop {
        let joined = join_turns(turns, first, space);
        if joined.len() + tail <= max_len {
            return Ok(joined);
        }
        if first + 2 < turns.len() {
            first += 2;
        } else {
            let budget = max_len - tail;
            let mut out = vec![joined[0]];
            out.extend_from_slice(&joined[joined.len() - (budget - 1)..]);
            return Ok(out);
        }
    }
}

impl SequenceParts {
    pub fn new(
        history: &[(Role, &str)],
        belief: &BeliefState,
        db: &DbState,
        response: &str,
        vocab: &Vocab,
    ) -> Result<Self, SerializeError> {
        check_history(history)?;
        Ok(SequenceParts {
            turns: history
                .iter()
                .map(|(r, t)| encode_turn(*r, t, vocab))
                .collect(),
            belief: encode_item(&render_belief(belief), vocab),
            db: encode_item(&db.text, vocab),
            response: encode_item(response, vocab),
        })
    }

    fn tail_len(&self) -> usize {
        2 + self.belief.len() + 1 + 2 + self.db.len() + 1 + self.response.len() + 1
    }

    pub fn assemble(&self, vocab: &Vocab, max_len: usize) -> Result<TrainingSequence, SerializeError> {
        let ids = vocab.special_ids();
        let space = space_id(vocab);
        let history = truncate_history(&self.turns, self.tail_len(), max_len, space)?;

        let mut tokens = Vec::with_capacity(history.len() + self.tail_len());
        let mut spans = Vec::with_capacity(tokens.capacity());
        let mut push = |toks: &[u32], role: SpanRole| {
            tokens.extend_from_slice(toks);
            spans.extend(std::iter::repeat_n(role, toks.len()));
        };
        push(&history, SpanRole::History);
        push(&[space, ids.belief_prefix], SpanRole::Marker);
        push(&self.belief, SpanRole::Belief);
        push(&[ids.eob, space, ids.db_prefix], SpanRole::Marker);
        push(&self.db, SpanRole::Db);
        push(&[ids.eokb], SpanRole::Marker);
        push(&self.response, SpanRole::Response);
        push(&[ids.eos], SpanRole::Marker);

        Ok(TrainingSequence {
            tokens,
            spans,
            contrast_label: None,
            negative_type: None,
            parts: self.clone(),
            max_len,
        })
    }
}

/// Serialize one turn into a training sequence of at most `max_len` tokens.
pub fn assemble(
    history: &[(Role, &str)],
    belief: &BeliefState,
    db: &DbState,
    response: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TrainingSequence, SerializeError> {
    SequenceParts::new(history, belief, db, response, vocab)?.assemble(vocab, max_len)
}

/// Prompt for belief generation: history followed by the belief prefix,
/// truncated so that `reserve` further tokens still fit.
pub fn belief_prompt(
    history: &[(Role, &str)],
    vocab: &Vocab,
    max_len: usize,
    reserve: usize,
) -> Result<Vec<u32>, SerializeError> {
    check_history(history)?;
    let turns: Vec<Vec<u32>> = history
        .iter()
        .map(|(r, t)| encode_turn(*r, t, vocab))
        .collect();
    let space = space_id(vocab);
    let mut out = truncate_history(&turns, 2 + reserve, max_len, space)?;
    out.extend([space, vocab.special_ids().belief_prefix]);
    Ok(out)
}

/// Prompt for response generation: history, belief and DB items, up to `<EOKB>`.
pub fn response_prompt(
    history: &[(Role, &str)],
    belief: &BeliefState,
    db: &DbState,
    vocab: &Vocab,
    max_len: usize,
    reserve: usize,
) -> Result<Vec<u32>, SerializeError> {
    let parts = SequenceParts::new(history, belief, db, "", vocab)?;
    let ids = vocab.special_ids();
    let space = space_id(vocab);
    let tail = 2 + parts.belief.len() + 1 + 2 + parts.db.len() + 1 + reserve;
    let mut out = truncate_history(&parts.turns, tail, max_len, space)?;
    out.extend([space, ids.belief_prefix]);
    out.extend(&parts.belief);
    out.extend([ids.eob, space, ids.db_prefix]);
    out.extend(&parts.db);
    out.push(ids.eokb);
    Ok(out)
}

/// Untokenized inputs of one system turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnExample {
    pub history: Vec<(Role, String)>,
    pub belief: BeliefState,
    pub db: DbState,
    pub response: String,
}

impl TurnExample {
    pub fn history_refs(&self) -> Vec<(Role, &str)> {
        self.history.iter().map(|(r, t)| (*r, t.as_str())).collect()
    }

    pub fn assemble(&self, vocab: &Vocab, max_len: usize) -> Result<TrainingSequence, SerializeError> {
        assemble(&self.history_refs(), &self.belief, &self.db, &self.response, vocab, max_len)
    }

    /// The full plain-text layout, as a tokenizer would see it.
    pub fn to_text(&self, specials: &SpecialTokens) -> String {
        let mut out = String::new();
        for (i, (role, text)) in self.history.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(match role {
                Role::User => &specials.user_prefix,
                Role::System => &specials.system_prefix,
            });
            let text = normalize_ws(text);
            if !text.is_empty() {
                out.push(' ');
                out.push_str(&text);
            }
        }
        let item = |s: &str| {
            let s = normalize_ws(s);
            if s.is_empty() { " ".to_string() } else { format!(" {s} ") }
        };
        out.push(' ');
        out.push_str(&specials.belief_prefix);
        out.push_str(&item(&render_belief(&self.belief)));
        out.push_str(&specials.eob);
        out.push(' ');
        out.push_str(&specials.db_prefix);
        out.push_str(&item(&self.db.text));
        out.push_str(&specials.eokb);
        out.push_str(&item(&self.response));
        out.push_str(&specials.eos);
        out
    }
}

/// Distinct belief and response items available as replacements.
#[derive(Debug, Clone, Default)]
pub struct ContrastPool {
    pub beliefs: Vec<Vec<u32>>,
    pub responses: Vec<Vec<u32>>,
}

impl ContrastPool {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TrainingSequence>) -> Self {
        let mut beliefs = BTreeSet::new();
        let mut responses = BTreeSet::new();
        for s in seqs {
            beliefs.insert(s.parts.belief.clone());
            responses.insert(s.parts.response.clone());
        }
        ContrastPool {
            beliefs: beliefs.into_iter().collect(),
            responses: responses.into_iter().collect(),
        }
    }
}

fn sample_other<'a, R: Rng>(items: &'a [Vec<u32>], original: &[u32], rng: &mut R) -> &'a [u32] {
    loop {
        let pick = &items[rng.gen_range(0..items.len())];
        if pick.as_slice() != original {
            return pick;
        }
    }
}

/// With probability `neg_prob` turn `x` into a negative of a uniformly chosen
/// type (label false); otherwise return it unchanged with label true. The DB
/// item always stays the one computed from the original belief.
pub fn make_contrastive<R: Rng>(
    x: &TrainingSequence,
    pool: &ContrastPool,
    neg_prob: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(TrainingSequence, bool), SerializeError> {
    if pool.beliefs.len() < 2 || pool.responses.len() < 2 {
        return Err(SerializeError::PoolTooSmall {
            beliefs: pool.beliefs.len(),
            responses: pool.responses.len(),
        });
    }
    if rng.gen::<f64>() >= neg_prob {
        let mut out = x.clone();
        out.contrast_label = Some(true);
        out.negative_type = None;
        return Ok((out, true));
    }
    let kind = match rng.gen_range(0..3) {
        0 => NegativeType::Belief,
        1 => NegativeType::Response,
        _ => NegativeType::BeliefAndResponse,
    };
    let mut parts = x.parts.clone();
    if matches!(kind, NegativeType::Belief | NegativeType::BeliefAndResponse) {
        parts.belief = sample_other(&pool.beliefs, &x.parts.belief, rng).to_vec();
    }
    if matches!(kind, NegativeType::Response | NegativeType::BeliefAndResponse) {
        parts.response = sample_other(&pool.responses, &x.parts.response, rng).to_vec();
    }
    let mut out = parts.assemble(vocab, x.max_len)?;
    out.contrast_label = Some(false);
    out.negative_type = Some(kind);
    Ok((out, false))
}
